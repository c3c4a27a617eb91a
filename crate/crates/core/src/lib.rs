//! Latency-constrained architecture search: categorical search spaces,
//! a REINFORCE controller, lookup-table latency and a toy weight-sharing
//! supernetwork.

pub mod baselines;
pub mod bench_oracle;
pub mod config;
pub mod controller;
pub mod error;
pub mod latency;
pub mod reward;
pub mod runlog;
pub mod scalar;
pub mod search_loop;
pub mod space;
pub mod supernet;

pub use baselines::{cost_report, random_search, RandomSearchResult};
pub use bench_oracle::{BenchmarkConfig, SyntheticBenchmark};
pub use config::{QualitySource, SearchConfig};
pub use controller::{ControllerState, LrMode, Policy, RlSchedule, DESK_BASE_LR, REFERENCE_BASE_LR};
pub use error::{Error, Result};
pub use latency::{LatencyModel, LatencyTable, LatencyTarget, RejectionSampler};
pub use reward::{reward, RewardConfig, RewardKind};
pub use runlog::{RunKind, RunRecord};
pub use scalar::Scalar;
pub use search_loop::{repeat_search, run_search, track_latency_stats, SearchContext, SearchResult};
pub use space::{build_space, build_space_with, filter_choices, LayoutConfig, SpaceKind};
pub use space::{Architecture, Cardinality, Decision, DecisionKind, SearchSpace};

pub type Policy64 = Policy<f64>;
pub type Controller64 = ControllerState<f64>;
pub type RewardConfig64 = RewardConfig<f64>;
pub type SearchResult64 = SearchResult<f64>;
pub type SearchContext64 = SearchContext<f64>;
pub type Benchmark64 = SyntheticBenchmark<f64>;
