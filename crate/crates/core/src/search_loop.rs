//! The alternating search: each step samples an architecture from the policy,
//! scores it, updates the controller and then (with a supernet) the shared weights.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{candidate_units, search_step_units};
use crate::bench_oracle::SyntheticBenchmark;
use crate::config::{QualitySource, SearchConfig};
use crate::controller::{ControllerState, Policy};
use crate::error::{Error, Result};
use crate::latency::LatencyModel;
use crate::reward::RewardConfig;
use crate::scalar::Scalar;
use crate::space::{Architecture, SearchSpace};
use crate::supernet::{train_fixed, Dataset, PassOptions, SharingMode, SupernetConfig, SupernetState};

pub const TELEMETRY_DECAY: f64 = 0.9;

const POLICY_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;
const WARMUP_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub quality: f64,
    pub latency_ms: f64,
    pub reward: f64,
    pub rl_lr: f64,
}

/// Snapshot taken every `telemetry_every` steps and after the final step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryPoint {
    /// Number of completed steps.
    pub step: u64,
    /// Mean sampled latency since the previous point.
    pub mean_latency_ms: f64,
    pub latency_ema: f64,
    pub argmax_latency_ms: f64,
    pub mean_reward: f64,
    pub entropy: f64,
    pub rl_lr: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchCost {
    pub steps: u64,
    /// Forward-pass equivalents in examples: a backward pass counts as two forwards.
    pub forward_units: f64,
    /// `forward_units` divided by the cost of training and validating one standalone candidate.
    pub candidate_equivalents: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult<F> {
    pub seed: u64,
    pub architecture: Architecture,
    pub latency_ms: f64,
    /// Oracle quality, or standalone-trained validation accuracy with a supernet.
    pub quality: f64,
    /// One-shot accuracy on the full validation set (supernet mode only).
    pub supernet_quality: Option<f64>,
    pub entropy: f64,
    pub policy: Policy<F>,
    pub steps: Vec<StepRecord>,
    pub telemetry: Vec<TelemetryPoint>,
    pub cost: SearchCost,
}

impl<F: Scalar> SearchResult<F> {
    /// End-of-search EMA of sampled latency.
    pub fn final_latency_ema(&self) -> f64 {
        self.telemetry.last().map_or(f64::NAN, |p| p.latency_ema)
    }

    /// `|avg_T − argmax_T|` at the last recording point.
    pub fn final_latency_gap(&self) -> f64 {
        self.telemetry
            .last()
            .map_or(f64::NAN, |p| (p.latency_ema - p.argmax_latency_ms).abs())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub average: Vec<f64>,
    pub argmax: Vec<f64>,
}

/// EMA over `measurements`, initialized to the first one.
pub fn ema_series(measurements: &[f64], decay: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(measurements.len());
    let mut acc: Option<f64> = None;
    for &m in measurements {
        let next = match acc {
            None => m,
            Some(a) => a + (1.0 - decay) * (m - a),
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

/// Recomputes the sampled-latency EMA and the argmax latency series from telemetry points.
pub fn track_latency_stats(telemetry: &[TelemetryPoint]) -> Result<LatencyStats> {
    if telemetry.is_empty() {
        return Err(Error::Config("telemetry is empty".into()));
    }
    let means: Vec<f64> = telemetry.iter().map(|p| p.mean_latency_ms).collect();
    Ok(LatencyStats {
        average: ema_series(&means, TELEMETRY_DECAY),
        argmax: telemetry.iter().map(|p| p.argmax_latency_ms).collect(),
    })
}

/// Everything a search reads besides its own mutable state.
pub struct SearchContext<F> {
    pub config: SearchConfig,
    pub space: SearchSpace,
    pub model: LatencyModel,
    pub evaluator: Evaluator<F>,
}

pub enum Evaluator<F> {
    Oracle(SyntheticBenchmark<F>),
    Supernet {
        net: SupernetConfig,
        /// Collapsed-sharing layout used for every standalone evaluation, so a
        /// fixed architecture trains the same way whatever the search's sharing mode.
        standalone: SupernetConfig,
        data: Dataset<F>,
    },
}

impl<F: Scalar> SearchContext<F> {
    pub fn new(config: &SearchConfig) -> Result<Self> {
        config.validate()?;
        let space = config.build_space()?;
        let model = config.latency_model(&space)?;
        let evaluator = match config.quality {
            QualitySource::Oracle => Evaluator::Oracle(SyntheticBenchmark::generate(&space, &config.bench_config(), config.target_ms, config.bench_seed)?),
            QualitySource::Supernet => {
                let data = Dataset::generate(&config.dataset_config(), config.data_seed)?;
                let net = SupernetConfig::from_space(&space, config.data_features, config.data_classes, config.sharing)?;
                let standalone = SupernetConfig::from_space(&space, config.data_features, config.data_classes, SharingMode::Collapsed)?;
                Evaluator::Supernet { net, standalone, data }
            }
        };
        Ok(SearchContext {
            config: config.clone(),
            space,
            model,
            evaluator,
        })
    }

    /// Final quality of a fixed architecture: oracle value, or validation accuracy
    /// of a freshly trained standalone network (identical seeds for every candidate).
    pub fn evaluate(&self, arch: &Architecture) -> Result<f64> {
        match &self.evaluator {
            Evaluator::Oracle(bench) => Ok(bench.quality(&self.space, &self.model, arch).to_f64_lossy()),
            Evaluator::Supernet { standalone, data, .. } => {
                let hyper = self.config.standalone_hyper();
                let (_, acc) = train_fixed(standalone, data, arch, &hyper, self.config.standalone_seed, self.config.standalone_seed ^ 0x5eed)?;
                Ok(acc)
            }
        }
    }

    pub fn run(&self, seed: u64) -> Result<SearchResult<F>> {
        let started = Instant::now();
        let cfg = &self.config;
        let schedule = cfg.schedule()?;
        let warmup = cfg.warmup_schedule()?;
        let reward_cfg = RewardConfig::new(cfg.reward, F::lit(cfg.beta()), F::lit(cfg.target_ms))?;
        let hyper = cfg.search_hyper();

        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s);
            rng
        };
        let mut policy_rng = stream(POLICY_STREAM);
        let mut batch_rng = stream(BATCH_STREAM);
        let mut warmup_rng = stream(WARMUP_STREAM);

        let mut controller = ControllerState::new(Policy::<F>::uniform(&self.space));
        let mut supernet = match &self.evaluator {
            Evaluator::Supernet { net, .. } => Some(SupernetState::<F>::new(net.clone(), seed)?),
            Evaluator::Oracle(_) => None,
        };

        let mut steps = Vec::with_capacity(cfg.steps as usize);
        let mut telemetry = Vec::new();
        let mut interval_latency = 0.0;
        let mut interval_reward = 0.0;
        let mut interval_len = 0u64;
        let mut ema: Option<f64> = None;

        for step in 0..cfg.steps {
            let rl_lr = schedule.learning_rate(step);
            let (arch, _) = controller.policy.sample(&mut policy_rng);
            let latency = self.model.latency(&arch);
            let quality = match (&self.evaluator, &supernet) {
                (Evaluator::Oracle(bench), _) => bench.quality(&self.space, &self.model, &arch).to_f64_lossy(),
                (Evaluator::Supernet { data, .. }, Some(state)) => {
                    let (x, y) = data.valid_batch(&mut batch_rng, cfg.valid_batch);
                    state.estimate_quality(&arch, &x.view(), &y)?
                }
                (Evaluator::Supernet { .. }, None) => unreachable!("supernet state exists in supernet mode"),
            };
            let reward = reward_cfg.reward(F::lit(quality), F::lit(latency))?;
            controller.reinforce_step(&arch, reward, F::lit(rl_lr));
            if !controller.policy.is_finite() {
                return Err(Error::NonFinitePolicy(step));
            }

            if let (Some(state), Evaluator::Supernet { data, .. }) = (supernet.as_mut(), &self.evaluator) {
                let (x, y) = data.train_batch(&mut batch_rng, cfg.train_batch);
                let opts = PassOptions {
                    p_op: warmup.op_prob(step, cfg.steps),
                    p_filter: warmup.filter_prob(step, cfg.steps),
                    seed: warmup_rng.random(),
                    remat: cfg.remat,
                };
                state.train_step(&arch, &x.view(), &y, &hyper, &opts)?;
            }

            let reward = reward.to_f64_lossy();
            steps.push(StepRecord {
                step,
                quality,
                latency_ms: latency,
                reward,
                rl_lr,
            });
            interval_latency += latency;
            interval_reward += reward;
            interval_len += 1;

            let done = step + 1;
            if done % cfg.telemetry_every == 0 || done == cfg.steps {
                let mean = interval_latency / interval_len as f64;
                let next = match ema {
                    None => mean,
                    Some(a) => a + (1.0 - TELEMETRY_DECAY) * (mean - a),
                };
                ema = Some(next);
                telemetry.push(TelemetryPoint {
                    step: done,
                    mean_latency_ms: mean,
                    latency_ema: next,
                    argmax_latency_ms: self.model.latency(&controller.policy.argmax_architecture()),
                    mean_reward: interval_reward / interval_len as f64,
                    entropy: controller.policy.entropy().to_f64_lossy(),
                    rl_lr,
                });
                interval_latency = 0.0;
                interval_reward = 0.0;
                interval_len = 0;
            }
        }

        let architecture = controller.policy.argmax_architecture();
        self.space.check(&architecture)?;
        let latency_ms = self.model.latency(&architecture);
        let (quality, supernet_quality) = match (&self.evaluator, &supernet) {
            (Evaluator::Supernet { data, .. }, Some(state)) => {
                let one_shot = state.estimate_quality(&architecture, &data.valid_x.view(), &data.valid_y)?;
                (self.evaluate(&architecture)?, Some(one_shot))
            }
            _ => (self.evaluate(&architecture)?, None),
        };
        let forward_units = cfg.steps as f64 * search_step_units(cfg);
        Ok(SearchResult {
            seed,
            entropy: controller.policy.entropy().to_f64_lossy(),
            architecture,
            latency_ms,
            quality,
            supernet_quality,
            policy: controller.policy,
            steps,
            telemetry,
            cost: SearchCost {
                steps: cfg.steps,
                forward_units,
                candidate_equivalents: forward_units / candidate_units(cfg),
                wall_time_s: started.elapsed().as_secs_f64(),
            },
        })
    }
}

pub fn run_search<F: Scalar>(config: &SearchConfig) -> Result<SearchResult<F>> {
    SearchContext::new(config)?.run(config.seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        // Deviations from the first value keep identical inputs exact.
        let origin = values[0];
        let shift = values.iter().map(|v| v - origin).sum::<f64>() / n as f64;
        let mean = origin + shift;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - origin - shift).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepeatSummary<F> {
    pub results: Vec<SearchResult<F>>,
    pub quality: MeanStd,
    pub latency: MeanStd,
}

/// Seeds `config.seed`, `config.seed + 1`, … for `repeats` independent searches.
pub fn repeat_seeds(config: &SearchConfig, repeats: usize) -> Vec<u64> {
    (0..repeats as u64).map(|i| config.seed.wrapping_add(i)).collect()
}

pub fn repeat_search<F: Scalar>(config: &SearchConfig, repeats: usize) -> Result<RepeatSummary<F>> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    repeat_search_with_seeds(config, &repeat_seeds(config, repeats))
}

/// Runs one search per seed in parallel; results keep the seed order.
pub fn repeat_search_with_seeds<F: Scalar>(config: &SearchConfig, seeds: &[u64]) -> Result<RepeatSummary<F>> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let ctx = SearchContext::<F>::new(config)?;
    let results = seeds.par_iter().map(|&s| ctx.run(s)).collect::<Result<Vec<_>>>()?;
    let q: Vec<f64> = results.iter().map(|r| r.quality).collect();
    let t: Vec<f64> = results.iter().map(|r| r.latency_ms).collect();
    Ok(RepeatSummary {
        quality: MeanStd::of(&q),
        latency: MeanStd::of(&t),
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::RewardKind;
    use crate::space::SpaceKind;

    fn oracle_cfg(steps: u64) -> SearchConfig {
        SearchConfig {
            steps,
            ..SearchConfig::default()
        }
    }

    fn toy_supernet_cfg(steps: u64) -> SearchConfig {
        SearchConfig {
            space: SpaceKind::Toy,
            quality: QualitySource::Supernet,
            steps,
            target_ms: 10.0,
            latency_mean_ms: 10.0,
            data_train: 512,
            data_valid: 128,
            standalone_steps: 20,
            ..SearchConfig::default()
        }
    }

    #[test]
    fn ema_examples() {
        let e = ema_series(&[0.0, 10.0], 0.9);
        assert_eq!(e[0], 0.0);
        assert!((e[1] - 1.0).abs() < 1e-12);
        assert!(ema_series(&[3.5; 12], 0.9).iter().all(|&v| v == 3.5));
        assert!(ema_series(&[], 0.9).is_empty());
    }

    #[test]
    fn track_stats_matches_inline_ema() {
        let r = run_search::<f64>(&oracle_cfg(450)).unwrap();
        assert_eq!(r.telemetry.len(), 5);
        assert_eq!(r.telemetry.last().unwrap().step, 450);
        let stats = track_latency_stats(&r.telemetry).unwrap();
        for (p, e) in r.telemetry.iter().zip(&stats.average) {
            assert_eq!(p.latency_ema, *e);
        }
        assert!(track_latency_stats(&[]).is_err());
        let first: f64 = r.steps[..100].iter().map(|s| s.latency_ms).sum::<f64>() / 100.0;
        assert!((r.telemetry[0].mean_latency_ms - first).abs() < 1e-9);
    }

    #[test]
    fn controller_lr_is_zero_during_first_quarter() {
        let r = run_search::<f64>(&oracle_cfg(400)).unwrap();
        assert!(r.steps[..100].iter().all(|s| s.rl_lr == 0.0));
        assert!(r.steps[100..].iter().all(|s| s.rl_lr > 0.0));
    }

    #[test]
    fn frozen_phase_keeps_logits_bitwise() {
        let cfg = SearchConfig { rl_frozen_fraction: 0.5, ..oracle_cfg(2) };
        let ctx = SearchContext::<f64>::new(&cfg).unwrap();
        let r = ctx.run(0).unwrap();
        // Step 0 is frozen, step 1 updates: exactly one update away from uniform.
        assert_eq!(r.steps[0].rl_lr, 0.0);
        let one = SearchContext::<f64>::new(&SearchConfig { steps: 1, ..cfg.clone() }).unwrap();
        let r1 = one.run(0).unwrap();
        assert_eq!(r1.steps[0].rl_lr, 0.0);
        assert_eq!(r1.policy.logits(), Policy::<f64>::uniform(&one.space).logits());
        assert_ne!(r.policy.logits(), r1.policy.logits());
    }

    #[test]
    fn final_architecture_is_policy_argmax_and_valid() {
        let r = run_search::<f64>(&oracle_cfg(300)).unwrap();
        let ctx = SearchContext::<f64>::new(&oracle_cfg(300)).unwrap();
        assert_eq!(r.architecture, r.policy.argmax_architecture());
        assert!(ctx.space.validate(&r.architecture));
        assert_eq!(r.latency_ms, ctx.model.latency(&r.architecture));
        assert_eq!(r.steps.len(), 300);
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = oracle_cfg(300);
        let mut a = run_search::<f64>(&cfg).unwrap();
        let mut b = run_search::<f64>(&cfg).unwrap();
        a.cost.wall_time_s = 0.0;
        b.cost.wall_time_s = 0.0;
        assert_eq!(a, b);
        let c = run_search::<f64>(&SearchConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.steps, c.steps);
    }

    #[test]
    fn supernet_mode_runs_and_is_deterministic() {
        let cfg = toy_supernet_cfg(40);
        let mut a = run_search::<f64>(&cfg).unwrap();
        let mut b = run_search::<f64>(&cfg).unwrap();
        a.cost.wall_time_s = 0.0;
        b.cost.wall_time_s = 0.0;
        assert_eq!(a, b);
        assert!(a.supernet_quality.is_some());
        assert!((0.0..=1.0).contains(&a.quality));
        assert!(a.steps.iter().all(|s| (0.0..=1.0).contains(&s.quality)));
    }

    #[test]
    fn standalone_evaluation_ignores_sharing_mode() {
        let cfg = SearchConfig { standalone_steps: 10, ..toy_supernet_cfg(10) };
        let per_path = SearchConfig { sharing: SharingMode::PerPath, ..cfg.clone() };
        let a = SearchContext::<f64>::new(&cfg).unwrap();
        let b = SearchContext::<f64>::new(&per_path).unwrap();
        for seed in 0..3 {
            let arch = a.space.sample_uniform(seed);
            assert_eq!(a.evaluate(&arch).unwrap(), b.evaluate(&arch).unwrap());
        }
    }

    #[test]
    fn repeat_summary_statistics() {
        let cfg = oracle_cfg(200);
        let one = repeat_search::<f64>(&cfg, 1).unwrap();
        assert_eq!(one.quality.mean, one.results[0].quality);
        assert_eq!(one.quality.std, 0.0);
        assert_eq!(one.latency.std, 0.0);
        let same = repeat_search_with_seeds::<f64>(&cfg, &[4, 4, 4]).unwrap();
        assert_eq!(same.quality.std, 0.0);
        assert_eq!(same.latency.std, 0.0);
        assert!(repeat_search::<f64>(&cfg, 0).is_err());
        let many = repeat_search::<f64>(&cfg, 3).unwrap();
        assert_eq!(many.results.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn mean_std_uses_sample_convention() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cost_scales_with_steps() {
        let cfg = oracle_cfg(100);
        let r = run_search::<f64>(&cfg).unwrap();
        let step = (3 * cfg.train_batch + cfg.valid_batch) as f64;
        let cand = (3 * cfg.standalone_steps() as usize * cfg.train_batch + cfg.data_valid) as f64;
        assert_eq!(r.cost.forward_units, 100.0 * step);
        assert!((r.cost.candidate_equivalents - 100.0 * step / cand).abs() < 1e-12);
    }

    #[test]
    fn hard_reward_runs_in_f32() {
        let cfg = SearchConfig {
            reward: RewardKind::HardExponential,
            beta: Some(-10.0),
            ..oracle_cfg(200)
        };
        let r = run_search::<f32>(&cfg).unwrap();
        assert!(r.latency_ms.is_finite());
    }
}
