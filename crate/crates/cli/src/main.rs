use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use latnas::baselines::{candidate_seeds, cost_report, random_search};
use latnas::bench_oracle::{frontier_to_csv, pareto_frontier, SyntheticBenchmark};
use latnas::reward::contour_grid;
use latnas::runlog::{append_jsonl, read_jsonl, report_table, summarize, telemetry_csv, RunRecord};
use latnas::search_loop::{repeat_search, repeat_seeds, SearchContext};
use latnas::supernet::SharingMode;
use latnas::{LrMode, Policy, QualitySource, RewardConfig, RewardKind, SearchConfig, SpaceKind};

#[derive(Parser)]
#[command(name = "latnas", version, about = "Latency-targeted architecture search on toy and synthetic benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the policy-gradient search and append one record per repeat to a run log.
    Search(SearchArgs),
    /// Best of N latency-feasible random architectures.
    RandomSearch(RandomArgs),
    /// Exact size and log10 size of a search space.
    Cardinality(CardinalityArgs),
    /// Reward values over a quality × latency grid, as CSV.
    RewardContour(ContourArgs),
    /// Pareto frontier of the synthetic benchmark over an enumerable space, as CSV.
    Frontier(FrontierArgs),
    /// Re-derive the most likely architecture from a saved policy.
    Replay(ReplayArgs),
    /// Mean ± std tables and budget accounting over run logs.
    Report(ReportArgs),
}

/// Experiment settings. Precedence: defaults, then `--config`, then `TUNAS_*`
/// environment variables, then these flags.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    space: Option<SpaceKind>,
    /// Latency lookup table (JSON or CSV); synthetic when omitted.
    #[arg(long)]
    latency_table: Option<PathBuf>,
    #[arg(long)]
    target_ms: Option<f64>,
    #[arg(long)]
    tolerance_ms: Option<f64>,
    /// soft, hard or abs.
    #[arg(long)]
    reward: Option<RewardKind>,
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    /// constant or exponential.
    #[arg(long)]
    rl_lr_mode: Option<LrMode>,
    /// none, ops, filters or both.
    #[arg(long)]
    warmup: Option<String>,
    /// collapsed or per_path.
    #[arg(long)]
    sharing: Option<SharingMode>,
    /// supernet or oracle.
    #[arg(long)]
    quality: Option<QualitySource>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<SearchConfig> {
        let mut cfg = SearchConfig::load(self.config.as_deref()).with_context(|| match &self.config {
            Some(p) => format!("loading config {}", p.display()),
            None => "resolving default config".into(),
        })?;
        if let Some(v) = self.space {
            cfg.space = v;
        }
        if let Some(v) = &self.latency_table {
            cfg.latency_table = Some(v.clone());
        }
        if let Some(v) = self.target_ms {
            cfg.target_ms = v;
        }
        if let Some(v) = self.tolerance_ms {
            cfg.tolerance_ms = v;
        }
        if let Some(v) = self.reward {
            cfg.reward = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = Some(v);
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.rl_lr_mode {
            cfg.rl_lr_mode = v;
        }
        if let Some(v) = &self.warmup {
            cfg.warmup = v.clone();
        }
        if let Some(v) = self.sharing {
            cfg.sharing = v;
        }
        if let Some(v) = self.quality {
            cfg.quality = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.repeats {
            cfg.repeats = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Run log to append to.
    #[arg(long, default_value = "runs/search.jsonl")]
    out: PathBuf,
    /// Directory for per-repeat telemetry CSVs and final policies.
    #[arg(long)]
    artifacts: Option<PathBuf>,
    /// Record wall time in the log (makes logs differ between runs).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct RandomArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Candidates per repeat.
    #[arg(long)]
    candidates: Option<usize>,
    /// Worker threads for candidate evaluation; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    parallel: usize,
    #[arg(long, default_value = "runs/random.jsonl")]
    out: PathBuf,
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct CardinalityArgs {
    #[arg(long, default_value = "mobilenetv3_like")]
    space: SpaceKind,
    /// TOML layout overriding the default stage structure.
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Also list the number of combinations per searchable layer.
    #[arg(long)]
    per_layer: bool,
}

#[derive(Args)]
struct ContourArgs {
    #[arg(long, default_value = "abs")]
    reward: RewardKind,
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<f64>,
    #[arg(long, default_value_t = 84.0)]
    target_ms: f64,
    #[arg(long, default_value_t = 0.70)]
    q_min: f64,
    #[arg(long, default_value_t = 0.80)]
    q_max: f64,
    #[arg(long, default_value_t = 60.0)]
    t_min: f64,
    #[arg(long, default_value_t = 110.0)]
    t_max: f64,
    #[arg(long, default_value_t = 51)]
    resolution: usize,
    #[arg(long, default_value = "reward_contour.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct FrontierArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value = "frontier.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Policy JSON written by `search --artifacts`.
    #[arg(long)]
    policy: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run logs to aggregate.
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Search(a) => search(a),
        Command::RandomSearch(a) => random(a),
        Command::Cardinality(a) => cardinality(a),
        Command::RewardContour(a) => contour(a),
        Command::Frontier(a) => frontier(a),
        Command::Replay(a) => replay(a),
        Command::Report(a) => report(a),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn search(a: SearchArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let summary = repeat_search::<f64>(&cfg, cfg.repeats)?;
    if let Some(dir) = &a.artifacts {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut records = Vec::with_capacity(summary.results.len());
    for r in &summary.results {
        let telemetry_path = match &a.artifacts {
            Some(dir) => {
                let stem = format!("{}_seed{}", &cfg.experiment_hash()[..12], r.seed);
                let tpath = dir.join(format!("{stem}_telemetry.csv"));
                fs::write(&tpath, telemetry_csv(r)?)?;
                fs::write(dir.join(format!("{stem}_policy.json")), r.policy.to_json()?)?;
                Some(tpath.display().to_string())
            }
            None => None,
        };
        records.push(RunRecord::from_search(&cfg, r, telemetry_path, a.timing));
        println!(
            "seed {:>4}  T {:>8.3} ms  Q {:.4}  avg T {:>8.3}  entropy {:.3}  equivalents {:.2}  {}",
            r.seed,
            r.latency_ms,
            r.quality,
            r.final_latency_ema(),
            r.entropy,
            r.cost.candidate_equivalents,
            r.architecture
        );
    }
    ensure_parent(&a.out)?;
    append_jsonl(&a.out, &records)?;
    println!(
        "{} repeats: Q {:.4} ± {:.4}  T {:.3} ± {:.3} ms (target {} ms)  -> {}",
        summary.results.len(),
        summary.quality.mean,
        summary.quality.std,
        summary.latency.mean,
        summary.latency.std,
        cfg.target_ms,
        a.out.display()
    );
    Ok(())
}

fn random(a: RandomArgs) -> Result<()> {
    let mut cfg = a.cfg.resolve()?;
    if let Some(n) = a.candidates {
        cfg.candidates = n;
    }
    cfg.validate()?;
    let ctx = SearchContext::<f64>::new(&cfg)?;
    let mut records = Vec::new();
    for seed in repeat_seeds(&cfg, cfg.repeats) {
        let seeds = candidate_seeds(seed.wrapping_mul(1 << 20), cfg.candidates);
        let r = random_search(&ctx, &seeds, a.parallel)?;
        let run_cfg = SearchConfig { seed, ..cfg.clone() };
        records.push(RunRecord::from_random(&run_cfg, &r, &seeds, a.timing));
        println!(
            "seed {:>4}  best of {}: T {:>8.3} ms  Q {:.4}  ({} proposals)  {}",
            seed,
            r.candidates.len(),
            r.best.latency_ms,
            r.best.quality,
            r.attempts,
            r.best.architecture
        );
    }
    ensure_parent(&a.out)?;
    append_jsonl(&a.out, &records)?;
    println!("-> {}", a.out.display());
    Ok(())
}

fn cardinality(a: CardinalityArgs) -> Result<()> {
    let cfg = SearchConfig {
        space: a.space,
        layout: a.layout,
        ..SearchConfig::default()
    };
    let space = cfg.build_space()?;
    let c = space.cardinality();
    println!("space {}", a.space.as_str());
    println!("decisions {}", space.num_decisions());
    println!("architectures {}", c.exact);
    println!("log10 {:.4}", c.log10);
    if a.per_layer {
        for (i, b) in space.block_layout().iter().enumerate() {
            let n = space.layer_combinations(i);
            if n > 1 {
                println!("  {:<12} {}", b.name, n);
            }
        }
    }
    Ok(())
}

fn contour(a: ContourArgs) -> Result<()> {
    let beta = a.beta.unwrap_or_else(|| a.reward.default_beta());
    let cfg = RewardConfig::new(a.reward, beta, a.target_ms)?;
    let grid = contour_grid(&cfg, (a.q_min, a.q_max), (a.t_min, a.t_max), a.resolution)?;
    ensure_parent(&a.out)?;
    fs::write(&a.out, grid.to_csv())?;
    println!("{}x{} grid, reward {} beta {} target {} ms -> {}", a.resolution, a.resolution, a.reward.as_str(), beta, a.target_ms, a.out.display());
    Ok(())
}

fn frontier(a: FrontierArgs) -> Result<()> {
    let mut args = a.cfg.clone();
    args.space.get_or_insert(SpaceKind::Toy);
    let cfg = args.resolve()?;
    let space = cfg.build_space()?;
    let model = cfg.latency_model(&space)?;
    let bench = SyntheticBenchmark::<f64>::generate(&space, &cfg.bench_config(), cfg.target_ms, cfg.bench_seed)?;
    let points = pareto_frontier(&bench, &space, &model)?;
    ensure_parent(&a.out)?;
    fs::write(&a.out, frontier_to_csv(&points)?)?;
    println!("{} frontier points over {} architectures -> {}", points.len(), space.cardinality().exact, a.out.display());
    Ok(())
}

fn replay(a: ReplayArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let space = cfg.build_space()?;
    let text = fs::read_to_string(&a.policy).with_context(|| format!("reading {}", a.policy.display()))?;
    let policy = Policy::<f64>::from_json(&space, &text)?;
    let arch = policy.argmax_architecture();
    let model = cfg.latency_model(&space)?;
    println!("architecture {arch}");
    println!("latency_ms {:.4}", model.latency(&arch));
    println!("entropy {:.4}", policy.entropy());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut records = Vec::new();
    for p in &a.logs {
        records.extend(read_jsonl(p).with_context(|| format!("reading {}", p.display()))?);
    }
    if records.is_empty() {
        bail!("no run records in {} file(s)", a.logs.len());
    }
    let rows = summarize(&records);
    print!("{}", report_table(&rows));
    println!();
    print!("{}", cost_report(&records)?.to_table());
    if let Some(path) = &a.csv {
        let mut out = String::from("kind,experiment,runs,quality_mean,quality_std,latency_mean,latency_std,label\n");
        for r in &rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},\"{}\"\n",
                r.kind.as_str(),
                r.experiment,
                r.runs,
                r.quality.mean,
                r.quality.std,
                r.latency.mean,
                r.latency.std,
                r.label
            ));
        }
        ensure_parent(path)?;
        fs::write(path, out)?;
    }
    Ok(())
}
