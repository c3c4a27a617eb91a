//! JSON-lines run logs and the mean ± std report over them.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::RandomSearchResult;
use crate::config::SearchConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::search_loop::{MeanStd, SearchResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Search,
    RandomSearch,
}

impl RunKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RunKind::Search => "search",
            RunKind::RandomSearch => "random_search",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub search: u64,
    pub latency: u64,
    pub bench: u64,
    pub data: u64,
    pub standalone: u64,
    /// Rejection-sampling seeds of random-search candidates.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<u64>,
}

impl RunSeeds {
    fn of(cfg: &SearchConfig, search: u64, candidates: Vec<u64>) -> Self {
        RunSeeds {
            search,
            latency: cfg.latency_seed,
            bench: cfg.bench_seed,
            data: cfg.data_seed,
            standalone: cfg.standalone_seed,
            candidates,
        }
    }
}

/// One line of a run log. `config` is the fully resolved configuration, so a
/// record alone is enough to replay the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: RunKind,
    /// Hash of the config without its seed; repeats share it.
    pub experiment: String,
    pub seeds: RunSeeds,
    pub config: SearchConfig,
    pub architecture: Vec<usize>,
    pub architecture_text: String,
    pub latency_ms: f64,
    pub quality: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supernet_quality: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ema: Option<f64>,
    pub candidates: usize,
    pub candidate_equivalents: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub telemetry_path: Option<String>,
}

impl RunRecord {
    /// Wall time is only kept when `timed`, so untimed logs are reproducible byte for byte.
    pub fn from_search<F: Scalar>(cfg: &SearchConfig, r: &SearchResult<F>, telemetry_path: Option<String>, timed: bool) -> Self {
        let mut config = cfg.clone();
        config.seed = r.seed;
        RunRecord {
            kind: RunKind::Search,
            experiment: cfg.experiment_hash(),
            seeds: RunSeeds::of(cfg, r.seed, Vec::new()),
            config,
            architecture: r.architecture.choices.clone(),
            architecture_text: r.architecture.to_string(),
            latency_ms: r.latency_ms,
            quality: r.quality,
            supernet_quality: r.supernet_quality,
            entropy: Some(r.entropy),
            latency_ema: Some(r.final_latency_ema()),
            candidates: 0,
            candidate_equivalents: r.cost.candidate_equivalents,
            wall_time_s: timed.then_some(r.cost.wall_time_s),
            telemetry_path,
        }
    }

    pub fn from_random(cfg: &SearchConfig, r: &RandomSearchResult, seeds: &[u64], timed: bool) -> Self {
        RunRecord {
            kind: RunKind::RandomSearch,
            experiment: cfg.experiment_hash(),
            seeds: RunSeeds::of(cfg, cfg.seed, seeds.to_vec()),
            config: cfg.clone(),
            architecture: r.best.architecture.choices.clone(),
            architecture_text: r.best.architecture.to_string(),
            latency_ms: r.best.latency_ms,
            quality: r.best.quality,
            supernet_quality: None,
            entropy: None,
            latency_ema: None,
            candidates: r.candidates.len(),
            candidate_equivalents: r.candidate_equivalents(),
            wall_time_s: timed.then_some(r.wall_time_s),
            telemetry_path: None,
        }
    }

    pub fn to_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn append_jsonl(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        writeln!(f, "{}", r.to_line()?)?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Per-step telemetry as CSV.
pub fn telemetry_csv<F: Scalar>(r: &SearchResult<F>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &r.telemetry {
        w.serialize(p)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Config(e.to_string()))?).map_err(|e| Error::Config(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub kind: RunKind,
    pub experiment: String,
    pub label: String,
    pub runs: usize,
    pub quality: MeanStd,
    pub latency: MeanStd,
}

/// Groups records by kind and experiment hash and reports mean ± std of final
/// quality and latency for each group.
pub fn summarize(records: &[RunRecord]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(RunKind, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.kind, r.experiment.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((kind, experiment), rs)| {
            let c = &rs[0].config;
            let label = format!(
                "{} {} beta={} target={} quality={} warmup={} sharing={:?}",
                c.space.as_str(),
                c.reward.as_str(),
                c.beta(),
                c.target_ms,
                c.quality.as_str(),
                c.warmup,
                c.sharing
            );
            let q: Vec<f64> = rs.iter().map(|r| r.quality).collect();
            let t: Vec<f64> = rs.iter().map(|r| r.latency_ms).collect();
            ReportRow {
                kind,
                experiment,
                label,
                runs: rs.len(),
                quality: MeanStd::of(&q),
                latency: MeanStd::of(&t),
            }
        })
        .collect()
}

pub fn report_table(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&format!(
            "{:<13} {}  n={}  quality {:.4} ± {:.4}  latency {:.2} ± {:.2} ms  [{}]\n",
            r.kind.as_str(),
            &r.experiment[..r.experiment.len().min(12)],
            r.runs,
            r.quality.mean,
            r.quality.std,
            r.latency.mean,
            r.latency.std,
            r.label
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_loop::repeat_search;

    #[test]
    fn records_round_trip_through_jsonl() {
        let cfg = SearchConfig { steps: 100, ..SearchConfig::default() };
        let summary = repeat_search::<f64>(&cfg, 2).unwrap();
        let records: Vec<RunRecord> = summary.results.iter().map(|r| RunRecord::from_search(&cfg, r, None, false)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.jsonl");
        append_jsonl(&path, &records[..1]).unwrap();
        append_jsonl(&path, &records[1..]).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, records);
        assert_eq!(back[1].config.seed, 1);
        assert_eq!(back[1].seeds.search, 1);
        assert!(back[0].wall_time_s.is_none());
    }

    #[test]
    fn summary_groups_repeats() {
        let cfg = SearchConfig { steps: 100, ..SearchConfig::default() };
        let other = SearchConfig { steps: 120, ..cfg.clone() };
        let a = repeat_search::<f64>(&cfg, 3).unwrap();
        let b = repeat_search::<f64>(&other, 2).unwrap();
        let mut records: Vec<RunRecord> = a.results.iter().map(|r| RunRecord::from_search(&cfg, r, None, false)).collect();
        records.extend(b.results.iter().map(|r| RunRecord::from_search(&other, r, None, false)));
        let rows = summarize(&records);
        assert_eq!(rows.len(), 2);
        let row = rows.iter().find(|r| r.runs == 3).unwrap();
        assert!((row.quality.mean - a.quality.mean).abs() < 1e-12);
        assert!((row.latency.std - a.latency.std).abs() < 1e-12);
        assert!(report_table(&rows).lines().count() == 2);
    }

    #[test]
    fn telemetry_csv_has_one_row_per_point() {
        let cfg = SearchConfig { steps: 300, ..SearchConfig::default() };
        let r = crate::search_loop::run_search::<f64>(&cfg).unwrap();
        let text = telemetry_csv(&r).unwrap();
        assert_eq!(text.lines().count(), 1 + r.telemetry.len());
        assert!(text.starts_with("step,mean_latency_ms,latency_ema"));
    }
}
