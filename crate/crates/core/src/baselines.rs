//! Random search over latency-feasible architectures and budget accounting.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SearchConfig;
use crate::error::{Error, Result};
use crate::latency::RejectionSampler;
use crate::runlog::{RunKind, RunRecord};
use crate::scalar::Scalar;
use crate::search_loop::SearchContext;
use crate::space::Architecture;

/// Forward-pass units of one search step: a training batch forward and
/// backward (three forwards) plus one validation batch for the reward.
pub fn search_step_units(cfg: &SearchConfig) -> f64 {
    (3 * cfg.train_batch + cfg.valid_batch) as f64
}

/// Forward-pass units of training one standalone candidate and scoring it on
/// the full validation set.
pub fn candidate_units(cfg: &SearchConfig) -> f64 {
    (3 * cfg.standalone_steps() as usize * cfg.train_batch + cfg.data_valid) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub seed: u64,
    pub architecture: Architecture,
    pub latency_ms: f64,
    pub quality: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomSearchResult {
    pub best: Candidate,
    pub candidates: Vec<Candidate>,
    /// Proposals drawn across all candidates, including rejected ones.
    pub attempts: u64,
    pub wall_time_s: f64,
}

impl RandomSearchResult {
    pub fn candidate_equivalents(&self) -> f64 {
        self.candidates.len() as f64
    }
}

/// `n` consecutive candidate seeds starting at `base`.
pub fn candidate_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Draws one in-window architecture per seed, evaluates each and keeps the
/// best (the earliest on ties). `parallel` is the worker count; 0 uses every
/// core and 1 evaluates sequentially.
pub fn random_search<F: Scalar>(ctx: &SearchContext<F>, seeds: &[u64], parallel: usize) -> Result<RandomSearchResult> {
    if seeds.is_empty() {
        return Err(Error::Config("random search needs at least one candidate".into()));
    }
    let started = Instant::now();
    let target = ctx.config.target()?;
    let max_attempts = ctx.config.max_attempts;
    let draw = |seed: u64| -> Result<(Candidate, u64)> {
        let mut sampler = RejectionSampler::new(&ctx.space, &ctx.model, target, seed);
        let (architecture, latency_ms) = sampler.sample_n(1, max_attempts)?.remove(0);
        let quality = ctx.evaluate(&architecture)?;
        Ok((
            Candidate {
                seed,
                architecture,
                latency_ms,
                quality,
            },
            sampler.attempts(),
        ))
    };
    let drawn: Vec<(Candidate, u64)> = match parallel {
        1 => seeds.iter().map(|&s| draw(s)).collect::<Result<_>>()?,
        0 => seeds.par_iter().map(|&s| draw(s)).collect::<Result<_>>()?,
        k => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(|| seeds.par_iter().map(|&s| draw(s)).collect::<Result<_>>())?,
    };
    let attempts = drawn.iter().map(|(_, a)| a).sum();
    let candidates: Vec<Candidate> = drawn.into_iter().map(|(c, _)| c).collect();
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.quality > candidates[best].quality {
            best = i;
        }
    }
    Ok(RandomSearchResult {
        best: candidates[best].clone(),
        candidates,
        attempts,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub kind: RunKind,
    pub experiment: String,
    pub runs: usize,
    /// Mean trained-model equivalents per run.
    pub candidate_equivalents: f64,
    /// Mean wall time per run, when the logs recorded it.
    pub wall_time_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    /// Mean random-search cost over mean search cost, in trained-model equivalents.
    pub equivalents_ratio: Option<f64>,
    /// Same ratio in wall time.
    pub wall_time_ratio: Option<f64>,
}

impl CostReport {
    pub fn to_table(&self) -> String {
        let mut out = String::from("kind           experiment    runs  equivalents  wall_time_s\n");
        for r in &self.rows {
            let wall = r.wall_time_s.map_or_else(|| "-".to_string(), |w| format!("{w:.2}"));
            out.push_str(&format!(
                "{:<14} {:<12}  {:>4}  {:>11.2}  {:>11}\n",
                r.kind.as_str(),
                &r.experiment[..r.experiment.len().min(12)],
                r.runs,
                r.candidate_equivalents,
                wall
            ));
        }
        if let Some(x) = self.equivalents_ratio {
            out.push_str(&format!("random/search equivalents ratio: {x:.2}\n"));
        }
        if let Some(x) = self.wall_time_ratio {
            out.push_str(&format!("random/search wall-time ratio: {x:.2}\n"));
        }
        out
    }
}

/// One row per (kind, experiment) with mean budgets, plus random-search over
/// search ratios when both kinds are present.
pub fn cost_report(records: &[RunRecord]) -> Result<CostReport> {
    if records.is_empty() {
        return Err(Error::Config("no run records".into()));
    }
    let mut groups: BTreeMap<(RunKind, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.kind, r.experiment.clone())).or_default().push(r);
    }
    let rows: Vec<CostRow> = groups
        .into_iter()
        .map(|((kind, experiment), rs)| {
            let n = rs.len() as f64;
            let times: Vec<f64> = rs.iter().filter_map(|r| r.wall_time_s).collect();
            CostRow {
                kind,
                experiment,
                runs: rs.len(),
                candidate_equivalents: rs.iter().map(|r| r.candidate_equivalents).sum::<f64>() / n,
                wall_time_s: (times.len() == rs.len()).then(|| times.iter().sum::<f64>() / n),
            }
        })
        .collect();
    let mean_of = |kind: RunKind, f: &dyn Fn(&RunRecord) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = records.iter().filter(|r| r.kind == kind).map(f).collect::<Option<_>>()?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let ratio = |f: &dyn Fn(&RunRecord) -> Option<f64>| -> Option<f64> {
        let rs = mean_of(RunKind::RandomSearch, f)?;
        let s = mean_of(RunKind::Search, f)?;
        (s > 0.0).then(|| round2(rs / s))
    };
    Ok(CostReport {
        equivalents_ratio: ratio(&|r| Some(r.candidate_equivalents)),
        wall_time_ratio: ratio(&|r| r.wall_time_s),
        rows,
    })
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::QualitySource;
    use crate::runlog::RunRecord;
    use crate::search_loop::run_search;
    use crate::space::SpaceKind;

    fn ctx() -> SearchContext<f64> {
        SearchContext::new(&SearchConfig::default()).unwrap()
    }

    #[test]
    fn single_candidate_is_returned() {
        let c = ctx();
        let r = random_search(&c, &[5], 1).unwrap();
        assert_eq!(r.candidates.len(), 1);
        assert_eq!(r.best, r.candidates[0]);
        assert!(random_search(&c, &[], 1).is_err());
    }

    #[test]
    fn candidates_lie_in_window() {
        let c = ctx();
        let r = random_search(&c, &candidate_seeds(0, 20), 0).unwrap();
        for cand in &r.candidates {
            assert!((cand.latency_ms - 84.0).abs() <= 1.0);
            assert_eq!(cand.quality, c.evaluate(&cand.architecture).unwrap());
        }
        assert!(r.attempts >= 20);
        assert_eq!(r.candidate_equivalents(), 20.0);
    }

    #[test]
    fn nested_budgets_are_monotone() {
        let c = ctx();
        let q = |n| random_search(&c, &candidate_seeds(100, n), 0).unwrap().best.quality;
        let (q1, q20, q50) = (q(1), q(20), q(50));
        assert!(q50 >= q20 && q20 >= q1);
    }

    #[test]
    fn permuting_seeds_keeps_best_quality() {
        let c = ctx();
        let seeds = candidate_seeds(7, 12);
        let mut rev = seeds.clone();
        rev.reverse();
        let a = random_search(&c, &seeds, 1).unwrap();
        let b = random_search(&c, &rev, 3).unwrap();
        assert_eq!(a.best.quality, b.best.quality);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let c = ctx();
        let seeds = candidate_seeds(0, 8);
        let a = random_search(&c, &seeds, 1).unwrap();
        let b = random_search(&c, &seeds, 4).unwrap();
        assert_eq!(a.candidates, b.candidates);
    }

    #[test]
    fn supernet_candidates_train_identically() {
        let cfg = SearchConfig {
            space: SpaceKind::Toy,
            quality: QualitySource::Supernet,
            target_ms: 10.0,
            latency_mean_ms: 10.0,
            data_train: 256,
            data_valid: 64,
            standalone_steps: 5,
            ..SearchConfig::default()
        };
        let c = SearchContext::<f64>::new(&cfg).unwrap();
        let r = random_search(&c, &[1, 2], 2).unwrap();
        for cand in &r.candidates {
            assert_eq!(cand.quality, c.evaluate(&cand.architecture).unwrap());
        }
    }

    #[test]
    fn report_rows_and_ratios() {
        let cfg = SearchConfig { steps: 100, ..SearchConfig::default() };
        let c = SearchContext::<f64>::new(&cfg).unwrap();
        let s = run_search::<f64>(&cfg).unwrap();
        let search = RunRecord::from_search(&cfg, &s, None, false);
        let one = cost_report(std::slice::from_ref(&search)).unwrap();
        assert_eq!(one.rows.len(), 1);
        assert_eq!(one.equivalents_ratio, None);

        let rs = random_search(&c, &candidate_seeds(0, 20), 0).unwrap();
        let rs_rec = RunRecord::from_random(&cfg, &rs, &candidate_seeds(0, 20), false);
        assert_eq!(rs_rec.candidate_equivalents, 20.0);
        let both = cost_report(&[search.clone(), rs_rec]).unwrap();
        assert_eq!(both.rows.len(), 2);
        let expected = round2(20.0 / search.candidate_equivalents);
        assert_eq!(both.equivalents_ratio, Some(expected));
        assert_eq!(both.wall_time_ratio, None);
        assert!(both.to_table().contains(&format!("{expected:.2}")));
        assert!(cost_report(&[]).is_err());
    }
}
