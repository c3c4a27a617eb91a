//! Lookup-table latency model and latency-window rejection sampling.
//!
//! An architecture's latency is the sum of the table entries of its selected
//! ops. Each (decision, choice) pair maps to the op-descriptor key
//! `kind:block:label`, e.g. `kernel:7:k5` or `op_choice:3:skip`. Decisions whose
//! gate is not satisfied (e.g. the kernel of a skipped layer) contribute nothing.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{Architecture, Decision, DecisionKind, Gate, SearchSpace};

/// Canonical op-descriptor key of one choice of a decision.
pub fn op_key(decision: &Decision, choice: usize) -> String {
    format!("{}:{}:{}", decision.kind.as_str(), decision.block_index, decision.labels[choice])
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatencyTable {
    entries: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    key: String,
    ms: f64,
}

impl LatencyTable {
    pub fn new(entries: BTreeMap<String, f64>) -> Result<Self> {
        for (k, v) in &entries {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::InvalidLatencyTable(format!("entry `{k}` has latency {v}")));
            }
        }
        Ok(LatencyTable { entries })
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.get(key).copied()
    }

    pub fn insert(&mut self, key: impl Into<String>, ms: f64) -> Result<()> {
        if !ms.is_finite() || ms < 0.0 {
            return Err(Error::InvalidLatencyTable(format!("latency {ms} must be finite and nonnegative")));
        }
        self.entries.insert(key.into(), ms);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &BTreeMap<String, f64> {
        &self.entries
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let entries: BTreeMap<String, f64> = serde_json::from_str(text)?;
        Self::new(entries)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries)?)
    }

    /// Reads `key,ms` rows (with header).
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut entries = BTreeMap::new();
        for row in reader.deserialize() {
            let row: CsvRow = row?;
            if entries.insert(row.key.clone(), row.ms).is_some() {
                return Err(Error::InvalidLatencyTable(format!("duplicate key `{}`", row.key)));
            }
        }
        Self::new(entries)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for (key, &ms) in &self.entries {
            writer.serialize(CsvRow { key: key.clone(), ms })?;
        }
        let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Loads a table, choosing the format from the file extension (`.csv` or JSON otherwise).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Self::from_csv(&text),
            _ => Self::from_json(&text),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => self.to_csv()?,
            _ => self.to_json()?,
        };
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Seeded synthetic table for `space`: larger kernels, expansions, filters and
    /// higher-resolution layers cost more, skip ops cost nothing, and the whole table
    /// is scaled so a uniformly sampled architecture takes `mean_ms` on average.
    pub fn synthetic(space: &SearchSpace, seed: u64, mean_ms: f64) -> Result<Self> {
        if !(mean_ms > 0.0) {
            return Err(Error::Config("synthetic table mean must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resolution = block_resolutions(space);
        let mut raw: Vec<Vec<f64>> = Vec::with_capacity(space.num_decisions());
        for d in space.decisions() {
            let (hw, width) = match space.block_layout().get(d.block_index) {
                Some(b) => (resolution[d.block_index], f64::from(b.base_filters) / 32.0),
                None => (1.0, 1.0),
            };
            let costs = (0..d.num_choices())
                .map(|c| {
                    let v = f64::from(d.values[c]);
                    let base = match d.kind {
                        DecisionKind::Expansion => 0.30 * hw * width * width * v,
                        DecisionKind::Kernel => 0.25 * hw * width * v * v / 9.0,
                        DecisionKind::OutputFilters => 0.10 * hw * width * v / 32.0,
                        DecisionKind::Se => 0.40 * hw * width * width * v,
                        DecisionKind::OpChoice if d.labels[c] == "skip" => 0.0,
                        DecisionKind::OpChoice => 0.20 * hw * width * width * (1.0 + v),
                        DecisionKind::Other => 0.05 * v / 32.0,
                    };
                    let z: f64 = StandardNormal.sample(&mut rng);
                    base * (0.15 * z).exp()
                })
                .collect();
            raw.push(costs);
        }
        let expected = expected_uniform(space, &raw);
        let scale = if expected > 0.0 { mean_ms / expected } else { 1.0 };
        let mut entries = BTreeMap::new();
        for (d, costs) in space.decisions().iter().zip(&raw) {
            for (c, cost) in costs.iter().enumerate() {
                entries.entry(op_key(d, c)).or_insert(cost * scale);
            }
        }
        Self::new(entries)
    }
}

// Spatial-area factor per block, relative to the first post-stem resolution.
fn block_resolutions(space: &SearchSpace) -> Vec<f64> {
    let mut area = 4.0;
    space
        .block_layout()
        .iter()
        .map(|b| {
            if b.stride == 2 {
                area /= 4.0;
            }
            area
        })
        .collect()
}

fn activation_probability(space: &SearchSpace, d: usize) -> f64 {
    match space.decision(d).active_when {
        None => 1.0,
        Some(g) => activation_probability(space, g.decision) / space.decision(g.decision).num_choices() as f64,
    }
}

fn expected_uniform(space: &SearchSpace, costs: &[Vec<f64>]) -> f64 {
    costs
        .iter()
        .enumerate()
        .map(|(d, c)| activation_probability(space, d) * c.iter().sum::<f64>() / c.len() as f64)
        .sum()
}

/// A table resolved against one space: dense per-decision cost vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyModel {
    costs: Vec<Vec<f64>>,
    gates: Vec<Option<Gate>>,
}

impl LatencyModel {
    /// Fails with the first op descriptor missing from the table.
    pub fn compile(table: &LatencyTable, space: &SearchSpace) -> Result<Self> {
        let mut costs = Vec::with_capacity(space.num_decisions());
        for d in space.decisions() {
            let per_choice = (0..d.num_choices())
                .map(|c| {
                    let key = op_key(d, c);
                    table.get(&key).ok_or(Error::MissingLatencyKey(key))
                })
                .collect::<Result<Vec<f64>>>()?;
            costs.push(per_choice);
        }
        Ok(LatencyModel {
            costs,
            gates: space.decisions().iter().map(|d| d.active_when).collect(),
        })
    }

    fn active(&self, arch: &Architecture, d: usize) -> bool {
        match self.gates[d] {
            None => true,
            Some(g) => arch.choices[g.decision] == g.choice && self.active(arch, g.decision),
        }
    }

    pub fn latency(&self, arch: &Architecture) -> f64 {
        let mut total = 0.0;
        for (d, costs) in self.costs.iter().enumerate() {
            if self.active(arch, d) {
                total += costs[arch.choices[d]];
            }
        }
        total
    }

    pub fn cost(&self, decision: usize, choice: usize) -> f64 {
        self.costs[decision][choice]
    }

    /// Mean latency of a uniformly sampled architecture.
    pub fn expected_uniform(&self, space: &SearchSpace) -> f64 {
        expected_uniform(space, &self.costs)
    }

    /// Smallest and largest achievable latency, ignoring gates (a bound, not exact).
    pub fn bounds(&self) -> (f64, f64) {
        let lo = self.costs.iter().map(|c| c.iter().cloned().fold(f64::INFINITY, f64::min)).sum();
        let hi = self.costs.iter().map(|c| c.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).sum();
        (lo, hi)
    }
}

/// `T(α)`: sum of the latencies of the ops selected by `arch`.
pub fn arch_latency(table: &LatencyTable, space: &SearchSpace, arch: &Architecture) -> Result<f64> {
    space.check(arch)?;
    let mut total = 0.0;
    for d in space.decisions() {
        if space.is_active(arch, d.id) {
            let key = op_key(d, arch.choices[d.id]);
            total += table.get(&key).ok_or(Error::MissingLatencyKey(key))?;
        }
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyTarget {
    pub target_ms: f64,
    pub tolerance_ms: f64,
}

impl LatencyTarget {
    pub fn new(target_ms: f64, tolerance_ms: f64) -> Result<Self> {
        if !(target_ms > 0.0) || !target_ms.is_finite() {
            return Err(Error::Config(format!("latency target must be positive, got {target_ms}")));
        }
        if !(tolerance_ms >= 0.0) {
            return Err(Error::Config(format!("latency tolerance must be nonnegative, got {tolerance_ms}")));
        }
        Ok(LatencyTarget { target_ms, tolerance_ms })
    }

    /// Target with the default ±1 ms window.
    pub fn with_default_tolerance(target_ms: f64) -> Result<Self> {
        Self::new(target_ms, 1.0)
    }

    pub fn contains(&self, latency_ms: f64) -> bool {
        (latency_ms - self.target_ms).abs() <= self.tolerance_ms
    }
}

/// Uniform sampler conditioned on the latency window.
pub struct RejectionSampler<'a> {
    space: &'a SearchSpace,
    model: &'a LatencyModel,
    target: LatencyTarget,
    rng: ChaCha8Rng,
    attempts: u64,
    accepted: usize,
}

impl<'a> RejectionSampler<'a> {
    pub fn new(space: &'a SearchSpace, model: &'a LatencyModel, target: LatencyTarget, seed: u64) -> Self {
        RejectionSampler {
            space,
            model,
            target,
            rng: ChaCha8Rng::seed_from_u64(seed),
            attempts: 0,
            accepted: 0,
        }
    }

    /// One proposal; returns it with its latency if it lands in the window.
    pub fn propose(&mut self) -> Option<(Architecture, f64)> {
        self.attempts += 1;
        let arch = self.space.sample_uniform_with(&mut self.rng);
        let t = self.model.latency(&arch);
        if self.target.contains(t) {
            self.accepted += 1;
            Some((arch, t))
        } else {
            None
        }
    }

    /// Draws `n` accepted architectures using at most `max_attempts` proposals in total.
    pub fn sample_n(&mut self, n: usize, max_attempts: u64) -> Result<Vec<(Architecture, f64)>> {
        let mut out = Vec::with_capacity(n);
        let start_attempts = self.attempts;
        while out.len() < n {
            if self.attempts - start_attempts >= max_attempts {
                return Err(Error::RejectionExhausted {
                    attempts: self.attempts - start_attempts,
                    accepted: out.len(),
                    requested: n,
                });
            }
            if let Some(hit) = self.propose() {
                out.push(hit);
            }
        }
        Ok(out)
    }

    pub fn attempts(&self) -> u64 {
        self.attempts
    }

    pub fn accepted(&self) -> usize {
        self.accepted
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.rng
    }
}

/// One uniformly drawn architecture with `|T(α) − T0| ≤ tolerance`.
pub fn rejection_sample(
    space: &SearchSpace,
    table: &LatencyTable,
    target: LatencyTarget,
    seed: u64,
    max_attempts: u64,
) -> Result<Architecture> {
    if max_attempts == 0 {
        return Err(Error::Config("max_attempts must be at least 1".into()));
    }
    let model = LatencyModel::compile(table, space)?;
    let mut sampler = RejectionSampler::new(space, &model, target, seed);
    let mut hits = sampler.sample_n(1, max_attempts)?;
    Ok(hits.pop().expect("one sample").0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{build_space, build_space_with, FilterRule, LayoutConfig, SpaceKind, ToySpaceConfig, ENUMERATION_LIMIT};
    use proptest::prelude::*;

    fn toy3() -> SearchSpace {
        let layout = LayoutConfig {
            toy: ToySpaceConfig { blocks: 3, ..Default::default() },
            ..Default::default()
        };
        build_space_with(SpaceKind::Toy, &layout).unwrap()
    }

    fn constant_table(space: &SearchSpace, ms: f64) -> LatencyTable {
        let mut t = LatencyTable::default();
        for d in space.decisions() {
            for c in 0..d.num_choices() {
                t.insert(op_key(d, c), ms).unwrap();
            }
        }
        t
    }

    #[test]
    fn empty_architecture_has_zero_latency() {
        let space = SearchSpace::new("empty", vec![], vec![], vec![], FilterRule::Handcrafted).unwrap();
        let t = arch_latency(&LatencyTable::default(), &space, &Architecture::new(vec![])).unwrap();
        assert_eq!(t, 0.0);
    }

    #[test]
    fn shared_key_counts_twice() {
        let d = |name: &str| Decision::new(DecisionKind::Kernel, name, 0, vec!["k3".into()], vec![3]);
        let space = SearchSpace::new("two", vec![d("a"), d("b")], vec![], vec![], FilterRule::Handcrafted).unwrap();
        let mut table = LatencyTable::default();
        table.insert("kernel:0:k3", 3.5).unwrap();
        assert_eq!(arch_latency(&table, &space, &Architecture::new(vec![0, 0])).unwrap(), 7.0);
    }

    #[test]
    fn missing_key_is_named() {
        let space = toy3();
        let mut table = LatencyTable::synthetic(&space, 1, 10.0).unwrap();
        table.entries.remove("expansion:2:w24");
        let arch = Architecture::new(vec![0, 2, 0, 2, 0, 2]);
        match arch_latency(&table, &space, &arch) {
            Err(Error::MissingLatencyKey(k)) => assert_eq!(k, "expansion:2:w24"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(LatencyModel::compile(&table, &space), Err(Error::MissingLatencyKey(_))));
    }

    #[test]
    fn latency_matches_independent_sum() {
        let space = toy3();
        let table = LatencyTable::synthetic(&space, 7, 12.0).unwrap();
        let model = LatencyModel::compile(&table, &space).unwrap();
        for seed in 0..50 {
            let arch = space.sample_uniform(seed);
            // oracle: format every selected key by hand and sum the raw entries
            let mut oracle = 0.0;
            for (i, &c) in arch.choices.iter().enumerate() {
                let d = &space.decisions()[i];
                let key = format!("{}:{}:{}", d.kind.as_str(), d.block_index, d.labels[c]);
                oracle += table.entries()[&key];
            }
            let t = arch_latency(&table, &space, &arch).unwrap();
            assert!((t - oracle).abs() < 1e-12);
            assert_eq!(t, model.latency(&arch));
        }
    }

    #[test]
    fn skipped_layers_drop_their_ops() {
        let space = build_space(SpaceKind::Proxylessnas).unwrap();
        let table = LatencyTable::synthetic(&space, 3, 84.0).unwrap();
        let mut arch = Architecture::new(vec![0; space.num_decisions()]);
        let full = arch_latency(&table, &space, &arch).unwrap();
        // decision 2 is the op switch of the second layer (block 2)
        let op = space.decisions().iter().position(|d| d.kind == DecisionKind::OpChoice).unwrap();
        arch.choices[op] = 1;
        let skipped = arch_latency(&table, &space, &arch).unwrap();
        let block = space.decision(op).block_index;
        let dropped: f64 = space
            .decisions()
            .iter()
            .filter(|d| d.block_index == block)
            .map(|d| table.get(&op_key(d, 0)).unwrap())
            .sum();
        assert!((full - skipped - dropped).abs() < 1e-9);
        assert_eq!(table.get(&op_key(space.decision(op), 1)), Some(0.0));
    }

    #[test]
    fn synthetic_table_is_calibrated_and_monotone() {
        let space = build_space(SpaceKind::Mobilenetv3Like).unwrap();
        let table = LatencyTable::synthetic(&space, 11, 57.0).unwrap();
        let model = LatencyModel::compile(&table, &space).unwrap();
        assert!((model.expected_uniform(&space) - 57.0).abs() < 1e-9);
        let n = 20_000;
        let mean: f64 = (0..n).map(|s| model.latency(&space.sample_uniform(s))).sum::<f64>() / n as f64;
        assert!((mean - 57.0).abs() < 0.5, "{mean}");
    }

    #[test]
    fn json_and_csv_round_trip() {
        let space = toy3();
        let table = LatencyTable::synthetic(&space, 2, 5.0).unwrap();
        assert_eq!(LatencyTable::from_json(&table.to_json().unwrap()).unwrap(), table);
        let csv = table.to_csv().unwrap();
        assert!(csv.starts_with("key,ms\n"));
        assert_eq!(LatencyTable::from_csv(&csv).unwrap(), table);
        assert!(LatencyTable::from_json("{\"a\": -1.0}").is_err());
        assert!(LatencyTable::from_csv("key,ms\na,1\na,2\n").is_err());
    }

    #[test]
    fn everything_on_target_accepts_first() {
        let space = toy3();
        let n = space.num_decisions() as f64;
        let table = constant_table(&space, 1.0);
        let target = LatencyTarget::with_default_tolerance(n).unwrap();
        let model = LatencyModel::compile(&table, &space).unwrap();
        let mut sampler = RejectionSampler::new(&space, &model, target, 5);
        sampler.sample_n(1, 1).unwrap();
        assert_eq!(sampler.attempts(), 1);
    }

    #[test]
    fn everything_off_target_exhausts() {
        let space = toy3();
        let n = space.num_decisions() as f64;
        let table = constant_table(&space, 1.0);
        let target = LatencyTarget::new(n - 10.0 * 0.5, 0.5).unwrap();
        match rejection_sample(&space, &table, target, 1, 100) {
            Err(Error::RejectionExhausted { attempts, accepted, .. }) => {
                assert_eq!(attempts, 100);
                assert_eq!(accepted, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn acceptance_rate_matches_enumeration() {
        let space = toy3();
        let table = LatencyTable::synthetic(&space, 4, 20.0).unwrap();
        let model = LatencyModel::compile(&table, &space).unwrap();
        let target = LatencyTarget::new(20.0, 1.0).unwrap();
        let all: Vec<Architecture> = space.enumerate(ENUMERATION_LIMIT).unwrap().collect();
        let inside = all.iter().filter(|a| target.contains(model.latency(a))).count();
        let exact = inside as f64 / all.len() as f64;
        let mut sampler = RejectionSampler::new(&space, &model, target, 77);
        for _ in 0..100_000 {
            sampler.propose();
        }
        let empirical = sampler.accepted() as f64 / sampler.attempts() as f64;
        assert!((empirical - exact).abs() < 0.02, "{empirical} vs {exact}");
        assert!(exact > 0.05);
    }

    #[test]
    fn target_validation() {
        assert!(LatencyTarget::new(0.0, 1.0).is_err());
        assert!(LatencyTarget::new(84.0, -1.0).is_err());
        assert!(LatencyTarget::new(84.0, 0.0).is_ok());
    }

    proptest! {
        #[test]
        fn extra_fixed_block_shifts_latency(seed in any::<u64>(), extra in 0.0f64..20.0) {
            let space = toy3();
            let table = LatencyTable::synthetic(&space, 9, 15.0).unwrap();
            let mut decisions = space.decisions().to_vec();
            let mut blocks = space.block_layout().to_vec();
            blocks.push(crate::space::BlockInfo { name: "extra".into(), stage: 9, stride: 1, base_filters: 1, skippable: false });
            decisions.push(Decision::new(DecisionKind::Other, "extra", blocks.len() - 1, vec!["fixed".into()], vec![0]));
            let bigger = SearchSpace::new("bigger", decisions, vec![], blocks, FilterRule::Handcrafted).unwrap();
            let mut table2 = table.clone();
            table2.insert(format!("other:{}:fixed", bigger.block_layout().len() - 1), extra).unwrap();
            let arch = space.sample_uniform(seed);
            let mut arch2 = arch.clone();
            arch2.choices.push(0);
            let t1 = arch_latency(&table, &space, &arch).unwrap();
            let t2 = arch_latency(&table2, &bigger, &arch2).unwrap();
            prop_assert!((t2 - (t1 + extra)).abs() < 1e-9);
        }

        #[test]
        fn rejection_output_is_in_window(seed in any::<u64>()) {
            let space = toy3();
            let table = LatencyTable::synthetic(&space, 4, 20.0).unwrap();
            let target = LatencyTarget::new(20.0, 1.0).unwrap();
            let arch = rejection_sample(&space, &table, target, seed, 10_000).unwrap();
            prop_assert!(target.contains(arch_latency(&table, &space, &arch).unwrap()));
            prop_assert!(space.validate(&arch));
        }
    }
}
