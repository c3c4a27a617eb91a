//! Architectures as assignments to categorical decisions.
//!
//! A [`SearchSpace`] is an ordered list of [`Decision`]s. Output-filter decisions
//! joined by a residual connection are grouped into *filter ties*: every decision
//! in a tie group must take the same choice, so the group behaves as a single free
//! variable for counting, sampling and policy learning.

mod builders;

pub use builders::{build_space, build_space_with, filter_choices, parse_multiplier, LayoutConfig, SpaceKind, ToySpaceConfig};

use std::fmt;

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Version tag written into serialized spaces.
pub const SPACE_FORMAT_VERSION: u32 = 1;

/// Default limit for exhaustive enumeration.
pub const ENUMERATION_LIMIT: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Kernel,
    Expansion,
    OutputFilters,
    Se,
    OpChoice,
    Other,
}

impl DecisionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DecisionKind::Kernel => "kernel",
            DecisionKind::Expansion => "expansion",
            DecisionKind::OutputFilters => "output_filters",
            DecisionKind::Se => "se",
            DecisionKind::OpChoice => "op_choice",
            DecisionKind::Other => "other",
        }
    }
}

impl fmt::Display for DecisionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A decision only matters when another decision takes a given choice
/// (e.g. the kernel size of a layer that was not skipped).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gate {
    pub decision: usize,
    pub choice: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub id: usize,
    pub name: String,
    pub kind: DecisionKind,
    pub block_index: usize,
    /// One label per choice; used in latency-table keys.
    pub labels: Vec<String>,
    /// Numeric payload per choice (expansion ratio, kernel size, width, flag).
    pub values: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_when: Option<Gate>,
}

impl Decision {
    pub fn new(kind: DecisionKind, name: impl Into<String>, block_index: usize, labels: Vec<String>, values: Vec<u32>) -> Self {
        Decision {
            id: 0,
            name: name.into(),
            kind,
            block_index,
            labels,
            values,
            active_when: None,
        }
    }

    pub fn gated(mut self, gate: Gate) -> Self {
        self.active_when = Some(gate);
        self
    }

    pub fn num_choices(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub stage: usize,
    pub stride: u32,
    /// Base filter size `c_i` of the block.
    pub base_filters: u32,
    /// Whether the block may be replaced by an identity (skip) op.
    pub skippable: bool,
}

/// How block base filter sizes were derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterRule {
    Handcrafted,
    /// Doubled at every stride-2 stage.
    DoubleAtStride2,
    /// Doubled at every new stage.
    DoubleEveryStage,
}

/// One assignment of a choice index to every decision.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Architecture {
    pub choices: Vec<usize>,
}

impl Architecture {
    pub fn new(choices: Vec<usize>) -> Self {
        Architecture { choices }
    }

    pub fn len(&self) -> usize {
        self.choices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choices.is_empty()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.choices.iter().map(|c| c.to_string()).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// Exact and logarithmic size of a space.
#[derive(Clone, Debug, PartialEq)]
pub struct Cardinality {
    pub exact: BigUint,
    pub log10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SpaceDocument {
    format_version: u32,
    name: String,
    filter_rule: FilterRule,
    decisions: Vec<Decision>,
    filter_ties: Vec<Vec<usize>>,
    blocks: Vec<BlockInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    name: String,
    filter_rule: FilterRule,
    decisions: Vec<Decision>,
    filter_ties: Vec<Vec<usize>>,
    block_layout: Vec<BlockInfo>,
    // derived: free variables (untied decisions plus one per tie group)
    variable_of: Vec<usize>,
    variables: Vec<Vec<usize>>,
}

impl SearchSpace {
    /// Builds a space, assigning dense ids in order and checking every invariant.
    pub fn new(
        name: impl Into<String>,
        mut decisions: Vec<Decision>,
        filter_ties: Vec<Vec<usize>>,
        block_layout: Vec<BlockInfo>,
        filter_rule: FilterRule,
    ) -> Result<Self> {
        for (i, d) in decisions.iter_mut().enumerate() {
            d.id = i;
        }
        Self::from_parts(name.into(), decisions, filter_ties, block_layout, filter_rule)
    }

    fn from_parts(
        name: String,
        decisions: Vec<Decision>,
        filter_ties: Vec<Vec<usize>>,
        block_layout: Vec<BlockInfo>,
        filter_rule: FilterRule,
    ) -> Result<Self> {
        let invalid = |msg: String| Err(Error::InvalidSpace(msg));
        let n = decisions.len();
        for (i, d) in decisions.iter().enumerate() {
            if d.id != i {
                return invalid(format!("decision ids must be dense: position {i} has id {}", d.id));
            }
            if d.num_choices() == 0 {
                return invalid(format!("decision `{}` has no choices", d.name));
            }
            if d.values.len() != d.labels.len() {
                return invalid(format!("decision `{}` has {} labels but {} values", d.name, d.labels.len(), d.values.len()));
            }
            if !block_layout.is_empty() && d.block_index >= block_layout.len() {
                return invalid(format!("decision `{}` references block {} of {}", d.name, d.block_index, block_layout.len()));
            }
            if let Some(g) = d.active_when {
                if g.decision >= n || g.decision == i {
                    return invalid(format!("decision `{}` has an invalid gate", d.name));
                }
                if g.choice >= decisions[g.decision].num_choices() {
                    return invalid(format!("decision `{}` gates on an out-of-range choice", d.name));
                }
            }
        }

        let mut group_of: Vec<Option<usize>> = vec![None; n];
        for (g, group) in filter_ties.iter().enumerate() {
            if group.is_empty() {
                return invalid("empty filter tie group".into());
            }
            let first = group[0];
            for &d in group {
                if d >= n {
                    return invalid(format!("filter tie references unknown decision {d}"));
                }
                let dec = &decisions[d];
                if dec.kind != DecisionKind::OutputFilters {
                    return invalid(format!("filter tie member `{}` is not an output_filters decision", dec.name));
                }
                if dec.values != decisions[first].values || dec.labels != decisions[first].labels {
                    return invalid(format!("filter tie member `{}` has a different choice list", dec.name));
                }
                if group_of[d].is_some() {
                    return invalid(format!("decision `{}` appears in two filter ties", dec.name));
                }
                group_of[d] = Some(g);
            }
        }
        // Variables follow decision order; a tie group is numbered at its lowest member.
        let mut variables: Vec<Vec<usize>> = Vec::new();
        for d in 0..n {
            match group_of[d] {
                None => variables.push(vec![d]),
                Some(g) => {
                    let mut members = filter_ties[g].clone();
                    members.sort_unstable();
                    if members[0] == d {
                        variables.push(members);
                    }
                }
            }
        }
        let mut variable_of = vec![0; n];
        for (v, group) in variables.iter().enumerate() {
            for &d in group {
                variable_of[d] = v;
            }
        }

        let space = SearchSpace {
            name,
            filter_rule,
            decisions,
            filter_ties,
            block_layout,
            variable_of,
            variables,
        };
        space.check_filter_rule()?;
        Ok(space)
    }

    fn check_filter_rule(&self) -> Result<()> {
        if self.filter_rule == FilterRule::Handcrafted {
            return Ok(());
        }
        // The stem (stage 0) seeds the rule; each later stage either doubles or keeps its base.
        let mut prev: Option<(usize, u32)> = None;
        for b in &self.block_layout {
            match prev {
                None => prev = Some((b.stage, b.base_filters)),
                Some((stage, base)) if b.stage == stage => {
                    if b.base_filters != base {
                        return Err(Error::InvalidSpace(format!("block `{}` changes filters within a stage", b.name)));
                    }
                }
                Some((_, base)) => {
                    if b.name == "head" {
                        break;
                    }
                    let doubles = match self.filter_rule {
                        FilterRule::DoubleAtStride2 => b.stride == 2,
                        FilterRule::DoubleEveryStage => true,
                        FilterRule::Handcrafted => unreachable!(),
                    };
                    let expected = if doubles { base * 2 } else { base };
                    if b.base_filters != expected {
                        return Err(Error::InvalidSpace(format!(
                            "block `{}` has base filters {} but the doubling rule requires {expected}",
                            b.name, b.base_filters
                        )));
                    }
                    prev = Some((b.stage, b.base_filters));
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn filter_rule(&self) -> FilterRule {
        self.filter_rule
    }

    pub fn decisions(&self) -> &[Decision] {
        &self.decisions
    }

    pub fn decision(&self, id: usize) -> &Decision {
        &self.decisions[id]
    }

    pub fn num_decisions(&self) -> usize {
        self.decisions.len()
    }

    pub fn filter_ties(&self) -> &[Vec<usize>] {
        &self.filter_ties
    }

    pub fn block_layout(&self) -> &[BlockInfo] {
        &self.block_layout
    }

    /// Free variables: each is a group of decisions that always share one choice.
    pub fn variables(&self) -> &[Vec<usize>] {
        &self.variables
    }

    pub fn variable_of(&self, decision: usize) -> usize {
        self.variable_of[decision]
    }

    pub fn variable_choices(&self, variable: usize) -> usize {
        self.decisions[self.variables[variable][0]].num_choices()
    }

    /// Whether a decision's gate (if any) is satisfied by `arch`.
    pub fn is_active(&self, arch: &Architecture, decision: usize) -> bool {
        match self.decisions[decision].active_when {
            None => true,
            Some(g) => arch.choices[g.decision] == g.choice && self.is_active(arch, g.decision),
        }
    }

    pub fn cardinality(&self) -> Cardinality {
        let mut exact = BigUint::from(1u32);
        let mut log10 = 0.0;
        for v in 0..self.variables.len() {
            let k = self.variable_choices(v);
            exact *= BigUint::from(k);
            log10 += (k as f64).log10();
        }
        Cardinality { exact, log10 }
    }

    /// Number of distinct layer configurations in a block, counting expansion,
    /// kernel, output-filter and SE decisions (the op/skip switch is excluded).
    pub fn layer_combinations(&self, block: usize) -> u64 {
        self.decisions
            .iter()
            .filter(|d| d.block_index == block)
            .filter(|d| matches!(d.kind, DecisionKind::Expansion | DecisionKind::Kernel | DecisionKind::OutputFilters | DecisionKind::Se))
            .map(|d| d.num_choices() as u64)
            .product()
    }

    /// Builds an architecture from one choice per free variable.
    pub fn from_variable_choices(&self, var_choices: &[usize]) -> Architecture {
        let mut choices = vec![0; self.decisions.len()];
        for (v, group) in self.variables.iter().enumerate() {
            for &d in group {
                choices[d] = var_choices[v];
            }
        }
        Architecture { choices }
    }

    pub fn sample_uniform(&self, seed: u64) -> Architecture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_uniform_with(&mut rng)
    }

    pub fn sample_uniform_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Architecture {
        let vars: Vec<usize> = (0..self.variables.len()).map(|v| rng.random_range(0..self.variable_choices(v))).collect();
        self.from_variable_choices(&vars)
    }

    pub fn validate(&self, arch: &Architecture) -> bool {
        self.check(arch).is_ok()
    }

    /// Like [`validate`](Self::validate) but explains the first violation.
    pub fn check(&self, arch: &Architecture) -> Result<()> {
        if arch.len() != self.decisions.len() {
            return Err(Error::InvalidArchitecture(format!("expected {} choices, got {}", self.decisions.len(), arch.len())));
        }
        for (d, &c) in self.decisions.iter().zip(&arch.choices) {
            if c >= d.num_choices() {
                return Err(Error::InvalidArchitecture(format!("choice {c} out of range for `{}` ({} choices)", d.name, d.num_choices())));
            }
        }
        for group in &self.filter_ties {
            let first = arch.choices[group[0]];
            if group.iter().any(|&d| arch.choices[d] != first) {
                return Err(Error::InvalidArchitecture(format!("filter tie {group:?} violated")));
            }
        }
        Ok(())
    }

    /// Enumerates every valid architecture in mixed-radix order over the free variables.
    pub fn enumerate(&self, limit: u64) -> Result<Enumeration<'_>> {
        let card = self.cardinality();
        if card.exact > BigUint::from(limit) {
            return Err(Error::TooLarge { cardinality: card.exact.to_string(), limit });
        }
        Ok(Enumeration {
            space: self,
            counter: Some(vec![0; self.variables.len()]),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = SpaceDocument {
            format_version: SPACE_FORMAT_VERSION,
            name: self.name.clone(),
            filter_rule: self.filter_rule,
            decisions: self.decisions.clone(),
            filter_ties: self.filter_ties.clone(),
            blocks: self.block_layout.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SpaceDocument = serde_json::from_str(text)?;
        if doc.format_version != SPACE_FORMAT_VERSION {
            return Err(Error::InvalidSpace(format!("unsupported space format version {}", doc.format_version)));
        }
        Self::from_parts(doc.name, doc.decisions, doc.filter_ties, doc.blocks, doc.filter_rule)
    }
}

pub struct Enumeration<'a> {
    space: &'a SearchSpace,
    counter: Option<Vec<usize>>,
}

impl Iterator for Enumeration<'_> {
    type Item = Architecture;

    fn next(&mut self) -> Option<Architecture> {
        let current = self.counter.as_ref()?.clone();
        let arch = self.space.from_variable_choices(&current);
        let mut next = current;
        let mut pos = next.len();
        loop {
            if pos == 0 {
                self.counter = None;
                break;
            }
            pos -= 1;
            next[pos] += 1;
            if next[pos] < self.space.variable_choices(pos) {
                self.counter = Some(next);
                break;
            }
            next[pos] = 0;
        }
        Some(arch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn plain(sizes: &[usize]) -> SearchSpace {
        let decisions = sizes
            .iter()
            .enumerate()
            .map(|(i, &k)| Decision::new(DecisionKind::Other, format!("d{i}"), 0, labels(k), vec![0; k]))
            .collect();
        SearchSpace::new("plain", decisions, vec![], vec![], FilterRule::Handcrafted).unwrap()
    }

    fn tied_pair(k: usize) -> SearchSpace {
        let d = |i: usize| Decision::new(DecisionKind::OutputFilters, format!("f{i}"), 0, labels(k), (0..k as u32).collect());
        SearchSpace::new("tied", vec![d(0), d(1)], vec![vec![0, 1]], vec![], FilterRule::Handcrafted).unwrap()
    }

    #[test]
    fn cardinality_of_untied_product() {
        let c = plain(&[2, 3]).cardinality();
        assert_eq!(c.exact, BigUint::from(6u32));
        assert!((c.log10 - 6f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn tie_collapses_pair() {
        assert_eq!(tied_pair(7).cardinality().exact, BigUint::from(7u32));
    }

    #[test]
    fn single_choice_space_has_unique_sample() {
        let s = plain(&[1]);
        assert_eq!(s.sample_uniform(3), Architecture::new(vec![0]));
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = plain(&[3, 4, 5, 2]);
        assert_eq!(s.sample_uniform(42), s.sample_uniform(42));
    }

    #[test]
    fn marginal_is_uniform() {
        let s = plain(&[3]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 30_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[s.sample_uniform_with(&mut rng).choices[0]] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn validate_rejects_out_of_range_and_broken_tie() {
        let s = tied_pair(3);
        assert!(s.validate(&Architecture::new(vec![2, 2])));
        assert!(!s.validate(&Architecture::new(vec![3, 3])));
        assert!(!s.validate(&Architecture::new(vec![0, 1])));
        assert!(!s.validate(&Architecture::new(vec![0])));
    }

    #[test]
    fn tie_with_mismatched_choices_is_rejected() {
        let a = Decision::new(DecisionKind::OutputFilters, "a", 0, labels(2), vec![8, 16]);
        let b = Decision::new(DecisionKind::OutputFilters, "b", 0, labels(2), vec![8, 24]);
        assert!(SearchSpace::new("bad", vec![a, b], vec![vec![0, 1]], vec![], FilterRule::Handcrafted).is_err());
        let k = Decision::new(DecisionKind::Kernel, "k", 0, labels(2), vec![3, 5]);
        let k2 = k.clone();
        assert!(SearchSpace::new("bad", vec![k, k2], vec![vec![0, 1]], vec![], FilterRule::Handcrafted).is_err());
    }

    #[test]
    fn enumeration_guard() {
        let s = plain(&[10, 10, 10]);
        assert!(matches!(s.enumerate(999), Err(Error::TooLarge { .. })));
        assert_eq!(s.enumerate(1000).unwrap().count(), 1000);
    }

    #[test]
    fn json_round_trip() {
        let s = build_space(SpaceKind::ProxylessnasEnlarged).unwrap();
        let back = SearchSpace::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(s, back);
        let bumped = s.to_json().unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
        assert!(SearchSpace::from_json(&bumped).is_err());
    }

    fn arb_space() -> impl Strategy<Value = SearchSpace> {
        (prop::collection::vec(1usize..5, 1..6), 0usize..3, 1usize..4).prop_map(|(sizes, tie_len, tie_k)| {
            let mut decisions: Vec<Decision> = sizes
                .iter()
                .enumerate()
                .map(|(i, &k)| Decision::new(DecisionKind::Kernel, format!("d{i}"), 0, labels(k), vec![0; k]))
                .collect();
            let start = decisions.len();
            let mut ties = vec![];
            if tie_len >= 2 {
                for j in 0..tie_len {
                    decisions.push(Decision::new(DecisionKind::OutputFilters, format!("f{j}"), 0, labels(tie_k), (0..tie_k as u32).collect()));
                }
                ties.push((start..start + tie_len).collect());
            }
            SearchSpace::new("arb", decisions, ties, vec![], FilterRule::Handcrafted).unwrap()
        })
    }

    proptest! {
        #[test]
        fn cardinality_matches_brute_force(space in arb_space()) {
            // Brute force over the raw decision product, keeping tie-respecting tuples.
            let sizes: Vec<usize> = space.decisions().iter().map(|d| d.num_choices()).collect();
            let total: usize = sizes.iter().product();
            let mut valid = 0u64;
            for mut idx in 0..total {
                let mut choices = Vec::with_capacity(sizes.len());
                for &k in sizes.iter().rev() {
                    choices.push(idx % k);
                    idx /= k;
                }
                choices.reverse();
                if space.validate(&Architecture::new(choices)) {
                    valid += 1;
                }
            }
            prop_assert_eq!(space.cardinality().exact, BigUint::from(valid));
            prop_assert_eq!(space.enumerate(ENUMERATION_LIMIT).unwrap().count() as u64, valid);
        }

        #[test]
        fn samples_always_validate(space in arb_space(), seed in any::<u64>()) {
            prop_assert!(space.validate(&space.sample_uniform(seed)));
        }
    }
}
