use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::{BlockInfo, Decision, DecisionKind, FilterRule, Gate, SearchSpace};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    Proxylessnas,
    ProxylessnasEnlarged,
    Mobilenetv3Like,
    /// ProxylessNAS layers with filters doubled at every stride-2 stage.
    #[serde(rename = "doubling_stride2")]
    DoublingStride2,
    /// ProxylessNAS layers with filters doubled at every stage.
    DoublingBlock,
    Toy,
}

impl SpaceKind {
    pub const ALL: [SpaceKind; 6] = [
        SpaceKind::Proxylessnas,
        SpaceKind::ProxylessnasEnlarged,
        SpaceKind::Mobilenetv3Like,
        SpaceKind::DoublingStride2,
        SpaceKind::DoublingBlock,
        SpaceKind::Toy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SpaceKind::Proxylessnas => "proxylessnas",
            SpaceKind::ProxylessnasEnlarged => "proxylessnas_enlarged",
            SpaceKind::Mobilenetv3Like => "mobilenetv3_like",
            SpaceKind::DoublingStride2 => "doubling_stride2",
            SpaceKind::DoublingBlock => "doubling_block",
            SpaceKind::Toy => "toy",
        }
    }
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SpaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SpaceKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown search space `{s}`")))
    }
}

/// Parses `"5/8"`, `"2"` or `"1.25"`-free rational literals.
pub fn parse_multiplier(s: &str) -> Result<Ratio<u32>> {
    let bad = || Error::Config(format!("bad filter multiplier `{s}`"));
    let r = match s.trim().split_once('/') {
        Some((n, d)) => {
            let n: u32 = n.trim().parse().map_err(|_| bad())?;
            let d: u32 = d.trim().parse().map_err(|_| bad())?;
            if d == 0 {
                return Err(bad());
            }
            Ratio::new(n, d)
        }
        None => Ratio::from_integer(s.trim().parse().map_err(|_| bad())?),
    };
    if r == Ratio::from_integer(0) {
        return Err(bad());
    }
    Ok(r)
}

/// Candidate output widths: `base × m` rounded to the nearest multiple of 8
/// (ties round up, never below 8), deduplicated and sorted.
pub fn filter_choices(base_filter_size: u32, multipliers: &[Ratio<u32>]) -> Vec<u32> {
    let mut out: Vec<u32> = multipliers
        .iter()
        .map(|m| {
            let n = u64::from(base_filter_size) * u64::from(*m.numer());
            let d = u64::from(*m.denom());
            // floor(n / (8d) + 1/2) in integers
            let units = (2 * n + 8 * d) / (16 * d);
            (units.max(1) * 8) as u32
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpaceConfig {
    pub blocks: usize,
    pub op_labels: Vec<String>,
    pub expansion_widths: Vec<u32>,
    pub output_widths: Vec<u32>,
    pub stem_width: u32,
    pub se_optional: bool,
}

impl Default for ToySpaceConfig {
    fn default() -> Self {
        ToySpaceConfig {
            blocks: 4,
            op_labels: vec!["k3".into(), "k5".into(), "k7".into()],
            expansion_widths: vec![8, 16, 24, 32],
            output_widths: vec![16],
            stem_width: 16,
            se_optional: false,
        }
    }
}

/// Layer layout shared by the mobile-style spaces, plus the toy layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    /// Searchable layers per stage.
    pub stage_layers: Vec<usize>,
    /// Stride of the first layer of each stage.
    pub stage_strides: Vec<u32>,
    /// Hand-tuned per-stage filter sizes used by the plain ProxylessNAS-style space.
    pub handcrafted_filters: Vec<u32>,
    pub handcrafted_stem: u32,
    /// Base filter size of the stem when filters are derived by a doubling rule.
    pub stem_base: u32,
    pub head_filters: u32,
    pub multipliers: Vec<String>,
    pub toy: ToySpaceConfig,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig {
            stage_layers: vec![4; 5],
            stage_strides: vec![2, 2, 2, 1, 2],
            handcrafted_filters: vec![24, 40, 80, 96, 192],
            handcrafted_stem: 32,
            stem_base: 16,
            head_filters: 1280,
            multipliers: ["1/2", "5/8", "3/4", "1", "5/4", "3/2", "2"].iter().map(|s| s.to_string()).collect(),
            toy: ToySpaceConfig::default(),
        }
    }
}

impl LayoutConfig {
    pub fn parsed_multipliers(&self) -> Result<Vec<Ratio<u32>>> {
        if self.multipliers.is_empty() {
            return Err(Error::Config("filter multipliers must be nonempty".into()));
        }
        self.multipliers.iter().map(|s| parse_multiplier(s)).collect()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

pub fn build_space(kind: SpaceKind) -> Result<SearchSpace> {
    build_space_with(kind, &LayoutConfig::default())
}

pub fn build_space_with(kind: SpaceKind, layout: &LayoutConfig) -> Result<SearchSpace> {
    match kind {
        SpaceKind::Toy => build_toy(&layout.toy),
        _ => build_mobile(kind, layout),
    }
}

fn labelled(prefix: &str, values: &[u32]) -> Vec<String> {
    values.iter().map(|v| format!("{prefix}{v}")).collect()
}

fn build_mobile(kind: SpaceKind, layout: &LayoutConfig) -> Result<SearchSpace> {
    let stages = layout.stage_layers.len();
    if stages == 0 || layout.stage_strides.len() != stages {
        return Err(Error::Config("stage_layers and stage_strides must have the same nonzero length".into()));
    }
    if layout.stage_layers.contains(&0) {
        return Err(Error::Config("every stage needs at least one layer".into()));
    }
    let multipliers = layout.parsed_multipliers()?;
    let searched_filters = matches!(kind, SpaceKind::ProxylessnasEnlarged | SpaceKind::Mobilenetv3Like);
    let mobilenet_v3 = kind == SpaceKind::Mobilenetv3Like;

    let (rule, stem_base, stage_bases) = match kind {
        SpaceKind::Proxylessnas => {
            if layout.handcrafted_filters.len() != stages {
                return Err(Error::Config("handcrafted_filters needs one entry per stage".into()));
            }
            (FilterRule::Handcrafted, layout.handcrafted_stem, layout.handcrafted_filters.clone())
        }
        SpaceKind::DoublingBlock => (FilterRule::DoubleEveryStage, layout.stem_base, doubled(layout.stem_base, &layout.stage_strides, true)),
        _ => (FilterRule::DoubleAtStride2, layout.stem_base, doubled(layout.stem_base, &layout.stage_strides, false)),
    };

    let mut blocks = vec![BlockInfo {
        name: "stem".into(),
        stage: 0,
        stride: 2,
        base_filters: stem_base,
        skippable: false,
    }];
    let mut decisions: Vec<Decision> = Vec::new();
    let mut ties: Vec<Vec<usize>> = Vec::new();

    // The fixed stem is a strided convolution followed by one stride-1
    // expansion-1 bottleneck; both get searched widths when filters are searched.
    blocks.push(BlockInfo {
        name: "stem_ibn".into(),
        stage: 0,
        stride: 1,
        base_filters: stem_base,
        skippable: false,
    });
    if searched_filters {
        let widths = filter_choices(stem_base, &multipliers);
        decisions.push(Decision::new(DecisionKind::OutputFilters, "stem/filters", 0, labelled("f", &widths), widths.clone()));
        decisions.push(Decision::new(DecisionKind::OutputFilters, "stem_ibn/filters", 1, labelled("f", &widths), widths));
        if mobilenet_v3 {
            // the v3 stem bottleneck keeps its residual connection
            ties.push(vec![0, 1]);
        }
    }

    let expansions: Vec<u32> = if mobilenet_v3 { (1..=6).collect() } else { vec![3, 6] };
    let kernels = [3u32, 5, 7];

    for (s, (&layers, &stride)) in layout.stage_layers.iter().zip(&layout.stage_strides).enumerate() {
        let stage = s + 1;
        let base = stage_bases[s];
        let mut stage_filters = Vec::new();
        for layer in 0..layers {
            let block = blocks.len();
            let skippable = layer > 0;
            let name = format!("s{stage}l{layer}");
            blocks.push(BlockInfo {
                name: name.clone(),
                stage,
                stride: if layer == 0 { stride } else { 1 },
                base_filters: base,
                skippable,
            });
            let gate = if skippable {
                let id = decisions.len();
                decisions.push(Decision::new(DecisionKind::OpChoice, format!("{name}/op"), block, vec!["ibn".into(), "skip".into()], vec![1, 0]));
                Some(Gate { decision: id, choice: 0 })
            } else {
                None
            };
            let push = |decisions: &mut Vec<Decision>, d: Decision| {
                decisions.push(match gate {
                    Some(g) => d.gated(g),
                    None => d,
                });
            };
            push(&mut decisions, Decision::new(DecisionKind::Expansion, format!("{name}/expansion"), block, labelled("e", &expansions), expansions.clone()));
            push(&mut decisions, Decision::new(DecisionKind::Kernel, format!("{name}/kernel"), block, labelled("k", &kernels), kernels.to_vec()));
            if mobilenet_v3 {
                push(&mut decisions, Decision::new(DecisionKind::Se, format!("{name}/se"), block, vec!["se_off".into(), "se_on".into()], vec![0, 1]));
            }
            if searched_filters {
                let widths = filter_choices(base, &multipliers);
                stage_filters.push(decisions.len());
                push(&mut decisions, Decision::new(DecisionKind::OutputFilters, format!("{name}/filters"), block, labelled("f", &widths), widths));
            }
        }
        if stage_filters.len() > 1 {
            ties.push(stage_filters);
        }
    }

    let head = blocks.len();
    blocks.push(BlockInfo {
        name: "head".into(),
        stage: stages + 1,
        stride: 1,
        base_filters: layout.head_filters,
        skippable: false,
    });
    decisions.push(Decision::new(DecisionKind::Other, "head", head, vec!["fixed".into()], vec![layout.head_filters]));

    SearchSpace::new(kind.as_str(), decisions, ties, blocks, rule)
}

fn doubled(stem: u32, strides: &[u32], every_stage: bool) -> Vec<u32> {
    let mut base = stem;
    strides
        .iter()
        .map(|&s| {
            if every_stage || s == 2 {
                base *= 2;
            }
            base
        })
        .collect()
}

fn build_toy(cfg: &ToySpaceConfig) -> Result<SearchSpace> {
    if cfg.blocks == 0 || cfg.op_labels.is_empty() || cfg.expansion_widths.is_empty() || cfg.output_widths.is_empty() {
        return Err(Error::Config("toy space needs blocks, ops, expansion widths and output widths".into()));
    }
    let mut blocks = vec![BlockInfo {
        name: "stem".into(),
        stage: 0,
        stride: 1,
        base_filters: cfg.stem_width,
        skippable: false,
    }];
    let mut decisions = Vec::new();
    let max_out = *cfg.output_widths.iter().max().unwrap_or(&cfg.stem_width);
    for b in 0..cfg.blocks {
        let block = blocks.len();
        let name = format!("b{b}");
        blocks.push(BlockInfo {
            name: name.clone(),
            stage: b + 1,
            stride: 1,
            base_filters: max_out,
            skippable: false,
        });
        let op_values: Vec<u32> = (0..cfg.op_labels.len() as u32).collect();
        decisions.push(Decision::new(DecisionKind::OpChoice, format!("{name}/op"), block, cfg.op_labels.clone(), op_values));
        decisions.push(Decision::new(
            DecisionKind::Expansion,
            format!("{name}/expansion"),
            block,
            labelled("w", &cfg.expansion_widths),
            cfg.expansion_widths.clone(),
        ));
        if cfg.output_widths.len() > 1 {
            decisions.push(Decision::new(DecisionKind::OutputFilters, format!("{name}/filters"), block, labelled("f", &cfg.output_widths), cfg.output_widths.clone()));
        }
        if cfg.se_optional {
            decisions.push(Decision::new(DecisionKind::Se, format!("{name}/se"), block, vec!["se_off".into(), "se_on".into()], vec![0, 1]));
        }
    }
    SearchSpace::new("toy", decisions, vec![], blocks, FilterRule::Handcrafted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigUint;

    fn default_multipliers() -> Vec<Ratio<u32>> {
        LayoutConfig::default().parsed_multipliers().unwrap()
    }

    #[test]
    fn filter_choices_exact_products() {
        assert_eq!(filter_choices(64, &default_multipliers()), vec![32, 40, 48, 64, 80, 96, 128]);
    }

    #[test]
    fn filter_choices_identity() {
        assert_eq!(filter_choices(16, &[Ratio::from_integer(1)]), vec![16]);
    }

    #[test]
    fn filter_choices_ties_round_up_then_dedup() {
        // 8, 10→8, 12→16, 16, 20→24, 24, 32
        assert_eq!(filter_choices(16, &default_multipliers()), vec![8, 16, 24, 32]);
    }

    #[test]
    fn multiplier_parsing() {
        assert_eq!(parse_multiplier("5/8").unwrap(), Ratio::new(5, 8));
        assert_eq!(parse_multiplier("2").unwrap(), Ratio::from_integer(2));
        assert!(parse_multiplier("1/0").is_err());
        assert!(parse_multiplier("0").is_err());
        assert!(parse_multiplier("x").is_err());
    }

    #[test]
    fn per_layer_combination_counts() {
        let v3 = build_space(SpaceKind::Mobilenetv3Like).unwrap();
        let pl = build_space(SpaceKind::Proxylessnas).unwrap();
        // blocks 2..=21 are the searchable layers; stage 1 has base 32, whose
        // rounded multiples collapse to six distinct widths
        let v3_counts: Vec<u64> = (2..=21).map(|b| v3.layer_combinations(b)).collect();
        assert_eq!(v3_counts.iter().max(), Some(&252));
        assert_eq!(&v3_counts[..4], &[216; 4]);
        assert!(v3_counts[4..].iter().all(|&c| c == 252));
        for b in 2..=21 {
            assert_eq!(pl.layer_combinations(b), 6);
        }
    }

    #[test]
    fn toy_cardinality() {
        let toy = build_space(SpaceKind::Toy).unwrap();
        assert_eq!(toy.cardinality().exact, BigUint::from(20736u32));
        assert_eq!(toy.enumerate(super::super::ENUMERATION_LIMIT).unwrap().count(), 20736);
    }

    #[test]
    fn faithful_cardinalities_near_reported_orders() {
        for (kind, expected) in [
            (SpaceKind::Proxylessnas, 21.0),
            (SpaceKind::ProxylessnasEnlarged, 28.0),
            (SpaceKind::Mobilenetv3Like, 43.0),
        ] {
            let c = build_space(kind).unwrap().cardinality();
            assert!((c.log10 - expected).abs() <= 3.0, "{kind}: log10 {}", c.log10);
            println!("{kind}: log10 {:.2}", c.log10);
        }
    }

    #[test]
    fn doubling_variants_follow_their_rules() {
        let s2 = build_space(SpaceKind::DoublingStride2).unwrap();
        let bases: Vec<u32> = s2.block_layout().iter().filter(|b| b.stage >= 1 && b.name != "head").map(|b| b.base_filters).collect();
        assert_eq!(&bases[..4], &[32, 32, 32, 32]);
        let every = build_space(SpaceKind::DoublingBlock).unwrap();
        let last_stage: Vec<u32> = every.block_layout().iter().filter(|b| b.stage == 5).map(|b| b.base_filters).collect();
        assert_eq!(last_stage, vec![512; 4]);
        // same decisions as the plain space, so identical cardinality
        let plain = build_space(SpaceKind::Proxylessnas).unwrap();
        assert_eq!(plain.cardinality(), s2.cardinality());
    }

    #[test]
    fn broken_doubling_rule_is_rejected() {
        let s = build_space(SpaceKind::ProxylessnasEnlarged).unwrap();
        let mut blocks = s.block_layout().to_vec();
        blocks[2].base_filters = 48;
        let err = SearchSpace::new("x", s.decisions().to_vec(), s.filter_ties().to_vec(), blocks, s.filter_rule());
        assert!(err.is_err());
    }

    #[test]
    fn enlarged_ties_are_per_stage() {
        let s = build_space(SpaceKind::ProxylessnasEnlarged).unwrap();
        assert_eq!(s.filter_ties().len(), 5);
        assert!(s.filter_ties().iter().all(|g| g.len() == 4));
    }

    #[test]
    fn layout_from_toml() {
        let layout = LayoutConfig::from_toml("stage_layers = [2, 2]\nstage_strides = [2, 2]\nhandcrafted_filters = [24, 48]\n").unwrap();
        let s = build_space_with(SpaceKind::Proxylessnas, &layout).unwrap();
        // two stages of two layers: each stage has one skippable layer
        assert_eq!(s.cardinality().exact, BigUint::from(6u32 * 12 * 6 * 12));
        assert!(LayoutConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn kind_round_trip() {
        for k in SpaceKind::ALL {
            assert_eq!(k.as_str().parse::<SpaceKind>().unwrap(), k);
        }
        assert!("nope".parse::<SpaceKind>().is_err());
    }
}
