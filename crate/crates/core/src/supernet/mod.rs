//! Miniature one-shot model over the toy search space.
//!
//! Each choice block is `expand → middle op → optional gate → project`, with
//! dense maps standing in for 1×1 convolutions and stacks of per-channel
//! `tanh` stages standing in for depthwise kernels. Smaller widths are
//! simulated by zeroing trailing channels of maximally sized tensors.

pub mod data;
mod net;
pub mod params;
pub mod standalone;
pub mod train;


use std::fmt;
use std::str::FromStr;

use ndarray::{Array, Axis, Dimension, Slice};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::space::{Architecture, DecisionKind, SearchSpace};

pub use data::{Dataset, DatasetConfig};
pub use net::{RetentionProbe, WarmupDraw};
pub use params::{ParamLayout, Params};
pub use standalone::StandaloneModel;
pub use train::{cosine_lr, train_fixed, Checkpoint, Gradients, PassOptions, SupernetState, TrainHyper};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    /// Expand and project maps shared by every middle op of a block.
    #[default]
    Collapsed,
    /// Every middle op owns its own expand and project maps.
    PerPath,
}

impl fmt::Display for SharingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SharingMode::Collapsed => "collapsed",
            SharingMode::PerPath => "per_path",
        })
    }
}

impl FromStr for SharingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "collapsed" => Ok(SharingMode::Collapsed),
            "per_path" | "per-path" => Ok(SharingMode::PerPath),
            other => Err(Error::Config(format!("unknown sharing mode `{other}`"))),
        }
    }
}

/// Probability of enabling all ops / all channels, decaying linearly to 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub fraction: f64,
    pub ops: bool,
    pub filters: bool,
}

impl Default for WarmupSchedule {
    fn default() -> Self {
        WarmupSchedule {
            fraction: 0.25,
            ops: true,
            filters: true,
        }
    }
}

impl WarmupSchedule {
    pub fn new(fraction: f64, ops: bool, filters: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("warmup fraction must lie in [0, 1), got {fraction}")));
        }
        Ok(WarmupSchedule { fraction, ops, filters })
    }

    pub fn disabled() -> Self {
        WarmupSchedule {
            fraction: 0.25,
            ops: false,
            filters: false,
        }
    }

    /// Parses `none`, `ops`, `filters` or `both`.
    pub fn from_flag(flag: &str) -> Result<Self> {
        let (ops, filters) = match flag {
            "none" => (false, false),
            "ops" => (true, false),
            "filters" => (false, true),
            "both" => (true, true),
            other => return Err(Error::Config(format!("unknown warmup setting `{other}`"))),
        };
        Self::new(0.25, ops, filters)
    }

    pub fn flag(&self) -> &'static str {
        match (self.ops, self.filters) {
            (false, false) => "none",
            (true, false) => "ops",
            (false, true) => "filters",
            (true, true) => "both",
        }
    }

    pub fn op_prob(&self, step: u64, total_steps: u64) -> f64 {
        if self.ops {
            warmup_prob(self, step, total_steps)
        } else {
            0.0
        }
    }

    pub fn filter_prob(&self, step: u64, total_steps: u64) -> f64 {
        if self.filters {
            warmup_prob(self, step, total_steps)
        } else {
            0.0
        }
    }
}

/// `p = 1 − step / (fraction · total)` until it reaches 0.
pub fn warmup_prob(schedule: &WarmupSchedule, step: u64, total_steps: u64) -> f64 {
    let end = schedule.fraction * total_steps as f64;
    let s = step as f64;
    if s >= end {
        0.0
    } else {
        1.0 - s / end
    }
}

/// Zeroes every channel (last axis) at or beyond `active`.
pub fn mask_channels<F: Scalar, D: Dimension>(a: &Array<F, D>, active: usize) -> Array<F, D> {
    let mut out = a.clone();
    zero_tail(&mut out, active);
    out
}

pub(crate) fn zero_tail<F: Scalar, D: Dimension>(a: &mut Array<F, D>, active: usize) {
    let axis = Axis(a.ndim() - 1);
    let width = a.len_of(axis);
    if active < width {
        a.slice_axis_mut(axis, Slice::from(active..)).fill(F::zero());
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpSpec {
    pub label: String,
    /// Number of stacked per-channel `tanh` stages.
    pub stages: usize,
}

impl OpSpec {
    /// `k3 → 1`, `k5 → 2`, `k7 → 3`; anything else gets `fallback` stages.
    pub fn from_label(label: &str, fallback: usize) -> Self {
        let stages = label
            .strip_prefix('k')
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|k| *k >= 3 && k % 2 == 1)
            .map(|k| (k - 1) / 2)
            .unwrap_or(fallback);
        OpSpec {
            label: label.to_string(),
            stages,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceBlockSpec {
    pub input_width: usize,
    pub max_expansion_width: usize,
    pub expansion_choices: Vec<usize>,
    pub middle_ops: Vec<OpSpec>,
    pub output_filter_choices: Vec<usize>,
    pub se_optional: bool,
    /// Add the block input when its width equals the chosen output width.
    pub residual: bool,
}

impl ChoiceBlockSpec {
    pub fn max_output_width(&self) -> usize {
        self.output_filter_choices.iter().copied().max().unwrap_or(0)
    }
}

/// Decision ids feeding one choice block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockBinding {
    pub op: Option<usize>,
    pub expansion: Option<usize>,
    pub filters: Option<usize>,
    pub se: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockChoice {
    pub op: usize,
    pub expansion: usize,
    pub output: usize,
    pub se: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupernetConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub stem_width: usize,
    pub blocks: Vec<ChoiceBlockSpec>,
    pub bindings: Vec<BlockBinding>,
    pub sharing: SharingMode,
    pub num_decisions: usize,
}

impl SupernetConfig {
    /// Derives the network from a toy space: every block after the stem is a choice block.
    pub fn from_space(space: &SearchSpace, input_dim: usize, num_classes: usize, sharing: SharingMode) -> Result<Self> {
        let layout = space.block_layout();
        let stem_width = layout.first().map(|b| b.base_filters as usize).ok_or_else(|| Error::InvalidSpace("space has no stem block".into()))?;
        let mut blocks = Vec::new();
        let mut bindings = Vec::new();
        let mut input_width = stem_width;
        for b in 1..layout.len() {
            let mut binding = BlockBinding {
                op: None,
                expansion: None,
                filters: None,
                se: None,
            };
            for d in space.decisions().iter().filter(|d| d.block_index == b) {
                let slot = match d.kind {
                    DecisionKind::OpChoice => &mut binding.op,
                    DecisionKind::Expansion => &mut binding.expansion,
                    DecisionKind::OutputFilters => &mut binding.filters,
                    DecisionKind::Se => &mut binding.se,
                    _ => return Err(Error::InvalidSpace(format!("decision `{}` has no role in the supernet", d.name))),
                };
                if slot.replace(d.id).is_some() {
                    return Err(Error::InvalidSpace(format!("block {b} has two {} decisions", d.kind.as_str())));
                }
            }
            let widths = |id: Option<usize>, default: usize| -> Vec<usize> {
                id.map(|i| space.decision(i).values.iter().map(|&v| v as usize).collect()).unwrap_or_else(|| vec![default])
            };
            let expansion_choices = widths(binding.expansion, input_width);
            let output_filter_choices = widths(binding.filters, layout[b].base_filters as usize);
            let middle_ops = match binding.op {
                Some(i) => space.decision(i).labels.iter().enumerate().map(|(k, l)| OpSpec::from_label(l, k + 1)).collect(),
                None => vec![OpSpec::from_label("k3", 1)],
            };
            let spec = ChoiceBlockSpec {
                input_width,
                max_expansion_width: expansion_choices.iter().copied().max().unwrap_or(0),
                expansion_choices,
                middle_ops,
                output_filter_choices,
                se_optional: binding.se.is_some(),
                residual: true,
            };
            input_width = spec.max_output_width();
            blocks.push(spec);
            bindings.push(binding);
        }
        let cfg = SupernetConfig {
            input_dim,
            num_classes,
            stem_width,
            blocks,
            bindings,
            sharing,
            num_decisions: space.num_decisions(),
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 || self.stem_width == 0 || self.blocks.is_empty() {
            return Err(Error::Config("supernet needs inputs, at least two classes, a stem and one block".into()));
        }
        for (b, s) in self.blocks.iter().enumerate() {
            if s.expansion_choices.is_empty() || s.middle_ops.is_empty() || s.output_filter_choices.is_empty() {
                return Err(Error::Config(format!("block {b}: choice lists must be nonempty")));
            }
            if s.expansion_choices.iter().any(|&w| w == 0 || w > s.max_expansion_width) {
                return Err(Error::Config(format!("block {b}: expansion widths must lie in 1..={}", s.max_expansion_width)));
            }
            if s.output_filter_choices.contains(&0) || s.middle_ops.iter().any(|o| o.stages == 0) {
                return Err(Error::Config(format!("block {b}: zero-sized output width or op")));
            }
        }
        Ok(())
    }

    pub fn num_paths(&self, block: usize) -> usize {
        match self.sharing {
            SharingMode::Collapsed => 1,
            SharingMode::PerPath => self.blocks[block].middle_ops.len(),
        }
    }

    pub fn final_width(&self) -> usize {
        self.blocks.last().map(|b| b.max_output_width()).unwrap_or(self.stem_width)
    }

    /// Reads the per-block choices out of an architecture.
    pub fn resolve(&self, arch: &Architecture) -> Result<Vec<BlockChoice>> {
        if arch.choices.len() != self.num_decisions {
            return Err(Error::Shape(format!("architecture has {} choices, supernet expects {}", arch.choices.len(), self.num_decisions)));
        }
        let pick = |id: Option<usize>, n: usize| -> Result<usize> {
            match id {
                None => Ok(0),
                Some(i) if arch.choices[i] < n => Ok(arch.choices[i]),
                Some(i) => Err(Error::Shape(format!("choice {} of decision {i} exceeds {n} options", arch.choices[i]))),
            }
        };
        self.blocks
            .iter()
            .zip(&self.bindings)
            .map(|(spec, bind)| {
                Ok(BlockChoice {
                    op: pick(bind.op, spec.middle_ops.len())?,
                    expansion: spec.expansion_choices[pick(bind.expansion, spec.expansion_choices.len())?],
                    output: spec.output_filter_choices[pick(bind.filters, spec.output_filter_choices.len())?],
                    se: pick(bind.se, 2)? == 1,
                })
            })
            .collect()
    }
}
