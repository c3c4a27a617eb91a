//! Flat parameter storage with a named, indexed layout.

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{SharingMode, SupernetConfig};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct PathIndex {
    pub expand_w: usize,
    pub expand_b: usize,
    pub project_w: usize,
    pub project_b: usize,
    /// Per-channel gate scale and shift, present when the block has an optional gate.
    pub gate: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpIndex {
    /// `(scale, shift)` per stage.
    pub stages: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockIndex {
    pub paths: Vec<PathIndex>,
    pub ops: Vec<OpIndex>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    pub stem_w: usize,
    pub stem_b: usize,
    pub blocks: Vec<BlockIndex>,
    pub head_w: usize,
    pub head_b: usize,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
}

impl ParamLayout {
    pub fn new(cfg: &SupernetConfig) -> Self {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            names.push(name);
            shapes.push(shape);
            names.len() - 1
        };
        let stem_w = add("stem/w".into(), vec![cfg.input_dim, cfg.stem_width]);
        let stem_b = add("stem/b".into(), vec![cfg.stem_width]);
        let mut blocks = Vec::new();
        for (b, spec) in cfg.blocks.iter().enumerate() {
            let e = spec.max_expansion_width;
            let o = spec.max_output_width();
            let paths = (0..cfg.num_paths(b))
                .map(|p| {
                    let tag = match cfg.sharing {
                        SharingMode::Collapsed => format!("block{b}"),
                        SharingMode::PerPath => format!("block{b}/path{p}"),
                    };
                    PathIndex {
                        expand_w: add(format!("{tag}/expand/w"), vec![spec.input_width, e]),
                        expand_b: add(format!("{tag}/expand/b"), vec![e]),
                        project_w: add(format!("{tag}/project/w"), vec![e, o]),
                        project_b: add(format!("{tag}/project/b"), vec![o]),
                        gate: spec.se_optional.then(|| (add(format!("{tag}/gate/scale"), vec![e]), add(format!("{tag}/gate/shift"), vec![e]))),
                    }
                })
                .collect();
            let ops = spec
                .middle_ops
                .iter()
                .enumerate()
                .map(|(k, op)| OpIndex {
                    stages: (0..op.stages)
                        .map(|j| (add(format!("block{b}/op{k}/stage{j}/scale"), vec![e]), add(format!("block{b}/op{k}/stage{j}/shift"), vec![e])))
                        .collect(),
                })
                .collect();
            blocks.push(BlockIndex { paths, ops });
        }
        let head_w = add("head/w".into(), vec![cfg.final_width(), cfg.num_classes]);
        let head_b = add("head/b".into(), vec![cfg.num_classes]);
        ParamLayout {
            stem_w,
            stem_b,
            blocks,
            head_w,
            head_b,
            names,
            shapes,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Weight matrices, op scales and gate scales carry L2; biases and shifts do not.
    pub fn is_regularized(&self, index: usize) -> bool {
        let n = &self.names[index];
        n.ends_with("/w") || n.ends_with("/scale")
    }

    pub fn zeros<F: Scalar>(&self) -> Params<F> {
        Params {
            tensors: self.shapes.iter().map(|s| ArrayD::zeros(IxDyn(s))).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<F> {
    pub tensors: Vec<ArrayD<F>>,
}

impl<F: Scalar> Params<F> {
    /// Fan-in scaled normal weights, head stddev 0.01, zero biases and
    /// op stages near the identity-like `tanh(x)`.
    pub fn init(layout: &ParamLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut p = layout.zeros::<F>();
        for (i, t) in p.tensors.iter_mut().enumerate() {
            let name = &layout.names[i];
            let shape = &layout.shapes[i];
            let (mean, std) = if i == layout.head_w {
                (0.0, 0.01)
            } else if name.ends_with("/w") {
                (0.0, 1.0 / (shape[0] as f64).sqrt())
            } else if name.contains("/stage") && name.ends_with("/scale") {
                (1.0, 0.3)
            } else if name.ends_with("/shift") && name.contains("/stage") {
                (0.0, 0.1)
            } else if name.ends_with("gate/scale") {
                (0.0, 0.5)
            } else {
                (0.0, 0.0)
            };
            for x in t.iter_mut() {
                *x = F::lit(mean + std * normal.sample(&mut rng));
            }
        }
        p
    }

    pub fn mat(&self, i: usize) -> ArrayView2<'_, F> {
        self.tensors[i].view().into_dimensionality::<Ix2>().expect("matrix parameter")
    }

    pub fn vec(&self, i: usize) -> ArrayView1<'_, F> {
        self.tensors[i].view().into_dimensionality::<Ix1>().expect("vector parameter")
    }

    pub fn mat_mut(&mut self, i: usize) -> ArrayViewMut2<'_, F> {
        self.tensors[i].view_mut().into_dimensionality::<Ix2>().expect("matrix parameter")
    }

    pub fn vec_mut(&mut self, i: usize) -> ArrayViewMut1<'_, F> {
        self.tensors[i].view_mut().into_dimensionality::<Ix1>().expect("vector parameter")
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}
