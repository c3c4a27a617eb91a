//! A single architecture sliced out of the shared weights.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::net::BlockPlan;
use super::params::{ParamLayout, Params};
use super::SupernetConfig;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct StandaloneBlock<F> {
    pub expand_w: Array2<F>,
    pub expand_b: Array1<F>,
    pub stages: Vec<(Array1<F>, Array1<F>)>,
    pub gate: Option<(Array1<F>, Array1<F>)>,
    pub project_w: Array2<F>,
    pub project_b: Array1<F>,
    pub residual: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StandaloneModel<F> {
    pub stem_w: Array2<F>,
    pub stem_b: Array1<F>,
    pub blocks: Vec<StandaloneBlock<F>>,
    pub head_w: Array2<F>,
    pub head_b: Array1<F>,
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Scalar> StandaloneModel<F> {
    pub(crate) fn extract(cfg: &SupernetConfig, layout: &ParamLayout, params: &Params<F>, plans: &[BlockPlan], ops: &[usize]) -> Self {
        let blocks = plans
            .iter()
            .zip(ops)
            .enumerate()
            .map(|(b, (plan, &op))| {
                let path = &layout.blocks[b].paths[plan.groups[0].0];
                let (e, o) = (plan.exp_w, plan.out_w);
                StandaloneBlock {
                    expand_w: params.mat(path.expand_w).slice(s![..plan.in_w, ..e]).to_owned(),
                    expand_b: params.vec(path.expand_b).slice(s![..e]).to_owned(),
                    stages: layout.blocks[b].ops[op]
                        .stages
                        .iter()
                        .map(|&(a, c)| (params.vec(a).slice(s![..e]).to_owned(), params.vec(c).slice(s![..e]).to_owned()))
                        .collect(),
                    gate: match (plan.gate, path.gate) {
                        (true, Some((u, t))) => Some((params.vec(u).slice(s![..e]).to_owned(), params.vec(t).slice(s![..e]).to_owned())),
                        _ => None,
                    },
                    project_w: params.mat(path.project_w).slice(s![..e, ..o]).to_owned(),
                    project_b: params.vec(path.project_b).slice(s![..o]).to_owned(),
                    residual: plan.residual,
                }
            })
            .collect();
        let last = plans.last().map(|p| p.out_w).unwrap_or(cfg.stem_width);
        StandaloneModel {
            stem_w: params.mat(layout.stem_w).to_owned(),
            stem_b: params.vec(layout.stem_b).to_owned(),
            blocks,
            head_w: params.mat(layout.head_w).slice(s![..last, ..]).to_owned(),
            head_b: params.vec(layout.head_b).to_owned(),
        }
    }

    pub fn forward(&self, x: &ArrayView2<F>) -> Array2<F> {
        let mut h = (x.dot(&self.stem_w) + &self.stem_b).mapv(|v| v * sigmoid(v));
        for blk in &self.blocks {
            let mut m = (h.dot(&blk.expand_w) + &blk.expand_b).mapv(|v| v * sigmoid(v));
            for (a, c) in &blk.stages {
                m = (&m * a + c).mapv(|v| v.tanh());
            }
            if let Some((u, t)) = &blk.gate {
                let w = F::from_usize_lossy(m.ncols());
                let pooled = m.sum_axis(Axis(1)).mapv(|v| v / w);
                let g = (&pooled.view().insert_axis(Axis(1)) * u + t).mapv(sigmoid);
                m = &m * &g;
            }
            let mut out = m.dot(&blk.project_w) + &blk.project_b;
            if blk.residual {
                out += &h;
            }
            h = out;
        }
        h.dot(&self.head_w) + &self.head_b
    }

    pub fn predict(&self, x: &ArrayView2<F>) -> Vec<usize> {
        argmax_rows(&self.forward(x))
    }

    pub fn accuracy(&self, x: &ArrayView2<F>, labels: &[usize]) -> f64 {
        accuracy(&self.forward(x), labels)
    }

    pub fn num_params(&self) -> usize {
        let blocks: usize = self
            .blocks
            .iter()
            .map(|b| {
                b.expand_w.len() + b.expand_b.len() + b.stages.iter().map(|(a, c)| a.len() + c.len()).sum::<usize>() + b.gate.as_ref().map_or(0, |(u, t)| u.len() + t.len()) + b.project_w.len() + b.project_b.len()
            })
            .sum();
        self.stem_w.len() + self.stem_b.len() + blocks + self.head_w.len() + self.head_b.len()
    }
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows<F: Scalar>(logits: &Array2<F>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}
