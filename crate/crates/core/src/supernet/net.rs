//! Forward and reverse passes through the supernet, with optional
//! rematerialization of per-op intermediates.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamLayout, Params};
use super::{zero_tail, BlockChoice, SharingMode, SupernetConfig};
use crate::scalar::Scalar;

/// Outcome of the warmup coin flips for one forward pass: one joint draw for
/// all widths, one draw per block for ops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WarmupDraw {
    pub all_filters: bool,
    pub all_ops: Vec<bool>,
}

impl WarmupDraw {
    pub fn off(blocks: usize) -> Self {
        WarmupDraw {
            all_filters: false,
            all_ops: vec![false; blocks],
        }
    }

    pub fn sample(p_op: f64, p_filter: f64, blocks: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all_filters = rng.random::<f64>() < p_filter;
        let all_ops = (0..blocks).map(|_| rng.random::<f64>() < p_op).collect();
        WarmupDraw { all_filters, all_ops }
    }
}

/// Tensors kept alive by the forward pass for the backward pass, per block.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RetentionProbe {
    pub retained: Vec<usize>,
    /// Largest number of recomputed tensors alive at once during the backward pass.
    pub recompute_peak: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct BlockPlan {
    pub in_w: usize,
    pub exp_w: usize,
    pub out_w: usize,
    pub gate: bool,
    pub residual: bool,
    /// `(path, ops)`: collapsed blocks have one path running every enabled op.
    pub groups: Vec<(usize, Vec<usize>)>,
}

pub(crate) fn plan(cfg: &SupernetConfig, choices: &[BlockChoice], draw: &WarmupDraw) -> Vec<BlockPlan> {
    let mut in_w = cfg.stem_width;
    cfg.blocks
        .iter()
        .zip(choices)
        .enumerate()
        .map(|(b, (spec, c))| {
            let (exp_w, out_w) = if draw.all_filters {
                (spec.max_expansion_width, spec.max_output_width())
            } else {
                (c.expansion, c.output)
            };
            let ops: Vec<usize> = if draw.all_ops[b] { (0..spec.middle_ops.len()).collect() } else { vec![c.op] };
            let groups = match cfg.sharing {
                SharingMode::Collapsed => vec![(0, ops)],
                SharingMode::PerPath => ops.into_iter().map(|k| (k, vec![k])).collect(),
            };
            let p = BlockPlan {
                in_w,
                exp_w,
                out_w,
                gate: c.se,
                residual: spec.residual && in_w == out_w,
                groups,
            };
            in_w = out_w;
            p
        })
        .collect()
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn silu<F: Scalar>(x: F) -> F {
    x * sigmoid(x)
}

fn silu_grad<F: Scalar>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

fn affine<F: Scalar>(x: &ArrayView2<F>, w: ArrayView2<F>, b: ndarray::ArrayView1<F>) -> Array2<F> {
    x.dot(&w) + b
}

pub(crate) struct GroupTrace<F> {
    z: Array2<F>,
    e: Array2<F>,
    /// Stage outputs per op, empty when rematerializing.
    stages: Vec<Vec<Array2<F>>>,
    m: Array2<F>,
    gate: Option<(Array1<F>, Array2<F>)>,
    q: Array2<F>,
}

impl<F> GroupTrace<F> {
    fn tensor_count(&self) -> usize {
        4 + if self.gate.is_some() { 2 } else { 0 } + self.stages.iter().map(Vec::len).sum::<usize>()
    }
}

pub(crate) struct BlockTape<F> {
    input: Array2<F>,
    groups: Option<Vec<GroupTrace<F>>>,
}

pub(crate) struct Tape<F> {
    stem_z: Array2<F>,
    blocks: Vec<BlockTape<F>>,
    head_in: Array2<F>,
}

#[cfg(test)]
impl<F: Scalar> Tape<F> {
    pub fn expand_activations(&self, block: usize) -> Option<&Array2<F>> {
        self.blocks[block].groups.as_ref().map(|g| &g[0].e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Record {
    Nothing,
    Full,
    Remat,
}

pub(crate) struct Net<'a, F> {
    pub layout: &'a ParamLayout,
    pub params: &'a Params<F>,
}

impl<F: Scalar> Net<'_, F> {
    fn op_forward(&self, b: usize, k: usize, e: &Array2<F>) -> Vec<Array2<F>> {
        let mut out: Vec<Array2<F>> = Vec::new();
        for &(a, c) in &self.layout.blocks[b].ops[k].stages {
            let prev = out.last().unwrap_or(e);
            let t = (prev * &self.params.vec(a) + self.params.vec(c)).mapv(|x| x.tanh());
            out.push(t);
        }
        out
    }

    fn group_forward(&self, b: usize, plan: &BlockPlan, path: usize, ops: &[usize], h: &Array2<F>, keep: bool) -> (GroupTrace<F>, Array2<F>) {
        let p = &self.layout.blocks[b].paths[path];
        let z = affine(&h.view(), self.params.mat(p.expand_w), self.params.vec(p.expand_b));
        let mut e = z.mapv(silu);
        zero_tail(&mut e, plan.exp_w);
        let mut stages = Vec::new();
        let mut acc: Option<Array2<F>> = None;
        for &k in ops {
            let st = self.op_forward(b, k, &e);
            let mut mk = st.last().expect("op has stages").clone();
            zero_tail(&mut mk, plan.exp_w);
            acc = Some(match acc {
                None => mk,
                Some(a) => a + &mk,
            });
            if keep {
                stages.push(st);
            }
        }
        let mut m = acc.expect("group has ops");
        if ops.len() > 1 {
            let n = F::from_usize_lossy(ops.len());
            m.mapv_inplace(|x| x / n);
        }
        let (gate, q) = match (plan.gate, p.gate) {
            (true, Some((u, t))) => {
                let w = F::from_usize_lossy(plan.exp_w);
                let pooled = m.sum_axis(Axis(1)).mapv(|x| x / w);
                let col = pooled.view().insert_axis(Axis(1));
                let g = (&col * &self.params.vec(u) + self.params.vec(t)).mapv(sigmoid);
                let mut q = &m * &g;
                zero_tail(&mut q, plan.exp_w);
                (Some((pooled, g)), q)
            }
            _ => (None, m.clone()),
        };
        let mut y = affine(&q.view(), self.params.mat(p.project_w), self.params.vec(p.project_b));
        zero_tail(&mut y, plan.out_w);
        (GroupTrace { z, e, stages, m, gate, q }, y)
    }

    fn block_forward(&self, b: usize, plan: &BlockPlan, h: &Array2<F>, keep: bool) -> (Array2<F>, Vec<GroupTrace<F>>) {
        let mut traces = Vec::new();
        let mut acc: Option<Array2<F>> = None;
        for (path, ops) in &plan.groups {
            let (trace, y) = self.group_forward(b, plan, *path, ops, h, keep);
            acc = Some(match acc {
                None => y,
                Some(a) => a + &y,
            });
            if keep {
                traces.push(trace);
            }
        }
        let mut out = acc.expect("block has groups");
        if plan.groups.len() > 1 {
            let n = F::from_usize_lossy(plan.groups.len());
            out.mapv_inplace(|x| x / n);
        }
        if plan.residual {
            let w = plan.in_w;
            let mut head = out.slice_mut(s![.., ..w]);
            head += &h.slice(s![.., ..w]);
        }
        (out, traces)
    }

    /// Logits and, when requested, the tape for the reverse pass.
    pub fn forward(&self, plans: &[BlockPlan], x: &ArrayView2<F>, record: Record, mut probe: Option<&mut RetentionProbe>) -> (Array2<F>, Option<Tape<F>>) {
        let stem_z = affine(x, self.params.mat(self.layout.stem_w), self.params.vec(self.layout.stem_b));
        let mut h = stem_z.mapv(silu);
        let mut tapes = Vec::new();
        if let Some(p) = probe.as_deref_mut() {
            p.retained.clear();
        }
        for (b, plan) in plans.iter().enumerate() {
            let keep = record == Record::Full;
            let (out, traces) = self.block_forward(b, plan, &h, keep);
            if let Some(p) = probe.as_deref_mut() {
                // block input and block output, plus whatever the groups kept
                p.retained.push(2 + traces.iter().map(GroupTrace::tensor_count).sum::<usize>());
            }
            if record != Record::Nothing {
                tapes.push(BlockTape {
                    input: h,
                    groups: keep.then_some(traces),
                });
            }
            h = out;
        }
        let logits = affine(&h.view(), self.params.mat(self.layout.head_w), self.params.vec(self.layout.head_b));
        let tape = (record != Record::Nothing).then(|| Tape {
            stem_z,
            blocks: tapes,
            head_in: h,
        });
        (logits, tape)
    }

    /// Accumulates parameter gradients of a loss whose logit gradient is `dlogits`.
    pub fn backward(&self, plans: &[BlockPlan], x: &ArrayView2<F>, tape: Tape<F>, dlogits: &Array2<F>, grads: &mut Params<F>, mut probe: Option<&mut RetentionProbe>) {
        let l = self.layout;
        add_mat(grads, l.head_w, &tape.head_in.t().dot(dlogits));
        add_vec(grads, l.head_b, &dlogits.sum_axis(Axis(0)));
        let mut dh = dlogits.dot(&self.params.mat(l.head_w).t());
        if let Some(p) = probe.as_deref_mut() {
            p.recompute_peak = vec![0; plans.len()];
        }
        for (b, (plan, bt)) in plans.iter().zip(tape.blocks).enumerate().rev() {
            let h = bt.input;
            let mut dh_in = Array2::zeros(h.raw_dim());
            if plan.residual {
                let w = plan.in_w;
                let mut head = dh_in.slice_mut(s![.., ..w]);
                head += &dh.slice(s![.., ..w]);
            }
            if plan.groups.len() > 1 {
                let n = F::from_usize_lossy(plan.groups.len());
                dh.mapv_inplace(|x| x / n);
            }
            let mut stored = bt.groups.map(Vec::into_iter);
            for (path, ops) in &plan.groups {
                let (trace, recomputed) = match stored.as_mut() {
                    Some(it) => (it.next().expect("trace per group"), false),
                    None => (self.group_forward(b, plan, *path, ops, &h, false).0, true),
                };
                let peak = self.group_backward(b, plan, *path, ops, &h, trace, recomputed, &dh, &mut dh_in, grads);
                if let Some(p) = probe.as_deref_mut() {
                    p.recompute_peak[b] = p.recompute_peak[b].max(peak);
                }
            }
            dh = dh_in;
        }
        let dz = &dh * &tape.stem_z.mapv(silu_grad);
        add_mat(grads, l.stem_w, &x.t().dot(&dz));
        add_vec(grads, l.stem_b, &dz.sum_axis(Axis(0)));
    }

    /// Returns the peak number of recomputed tensors alive at once.
    #[allow(clippy::too_many_arguments)]
    fn group_backward(
        &self,
        b: usize,
        plan: &BlockPlan,
        path: usize,
        ops: &[usize],
        h: &Array2<F>,
        trace: GroupTrace<F>,
        recomputed: bool,
        dy: &Array2<F>,
        dh_in: &mut Array2<F>,
        grads: &mut Params<F>,
    ) -> usize {
        let p = &self.layout.blocks[b].paths[path];
        let mut dyv = dy.clone();
        zero_tail(&mut dyv, plan.out_w);
        add_mat(grads, p.project_w, &trace.q.t().dot(&dyv));
        add_vec(grads, p.project_b, &dyv.sum_axis(Axis(0)));
        let mut dq = dyv.dot(&self.params.mat(p.project_w).t());
        zero_tail(&mut dq, plan.exp_w);

        let mut dm = match (&trace.gate, p.gate) {
            (Some((pooled, g)), Some((u, _))) => {
                let mut dm = &dq * g;
                let dpre = &dq * &trace.m * &g.mapv(|v| v * (F::one() - v));
                add_vec(grads, u, &dpre.t().dot(pooled));
                add_vec(grads, p.gate.expect("gate").1, &dpre.sum_axis(Axis(0)));
                let w = F::from_usize_lossy(plan.exp_w);
                let dpool = dpre.dot(&self.params.vec(u)).mapv(|v| v / w);
                dm += &dpool.view().insert_axis(Axis(1));
                dm
            }
            _ => dq,
        };
        zero_tail(&mut dm, plan.exp_w);
        if ops.len() > 1 {
            let n = F::from_usize_lossy(ops.len());
            dm.mapv_inplace(|x| x / n);
        }

        let base = trace.tensor_count();
        let mut peak = if recomputed { base } else { 0 };
        let mut de = Array2::zeros(trace.e.raw_dim());
        let mut stored = trace.stages.into_iter();
        for &k in ops {
            let stages = if recomputed { self.op_forward(b, k, &trace.e) } else { stored.next().expect("stages per op") };
            if recomputed {
                peak = peak.max(base + stages.len());
            }
            let mut dt = dm.clone();
            for (j, &(a, c)) in self.layout.blocks[b].ops[k].stages.iter().enumerate().rev() {
                let input = if j == 0 { &trace.e } else { &stages[j - 1] };
                let du = &dt * &stages[j].mapv(|v| F::one() - v * v);
                add_vec(grads, a, &(&du * input).sum_axis(Axis(0)));
                add_vec(grads, c, &du.sum_axis(Axis(0)));
                dt = &du * &self.params.vec(a);
            }
            de += &dt;
        }
        zero_tail(&mut de, plan.exp_w);
        let dz = &de * &trace.z.mapv(silu_grad);
        add_mat(grads, p.expand_w, &h.t().dot(&dz));
        add_vec(grads, p.expand_b, &dz.sum_axis(Axis(0)));
        *dh_in += &dz.dot(&self.params.mat(p.expand_w).t());
        peak
    }
}

fn add_mat<F: Scalar>(grads: &mut Params<F>, i: usize, g: &Array2<F>) {
    let mut t = grads.mat_mut(i);
    t += g;
}

fn add_vec<F: Scalar>(grads: &mut Params<F>, i: usize, g: &Array1<F>) {
    let mut t = grads.vec_mut(i);
    t += g;
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub(crate) fn cross_entropy<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> (F, Array2<F>) {
    let n = F::from_usize_lossy(labels.len());
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = F::zero();
    for (i, row) in logits.outer_iter().enumerate() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
        loss = loss + lse - row[labels[i]];
        for (j, &v) in row.iter().enumerate() {
            grad[[i, j]] = (v - lse).exp() / n;
        }
        grad[[i, labels[i]]] -= F::one() / n;
    }
    (loss / n, grad)
}

/// Prefix slice `[..rows, ..cols]` of a regularized tensor used by a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) struct Region {
    pub tensor: usize,
    pub rows: usize,
    pub cols: Option<usize>,
}

/// Tensors read by a forward pass under `plans`, and the regularized regions among them.
pub(crate) fn usage(cfg: &SupernetConfig, layout: &ParamLayout, plans: &[BlockPlan]) -> (Vec<bool>, Vec<Region>) {
    let mut touched = vec![false; layout.len()];
    let mut regions = vec![Region {
        tensor: layout.stem_w,
        rows: cfg.input_dim,
        cols: Some(cfg.stem_width),
    }];
    for t in [layout.stem_w, layout.stem_b, layout.head_w, layout.head_b] {
        touched[t] = true;
    }
    for (b, plan) in plans.iter().enumerate() {
        for (path, ops) in &plan.groups {
            let p = &layout.blocks[b].paths[*path];
            for t in [p.expand_w, p.expand_b, p.project_w, p.project_b] {
                touched[t] = true;
            }
            regions.push(Region {
                tensor: p.expand_w,
                rows: plan.in_w,
                cols: Some(plan.exp_w),
            });
            regions.push(Region {
                tensor: p.project_w,
                rows: plan.exp_w,
                cols: Some(plan.out_w),
            });
            if let (true, Some((u, t))) = (plan.gate, p.gate) {
                touched[u] = true;
                touched[t] = true;
                regions.push(Region {
                    tensor: u,
                    rows: plan.exp_w,
                    cols: None,
                });
            }
            for &k in ops {
                for &(a, c) in &layout.blocks[b].ops[k].stages {
                    touched[a] = true;
                    touched[c] = true;
                    regions.push(Region {
                        tensor: a,
                        rows: plan.exp_w,
                        cols: None,
                    });
                }
            }
        }
    }
    let last = plans.last().map(|p| p.out_w).unwrap_or(cfg.stem_width);
    regions.push(Region {
        tensor: layout.head_w,
        rows: last,
        cols: Some(cfg.num_classes),
    });
    (touched, regions)
}
