//! Supernet state, SGD training and quality estimation.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array2, ArrayD, ArrayView2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::net::{self, BlockPlan, Net, Record, Region, RetentionProbe, WarmupDraw};
use super::params::{ParamLayout, Params};
use super::standalone::{accuracy, StandaloneModel};
use super::{SharingMode, SupernetConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::space::Architecture;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub base_lr: f64,
    pub total_steps: u64,
    pub warmup_fraction: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            base_lr: 0.1,
            total_steps: 1000,
            warmup_fraction: 0.025,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
        }
    }
}

/// Linear warmup to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn cosine_lr(h: &TrainHyper, step: u64) -> f64 {
    let total = h.total_steps.max(1) as f64;
    let warm = h.warmup_fraction * total;
    let s = step as f64;
    if s < warm {
        h.base_lr * (s + 1.0) / warm.ceil().max(1.0)
    } else {
        let progress = ((s - warm) / (total - warm).max(1.0)).min(1.0);
        0.5 * h.base_lr * (1.0 + (PI * progress).cos())
    }
}

/// Per-pass settings: warmup probabilities, the seed of their coin flips, and
/// whether the backward pass recomputes per-op intermediates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PassOptions {
    pub p_op: f64,
    pub p_filter: f64,
    pub seed: u64,
    pub remat: bool,
}

impl PassOptions {
    pub fn plain() -> Self {
        PassOptions {
            p_op: 0.0,
            p_filter: 0.0,
            seed: 0,
            remat: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F> {
    pub loss: F,
    pub data_loss: F,
    pub l2: F,
    pub grads: Params<F>,
    /// Tensors read by the forward pass; only these receive optimizer updates.
    pub touched: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupernetState<F> {
    pub config: SupernetConfig,
    pub layout: ParamLayout,
    pub params: Params<F>,
    pub momentum: Params<F>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major values.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: u64,
    pub sharing: SharingMode,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

impl<F: Scalar> SupernetState<F> {
    pub fn new(config: SupernetConfig, seed: u64) -> Result<Self> {
        config.check()?;
        let layout = ParamLayout::new(&config);
        let params = Params::init(&layout, seed);
        let momentum = layout.zeros();
        Ok(SupernetState {
            config,
            layout,
            params,
            momentum,
            step: 0,
        })
    }

    fn net(&self) -> Net<'_, F> {
        Net {
            layout: &self.layout,
            params: &self.params,
        }
    }

    pub(crate) fn plans(&self, arch: &Architecture, p_op: f64, p_filter: f64, seed: u64) -> Result<Vec<BlockPlan>> {
        if !(0.0..=1.0).contains(&p_op) || !(0.0..=1.0).contains(&p_filter) {
            return Err(Error::Config(format!("warmup probabilities must lie in [0, 1], got {p_op} and {p_filter}")));
        }
        let choices = self.config.resolve(arch)?;
        let draw = WarmupDraw::sample(p_op, p_filter, self.config.blocks.len(), seed);
        Ok(net::plan(&self.config, &choices, &draw))
    }

    fn check_input(&self, x: &ArrayView2<F>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Shape(format!("batch has {} features, supernet expects {}", x.ncols(), self.config.input_dim)));
        }
        Ok(())
    }

    pub fn forward(&self, arch: &Architecture, x: &ArrayView2<F>, p_op: f64, p_filter: f64, seed: u64) -> Result<Array2<F>> {
        self.check_input(x)?;
        let plans = self.plans(arch, p_op, p_filter, seed)?;
        Ok(self.net().forward(&plans, x, Record::Nothing, None).0)
    }

    /// Loss gradients plus L2 on the regions of weight tensors this pass used.
    pub fn grad(&self, arch: &Architecture, x: &ArrayView2<F>, labels: &[usize], opts: &PassOptions, weight_decay: f64, mut probe: Option<&mut RetentionProbe>) -> Result<Gradients<F>> {
        self.check_input(x)?;
        if labels.len() != x.nrows() || labels.iter().any(|&y| y >= self.config.num_classes) {
            return Err(Error::Shape("labels do not match the batch".into()));
        }
        let plans = self.plans(arch, opts.p_op, opts.p_filter, opts.seed)?;
        let record = if opts.remat { Record::Remat } else { Record::Full };
        let net = self.net();
        let (logits, tape) = net.forward(&plans, x, record, probe.as_deref_mut());
        let (data_loss, dlogits) = net::cross_entropy(&logits, labels);
        let mut grads = self.layout.zeros();
        net.backward(&plans, x, tape.expect("recorded tape"), &dlogits, &mut grads, probe);
        let (touched, regions) = net::usage(&self.config, &self.layout, &plans);
        let l2 = self.apply_l2(&regions, F::lit(weight_decay), &mut grads);
        Ok(Gradients {
            loss: data_loss + l2,
            data_loss,
            l2,
            grads,
            touched,
        })
    }

    fn apply_l2(&self, regions: &[Region], wd: F, grads: &mut Params<F>) -> F {
        let mut total = F::zero();
        for r in regions {
            let (p, g) = (&self.params.tensors[r.tensor], &mut grads.tensors[r.tensor]);
            let (pv, mut gv) = match r.cols {
                Some(c) => (p.slice(s![..r.rows, ..c]).into_dyn(), g.slice_mut(s![..r.rows, ..c]).into_dyn()),
                None => (p.slice(s![..r.rows]).into_dyn(), g.slice_mut(s![..r.rows]).into_dyn()),
            };
            total += pv.iter().map(|&v| v * v).sum::<F>();
            gv.zip_mut_with(&pv, |gi, &pi| *gi += wd * pi);
        }
        F::lit(0.5) * wd * total
    }

    /// Momentum SGD on the touched tensors only.
    pub fn apply_gradients(&mut self, g: &Gradients<F>, lr: f64, momentum: f64) {
        let (lr, mu) = (F::lit(lr), F::lit(momentum));
        for (i, &used) in g.touched.iter().enumerate() {
            if !used {
                continue;
            }
            let v = &mut self.momentum.tensors[i];
            v.zip_mut_with(&g.grads.tensors[i], |vi, &gi| *vi = mu * *vi + gi);
            self.params.tensors[i].zip_mut_with(v, |pi, &vi| *pi -= lr * vi);
        }
    }

    /// One SGD step at the scheduled learning rate; returns the loss before the step.
    pub fn train_step(&mut self, arch: &Architecture, x: &ArrayView2<F>, labels: &[usize], hyper: &TrainHyper, opts: &PassOptions) -> Result<F> {
        let g = self.grad(arch, x, labels, opts, hyper.weight_decay, None)?;
        let lr = cosine_lr(hyper, self.step);
        self.apply_gradients(&g, lr, hyper.momentum);
        self.step += 1;
        Ok(g.loss)
    }

    /// Accuracy on one batch with warmup disabled.
    pub fn estimate_quality(&self, arch: &Architecture, x: &ArrayView2<F>, labels: &[usize]) -> Result<f64> {
        let logits = self.forward(arch, x, 0.0, 0.0, 0)?;
        Ok(accuracy(&logits, labels))
    }

    pub fn extract_standalone(&self, arch: &Architecture) -> Result<StandaloneModel<F>> {
        let choices = self.config.resolve(arch)?;
        let plans = net::plan(&self.config, &choices, &WarmupDraw::off(self.config.blocks.len()));
        let ops: Vec<usize> = choices.iter().map(|c| c.op).collect();
        Ok(StandaloneModel::extract(&self.config, &self.layout, &self.params, &plans, &ops))
    }

    /// Sum of squares over exactly the regularized entries a plain forward of `arch` reads.
    pub fn active_l2_sum(&self, arch: &Architecture, opts: &PassOptions) -> Result<F> {
        let plans = self.plans(arch, opts.p_op, opts.p_filter, opts.seed)?;
        let (_, regions) = net::usage(&self.config, &self.layout, &plans);
        let mut scratch = self.layout.zeros();
        Ok(self.apply_l2(&regions, F::one(), &mut scratch) * F::lit(2.0))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let dump = |prefix: &str, p: &Params<F>| -> Vec<NamedTensor> {
            p.tensors
                .iter()
                .zip(&self.layout.names)
                .map(|(t, n)| NamedTensor {
                    name: format!("{prefix}{n}"),
                    shape: t.shape().to_vec(),
                    values: t.iter().map(|v| v.to_f64_lossy()).collect(),
                })
                .collect()
        };
        let mut tensors = dump("", &self.params);
        tensors.extend(dump("momentum/", &self.momentum));
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            step: self.step,
            sharing: self.config.sharing,
            tensors,
        }
    }

    pub fn from_checkpoint(config: SupernetConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", ckpt.format_version)));
        }
        if ckpt.sharing != config.sharing {
            return Err(Error::Config(format!("checkpoint uses {} sharing, config uses {}", ckpt.sharing, config.sharing)));
        }
        let mut state = Self::new(config, 0)?;
        let n = state.layout.len();
        if ckpt.tensors.len() != 2 * n {
            return Err(Error::Config(format!("checkpoint has {} tensors, expected {}", ckpt.tensors.len(), 2 * n)));
        }
        for (k, t) in ckpt.tensors.iter().enumerate() {
            let i = k % n;
            let expected = if k < n { state.layout.names[i].clone() } else { format!("momentum/{}", state.layout.names[i]) };
            if t.name != expected || t.shape != state.layout.shapes[i] {
                return Err(Error::Config(format!("checkpoint tensor `{}` does not match `{expected}`", t.name)));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), t.values.iter().map(|&v| F::lit(v)).collect()).map_err(|e| Error::Shape(e.to_string()))?;
            if k < n {
                state.params.tensors[i] = arr;
            } else {
                state.momentum.tensors[i] = arr;
            }
        }
        state.step = ckpt.step;
        Ok(state)
    }
}

/// Trains a fresh network on one fixed architecture and reports its
/// full-validation-set accuracy; every candidate uses the same `init_seed`
/// and batch stream, so they are trained identically.
pub fn train_fixed<F: Scalar>(config: &SupernetConfig, data: &Dataset<F>, arch: &Architecture, hyper: &TrainHyper, init_seed: u64, batch_seed: u64) -> Result<(StandaloneModel<F>, f64)> {
    let mut state = SupernetState::new(config.clone(), init_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
    let opts = PassOptions::plain();
    for _ in 0..hyper.total_steps {
        let (x, y) = data.train_batch(&mut rng, hyper.batch_size);
        state.train_step(arch, &x.view(), &y, hyper, &opts)?;
    }
    let model = state.extract_standalone(arch)?;
    let acc = model.accuracy(&data.valid_x.view(), &data.valid_y);
    Ok((model, acc))
}
