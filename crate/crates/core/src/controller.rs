//! Policy over categorical decisions and its REINFORCE update.
//!
//! The policy holds one logit vector per free variable of the space, so tied
//! filter decisions share a single categorical distribution and a single draw.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::space::{Architecture, SearchSpace};

pub const POLICY_FORMAT_VERSION: u32 = 1;

/// Learning rate of the controller optimizer at the reference (ImageNet) scale.
pub const REFERENCE_BASE_LR: f64 = 3e-4;

/// Default controller learning rate for the toy-scale searches, which run
/// thousands rather than hundreds of thousands of steps.
pub const DESK_BASE_LR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct Policy<F> {
    logits: Vec<Vec<F>>,
    variables: Vec<Vec<usize>>,
    num_decisions: usize,
}

#[derive(Serialize, Deserialize)]
struct PolicyDocument {
    format_version: u32,
    /// Decision id → logit vector; tied decisions repeat their shared vector.
    logits: BTreeMap<usize, Vec<f64>>,
}

fn log_sum_exp<F: Scalar>(v: &[F]) -> F {
    let max = v.iter().cloned().fold(F::neg_infinity(), F::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<F>().ln()
}

impl<F: Scalar> Policy<F> {
    /// All-zero logits: every free variable uniform.
    pub fn uniform(space: &SearchSpace) -> Self {
        let logits = (0..space.variables().len()).map(|v| vec![F::zero(); space.variable_choices(v)]).collect();
        Policy {
            logits,
            variables: space.variables().to_vec(),
            num_decisions: space.num_decisions(),
        }
    }

    /// Builds a policy from one logit vector per free variable.
    pub fn from_logits(space: &SearchSpace, logits: Vec<Vec<F>>) -> Result<Self> {
        let mut p = Self::uniform(space);
        if logits.len() != p.logits.len() {
            return Err(Error::Shape(format!("expected {} logit vectors, got {}", p.logits.len(), logits.len())));
        }
        for (v, (have, want)) in logits.iter().zip(&p.logits).enumerate() {
            if have.len() != want.len() {
                return Err(Error::Shape(format!("variable {v}: expected {} logits, got {}", want.len(), have.len())));
            }
        }
        p.logits = logits;
        Ok(p)
    }

    pub fn logits(&self) -> &[Vec<F>] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [Vec<F>] {
        &mut self.logits
    }

    pub fn variables(&self) -> &[Vec<usize>] {
        &self.variables
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().flatten().all(|x| x.is_finite())
    }

    pub fn probabilities(&self, variable: usize) -> Vec<F> {
        let l = &self.logits[variable];
        let lse = log_sum_exp(l);
        l.iter().map(|&x| (x - lse).exp()).collect()
    }

    fn assemble(&self, var_choices: &[usize]) -> Architecture {
        let mut choices = vec![0; self.num_decisions];
        for (group, &c) in self.variables.iter().zip(var_choices) {
            for &d in group {
                choices[d] = c;
            }
        }
        Architecture::new(choices)
    }

    /// Draws one architecture and returns it with its log-probability.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Architecture, F) {
        let mut picks = Vec::with_capacity(self.logits.len());
        let mut log_prob = F::zero();
        for (v, l) in self.logits.iter().enumerate() {
            let probs = self.probabilities(v);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p.to_f64_lossy();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            log_prob = log_prob + l[pick] - log_sum_exp(l);
            picks.push(pick);
        }
        (self.assemble(&picks), log_prob)
    }

    pub fn sample_seeded(&self, seed: u64) -> (Architecture, F) {
        self.sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn log_prob(&self, arch: &Architecture) -> F {
        self.variables
            .iter()
            .zip(&self.logits)
            .map(|(group, l)| l[arch.choices[group[0]]] - log_sum_exp(l))
            .sum()
    }

    /// ∇ log π(arch) with respect to every logit: `onehot(choice) − softmax`.
    pub fn grad_log_prob(&self, arch: &Architecture) -> Vec<Vec<F>> {
        (0..self.logits.len())
            .map(|v| {
                let chosen = arch.choices[self.variables[v][0]];
                self.probabilities(v)
                    .into_iter()
                    .enumerate()
                    .map(|(i, p)| if i == chosen { F::one() - p } else { -p })
                    .collect()
            })
            .collect()
    }

    /// Most probable choice per variable; ties go to the lowest index.
    pub fn argmax_architecture(&self) -> Architecture {
        let picks: Vec<usize> = self
            .logits
            .iter()
            .map(|l| {
                let mut best = 0;
                for (i, &x) in l.iter().enumerate() {
                    if x > l[best] {
                        best = i;
                    }
                }
                best
            })
            .collect();
        self.assemble(&picks)
    }

    /// Entropy in nats, one term per free variable.
    pub fn entropy(&self) -> F {
        (0..self.logits.len())
            .map(|v| {
                self.probabilities(v)
                    .into_iter()
                    .filter(|&p| p > F::zero())
                    .map(|p| -p * p.ln())
                    .sum::<F>()
            })
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut logits = BTreeMap::new();
        for (group, l) in self.variables.iter().zip(&self.logits) {
            for &d in group {
                logits.insert(d, l.iter().map(|x| x.to_f64_lossy()).collect());
            }
        }
        Ok(serde_json::to_string_pretty(&PolicyDocument {
            format_version: POLICY_FORMAT_VERSION,
            logits,
        })?)
    }

    pub fn from_json(space: &SearchSpace, text: &str) -> Result<Self> {
        let doc: PolicyDocument = serde_json::from_str(text)?;
        if doc.format_version != POLICY_FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported policy format version {}", doc.format_version)));
        }
        let mut logits = Vec::with_capacity(space.variables().len());
        for group in space.variables() {
            let first = doc
                .logits
                .get(&group[0])
                .ok_or_else(|| Error::Config(format!("policy checkpoint lacks decision {}", group[0])))?;
            for d in group {
                if doc.logits.get(d) != Some(first) {
                    return Err(Error::Config(format!("tied decision {d} has a different logit vector")));
                }
            }
            logits.push(first.iter().map(|&x| F::lit(x)).collect());
        }
        if doc.logits.len() != space.num_decisions() {
            return Err(Error::Config(format!("policy has {} decisions, space has {}", doc.logits.len(), space.num_decisions())));
        }
        Self::from_logits(space, logits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.0,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Policy plus Adam moments, the reward baseline and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState<F> {
    pub policy: Policy<F>,
    first_moment: Vec<Vec<F>>,
    second_moment: Vec<Vec<F>>,
    baseline: Option<F>,
    step: u64,
    adam: AdamConfig,
    baseline_decay: F,
}

impl<F: Scalar> ControllerState<F> {
    pub fn new(policy: Policy<F>) -> Self {
        Self::with_adam(policy, AdamConfig::default())
    }

    pub fn with_adam(policy: Policy<F>, adam: AdamConfig) -> Self {
        let zeros: Vec<Vec<F>> = policy.logits.iter().map(|l| vec![F::zero(); l.len()]).collect();
        ControllerState {
            policy,
            first_moment: zeros.clone(),
            second_moment: zeros,
            baseline: None,
            step: 0,
            adam,
            baseline_decay: F::lit(0.9),
        }
    }

    pub fn baseline(&self) -> Option<F> {
        self.baseline
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One REINFORCE ascent step on `(r − baseline) · ∇ log π(arch)`; returns the advantage.
    ///
    /// The baseline starts at the first reward and then tracks an EMA with decay 0.9.
    pub fn reinforce_step(&mut self, arch: &Architecture, reward: F, lr: F) -> F {
        let baseline = *self.baseline.get_or_insert(reward);
        let advantage = reward - baseline;
        let grad = self.policy.grad_log_prob(arch);
        let t = (self.step + 1) as i32;
        let b1 = F::lit(self.adam.beta1);
        let b2 = F::lit(self.adam.beta2);
        let eps = F::lit(self.adam.epsilon);
        let c1 = F::one() - b1.powi(t);
        let c2 = F::one() - b2.powi(t);
        for (v, g) in grad.iter().enumerate() {
            for (i, &gi) in g.iter().enumerate() {
                let g = advantage * gi;
                let m = &mut self.first_moment[v][i];
                *m = b1 * *m + (F::one() - b1) * g;
                let s = &mut self.second_moment[v][i];
                *s = b2 * *s + (F::one() - b2) * g * g;
                if lr != F::zero() {
                    let m_hat = *m / c1;
                    let v_hat = *s / c2;
                    self.policy.logits[v][i] += lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        self.baseline = Some(self.baseline_decay * baseline + (F::one() - self.baseline_decay) * reward);
        self.step += 1;
        advantage
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrMode {
    Constant,
    Exponential,
}

impl fmt::Display for LrMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrMode::Constant => "constant",
            LrMode::Exponential => "exponential",
        })
    }
}

impl FromStr for LrMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrMode::Constant),
            "exponential" => Ok(LrMode::Exponential),
            other => Err(Error::Config(format!("unknown RL learning-rate mode `{other}`"))),
        }
    }
}

/// Controller learning rate: zero while frozen, then constant or rising
/// geometrically from `base_lr` to `10 × base_lr` at the final step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
    pub mode: LrMode,
    pub frozen_fraction: f64,
}

impl RlSchedule {
    pub fn new(base_lr: f64, total_steps: u64, mode: LrMode, frozen_fraction: f64) -> Result<Self> {
        if !(base_lr > 0.0) || !base_lr.is_finite() {
            return Err(Error::Config(format!("RL base learning rate must be positive, got {base_lr}")));
        }
        if !(0.0..1.0).contains(&frozen_fraction) {
            return Err(Error::Config(format!("frozen fraction must lie in [0, 1), got {frozen_fraction}")));
        }
        if total_steps == 0 {
            return Err(Error::Config("total steps must be positive".into()));
        }
        Ok(RlSchedule {
            base_lr,
            total_steps,
            mode,
            frozen_fraction,
        })
    }

    pub fn learning_rate(&self, step: u64) -> f64 {
        let total = self.total_steps as f64;
        let frozen_end = self.frozen_fraction * total;
        let s = step as f64;
        if s < frozen_end {
            return 0.0;
        }
        match self.mode {
            LrMode::Constant => self.base_lr,
            LrMode::Exponential => {
                let progress = ((s - frozen_end) / (total - frozen_end)).clamp(0.0, 1.0);
                self.base_lr * 10f64.powf(progress)
            }
        }
    }
}

pub fn rl_learning_rate(schedule: &RlSchedule, step: u64) -> f64 {
    schedule.learning_rate(step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{Decision, DecisionKind, FilterRule};
    use proptest::prelude::*;

    fn space(sizes: &[usize]) -> SearchSpace {
        let decisions = sizes
            .iter()
            .enumerate()
            .map(|(i, &k)| Decision::new(DecisionKind::Other, format!("d{i}"), 0, (0..k).map(|c| c.to_string()).collect(), vec![0; k]))
            .collect();
        SearchSpace::new("s", decisions, vec![], vec![], FilterRule::Handcrafted).unwrap()
    }

    fn tied_space() -> SearchSpace {
        let f = |i: usize| Decision::new(DecisionKind::OutputFilters, format!("f{i}"), 0, vec!["a".into(), "b".into(), "c".into()], vec![8, 16, 24]);
        let k = Decision::new(DecisionKind::Kernel, "k", 0, vec!["k3".into(), "k5".into()], vec![3, 5]);
        SearchSpace::new("t", vec![f(0), k, f(1)], vec![vec![0, 2]], vec![], FilterRule::Handcrafted).unwrap()
    }

    #[test]
    fn uniform_three_way() {
        let s = space(&[3]);
        let p = Policy::<f64>::uniform(&s);
        for q in p.probabilities(0) {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
        let (_, lp) = p.sample_seeded(1);
        assert!((lp + 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_sample_their_mode() {
        let s = space(&[2]);
        let p = Policy::from_logits(&s, vec![vec![10.0, -10.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hits = (0..10_000).filter(|_| p.sample(&mut rng).0.choices[0] == 0).count();
        assert!(hits as f64 / 10_000.0 >= 0.999);
    }

    #[test]
    fn tied_pair_always_equal() {
        let s = tied_space();
        let p = Policy::<f64>::uniform(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let (a, _) = p.sample(&mut rng);
            assert_eq!(a.choices[0], a.choices[2]);
            assert!(s.validate(&a));
        }
        assert_eq!(p.logits().len(), 2);
    }

    #[test]
    fn argmax_rules() {
        let s = space(&[3]);
        let p = Policy::from_logits(&s, vec![vec![0.1, 2.0, -1.0]]).unwrap();
        assert_eq!(p.argmax_architecture().choices, vec![1]);
        let shifted = Policy::from_logits(&s, vec![vec![5.1, 7.0, 4.0]]).unwrap();
        assert_eq!(shifted.argmax_architecture(), p.argmax_architecture());
        let flat = Policy::from_logits(&s, vec![vec![0.5, 0.5, 0.5]]).unwrap();
        assert_eq!(flat.argmax_architecture().choices, vec![0]);
    }

    #[test]
    fn entropy_values() {
        let p = Policy::<f64>::uniform(&space(&[4]));
        assert!((p.entropy() - 4f64.ln()).abs() < 1e-12);
        let sharp = Policy::from_logits(&space(&[3]), vec![vec![100.0, 0.0, 0.0]]).unwrap();
        assert!(sharp.entropy() < 1e-40);
        let two = Policy::<f64>::uniform(&space(&[5, 5]));
        assert!((two.entropy() - 2.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_freezes_logits() {
        let s = space(&[3, 2]);
        let mut st = ControllerState::new(Policy::<f64>::from_logits(&s, vec![vec![0.3, -0.2, 0.1], vec![1.0, 0.0]]).unwrap());
        let before = st.policy.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..50 {
            let (a, _) = st.policy.sample(&mut rng);
            st.reinforce_step(&a, i as f64 * 0.1, 0.0);
        }
        assert_eq!(st.policy, before);
        assert_eq!(st.step(), 50);
    }

    #[test]
    fn zero_advantage_is_exact_no_op() {
        let s = space(&[3]);
        let mut st = ControllerState::new(Policy::<f64>::uniform(&s));
        let a = Architecture::new(vec![1]);
        st.reinforce_step(&a, 0.5, 0.1);
        let before = st.policy.clone();
        // baseline is exactly 0.5 after the first step
        st.reinforce_step(&a, 0.5, 0.1);
        assert_eq!(st.policy, before);
    }

    #[test]
    fn baseline_ema() {
        let s = space(&[2]);
        let mut st = ControllerState::new(Policy::<f64>::uniform(&s));
        let a = Architecture::new(vec![0]);
        st.reinforce_step(&a, 1.0, 0.0);
        assert_eq!(st.baseline(), Some(1.0));
        st.reinforce_step(&a, 0.0, 0.0);
        assert!((st.baseline().unwrap() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn bandit_converges_to_rewarding_arm() {
        let s = space(&[2]);
        let mut st = ControllerState::new(Policy::<f64>::uniform(&s));
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let lr = crate::DESK_BASE_LR;
        for _ in 0..2000 {
            let (a, _) = st.policy.sample(&mut rng);
            let r = if a.choices[0] == 1 { 1.0 } else { 0.0 };
            st.reinforce_step(&a, r, lr);
        }
        assert!(st.policy.probabilities(0)[1] > 0.99, "{:?}", st.policy.probabilities(0));
    }

    #[test]
    fn grad_log_prob_matches_finite_differences() {
        let s = space(&[2]);
        let logits: Vec<Vec<f64>> = vec![vec![0.37, -1.2]];
        let p = Policy::from_logits(&s, logits.clone()).unwrap();
        for choice in 0..2 {
            let arch = Architecture::new(vec![choice]);
            let g = p.grad_log_prob(&arch);
            for i in 0..2 {
                let h = 1e-6;
                let mut up = logits.clone();
                up[0][i] += h;
                let mut down = logits.clone();
                down[0][i] -= h;
                let fd = (Policy::from_logits(&s, up).unwrap().log_prob(&arch) - Policy::from_logits(&s, down).unwrap().log_prob(&arch)) / (2.0 * h);
                assert!((g[0][i] - fd).abs() <= 1e-6 * g[0][i].abs(), "{} vs {fd}", g[0][i]);
            }
        }
    }

    #[test]
    fn schedule_landmarks() {
        let base = 3e-4;
        let exp = RlSchedule::new(base, 1000, LrMode::Exponential, 0.25).unwrap();
        assert_eq!(exp.learning_rate(100), 0.0);
        assert_eq!(exp.learning_rate(249), 0.0);
        assert_eq!(exp.learning_rate(250), base);
        assert_eq!(exp.learning_rate(1000), 10.0 * base);
        let c = RlSchedule::new(base, 1000, LrMode::Constant, 0.25).unwrap();
        assert_eq!(c.learning_rate(100), 0.0);
        assert_eq!(c.learning_rate(250), base);
        assert_eq!(c.learning_rate(1000), base);
        assert!(RlSchedule::new(base, 1000, LrMode::Constant, 1.0).is_err());
        assert!(RlSchedule::new(0.0, 1000, LrMode::Constant, 0.25).is_err());
    }

    #[test]
    fn policy_json_round_trip() {
        let s = tied_space();
        let p = Policy::from_logits(&s, vec![vec![0.5, 1.5, -0.25], vec![2.0, -3.0]]).unwrap();
        let text = p.to_json().unwrap();
        let back = Policy::<f64>::from_json(&s, &text).unwrap();
        assert_eq!(back, p);
        let broken = text.replacen("0.5", "0.75", 1);
        assert!(Policy::<f64>::from_json(&s, &broken).is_err());
    }

    proptest! {
        #[test]
        fn exponential_schedule_is_monotone(total in 4u64..5000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let sched = RlSchedule::new(1e-3, total, LrMode::Exponential, 0.25).unwrap();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let s1 = (lo * total as f64) as u64;
            let s2 = (hi * total as f64) as u64;
            prop_assert!(sched.learning_rate(s1) <= sched.learning_rate(s2));
        }

        #[test]
        fn constant_schedule_has_two_levels(total in 4u64..5000, step in 0u64..5000) {
            let sched = RlSchedule::new(1e-3, total, LrMode::Constant, 0.25).unwrap();
            let lr = sched.learning_rate(step.min(total));
            prop_assert!(lr == 0.0 || lr == 1e-3);
        }

        #[test]
        fn argmax_validates_and_samples_respect_ties(l in prop::collection::vec(-5.0f64..5.0, 5), seed in any::<u64>()) {
            let s = tied_space();
            let p = Policy::from_logits(&s, vec![l[0..3].to_vec(), l[3..5].to_vec()]).unwrap();
            prop_assert!(s.validate(&p.argmax_architecture()));
            prop_assert!(s.validate(&p.sample_seeded(seed).0));
        }

        #[test]
        fn widening_a_gap_never_raises_entropy(base in prop::collection::vec(-3.0f64..3.0, 2..6), bump in 0.0f64..3.0) {
            // raise the current maximum further above the rest
            let s = space(&[base.len()]);
            let top = base.iter().cloned().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, x)| if x > acc.1 { (i, x) } else { acc }).0;
            let mut wider = base.clone();
            wider[top] += bump;
            let h0 = Policy::from_logits(&s, vec![base]).unwrap().entropy();
            let h1 = Policy::from_logits(&s, vec![wider]).unwrap().entropy();
            prop_assert!(h1 <= h0 + 1e-12);
        }
    }
}
