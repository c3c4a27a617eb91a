//! Deterministic synthetic quality surfaces over a search space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::latency::LatencyModel;
use crate::scalar::Scalar;
use crate::space::{Architecture, SearchSpace, ENUMERATION_LIMIT};

/// `Q(α) = clamp(q_base − gain·exp(−T(α)/saturation) + Σ bonus + noise, 0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBenchmark<F> {
    pub seed: u64,
    pub q_base: F,
    pub latency_gain: F,
    pub saturation: F,
    /// Bonus per decision and choice, counted only while the decision is active.
    pub bonuses: Vec<Vec<F>>,
    pub noise_scale: F,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub q_base: f64,
    pub latency_gain: f64,
    /// Saturation latency; `None` uses the latency target.
    pub saturation: Option<f64>,
    pub bonus_scale: f64,
    pub noise_scale: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            q_base: 0.95,
            latency_gain: 0.5,
            saturation: None,
            bonus_scale: 0.004,
            noise_scale: 0.0,
        }
    }
}

impl<F: Scalar> SyntheticBenchmark<F> {
    /// Draws every bonus from `N(0, bonus_scale²)`.
    pub fn generate(space: &SearchSpace, cfg: &BenchmarkConfig, target_ms: f64, seed: u64) -> Result<Self> {
        let saturation = cfg.saturation.unwrap_or(target_ms);
        if !(cfg.latency_gain > 0.0) || !(saturation > 0.0) || !(cfg.noise_scale >= 0.0) || !(cfg.bonus_scale >= 0.0) {
            return Err(Error::Config("benchmark needs gain > 0, saturation > 0 and nonnegative bonus and noise scales".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, cfg.bonus_scale).map_err(|e| Error::Config(e.to_string()))?;
        let bonuses = space
            .decisions()
            .iter()
            .map(|d| (0..d.num_choices()).map(|_| F::lit(normal.sample(&mut rng))).collect())
            .collect();
        Ok(SyntheticBenchmark {
            seed,
            q_base: F::lit(cfg.q_base),
            latency_gain: F::lit(cfg.latency_gain),
            saturation: F::lit(saturation),
            bonuses,
            noise_scale: F::lit(cfg.noise_scale),
        })
    }

    /// Benchmark whose quality depends on latency only.
    pub fn latency_only(space: &SearchSpace, q_base: f64, latency_gain: f64, saturation: f64) -> Self {
        SyntheticBenchmark {
            seed: 0,
            q_base: F::lit(q_base),
            latency_gain: F::lit(latency_gain),
            saturation: F::lit(saturation),
            bonuses: space.decisions().iter().map(|d| vec![F::zero(); d.num_choices()]).collect(),
            noise_scale: F::zero(),
        }
    }

    fn noise(&self, space: &SearchSpace, arch: &Architecture) -> F {
        if self.noise_scale == F::zero() {
            return F::zero();
        }
        // inactive decisions do not change the network, so they do not change the draw
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for d in space.decisions() {
            let c = if space.is_active(arch, d.id) { arch.choices[d.id] as u32 } else { u32::MAX };
            h.update(c.to_le_bytes());
        }
        let digest = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        let z: f64 = StandardNormal.sample(&mut ChaCha8Rng::seed_from_u64(u64::from_le_bytes(bytes)));
        self.noise_scale * F::lit(z)
    }

    pub fn quality(&self, space: &SearchSpace, model: &LatencyModel, arch: &Architecture) -> F {
        self.quality_at(space, arch, model.latency(arch))
    }

    /// Quality given a precomputed latency.
    pub fn quality_at(&self, space: &SearchSpace, arch: &Architecture, latency_ms: f64) -> F {
        let t = F::lit(latency_ms);
        let bonus: F = space
            .decisions()
            .iter()
            .filter(|d| space.is_active(arch, d.id))
            .map(|d| self.bonuses[d.id][arch.choices[d.id]])
            .sum();
        let q = self.q_base - self.latency_gain * (-t / self.saturation).exp() + bonus + self.noise(space, arch);
        q.max(F::zero()).min(F::one())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrontierPoint<F> {
    pub arch: Architecture,
    pub quality: F,
    pub latency_ms: f64,
}

/// Non-dominated architectures under (higher quality, lower latency), by increasing latency.
pub fn pareto_frontier<F: Scalar>(bench: &SyntheticBenchmark<F>, space: &SearchSpace, model: &LatencyModel) -> Result<Vec<FrontierPoint<F>>> {
    let points: Vec<FrontierPoint<F>> = space
        .enumerate(ENUMERATION_LIMIT)?
        .map(|arch| {
            let latency_ms = model.latency(&arch);
            FrontierPoint {
                quality: bench.quality_at(space, &arch, latency_ms),
                latency_ms,
                arch,
            }
        })
        .collect();
    Ok(frontier_of(points))
}

pub fn frontier_of<F: Scalar>(mut points: Vec<FrontierPoint<F>>) -> Vec<FrontierPoint<F>> {
    points.sort_by(|a, b| a.latency_ms.total_cmp(&b.latency_ms).then(b.quality.partial_cmp(&a.quality).expect("finite quality")));
    let mut out = Vec::new();
    let mut best_faster = F::neg_infinity();
    let mut i = 0;
    while i < points.len() {
        let t = points[i].latency_ms;
        let group_best = points[i].quality;
        let mut j = i;
        while j < points.len() && points[j].latency_ms == t {
            j += 1;
        }
        if group_best > best_faster {
            out.extend(points[i..j].iter().filter(|p| p.quality == group_best).cloned());
            best_faster = group_best;
        }
        i = j;
    }
    out
}

pub fn frontier_to_csv<F: Scalar>(points: &[FrontierPoint<F>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["latency_ms", "quality", "architecture"])?;
    for p in points {
        w.write_record([p.latency_ms.to_string(), p.quality.to_string(), p.arch.to_string()])?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).map_err(|e| Error::Config(e.to_string()))
}
