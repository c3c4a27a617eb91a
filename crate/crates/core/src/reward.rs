//! Scalar rewards trading quality `Q(α)` against latency `T(α)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default cost exponent for the soft and hard exponential rewards.
pub const DEFAULT_EXPONENTIAL_BETA: f64 = -0.07;
/// Default cost exponent for the absolute reward.
pub const DEFAULT_ABSOLUTE_BETA: f64 = -0.30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RewardKind {
    /// `Q · (T/T0)^β`
    #[serde(rename = "soft", alias = "soft_exponential")]
    SoftExponential,
    /// `Q` when `T ≤ T0`, else `Q · (T/T0)^β`
    #[serde(rename = "hard", alias = "hard_exponential")]
    HardExponential,
    /// `Q + β · |T/T0 − 1|`
    #[serde(rename = "abs", alias = "absolute")]
    Absolute,
}

impl RewardKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardKind::SoftExponential => "soft",
            RewardKind::HardExponential => "hard",
            RewardKind::Absolute => "abs",
        }
    }

    pub fn default_beta(self) -> f64 {
        match self {
            RewardKind::Absolute => DEFAULT_ABSOLUTE_BETA,
            _ => DEFAULT_EXPONENTIAL_BETA,
        }
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" | "soft_exponential" => Ok(RewardKind::SoftExponential),
            "hard" | "hard_exponential" => Ok(RewardKind::HardExponential),
            "abs" | "absolute" => Ok(RewardKind::Absolute),
            other => Err(Error::Config(format!("unknown reward `{other}` (expected soft, hard or abs)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig<F> {
    pub kind: RewardKind,
    pub beta: F,
    pub target_ms: F,
}

impl<F: Scalar> RewardConfig<F> {
    pub fn new(kind: RewardKind, beta: F, target_ms: F) -> Result<Self> {
        if !beta.is_finite() || beta >= F::zero() {
            return Err(Error::Config(format!("cost exponent must be finite and negative, got {beta}")));
        }
        if !target_ms.is_finite() || target_ms <= F::zero() {
            return Err(Error::Config(format!("latency target must be positive, got {target_ms}")));
        }
        Ok(RewardConfig { kind, beta, target_ms })
    }

    pub fn with_default_beta(kind: RewardKind, target_ms: F) -> Result<Self> {
        Self::new(kind, F::lit(kind.default_beta()), target_ms)
    }

    pub fn reward(&self, quality: F, latency_ms: F) -> Result<F> {
        reward(self, quality, latency_ms)
    }
}

pub fn reward<F: Scalar>(config: &RewardConfig<F>, quality: F, latency_ms: F) -> Result<F> {
    if !(latency_ms > F::zero()) {
        return Err(Error::RewardDomain(format!("latency must be positive, got {latency_ms}")));
    }
    let ratio = latency_ms / config.target_ms;
    Ok(match config.kind {
        RewardKind::SoftExponential => quality * ratio.powf(config.beta),
        RewardKind::HardExponential if latency_ms <= config.target_ms => quality,
        RewardKind::HardExponential => quality * ratio.powf(config.beta),
        RewardKind::Absolute => quality + config.beta * (ratio - F::one()).abs(),
    })
}

/// Dense reward evaluations over a (quality, latency) rectangle.
#[derive(Clone, Debug, PartialEq)]
pub struct ContourGrid<F> {
    pub qualities: Vec<F>,
    pub latencies: Vec<F>,
    /// `values[i][j]` is the reward at `qualities[i]`, `latencies[j]`.
    pub values: Vec<Vec<F>>,
}

impl<F: Scalar> ContourGrid<F> {
    /// CSV with `q,t,r` columns, one row per grid point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("q,t,r\n");
        for (i, q) in self.qualities.iter().enumerate() {
            for (j, t) in self.latencies.iter().enumerate() {
                out.push_str(&format!("{q},{t},{}\n", self.values[i][j]));
            }
        }
        out
    }
}

fn linspace<F: Scalar>((lo, hi): (F, F), n: usize) -> Vec<F> {
    let step = (hi - lo) / F::from_usize_lossy(n - 1);
    (0..n).map(|i| if i == n - 1 { hi } else { lo + step * F::from_usize_lossy(i) }).collect()
}

pub fn contour_grid<F: Scalar>(config: &RewardConfig<F>, q_range: (F, F), t_range: (F, F), resolution: usize) -> Result<ContourGrid<F>> {
    if resolution < 2 {
        return Err(Error::Config("contour resolution must be at least 2".into()));
    }
    if !(q_range.0 < q_range.1) || !(t_range.0 < t_range.1) {
        return Err(Error::Config("contour ranges must be nonempty".into()));
    }
    let qualities = linspace(q_range, resolution);
    let latencies = linspace(t_range, resolution);
    let values = qualities
        .iter()
        .map(|&q| latencies.iter().map(|&t| reward(config, q, t)).collect::<Result<Vec<F>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(ContourGrid { qualities, latencies, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(kind: RewardKind, beta: f64) -> RewardConfig<f64> {
        RewardConfig::new(kind, beta, 84.0).unwrap()
    }

    #[test]
    fn worked_values() {
        let soft = cfg(RewardKind::SoftExponential, -0.07);
        assert_eq!(soft.reward(0.75, 84.0).unwrap(), 0.75);
        // 0.75 · 1.1^-0.07
        assert!((soft.reward(0.75, 92.4).unwrap() - 0.745_013_2).abs() < 1e-6);
        let hard = cfg(RewardKind::HardExponential, -1.0);
        assert_eq!(hard.reward(0.8, 80.0).unwrap(), 0.8);
        assert!((hard.reward(0.8, 92.4).unwrap() - 0.8 / 1.1).abs() < 1e-12);
        let abs = cfg(RewardKind::Absolute, -0.07);
        assert_eq!(abs.reward(0.76, 84.0).unwrap(), 0.76);
        assert!((abs.reward(0.76, 92.4).unwrap() - 0.753).abs() < 1e-12);
    }

    #[test]
    fn generic_over_f32() {
        let c = RewardConfig::<f32>::new(RewardKind::Absolute, -0.07, 84.0).unwrap();
        assert!((c.reward(0.76, 92.4).unwrap() - 0.753).abs() < 1e-5);
    }

    #[test]
    fn domain_and_config_errors() {
        let c = cfg(RewardKind::SoftExponential, -0.07);
        assert!(matches!(c.reward(0.5, 0.0), Err(Error::RewardDomain(_))));
        assert!(matches!(c.reward(0.5, -3.0), Err(Error::RewardDomain(_))));
        assert!(RewardConfig::new(RewardKind::Absolute, 0.1, 84.0).is_err());
        assert!(RewardConfig::new(RewardKind::Absolute, f64::NEG_INFINITY, 84.0).is_err());
        assert!(RewardConfig::new(RewardKind::Absolute, -0.1, 0.0).is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("abs".parse::<RewardKind>().unwrap(), RewardKind::Absolute);
        assert_eq!("hard".parse::<RewardKind>().unwrap(), RewardKind::HardExponential);
        assert!("linear".parse::<RewardKind>().is_err());
    }

    #[test]
    fn absolute_grid_on_target_equals_quality() {
        let c = cfg(RewardKind::Absolute, -0.3);
        // odd resolution puts T0 exactly on the latency axis
        let g = contour_grid(&c, (0.5, 0.9), (74.0, 94.0), 21).unwrap();
        let j = g.latencies.iter().position(|&t| t == 84.0).unwrap();
        for (i, &q) in g.qualities.iter().enumerate() {
            assert_eq!(g.values[i][j], q);
        }
    }

    #[test]
    fn absolute_grid_is_symmetric_about_target() {
        let c = cfg(RewardKind::Absolute, -0.3);
        let g = contour_grid(&c, (0.5, 0.9), (64.0, 104.0), 41).unwrap();
        let n = g.latencies.len();
        for row in &g.values {
            for j in 0..n / 2 {
                assert!((row[j] - row[n - 1 - j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_level_sets_rise_with_latency() {
        // along a level set r, Q(T) = r · (T/T0)^(-β), which increases in T for β < 0
        let c = cfg(RewardKind::SoftExponential, -0.07);
        let r = 0.7;
        let mut prev = 0.0;
        for t in [60.0, 70.0, 84.0, 100.0, 120.0] {
            let q = r * (t / 84.0f64).powf(0.07);
            assert!((c.reward(q, t).unwrap() - r).abs() < 1e-12);
            assert!(q > prev);
            prev = q;
        }
    }

    #[test]
    fn csv_layout() {
        let c = cfg(RewardKind::Absolute, -0.3);
        let g = contour_grid(&c, (0.0, 1.0), (42.0, 126.0), 2).unwrap();
        let csv = g.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "q,t,r");
        assert_eq!(lines.len(), 5);
        assert!(contour_grid(&c, (0.0, 1.0), (42.0, 126.0), 1).is_err());
        assert!(contour_grid(&c, (1.0, 1.0), (42.0, 126.0), 3).is_err());
    }

    proptest! {
        #[test]
        fn absolute_is_scale_invariant(q in 0.0f64..1.0, t in 1.0f64..200.0, c in 0.01f64..100.0, beta in -5.0f64..-0.001) {
            let a = RewardConfig::new(RewardKind::Absolute, beta, 84.0).unwrap();
            let b = RewardConfig::new(RewardKind::Absolute, beta, 84.0 * c).unwrap();
            let ra = a.reward(q, t).unwrap();
            let rb = b.reward(q, t * c).unwrap();
            prop_assert!((ra - rb).abs() <= 1e-12 * (1.0 + ra.abs()));
        }

        #[test]
        fn hard_matches_soft_above_and_is_flat_below(q in 0.01f64..1.0, t in 1.0f64..200.0, t2 in 1.0f64..84.0, beta in -10.0f64..-0.001) {
            let soft = RewardConfig::new(RewardKind::SoftExponential, beta, 84.0).unwrap();
            let hard = RewardConfig::new(RewardKind::HardExponential, beta, 84.0).unwrap();
            if t > 84.0 {
                prop_assert_eq!(soft.reward(q, t).unwrap(), hard.reward(q, t).unwrap());
            }
            prop_assert_eq!(hard.reward(q, t2).unwrap(), q);
        }

        #[test]
        fn increasing_in_quality(q in 0.0f64..0.99, dq in 0.001f64..0.01, t in 1.0f64..200.0, beta in -10.0f64..-0.001) {
            for kind in [RewardKind::SoftExponential, RewardKind::HardExponential, RewardKind::Absolute] {
                let c = RewardConfig::new(kind, beta, 84.0).unwrap();
                prop_assert!(c.reward(q + dq, t).unwrap() > c.reward(q, t).unwrap());
            }
        }

        #[test]
        fn absolute_peaks_at_target(q in 0.0f64..1.0, t in 1.0f64..200.0, beta in -10.0f64..-0.001) {
            let c = RewardConfig::new(RewardKind::Absolute, beta, 84.0).unwrap();
            prop_assert!(c.reward(q, 84.0).unwrap() >= c.reward(q, t).unwrap());
        }
    }
}
