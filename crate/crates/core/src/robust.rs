//! Barron's general robust loss, its IRLS weights, and the similarity-driven
//! shape parameter used for dynamic-region suppression.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Half-width of the band around α = 2 and α = 0 where the closed-form limits replace the general formula.
pub const LIMIT_BAND: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("invalid kernel config: {0}")]
    InvalidConfig(String),
    #[error("unrecognized kernel `{0}` (expected ark, l2 or fixed:<alpha>)")]
    UnknownKernel(String),
}

/// Parameters of the adaptive robust kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    /// Barron scale `c` in residual units.
    pub scale: f64,
    pub alpha_static: f64,
    pub alpha_dynamic: f64,
    /// Similarity threshold κ at the sigmoid midpoint.
    pub kappa: f64,
    /// Sigmoid sharpness τ.
    pub tau: f64,
    /// IRLS guard ε.
    pub epsilon: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            alpha_static: 2.0,
            alpha_dynamic: -2.0,
            kappa: 0.5,
            tau: 0.1,
            epsilon: 1e-8,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<(), KernelError> {
        let bad = |m: &str| Err(KernelError::InvalidConfig(m.to_string()));
        if !(self.scale > 0.0) {
            return bad("scale must be > 0");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        if !(self.alpha_dynamic <= self.alpha_static) {
            return bad("alpha_dynamic must not exceed alpha_static");
        }
        if !(-1.0..=1.0).contains(&self.kappa) {
            return bad("kappa must lie in [-1, 1]");
        }
        Ok(())
    }
}

/// How the flow term's robust shape is chosen per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum KernelChoice {
    /// α from embedding similarity.
    #[default]
    Adaptive,
    /// The same α everywhere; `Fixed(2.0)` is plain least squares.
    Fixed(f64),
}

impl FromStr for KernelChoice {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "ark" => Ok(KernelChoice::Adaptive),
            "l2" => Ok(KernelChoice::Fixed(2.0)),
            other => other
                .strip_prefix("fixed:")
                .and_then(|a| a.parse::<f64>().ok())
                .filter(|a| a.is_finite())
                .map(KernelChoice::Fixed)
                .ok_or_else(|| KernelError::UnknownKernel(other.to_string())),
        }
    }
}

impl fmt::Display for KernelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelChoice::Adaptive => write!(f, "ark"),
            KernelChoice::Fixed(a) if *a == 2.0 => write!(f, "l2"),
            KernelChoice::Fixed(a) => write!(f, "fixed:{a}"),
        }
    }
}

impl Serialize for KernelChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for KernelChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Barron's loss ρ_α(r) with scale `c`.
pub fn barron_rho(r: f64, alpha: f64, c: f64) -> f64 {
    let x = (r / c) * (r / c);
    let b = (alpha - 2.0).abs();
    if b < LIMIT_BAND {
        0.5 * x
    } else if alpha.abs() < LIMIT_BAND {
        (0.5 * x).ln_1p()
    } else {
        // (b/α)·((x/b + 1)^{α/2} − 1)
        (b / alpha) * (0.5 * alpha * (x / b).ln_1p()).exp_m1()
    }
}

/// Influence ψ_α(r) = ∂ρ_α/∂r.
pub fn barron_psi(r: f64, alpha: f64, c: f64) -> f64 {
    let b = (alpha - 2.0).abs();
    let lin = r / (c * c);
    if b < LIMIT_BAND {
        return lin;
    }
    let x = (r / c) * (r / c);
    lin * ((0.5 * alpha - 1.0) * (x / b).ln_1p()).exp()
}

/// IRLS weight ψ_α(r) / max(r, ε) for a residual magnitude `r ≥ 0`.
pub fn irls_weight(r: f64, alpha: f64, c: f64, eps: f64) -> f64 {
    barron_psi(r, alpha, c) / r.max(eps)
}

/// Shape parameter from cross-view cosine similarity: a sigmoid from α_dynamic (low similarity)
/// to α_static (high similarity) centered at κ.
pub fn adaptive_alpha(cs: f64, cfg: &KernelConfig) -> f64 {
    let gate = 1.0 / (1.0 + ((cs - cfg.kappa) / cfg.tau).exp());
    (cfg.alpha_dynamic - cfg.alpha_static) * gate + cfg.alpha_static
}

/// Combined per-pixel weight: flow confidence times the robust weight.
pub fn fold_weight(w_flow: f64, w_ark: f64) -> f64 {
    w_flow * w_ark
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALPHAS: [f64; 5] = [-4.0, -2.0, 0.0, 1.0, 2.0];

    #[test]
    fn rho_reference_values() {
        for a in [-4.0, -2.0, 0.0, 0.5, 1.0, 2.0, 3.0] {
            assert_eq!(barron_rho(0.0, a, 1.0), 0.0);
        }
        assert!((barron_rho(1.0, 2.0, 1.0) - 0.5).abs() < 1e-9);
        assert!((barron_rho(1.0, 1.0, 1.0) - (2f64.sqrt() - 1.0)).abs() < 1e-9);
        assert!((barron_rho(1.0, 0.0, 1.0) - 1.5f64.ln()).abs() < 1e-9);
        // (4/-2)·((1/4 + 1)^{-1} − 1)
        assert!((barron_rho(1.0, -2.0, 1.0) - 0.4).abs() < 1e-9);
    }

    #[test]
    fn rho_is_continuous_across_limit_switches() {
        for i in 1..=50 {
            let r = 0.1 * i as f64;
            for (center, limit) in [(2.0, 0.5 * r * r), (0.0, (0.5 * r * r).ln_1p())] {
                for side in [-1.0, 1.0] {
                    let edge = center + side * LIMIT_BAND;
                    let outside = barron_rho(r, center + side * LIMIT_BAND * 1.0001, 1.0);
                    assert!((outside - limit).abs() <= 1e-6, "r={r} alpha={edge}");
                    assert!((barron_rho(r, edge, 1.0) - limit).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn psi_reference_values() {
        for a in ALPHAS {
            assert_eq!(barron_psi(0.0, a, 1.0), 0.0);
        }
        assert!((barron_psi(1.0, 2.0, 1.0) - 1.0).abs() < 1e-12);
        assert!((barron_psi(1.0, -2.0, 1.0) - 0.64).abs() < 1e-12);
    }

    #[test]
    fn psi_matches_finite_differences() {
        let h = 1e-6;
        for c in [0.5, 1.0, 2.0] {
            for a in ALPHAS {
                for i in 1..=50 {
                    let r = 5.0 * c * i as f64 / 50.0;
                    let fd = (barron_rho(r + h, a, c) - barron_rho(r - h, a, c)) / (2.0 * h);
                    let psi = barron_psi(r, a, c);
                    assert!((fd - psi).abs() < 1e-5, "c={c} a={a} r={r}: {fd} vs {psi}");
                }
            }
        }
    }

    #[test]
    fn irls_weight_values() {
        assert!((irls_weight(1.0, 2.0, 1.0, 1e-8) - 1.0).abs() < 1e-12);
        assert!((irls_weight(1.0, -2.0, 1.0, 1e-8) - 0.64).abs() < 1e-12);
        for r in [0.0, 1e-300, 1e-12, 1e-9] {
            let w = irls_weight(r, -2.0, 1.0, 1e-8);
            assert!(w.is_finite() && (0.0..=1.0).contains(&w));
        }
        for r in [1e-6, 0.3, 7.0, 100.0] {
            assert!((irls_weight(r, 2.0, 2.0, 1e-8) - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn rho_monotone_in_residual_and_alpha() {
        let alphas: Vec<f64> = (0..=60).map(|i| -4.0 + 0.1 * i as f64).collect();
        for i in 1..=100 {
            let r = 0.05 * i as f64;
            for &a in &alphas {
                let v = barron_rho(r, a, 1.0);
                assert!(v > 0.0);
                assert!(barron_rho(r + 0.01, a, 1.0) >= v);
            }
            for pair in alphas.windows(2) {
                assert!(barron_rho(r, pair[1], 1.0) >= barron_rho(r, pair[0], 1.0) - 1e-12);
            }
        }
    }

    #[test]
    fn weights_never_exceed_l2() {
        for i in 0..=60 {
            let a = -4.0 + 0.1 * i as f64;
            for j in 1..=100 {
                let r = 0.1 * j as f64;
                for c in [0.5, 1.0, 3.0] {
                    assert!(irls_weight(r, a, c, 1e-8) <= 1.0 / (c * c) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn adaptive_alpha_values() {
        let cfg = KernelConfig::default();
        assert!((adaptive_alpha(cfg.kappa, &cfg) - 0.0).abs() < 1e-15);
        // 2 − 4/(1+e⁵) and −4/(1+e^{−5}) + 2
        let hi = 2.0 - 4.0 / (1.0 + 5f64.exp());
        let lo = 2.0 - 4.0 / (1.0 + (-5f64).exp());
        assert!((adaptive_alpha(1.0, &cfg) - hi).abs() < 1e-12);
        assert!((hi - 1.9731).abs() < 1e-3);
        assert!((adaptive_alpha(0.0, &cfg) - lo).abs() < 1e-12);
        assert!((lo + 1.9731).abs() < 1e-3);
    }

    #[test]
    fn adaptive_alpha_monotone_and_bounded() {
        let cfg = KernelConfig {
            alpha_dynamic: -3.0,
            alpha_static: 1.5,
            kappa: 0.2,
            tau: 0.05,
            ..KernelConfig::default()
        };
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=2000 {
            let cs = -1.0 + i as f64 / 1000.0;
            let a = adaptive_alpha(cs, &cfg);
            assert!(a >= prev);
            assert!((-3.0..=1.5).contains(&a));
            prev = a;
        }
        let extreme = KernelConfig { tau: 1e-4, ..cfg };
        assert_eq!(adaptive_alpha(-1.0, &extreme), -3.0);
        assert_eq!(adaptive_alpha(1.0, &extreme), 1.5);
    }

    #[test]
    fn fold_weight_values() {
        assert_eq!(fold_weight(0.0, 123.0), 0.0);
        assert_eq!(fold_weight(1.0, 0.37), 0.37);
        assert!((fold_weight(0.5, 0.64) - 0.32).abs() < 1e-15);
    }

    #[test]
    fn kernel_choice_parsing() {
        assert_eq!(
            "ark".parse::<KernelChoice>().unwrap(),
            KernelChoice::Adaptive
        );
        assert_eq!(
            "l2".parse::<KernelChoice>().unwrap(),
            KernelChoice::Fixed(2.0)
        );
        assert_eq!(
            "fixed:-1.5".parse::<KernelChoice>().unwrap(),
            KernelChoice::Fixed(-1.5)
        );
        assert!("fixed:abc".parse::<KernelChoice>().is_err());
        assert!("huber".parse::<KernelChoice>().is_err());
        assert_eq!(KernelChoice::Fixed(0.5).to_string(), "fixed:0.5");
    }

    #[test]
    fn config_validation() {
        KernelConfig::default().validate().unwrap();
        let bad = KernelConfig {
            alpha_dynamic: 3.0,
            ..KernelConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(KernelConfig {
            tau: 0.0,
            ..KernelConfig::default()
        }
        .validate()
        .is_err());
    }
}
