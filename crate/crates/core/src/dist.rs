//! Gaussian return distributions and the losses defined on them.
//!
//! A critic models the soft return of a state-action pair as
//! `N(mean, std^2)`. Training signals arrive in three flavours:
//!
//! * proxy values: a Dirac label at `+1` for the action a human supplied and
//!   at `-1` for the action the agent proposed instead ([`pv_grads`]);
//! * reward-free temporal differences, which propagate those labels through
//!   the dynamics ([`reward_free_target`] + [`td_grads`]);
//! * ordinary rewarded temporal differences ([`rewarded_target`]).
//!
//! The KL divergence from a Dirac to a Gaussian is infinite, so the losses are
//! defined at the gradient level. Each returns a [`PathGrads`]: the derivative
//! along the mean head (with the std held fixed) and along the std head, the
//! latter scaled by the variance-rate factor `eta`.
//!
//! The same Gaussians drive the shared-control switch: the probability that
//! the self-learning action is better than the human-guided one is
//! [`confidence_probability`], and [`intervene`] keeps the human-guided policy
//! unless that probability clears `1 - delta`.

use serde::{Deserialize, Serialize};

pub const STD_MIN: f64 = 0.05;
pub const STD_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistError {
    #[error("standard deviation must be positive, got {0}")]
    NonPositiveStd(f64),
    #[error("both return distributions are degenerate (zero spread)")]
    Degenerate,
    #[error("non-finite input")]
    NonFinite,
    #[error("delta {0} outside (0, 0.5]")]
    Delta(f64),
    #[error("std bounds [{0}, {1}] are not ordered and positive")]
    StdBounds(f64, f64),
}

pub type Result<T> = std::result::Result<T, DistError>;

/// Gaussian model `N(mean, std^2)` of a return distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianReturn {
    pub mean: f64,
    pub std: f64,
}

impl GaussianReturn {
    pub fn new(mean: f64, std: f64) -> Self {
        Self { mean, std }
    }

    /// One draw `mean + std * eps` for a standard-normal `eps`.
    pub fn sample_with(&self, eps: f64) -> f64 {
        self.mean + self.std * eps
    }
}

/// Dirac label attached to one side of a takeover pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxyTarget {
    /// The action the human took: labelled `+1`.
    Human,
    /// The action the agent proposed: labelled `-1`.
    Novice,
}

impl ProxyTarget {
    pub fn value(self) -> f64 {
        match self {
            ProxyTarget::Human => 1.0,
            ProxyTarget::Novice => -1.0,
        }
    }
}

/// Loss derivatives along the mean path and along the (eta-scaled) std path.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PathGrads {
    pub d_mean: f64,
    pub d_std: f64,
}

/// Bounded smooth map from a raw network output to a standard deviation.
///
/// `std = lo + softplus(raw)`, saturating at `hi`. Returns the std and its
/// derivative with respect to `raw` (zero once saturated).
pub fn std_from_raw(raw: f64, lo: f64, hi: f64) -> (f64, f64) {
    let sp = if raw > 30.0 { raw } else { raw.exp().ln_1p() };
    let s = lo + sp;
    if s >= hi {
        (hi, 0.0)
    } else {
        (s, 1.0 / (1.0 + (-raw).exp()))
    }
}

fn check_std(std: f64) -> Result<()> {
    if !std.is_finite() {
        return Err(DistError::NonFinite);
    }
    if std <= 0.0 {
        return Err(DistError::NonPositiveStd(std));
    }
    Ok(())
}

fn gaussian_fit_grads(target: f64, z: GaussianReturn, eta: f64) -> Result<PathGrads> {
    check_std(z.std)?;
    if !target.is_finite() || !z.mean.is_finite() || !eta.is_finite() {
        return Err(DistError::NonFinite);
    }
    let err = target - z.mean;
    let var = z.std * z.std;
    Ok(PathGrads {
        d_mean: -err / var,
        d_std: -eta * (err * err - var) / (var * z.std),
    })
}

/// Proxy-value gradients for one labelled action.
pub fn pv_grads(target: ProxyTarget, z: GaussianReturn, eta: f64) -> Result<PathGrads> {
    gaussian_fit_grads(target.value(), z, eta)
}

/// Temporal-difference gradients toward a sampled target value.
pub fn td_grads(target_value: f64, z: GaussianReturn, eta: f64) -> Result<PathGrads> {
    gaussian_fit_grads(target_value, z, eta)
}

/// `gamma * (z_next - alpha * logp_next)`.
pub fn reward_free_target(z_next_sample: f64, logp_next: f64, alpha: f64, gamma: f64) -> f64 {
    gamma * (z_next_sample - alpha * logp_next)
}

/// `r + gamma * (z_next - alpha * logp_next)`.
pub fn rewarded_target(r: f64, z_next_sample: f64, logp_next: f64, alpha: f64, gamma: f64) -> f64 {
    r + reward_free_target(z_next_sample, logp_next, alpha, gamma)
}

/// Clamps a TD target into `target_z.mean +- k * target_z.std`.
pub fn clip_target(y: f64, target_z: GaussianReturn, k: f64) -> f64 {
    let b = k * target_z.std;
    y.clamp(target_z.mean - b, target_z.mean + b)
}

/// Standard normal upper tail `1 - Phi(x)`.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(x / std::f64::consts::SQRT_2)
}

/// Probability that a draw from `zr` exceeds an independent draw from `zg`.
pub fn confidence_probability(zr: GaussianReturn, zg: GaussianReturn) -> Result<f64> {
    for s in [zr.std, zg.std] {
        if !s.is_finite() {
            return Err(DistError::NonFinite);
        }
        if s < 0.0 {
            return Err(DistError::NonPositiveStd(s));
        }
    }
    if !zr.mean.is_finite() || !zg.mean.is_finite() {
        return Err(DistError::NonFinite);
    }
    let spread = zr.std.hypot(zg.std);
    if spread == 0.0 {
        return Err(DistError::Degenerate);
    }
    Ok(normal_sf((zg.mean - zr.mean) / spread))
}

/// Confidence switch parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchConfig {
    pub delta: f64,
    pub std_max: f64,
}

impl SwitchConfig {
    pub fn new(delta: f64, std_max: f64) -> Result<Self> {
        if !(delta > 0.0 && delta <= 0.5) {
            return Err(DistError::Delta(delta));
        }
        if !(std_max >= STD_MIN) {
            return Err(DistError::StdBounds(STD_MIN, std_max));
        }
        Ok(Self { delta, std_max })
    }
}

impl Default for SwitchConfig {
    fn default() -> Self {
        Self {
            delta: 0.15,
            std_max: STD_MAX,
        }
    }
}

/// `true` keeps the human-guided policy: `p <= 1 - delta`.
pub fn intervene(p: f64, cfg: &SwitchConfig) -> bool {
    p <= 1.0 - cfg.delta
}
