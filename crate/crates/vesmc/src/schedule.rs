//! Variance-exploding noise schedules and inference-process coefficients.
//!
//! A schedule fixes three grids over diffusion steps `k`:
//!
//! * `upsilon[k]` — cumulative noise std after k forward steps (`upsilon[0] = 0`,
//!   `upsilon[K] = sigma_max`), with `upsilon_k^2 = sum_{l<=k} rho_l^2`;
//! * `rho[k]` — per-step forward noise std, k in [1, K];
//! * `eta[k]` — inference-process std, k in [0, K-1], constrained by
//!   `eta_k^2 <= upsilon_k^2` for k >= 1 and `eta_0 > 0`.
//!
//! Squared values are stored alongside stds; all arithmetic and equality
//! checks run on the squared arrays.

use crate::error::{Error, Result};
use crate::signal::SignalState;
use serde::{Deserialize, Serialize};

/// Shape of the `upsilon` grid between `sigma_min` and `sigma_max`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum GridShape {
    /// Log-uniform spacing; the default. Spans wide sigma ranges evenly in log space.
    #[default]
    #[serde(rename = "geometric")]
    Geometric,
    /// Power-law spacing of the stds with the given exponent.
    #[serde(rename = "power")]
    Power(f64),
}

/// How the inference stds `eta` are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaRule {
    Named(NamedEtaRule),
    /// Explicit array `[eta_0, ..., eta_{K-1}]`.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NamedEtaRule {
    /// `eta_k^2 = (upsilon_k^2 / upsilon_{k+1}^2) rho_{k+1}^2`, which makes the
    /// inference kernel coincide with the forward-posterior bridge.
    #[serde(rename = "ddpm_matching")]
    DdpmMatching,
}

impl Default for EtaRule {
    fn default() -> Self {
        EtaRule::Named(NamedEtaRule::DdpmMatching)
    }
}

/// Serializable schedule description: `{K, sigma_min, sigma_max, grid, eta_rule}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    #[serde(rename = "K")]
    pub k: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    #[serde(default)]
    pub grid: GridShape,
    #[serde(default)]
    pub eta_rule: EtaRule,
}

impl ScheduleSpec {
    pub fn geometric(k: usize, sigma_min: f64, sigma_max: f64) -> Self {
        Self {
            k,
            sigma_min,
            sigma_max,
            grid: GridShape::Geometric,
            eta_rule: EtaRule::default(),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_spec(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ScheduleSpec =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("schedule json: {e}")))?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("schedule spec serializes")
    }
}

/// The `upsilon` / `rho` / `eta` grids governing forward, inference, and
/// backward processes. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    upsilon: Vec<f64>,  // len K+1, [0] = 0
    upsilon2: Vec<f64>, // squares, authoritative
    rho: Vec<f64>,      // len K, rho[i] = rho_{i+1}
    rho2: Vec<f64>,
    eta: Vec<f64>, // len K, eta[i] = eta_i for i in [0, K-1]
    eta2: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_spec(spec: &ScheduleSpec) -> Result<Self> {
        let k = spec.k;
        if k == 0 {
            return Err(Error::InvalidConfig("K must be >= 1".into()));
        }
        if !(spec.sigma_min.is_finite() && spec.sigma_max.is_finite())
            || spec.sigma_min <= 0.0
            || spec.sigma_min >= spec.sigma_max
        {
            return Err(Error::InvalidConfig(format!(
                "need 0 < sigma_min < sigma_max, got [{}, {}]",
                spec.sigma_min, spec.sigma_max
            )));
        }
        let mut upsilon = Vec::with_capacity(k + 1);
        upsilon.push(0.0);
        if k == 1 {
            // A single-point grid can only honor upsilon_K = sigma_max.
            upsilon.push(spec.sigma_max);
        } else {
            for i in 1..=k {
                let t = (i - 1) as f64 / (k - 1) as f64;
                let u = match spec.grid {
                    GridShape::Geometric => {
                        (spec.sigma_min.ln() + t * (spec.sigma_max.ln() - spec.sigma_min.ln()))
                            .exp()
                    }
                    GridShape::Power(p) => {
                        if !(p.is_finite() && p > 0.0) {
                            return Err(Error::InvalidConfig(format!(
                                "power grid exponent must be positive, got {p}"
                            )));
                        }
                        let a = spec.sigma_min.powf(1.0 / p);
                        let b = spec.sigma_max.powf(1.0 / p);
                        (a + t * (b - a)).powf(p)
                    }
                };
                upsilon.push(u);
            }
            // Pin the endpoints exactly; the interior came from the grid formula.
            upsilon[1] = spec.sigma_min;
            upsilon[k] = spec.sigma_max;
        }
        Self::from_upsilon(upsilon, &spec.eta_rule)
    }

    /// Builds from an explicit `upsilon` grid (`upsilon[0]` must be 0).
    pub fn from_upsilon(upsilon: Vec<f64>, eta_rule: &EtaRule) -> Result<Self> {
        let k = upsilon.len().saturating_sub(1);
        if k == 0 {
            return Err(Error::InvalidConfig("K must be >= 1".into()));
        }
        if upsilon[0] != 0.0 {
            return Err(Error::InvalidConfig("upsilon_0 must be 0".into()));
        }
        for w in upsilon.windows(2) {
            if !w[1].is_finite() || w[1] <= w[0] {
                return Err(Error::InvalidConfig(
                    "upsilon grid must be finite and strictly increasing".into(),
                ));
            }
        }
        let upsilon2: Vec<f64> = upsilon.iter().map(|u| u * u).collect();
        let rho2: Vec<f64> = upsilon2.windows(2).map(|w| w[1] - w[0]).collect();
        if rho2.iter().any(|&r| r <= 0.0) {
            return Err(Error::InvalidConfig(
                "upsilon grid too dense: rho_k^2 underflows to zero".into(),
            ));
        }
        let rho: Vec<f64> = rho2.iter().map(|r| r.sqrt()).collect();

        let eta2: Vec<f64> = match eta_rule {
            EtaRule::Named(NamedEtaRule::DdpmMatching) => {
                let mut eta2: Vec<f64> = (1..k)
                    .map(|i| upsilon2[i] / upsilon2[i + 1] * rho2[i])
                    .collect();
                // eta_0 has no matching constraint; extend by continuity.
                let eta0 = if k >= 2 { eta2[0] } else { upsilon2[1] };
                eta2.insert(0, eta0);
                eta2
            }
            EtaRule::Explicit(values) => {
                if values.len() != k {
                    return Err(Error::InvalidConfig(format!(
                        "explicit eta must have K = {k} entries, got {}",
                        values.len()
                    )));
                }
                if values.iter().any(|e| !e.is_finite() || *e < 0.0) {
                    return Err(Error::InvalidConfig(
                        "eta entries must be finite and non-negative".into(),
                    ));
                }
                values.iter().map(|e| e * e).collect()
            }
        };
        let eta: Vec<f64> = eta2.iter().map(|e| e.sqrt()).collect();
        let schedule = Self {
            upsilon,
            upsilon2,
            rho,
            rho2,
            eta,
            eta2,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    /// Checks the schedule invariants; run at construction and after deserialization.
    pub fn validate(&self) -> Result<()> {
        let k = self.k_max();
        if self.eta2[0] <= 0.0 {
            return Err(Error::InvalidConfig("eta_0 must be positive".into()));
        }
        for i in 1..k {
            if self.eta2[i] > self.upsilon2[i] * (1.0 + 1e-12) {
                return Err(Error::InvalidConfig(format!(
                    "eta_{i}^2 = {} exceeds upsilon_{i}^2 = {}",
                    self.eta2[i], self.upsilon2[i]
                )));
            }
        }
        // Telescoping: sum of rho^2 reproduces upsilon^2.
        let mut acc = 0.0;
        for i in 1..=k {
            acc += self.rho2[i - 1];
            let rel = (acc - self.upsilon2[i]).abs() / self.upsilon2[i];
            if rel > 1e-12 {
                return Err(Error::InvariantViolation(format!(
                    "sum of rho^2 drifts from upsilon_{i}^2 by {rel:e} relative"
                )));
            }
        }
        Ok(())
    }

    /// Number of diffusion steps K.
    pub fn k_max(&self) -> usize {
        self.upsilon.len() - 1
    }

    pub fn sigma_max(&self) -> f64 {
        self.upsilon[self.k_max()]
    }

    /// Cumulative std, k in [0, K].
    pub fn upsilon(&self, k: usize) -> f64 {
        self.upsilon[k]
    }

    pub fn upsilon2(&self, k: usize) -> f64 {
        self.upsilon2[k]
    }

    /// Per-step std, k in [1, K].
    pub fn rho(&self, k: usize) -> f64 {
        self.rho[k - 1]
    }

    pub fn rho2(&self, k: usize) -> f64 {
        self.rho2[k - 1]
    }

    /// Inference std, k in [0, K-1].
    pub fn eta(&self, k: usize) -> f64 {
        self.eta[k]
    }

    pub fn eta2(&self, k: usize) -> f64 {
        self.eta2[k]
    }

    /// Coefficient `c` of the inference-bridge mean at index k (see [`bridge_mean`]).
    pub fn bridge_coefficient(&self, k: usize) -> Result<f64> {
        if k < 1 || k > self.k_max() {
            return Err(Error::IndexOrder(format!(
                "bridge index k = {k} outside [1, {}]",
                self.k_max()
            )));
        }
        let up_prev2 = self.upsilon2[k - 1];
        let eta_prev2 = self.eta2[k - 1];
        if eta_prev2 > up_prev2 {
            return Err(Error::InvariantViolation(format!(
                "eta_{}^2 = {} exceeds upsilon_{}^2 = {}",
                k - 1,
                eta_prev2,
                k - 1,
                up_prev2
            )));
        }
        Ok(((up_prev2 - eta_prev2) / self.upsilon2[k]).sqrt())
    }
}

/// Per-step inference stds under the DDPM-matching rule,
/// `eta_k^2 = (upsilon_k^2 / upsilon_{k+1}^2) rho_{k+1}^2` for k in [1, K-1],
/// extended to k = 0 by `eta_0 = eta_1`.
pub fn eta_ddpm_matching(schedule: &NoiseSchedule) -> Vec<f64> {
    let k = schedule.k_max();
    let mut eta2: Vec<f64> = (1..k)
        .map(|i| schedule.upsilon2(i) / schedule.upsilon2(i + 1) * schedule.rho2(i + 1))
        .collect();
    let eta0 = if k >= 2 { eta2[0] } else { schedule.upsilon2(1) };
    eta2.insert(0, eta0);
    eta2.into_iter().map(|e| e.sqrt()).collect()
}

/// Mean of the inference bridge to step k-1 given the endpoints:
/// `x0 + c (x_k - x0)` with `c = sqrt((upsilon_{k-1}^2 - eta_{k-1}^2) / upsilon_k^2)`.
pub fn bridge_mean(
    x0: &SignalState,
    xk: &SignalState,
    k: usize,
    schedule: &NoiseSchedule,
) -> Result<SignalState> {
    x0.check_same_shape(xk)?;
    let c = schedule.bridge_coefficient(k)?;
    let data = x0.data() + &(c * (xk.data() - x0.data()));
    Ok(SignalState::from_array(data))
}

/// KL-equivalence training-loss weights `gamma_k^2`, k in [1, K]:
/// `gamma_1^2 = eta_0^{-2}` and for k >= 2
/// `gamma_k^2 = eta_{k-1}^{-2} (1 - sqrt((upsilon_{k-1}^2 - eta_{k-1}^2) / upsilon_k^2))^2`.
pub fn loss_weights(schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let k_max = schedule.k_max();
    for i in 0..k_max {
        if schedule.eta2(i) == 0.0 {
            return Err(Error::DegenerateSchedule(format!(
                "loss weights divide by eta_{i}^2 = 0"
            )));
        }
    }
    let mut gamma2 = Vec::with_capacity(k_max);
    gamma2.push(1.0 / schedule.eta2(0));
    for k in 2..=k_max {
        let c = schedule.bridge_coefficient(k)?;
        let g = (1.0 - c) * (1.0 - c) / schedule.eta2(k - 1);
        gamma2.push(g);
    }
    Ok(gamma2)
}
