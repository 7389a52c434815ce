//! Partial observations, their likelihood, and the guiding potentials.
//!
//! An observation selects `S_y` leads and `T_y` time indices through a pair
//! of injective maps and adds per-lead Gaussian noise:
//! `y[l, t] = x[lead(l), time(t)] + sigma_l eps`.
//!
//! Guidance assigns each lead the diffusion step `tau_l` whose cumulative
//! noise matches `sigma_l`, and at step k applies a Gaussian potential of
//! variance `upsilon_k^2 - (1 - delta) sigma_l^2` to the leads in
//! `V_k = {l : k >= tau_l}`.

use crate::error::{Error, Result};
use crate::math::ln_normal_pdf;
use crate::schedule::NoiseSchedule;
use crate::signal::SignalState;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Injective lead/time index maps (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationMask {
    leads: Vec<usize>,
    times: Vec<usize>,
}

impl ObservationMask {
    pub fn new(leads: Vec<usize>, times: Vec<usize>) -> Result<Self> {
        if leads.is_empty() || times.is_empty() {
            return Err(Error::InvalidConfig(
                "mask needs at least one lead and one time index".into(),
            ));
        }
        for (name, v) in [("lead", &leads), ("time", &times)] {
            let mut seen = v.clone();
            seen.sort_unstable();
            if seen.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidConfig(format!(
                    "{name} map must be injective"
                )));
            }
        }
        Ok(Self { leads, times })
    }

    /// Identity mask observing every coordinate of an L x T state.
    pub fn full(channels: usize, samples: usize) -> Self {
        Self {
            leads: (0..channels).collect(),
            times: (0..samples).collect(),
        }
    }

    pub fn n_leads(&self) -> usize {
        self.leads.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// Channel index observed by observation lead `l`.
    pub fn lead(&self, l: usize) -> usize {
        self.leads[l]
    }

    /// Sample index observed by observation time `t`.
    pub fn time(&self, t: usize) -> usize {
        self.times[t]
    }

    pub fn leads(&self) -> &[usize] {
        &self.leads
    }

    pub fn times(&self) -> &[usize] {
        &self.times
    }

    pub fn check_in_range(&self, channels: usize, samples: usize) -> Result<()> {
        if let Some(l) = self.leads.iter().find(|&&l| l >= channels) {
            return Err(Error::InvalidConfig(format!(
                "mask lead index {l} out of range for {channels} channels"
            )));
        }
        if let Some(t) = self.times.iter().find(|&&t| t >= samples) {
            return Err(Error::InvalidConfig(format!(
                "mask time index {t} out of range for {samples} samples"
            )));
        }
        Ok(())
    }

    /// Parses two CSV lines of indices: first the leads, then the times.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<usize>, _> =
                line.split(',').map(|f| f.trim().parse::<usize>()).collect();
            rows.push(row.map_err(|e| Error::Parse(format!("mask index list: {e}")))?);
        }
        if rows.len() != 2 {
            return Err(Error::Parse(format!(
                "mask CSV needs exactly 2 non-empty lines (leads, times), got {}",
                rows.len()
            )));
        }
        let times = rows.pop().unwrap();
        let leads = rows.pop().unwrap();
        ObservationMask::new(leads, times)
    }

    pub fn to_csv(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!("{}\n{}\n", join(&self.leads), join(&self.times))
    }
}

/// Masked noisy measurements with per-lead noise stds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub mask: ObservationMask,
    pub sigma: Vec<f64>,
    /// S_y x T_y values, stored row-major as nested arrays in JSON.
    pub y: Vec<Vec<f64>>,
}

impl Observation {
    pub fn new(mask: ObservationMask, sigma: Vec<f64>, y: Vec<Vec<f64>>) -> Result<Self> {
        if sigma.len() != mask.n_leads() {
            return Err(Error::InvalidConfig(format!(
                "sigma has {} entries for {} observed leads",
                sigma.len(),
                mask.n_leads()
            )));
        }
        if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidConfig(
                "sigma entries must be finite and >= 0".into(),
            ));
        }
        if y.len() != mask.n_leads() || y.iter().any(|row| row.len() != mask.n_times()) {
            return Err(Error::InvalidConfig(format!(
                "y must be {} x {}",
                mask.n_leads(),
                mask.n_times()
            )));
        }
        if y.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("y contains non-finite entries".into()));
        }
        Ok(Self { mask, sigma, y })
    }

    pub fn n_leads(&self) -> usize {
        self.mask.n_leads()
    }

    pub fn n_times(&self) -> usize {
        self.mask.n_times()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Observation = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("observation json: {e}")))?;
        // Re-validate: serde bypasses the constructor.
        Observation::new(raw.mask, raw.sigma, raw.y)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("observation serializes")
    }
}

/// Draws `y[l, t] = x[lead(l), time(t)] + sigma_l eps`.
pub fn observe<R: Rng>(
    x: &SignalState,
    mask: &ObservationMask,
    sigma: &[f64],
    rng: &mut R,
) -> Result<Observation> {
    mask.check_in_range(x.channels(), x.samples())?;
    if sigma.len() != mask.n_leads() {
        return Err(Error::InvalidConfig(format!(
            "sigma has {} entries for {} observed leads",
            sigma.len(),
            mask.n_leads()
        )));
    }
    let mut y = Vec::with_capacity(mask.n_leads());
    for (l, &s) in sigma.iter().enumerate() {
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::InvalidConfig(format!("sigma[{l}] = {s} invalid")));
        }
        let row: Vec<f64> = (0..mask.n_times())
            .map(|t| {
                x.data()[[mask.lead(l), mask.time(t)]] + s * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        y.push(row);
    }
    Observation::new(mask.clone(), sigma.to_vec(), y)
}

/// Exact observation log-likelihood
/// `sum_{l,t} log N(x[lead(l), time(t)]; y[l,t], sigma_l^2)`.
pub fn log_likelihood(x: &SignalState, obs: &Observation) -> Result<f64> {
    log_likelihood_with_sigma(x, obs, &obs.sigma)
}

/// Likelihood with the noise stds replaced (used by the MLE over phi).
pub fn log_likelihood_with_sigma(x: &SignalState, obs: &Observation, sigma: &[f64]) -> Result<f64> {
    obs.mask.check_in_range(x.channels(), x.samples())?;
    if sigma.len() != obs.n_leads() {
        return Err(Error::InvalidConfig(format!(
            "sigma has {} entries for {} observed leads",
            sigma.len(),
            obs.n_leads()
        )));
    }
    let mut total = 0.0;
    for l in 0..obs.n_leads() {
        let s = sigma[l];
        if s <= 0.0 {
            return Err(Error::DegenerateObservation(format!(
                "likelihood needs sigma[{l}] > 0, got {s}"
            )));
        }
        let var = s * s;
        for t in 0..obs.n_times() {
            let xv = x.data()[[obs.mask.lead(l), obs.mask.time(t)]];
            total += ln_normal_pdf(xv, obs.y[l][t], var);
        }
    }
    Ok(total)
}

/// Smallest step k with `upsilon_k >= sigma_l`, floored at 1.
pub fn tau_of_sigma(sigma: &[f64], schedule: &NoiseSchedule) -> Result<Vec<usize>> {
    sigma
        .iter()
        .map(|&s| {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::InvalidConfig(format!("sigma = {s} invalid")));
            }
            if s > schedule.sigma_max() {
                return Err(Error::GuidanceInfeasible(format!(
                    "sigma = {s} exceeds sigma_max = {}",
                    schedule.sigma_max()
                )));
            }
            // upsilon is strictly increasing; scan for the first level >= s.
            let k = (1..=schedule.k_max())
                .find(|&k| schedule.upsilon(k) >= s)
                .unwrap_or(schedule.k_max());
            Ok(k.max(1))
        })
        .collect()
}

/// Per-lead guidance data: the slack `delta`, the matched steps `tau`, and
/// the effective stds entering the potential variances.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceParams {
    pub delta: f64,
    pub tau: Vec<usize>,
    /// sigma with exact zeros replaced by upsilon_1 (noiseless inpainting rule).
    sigma_pot: Vec<f64>,
}

impl GuidanceParams {
    pub fn new(delta: f64, sigma: &[f64], schedule: &NoiseSchedule) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0 && delta <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "delta must lie in (0, 1], got {delta}"
            )));
        }
        let tau = tau_of_sigma(sigma, schedule)?;
        let sigma_pot = sigma
            .iter()
            .map(|&s| if s == 0.0 { schedule.upsilon(1) } else { s })
            .collect();
        Ok(Self {
            delta,
            tau,
            sigma_pot,
        })
    }

    /// Observed leads active at step k: `V_k = {l : k >= tau_l}`.
    pub fn active_leads(&self, k: usize) -> Vec<usize> {
        (0..self.tau.len()).filter(|&l| k >= self.tau[l]).collect()
    }

    pub fn is_active(&self, k: usize, l: usize) -> bool {
        k >= self.tau[l]
    }

    /// Potential variance `sigma_{k,y,l}^2 = upsilon_k^2 - (1 - delta) sigma_l^2`.
    ///
    /// Positive for every k >= tau_l because `upsilon_{tau_l} >= sigma_l`.
    pub fn potential_var(&self, k: usize, l: usize, schedule: &NoiseSchedule) -> Result<f64> {
        let v = schedule.upsilon2(k) - (1.0 - self.delta) * self.sigma_pot[l] * self.sigma_pot[l];
        if v <= 0.0 {
            return Err(Error::InvariantViolation(format!(
                "potential variance {v} <= 0 at k = {k}, lead {l}"
            )));
        }
        Ok(v)
    }

    /// First step at which any lead becomes active.
    pub fn min_tau(&self) -> usize {
        self.tau.iter().copied().min().unwrap_or(1)
    }
}

/// Log guiding potential
/// `sum_{l in V_k} sum_t log N(x[lead(l), time(t)]; y[l,t], sigma_{k,y,l}^2)`;
/// 0 when `V_k` is empty.
pub fn log_potential(
    x: &SignalState,
    k: usize,
    obs: &Observation,
    guidance: &GuidanceParams,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    obs.mask.check_in_range(x.channels(), x.samples())?;
    let mut total = 0.0;
    for l in 0..obs.n_leads() {
        if !guidance.is_active(k, l) {
            continue;
        }
        let var = guidance.potential_var(k, l, schedule)?;
        for t in 0..obs.n_times() {
            let xv = x.data()[[obs.mask.lead(l), obs.mask.time(t)]];
            total += ln_normal_pdf(xv, obs.y[l][t], var);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::LN_2PI;
    use crate::rng::StreamKey;
    use crate::schedule::ScheduleSpec;
    use ndarray::array;

    fn schedule() -> NoiseSchedule {
        ScheduleSpec::geometric(8, 0.05, 4.0).build().unwrap()
    }

    #[test]
    fn mask_rejects_duplicates_and_empty() {
        assert!(ObservationMask::new(vec![0, 0], vec![1]).is_err());
        assert!(ObservationMask::new(vec![0], vec![2, 2]).is_err());
        assert!(ObservationMask::new(vec![], vec![0]).is_err());
        assert!(ObservationMask::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn mask_csv_round_trip() {
        let m = ObservationMask::new(vec![2, 0], vec![1, 3, 5]).unwrap();
        let back = ObservationMask::from_csv(&m.to_csv()).unwrap();
        assert_eq!(m, back);
        assert!(ObservationMask::from_csv("1,2\n").is_err());
        assert!(ObservationMask::from_csv("a,b\nc\n").is_err());
    }

    #[test]
    fn observe_noiseless_extracts_submatrix() {
        let x = SignalState::new(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let mask = ObservationMask::new(vec![1], vec![0, 2]).unwrap();
        let mut rng = StreamKey::new(0).stream(&[0]);
        let obs = observe(&x, &mask, &[0.0], &mut rng).unwrap();
        assert_eq!(obs.y, vec![vec![4.0, 6.0]]);
    }

    #[test]
    fn observe_residual_variance_matches_sigma() {
        let x = SignalState::zeros(2, 1);
        let mask = ObservationMask::full(2, 1);
        let sigma = [0.5, 2.0];
        let mut rng = StreamKey::new(11).stream(&[1]);
        let n = 50_000;
        let mut sumsq = [0.0f64; 2];
        for _ in 0..n {
            let obs = observe(&x, &mask, &sigma, &mut rng).unwrap();
            for l in 0..2 {
                sumsq[l] += obs.y[l][0] * obs.y[l][0];
            }
        }
        for l in 0..2 {
            let var = sumsq[l] / n as f64;
            let expect = sigma[l] * sigma[l];
            let tol = 3.0 * expect * (2.0 / n as f64).sqrt();
            assert!((var - expect).abs() < tol, "lead {l}: {var} vs {expect}");
        }
    }

    #[test]
    fn observe_rejects_out_of_range_mask() {
        let x = SignalState::zeros(2, 3);
        let mask = ObservationMask::new(vec![2], vec![0]).unwrap();
        let mut rng = StreamKey::new(0).stream(&[0]);
        assert!(observe(&x, &mask, &[0.1], &mut rng).is_err());
    }

    #[test]
    fn log_likelihood_matching_signal() {
        // x matching y exactly with sigma = 1 gives -(S_y T_y / 2) log(2 pi).
        let x = SignalState::new(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let mask = ObservationMask::full(2, 2);
        let y = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let obs = Observation::new(mask, vec![1.0, 1.0], y).unwrap();
        let ll = log_likelihood(&x, &obs).unwrap();
        assert!((ll - (-(4.0 / 2.0) * LN_2PI)).abs() < 1e-12);

        // one coordinate off by sigma costs exactly 1/2
        let x2 = SignalState::new(array![[2.0, 2.0], [3.0, 4.0]]).unwrap();
        let ll2 = log_likelihood(&x2, &obs).unwrap();
        assert!((ll - ll2 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_rejects_zero_sigma() {
        let x = SignalState::zeros(1, 1);
        let obs = Observation::new(
            ObservationMask::full(1, 1),
            vec![0.0],
            vec![vec![0.0]],
        )
        .unwrap();
        assert!(matches!(
            log_likelihood(&x, &obs),
            Err(Error::DegenerateObservation(_))
        ));
    }

    #[test]
    fn log_likelihood_equals_scalar_pdf_sum() {
        let x = SignalState::new(array![[0.3, -0.7, 1.1], [2.0, 0.0, -1.0]]).unwrap();
        let mask = ObservationMask::new(vec![1, 0], vec![2, 0]).unwrap();
        let y = vec![vec![0.5, 1.8], vec![1.0, 0.1]];
        let sigma = vec![0.7, 1.3];
        let obs = Observation::new(mask.clone(), sigma.clone(), y.clone()).unwrap();
        let ll = log_likelihood(&x, &obs).unwrap();
        // independent scalar sum
        let mut expect = 0.0;
        for l in 0..2 {
            for t in 0..2 {
                let xv = x.data()[[mask.lead(l), mask.time(t)]];
                let var = sigma[l] * sigma[l];
                expect += -0.5 * ((var * std::f64::consts::TAU).ln())
                    - (xv - y[l][t]) * (xv - y[l][t]) / (2.0 * var);
            }
        }
        assert!((ll - expect).abs() < 1e-12);
    }

    #[test]
    fn tau_selection_rules() {
        let s = schedule();
        // exact match
        let tau = tau_of_sigma(&[s.upsilon(5)], &s).unwrap();
        assert_eq!(tau, vec![5]);
        // below upsilon_1 (including zero) floors at 1
        let tau = tau_of_sigma(&[0.0, s.upsilon(1) * 0.5], &s).unwrap();
        assert_eq!(tau, vec![1, 1]);
        // strictly between upsilon_4 and upsilon_5 -> 5
        let mid = 0.5 * (s.upsilon(4) + s.upsilon(5));
        let tau = tau_of_sigma(&[mid], &s).unwrap();
        assert_eq!(tau, vec![5]);
        // above sigma_max -> infeasible
        assert!(matches!(
            tau_of_sigma(&[s.sigma_max() * 1.01], &s),
            Err(Error::GuidanceInfeasible(_))
        ));
    }

    #[test]
    fn active_set_matches_definition() {
        let s = schedule();
        let sigma = vec![s.upsilon(2), s.upsilon(6), 0.0];
        let g = GuidanceParams::new(0.01, &sigma, &s).unwrap();
        assert_eq!(g.tau, vec![2, 6, 1]);
        for k in 0..=s.k_max() {
            let active = g.active_leads(k);
            for l in 0..3 {
                assert_eq!(active.contains(&l), k >= g.tau[l]);
            }
        }
        // V_K contains every lead once all tau <= K
        assert_eq!(g.active_leads(s.k_max()), vec![0, 1, 2]);
        // V_0 is empty by the tau floor
        assert!(g.active_leads(0).is_empty());
    }

    #[test]
    fn potential_examples_and_tightening() {
        let s = schedule();
        let sigma = vec![s.upsilon(5)];
        let g = GuidanceParams::new(0.01, &sigma, &s).unwrap();
        // at k = tau with sigma = upsilon_tau the variance is delta sigma^2
        let v = g.potential_var(5, 0, &s).unwrap();
        assert!((v - 0.01 * sigma[0] * sigma[0]).abs() < 1e-12 * v.max(1.0));
        // variance strictly decreases as k decreases toward tau
        let mut prev = f64::INFINITY;
        for k in (5..=s.k_max()).rev() {
            let v = g.potential_var(k, 0, &s).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn potential_zero_below_min_tau_and_matches_scalar_sum() {
        let s = schedule();
        let x = SignalState::new(array![[0.1, -0.4], [0.9, 0.3]]).unwrap();
        let mask = ObservationMask::new(vec![0, 1], vec![1, 0]).unwrap();
        let sigma = vec![s.upsilon(3), s.upsilon(5)];
        let y = vec![vec![0.2, 0.0], vec![1.0, -0.2]];
        let obs = Observation::new(mask.clone(), sigma.clone(), y.clone()).unwrap();
        let g = GuidanceParams::new(0.05, &sigma, &s).unwrap();

        // below min tau the potential is identically zero
        for k in 0..3 {
            assert_eq!(log_potential(&x, k, &obs, &g, &s).unwrap(), 0.0);
        }
        // mid-range: only lead 0 active
        let lp = log_potential(&x, 4, &obs, &g, &s).unwrap();
        let var0 = g.potential_var(4, 0, &s).unwrap();
        let mut expect = 0.0;
        for t in 0..2 {
            let xv = x.data()[[mask.lead(0), mask.time(t)]];
            let d = xv - y[0][t];
            expect += -0.5 * ((var0 * std::f64::consts::TAU).ln() + d * d / var0);
        }
        assert!((lp - expect).abs() < 1e-12);
    }

    #[test]
    fn noiseless_lead_gets_sharp_terminal_potential()  {
        let s = schedule();
        let g = GuidanceParams::new(0.01, &[0.0], &s).unwrap();
        assert_eq!(g.tau, vec![1]);
        let v = g.potential_var(1, 0, &s).unwrap();
        let expect = 0.01 * s.upsilon2(1);
        assert!((v - expect).abs() < 1e-15);
    }

    #[test]
    fn guidance_rejects_bad_delta() {
        let s = schedule();
        assert!(GuidanceParams::new(0.0, &[0.1], &s).is_err());
        assert!(GuidanceParams::new(1.5, &[0.1], &s).is_err());
        assert!(GuidanceParams::new(f64::NAN, &[0.1], &s).is_err());
        GuidanceParams::new(1.0, &[0.1], &s).unwrap();
    }

    #[test]
    fn observation_json_round_trip_and_validation() {
        let mask = ObservationMask::new(vec![0, 2], vec![1]).unwrap();
        let obs = Observation::new(mask, vec![0.1, 0.2], vec![vec![1.0], vec![2.0]]).unwrap();
        let back = Observation::from_json(&obs.to_json()).unwrap();
        assert_eq!(obs, back);
        // malformed: sigma length mismatch survives serde but not validation
        let bad = r#"{"mask":{"leads":[0],"times":[0]},"sigma":[0.1,0.2],"y":[[1.0]]}"#;
        assert!(Observation::from_json(bad).is_err());
        let bad = r#"{"mask":{"leads":[0],"times":[0]},"sigma":[0.1],"y":[[1e999]]}"#;
        assert!(Observation::from_json(bad).is_err());
    }
}
