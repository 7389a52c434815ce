//! Guided sequential Monte Carlo sampler.
//!
//! Particles run the backward process from the reference law while the
//! observation enters through per-step Gaussian potentials. Each iteration
//! weights particles by `L_k(x_{k+1}, y) / g_{k+1}(y | x_{k+1})`, resamples
//! ancestors, and proposes from the conjugate kernel
//! `g_k(y | x) B_k(x_{k+1}, x) / L_k(x_{k+1}, y)` — all available in closed
//! form because potentials and kernels are coordinatewise Gaussian.

use crate::diffusion::{backward_mean, sample_reference, Denoiser};
use crate::error::{Error, Result};
use crate::math::{ln_normal_pdf, log_sum_exp};
use crate::observation::{GuidanceParams, Observation};
use crate::rng::{domain, StreamKey};
use crate::schedule::NoiseSchedule;
use crate::signal::SignalState;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Which inference std enters the weight numerator variance.
///
/// The conjugation of `L_k = int g_k(y|x) N(x; mu_k, eta_k^2 I) dx` yields
/// `eta_k^2`; `EtaNext` reproduces the `eta_{k+1}^2` variant instead (clamped
/// to `eta_{K-1}` at the top step, where `eta_K` does not exist).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightVariance {
    #[default]
    EtaCurrent,
    EtaNext,
}

/// When to resample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    /// Multinomial resampling at every step (the default).
    Multinomial,
    /// Resample only when ESS falls below `threshold * M`.
    AdaptiveEss { threshold: f64 },
}

impl Default for Resampling {
    fn default() -> Self {
        Resampling::Multinomial
    }
}

/// Sampler configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmcConfig {
    /// Particle count M.
    pub particles: usize,
    /// State shape (channels, samples).
    pub channels: usize,
    pub samples: usize,
    /// Guidance slack delta in (0, 1].
    pub delta: f64,
    pub seed: u64,
    #[serde(default)]
    pub resampling: Resampling,
    #[serde(default)]
    pub weight_variance: WeightVariance,
}

impl SmcConfig {
    pub fn new(particles: usize, channels: usize, samples: usize, seed: u64) -> Self {
        Self {
            particles,
            channels,
            samples,
            delta: 0.01,
            seed,
            resampling: Resampling::default(),
            weight_variance: WeightVariance::default(),
        }
    }
}

/// Weighted particle population at one diffusion step.
#[derive(Debug, Clone)]
pub struct ParticleCloud {
    pub particles: Vec<SignalState>,
    /// Accumulated log-weights; all zero right after a resample-move step.
    pub logw: Vec<f64>,
    pub k: usize,
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub k: usize,
    pub ess: f64,
    pub log_normalizer_increment: f64,
    pub resampled: bool,
}

/// Output of a full guided run.
#[derive(Debug, Clone)]
pub struct SmcRun {
    pub particles: Vec<SignalState>,
    pub logw: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub log_normalizer: f64,
}

impl SmcRun {
    /// Self-normalized posterior-mean estimate.
    pub fn posterior_mean(&self) -> Array2<f64> {
        let m = log_sum_exp(&self.logw);
        let mut acc = Array2::zeros(self.particles[0].data().dim());
        for (p, lw) in self.particles.iter().zip(&self.logw) {
            acc += &((lw - m).exp() * p.data());
        }
        acc
    }
}

/// Log incremental weight `log L_k(x_{k+1}, y) - log g_{k+1}(y | x_{k+1})`
/// given the precomputed backward mean `mu_k`.
fn weight_given_mean(
    mu_k: &SignalState,
    x_next: &SignalState,
    k: usize,
    obs: &Observation,
    guidance: &GuidanceParams,
    schedule: &NoiseSchedule,
    variant: WeightVariance,
) -> Result<f64> {
    let eta2_num = match variant {
        WeightVariance::EtaCurrent => schedule.eta2(k),
        WeightVariance::EtaNext => schedule.eta2((k + 1).min(schedule.k_max() - 1)),
    };
    let mut log_num = 0.0;
    for l in 0..obs.n_leads() {
        if !guidance.is_active(k, l) {
            continue;
        }
        let var = eta2_num + guidance.potential_var(k, l, schedule)?;
        for t in 0..obs.n_times() {
            let mv = mu_k.data()[[obs.mask.lead(l), obs.mask.time(t)]];
            log_num += ln_normal_pdf(mv, obs.y[l][t], var);
        }
    }
    let mut log_den = 0.0;
    for l in 0..obs.n_leads() {
        if !guidance.is_active(k + 1, l) {
            continue;
        }
        let var = guidance.potential_var(k + 1, l, schedule)?;
        for t in 0..obs.n_times() {
            let xv = x_next.data()[[obs.mask.lead(l), obs.mask.time(t)]];
            log_den += ln_normal_pdf(xv, obs.y[l][t], var);
        }
    }
    Ok(log_num - log_den)
}

/// Per-coordinate mean and variance of the guided proposal kernel given the
/// precomputed backward mean.
fn proposal_params_given_mean(
    mu_k: &SignalState,
    k: usize,
    obs: &Observation,
    guidance: &GuidanceParams,
    schedule: &NoiseSchedule,
) -> Result<(SignalState, Array2<f64>)> {
    let eta2 = schedule.eta2(k);
    let mut mean = mu_k.data().clone();
    let mut var = Array2::from_elem(mean.dim(), eta2);
    for l in 0..obs.n_leads() {
        if !guidance.is_active(k, l) {
            continue;
        }
        let pot = guidance.potential_var(k, l, schedule)?;
        let denom = eta2 + pot;
        for t in 0..obs.n_times() {
            let coord = [obs.mask.lead(l), obs.mask.time(t)];
            mean[coord] = (eta2 * obs.y[l][t] + pot * mu_k.data()[coord]) / denom;
            var[coord] = eta2 * pot / denom;
        }
    }
    Ok((SignalState::from_array(mean), var))
}

fn sample_from_params<R: Rng>(mean: &SignalState, var: &Array2<f64>, rng: &mut R) -> SignalState {
    let data = ndarray::Zip::from(mean.data())
        .and(var)
        .map_collect(|&m, &v| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal));
    SignalState::from_array(data)
}

/// Log incremental weight of a particle at `x_{k+1}`, k in [0, K-1].
pub fn smc_weight(
    x_next: &SignalState,
    k: usize,
    obs: &Observation,
    guidance: &GuidanceParams,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    variant: WeightVariance,
) -> Result<f64> {
    check_step(k, schedule)?;
    obs.mask.check_in_range(x_next.channels(), x_next.samples())?;
    // The numerator needs the denoised bridge mean only when V_k is nonempty.
    let mu_k = if guidance.active_leads(k).is_empty() {
        x_next.clone()
    } else {
        backward_mean(x_next, k, denoiser, schedule)?
    };
    weight_given_mean(&mu_k, x_next, k, obs, guidance, schedule, variant)
}

/// Mean/variance arrays of the guided proposal at step k.
pub fn smc_proposal_params(
    x_next: &SignalState,
    k: usize,
    obs: &Observation,
    guidance: &GuidanceParams,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
) -> Result<(SignalState, Array2<f64>)> {
    check_step(k, schedule)?;
    obs.mask.check_in_range(x_next.channels(), x_next.samples())?;
    let mu_k = backward_mean(x_next, k, denoiser, schedule)?;
    proposal_params_given_mean(&mu_k, k, obs, guidance, schedule)
}

/// Draws one particle from the guided proposal kernel at step k.
///
/// Unobserved coordinates follow the plain backward kernel
/// `N(mu_k, eta_k^2)`; observed active coordinates follow the
/// precision-weighted conjugate Gaussian.
pub fn smc_proposal<R: Rng>(
    x_next: &SignalState,
    k: usize,
    obs: &Observation,
    guidance: &GuidanceParams,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    rng: &mut R,
) -> Result<SignalState> {
    let (mean, var) = smc_proposal_params(x_next, k, obs, guidance, schedule, denoiser)?;
    Ok(sample_from_params(&mean, &var, rng))
}

fn check_step(k: usize, schedule: &NoiseSchedule) -> Result<()> {
    if k >= schedule.k_max() {
        return Err(Error::IndexOrder(format!(
            "smc step k = {k} outside [0, {}]",
            schedule.k_max() - 1
        )));
    }
    Ok(())
}

/// Effective sample size `(sum w)^2 / sum w^2` of normalized weights; in [1, M].
pub fn effective_sample_size(logw: &[f64]) -> f64 {
    let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return 0.0;
    }
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for lw in logw {
        let w = (lw - m).exp();
        s1 += w;
        s2 += w * w;
    }
    s1 * s1 / s2
}

/// M i.i.d. draws from the categorical with self-normalized log-weights.
pub fn resample_multinomial<R: Rng>(logw: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    if logw.is_empty() {
        return Err(Error::DegenerateWeights("no particles".into()));
    }
    if logw.iter().any(|w| w.is_nan()) {
        return Err(Error::DegenerateWeights("NaN log-weight".into()));
    }
    let norm = log_sum_exp(logw);
    if !norm.is_finite() {
        return Err(Error::DegenerateWeights(
            "all log-weights are -inf".into(),
        ));
    }
    let mut cdf = Vec::with_capacity(logw.len());
    let mut acc = 0.0;
    for lw in logw {
        acc += (lw - norm).exp();
        cdf.push(acc);
    }
    let ancestors = (0..logw.len())
        .map(|_| {
            let u: f64 = rng.random();
            cdf.partition_point(|&c| c < u).min(logw.len() - 1)
        })
        .collect();
    Ok(ancestors)
}

/// Runs Algorithm-style guided SMC from the reference law down to k = 0.
///
/// Weighting/proposal work is parallel across particles; every random draw
/// comes from a stream keyed by (seed, domain, step, particle), so output is
/// bit-identical for a fixed seed at any worker count.
pub fn run_guided_smc(
    obs: &Observation,
    config: &SmcConfig,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    guidance: &GuidanceParams,
) -> Result<SmcRun> {
    if config.particles == 0 {
        return Err(Error::InvalidConfig("need at least one particle".into()));
    }
    if guidance.tau.len() != obs.n_leads() {
        return Err(Error::InvalidConfig(format!(
            "guidance covers {} leads, observation has {}",
            guidance.tau.len(),
            obs.n_leads()
        )));
    }
    let mask_ok = obs.mask.check_in_range(config.channels, config.samples);
    mask_ok?;
    if let Some(&t) = guidance.tau.iter().find(|&&t| t > schedule.k_max()) {
        return Err(Error::GuidanceInfeasible(format!(
            "tau = {t} exceeds K = {}",
            schedule.k_max()
        )));
    }

    let key = StreamKey::new(config.seed);
    let m = config.particles;
    let mut particles: Vec<SignalState> = (0..m as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = key.stream(&[domain::SMC_INIT, i]);
            sample_reference(config.channels, config.samples, schedule, &mut rng)
        })
        .collect();
    let mut logw = vec![0.0f64; m];
    let mut diagnostics = Vec::with_capacity(schedule.k_max());
    let mut log_normalizer = 0.0;

    for k in (0..schedule.k_max()).rev() {
        let means: Vec<SignalState> = particles
            .par_iter()
            .map(|p| backward_mean(p, k, denoiser, schedule))
            .collect::<Result<_>>()?;
        let increments: Vec<f64> = particles
            .par_iter()
            .zip(means.par_iter())
            .map(|(p, mu)| {
                weight_given_mean(mu, p, k, obs, guidance, schedule, config.weight_variance)
            })
            .collect::<Result<_>>()?;

        let prev_norm = log_sum_exp(&logw);
        let updated: Vec<f64> = logw
            .iter()
            .zip(&increments)
            .map(|(a, b)| a + b)
            .collect();
        let new_norm = log_sum_exp(&updated);
        if !new_norm.is_finite() {
            return Err(Error::DegenerateWeights(format!(
                "all particle weights vanished at step k = {k}"
            )));
        }
        let ess = effective_sample_size(&updated);
        let resample = match config.resampling {
            Resampling::Multinomial => true,
            Resampling::AdaptiveEss { threshold } => ess < threshold * m as f64,
        };

        let sources: Vec<usize> = if resample {
            let mut rng = key.stream(&[domain::SMC_RESAMPLE, k as u64]);
            resample_multinomial(&updated, &mut rng)?
        } else {
            (0..m).collect()
        };
        particles = (0..m)
            .into_par_iter()
            .map(|i| {
                let (mean, var) =
                    proposal_params_given_mean(&means[sources[i]], k, obs, guidance, schedule)?;
                let mut rng = key.stream(&[domain::SMC_PROPOSAL, k as u64, i as u64]);
                Ok(sample_from_params(&mean, &var, &mut rng))
            })
            .collect::<Result<_>>()?;
        logw = if resample { vec![0.0; m] } else { updated };

        log_normalizer += new_norm - prev_norm;
        diagnostics.push(StepDiagnostics {
            k,
            ess,
            log_normalizer_increment: new_norm - prev_norm,
            resampled: resample,
        });
    }

    Ok(SmcRun {
        particles,
        logw,
        diagnostics,
        log_normalizer,
    })
}
