//! Forward noising, backward denoising generation, and the denoiser contract.

use crate::error::{Error, Result};
use crate::rng::{domain, StreamKey};
use crate::schedule::{bridge_mean, NoiseSchedule};
use crate::signal::SignalState;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Estimator of `E[X_0 | X_k = x]` at noise level `upsilon`.
///
/// Implementations must be deterministic in their inputs and return a state
/// of the same shape. Conditioning information, when any exists, is either
/// baked into the implementation or passed as an opaque blob through
/// [`Denoiser::denoise_with_context`]; samplers never interpret it.
pub trait Denoiser: Send + Sync {
    fn denoise(&self, x: &SignalState, upsilon: f64) -> Result<SignalState>;

    /// Conditioned variant. The default ignores the context blob.
    fn denoise_with_context(
        &self,
        x: &SignalState,
        upsilon: f64,
        _context: &[u8],
    ) -> Result<SignalState> {
        self.denoise(x, upsilon)
    }

    /// Batch adapter; semantics are defined pointwise.
    fn denoise_batch(&self, xs: &[SignalState], upsilon: f64) -> Result<Vec<SignalState>> {
        xs.iter().map(|x| self.denoise(x, upsilon)).collect()
    }
}

impl<F> Denoiser for F
where
    F: Fn(&SignalState, f64) -> Result<SignalState> + Send + Sync,
{
    fn denoise(&self, x: &SignalState, upsilon: f64) -> Result<SignalState> {
        self(x, upsilon)
    }
}

/// Draws `X_k | X_s = x_s ~ N(x_s, (upsilon_k^2 - upsilon_s^2) I)` for s < k.
pub fn forward_sample<R: Rng>(
    x_s: &SignalState,
    s: usize,
    k: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<SignalState> {
    if s >= k || k > schedule.k_max() {
        return Err(Error::IndexOrder(format!(
            "forward step needs 0 <= s < k <= {}, got s = {s}, k = {k}",
            schedule.k_max()
        )));
    }
    let std = (schedule.upsilon2(k) - schedule.upsilon2(s)).sqrt();
    let data = x_s
        .data()
        .map(|&v| v + std * rng.sample::<f64, _>(StandardNormal));
    Ok(SignalState::from_array(data))
}

/// Input/skip/output/noise scalings used to wrap a raw network into a denoiser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreconditionCoeffs {
    pub c_in: f64,
    pub c_skip: f64,
    pub c_out: f64,
    pub c_noise: f64,
    pub sigma_data: f64,
}

/// `c_in = (u^2 + sd^2)^{-1/2}`, `c_skip = c_in^2 sd^2`, `c_out = u sd c_in`,
/// `c_noise = log(u)/4`.
pub fn precondition_coeffs(upsilon: f64, sigma_data: f64) -> Result<PreconditionCoeffs> {
    if !(upsilon.is_finite() && upsilon > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "upsilon must be positive, got {upsilon}"
        )));
    }
    if !(sigma_data.is_finite() && sigma_data > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "sigma_data must be positive, got {sigma_data}"
        )));
    }
    let c_in = 1.0 / (upsilon * upsilon + sigma_data * sigma_data).sqrt();
    Ok(PreconditionCoeffs {
        c_in,
        c_skip: c_in * c_in * sigma_data * sigma_data,
        c_out: upsilon * sigma_data * c_in,
        c_noise: 0.25 * upsilon.ln(),
        sigma_data,
    })
}

/// Wraps one evaluation of a raw network `F` as
/// `D(x, u) = c_skip x + c_out F(c_in x, c_noise)`.
pub fn precondition_apply<F>(
    raw_net: F,
    x: &SignalState,
    upsilon: f64,
    sigma_data: f64,
) -> Result<SignalState>
where
    F: Fn(&Array2<f64>, f64) -> Array2<f64>,
{
    let c = precondition_coeffs(upsilon, sigma_data)?;
    let scaled = x.data() * c.c_in;
    let out = raw_net(&scaled, c.c_noise);
    if out.dim() != x.data().dim() {
        return Err(Error::ShapeMismatch {
            expected_l: x.channels(),
            expected_t: x.samples(),
            got_l: out.nrows(),
            got_t: out.ncols(),
        });
    }
    Ok(SignalState::from_array(c.c_skip * x.data() + c.c_out * &out))
}

/// A raw network plus `sigma_data`, packaged as a [`Denoiser`].
pub struct Preconditioned<F> {
    raw_net: F,
    sigma_data: f64,
}

impl<F> Preconditioned<F>
where
    F: Fn(&Array2<f64>, f64) -> Array2<f64> + Send + Sync,
{
    pub fn new(raw_net: F, sigma_data: f64) -> Self {
        Self { raw_net, sigma_data }
    }
}

impl<F> Denoiser for Preconditioned<F>
where
    F: Fn(&Array2<f64>, f64) -> Array2<f64> + Send + Sync,
{
    fn denoise(&self, x: &SignalState, upsilon: f64) -> Result<SignalState> {
        precondition_apply(&self.raw_net, x, upsilon, self.sigma_data)
    }
}

/// Mean of the backward kernel `B_k(x_{k+1}, .)`: the denoised bridge for
/// k >= 1, the denoiser output itself for k = 0.
pub fn backward_mean(
    x_next: &SignalState,
    k: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<SignalState> {
    if k > schedule.k_max() - 1 {
        return Err(Error::IndexOrder(format!(
            "backward step k = {k} outside [0, {}]",
            schedule.k_max() - 1
        )));
    }
    let denoised = denoiser.denoise(x_next, schedule.upsilon(k + 1))?;
    x_next.check_same_shape(&denoised)?;
    if k == 0 {
        Ok(denoised)
    } else {
        bridge_mean(&denoised, x_next, k + 1, schedule)
    }
}

/// One backward transition: samples `N(backward_mean, eta_k^2 I)`.
pub fn backward_step<R: Rng>(
    x_next: &SignalState,
    k: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<SignalState> {
    let mean = backward_mean(x_next, k, denoiser, schedule)?;
    let eta = schedule.eta(k);
    if eta == 0.0 {
        return Ok(mean);
    }
    let data = mean
        .data()
        .map(|&v| v + eta * rng.sample::<f64, _>(StandardNormal));
    Ok(SignalState::from_array(data))
}

/// Draws `X_K ~ N(0, sigma_max^2 I)`, the backward-process initial law.
pub fn sample_reference<R: Rng>(
    channels: usize,
    samples: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> SignalState {
    let s = schedule.sigma_max();
    let data = Array2::from_shape_fn((channels, samples), |_| {
        s * rng.sample::<f64, _>(StandardNormal)
    });
    SignalState::from_array(data)
}

/// Runs the full backward chain for `m` independent trajectories.
///
/// Each trajectory draws from its own counter-derived stream, so output is
/// bit-identical for a fixed key regardless of thread count.
pub fn backward_generate(
    m: usize,
    channels: usize,
    samples: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    key: StreamKey,
) -> Result<Vec<SignalState>> {
    if m == 0 {
        return Err(Error::InvalidConfig("need m >= 1 samples".into()));
    }
    (0..m as u64)
        .into_par_iter()
        .map(|j| {
            let mut rng = key.stream(&[domain::BACKWARD, j]);
            let mut x = sample_reference(channels, samples, schedule, &mut rng);
            for k in (0..schedule.k_max()).rev() {
                x = backward_step(&x, k, denoiser, schedule, &mut rng)?;
            }
            Ok(x)
        })
        .collect()
}
