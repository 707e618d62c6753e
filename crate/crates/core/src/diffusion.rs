//! Noise schedule arithmetic and the truncated, resampling reverse sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::points::PointSet;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};
use crate::transport::{self, OtGrid, TransportError};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("timestep {t} outside 1..={steps}")]
    Timestep { t: usize, steps: usize },
    #[error("denoiser returned shape {got:?}, expected {expected:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("denoiser failed: {0}")]
    Denoiser(String),
}

/// `beta`, `alpha` and cumulative `alpha_bar` for `t = 1..=T`, with
/// `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas spaced linearly from `beta_1` to `beta_T`.
    pub fn linear(steps: usize, beta_1: f64, beta_t: f64) -> Self {
        assert!(steps >= 1 && 0.0 < beta_1 && beta_1 <= beta_t && beta_t < 1.0);
        let betas: Vec<f64> = (0..steps)
            .map(|i| if steps == 1 { beta_1 } else { beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64 })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Self { betas, alpha_bars }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Posterior variance `beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// `alpha_bar_t / (1 - alpha_bar_t)`.
    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        ab / (1.0 - ab)
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::Timestep { t, steps: self.steps() });
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02)
    }
}

fn combine<T: Scalar>(a: &Tensor<T>, ca: f64, b: &Tensor<T>, cb: f64) -> Result<Tensor<T>, DiffusionError> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::Shape { expected: a.shape().to_vec(), got: b.shape().to_vec() });
    }
    let (ca, cb) = (T::of(ca), T::of(cb));
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| ca * x + cb * y).collect();
    Ok(Tensor::new(a.shape().to_vec(), data)?)
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise<T: Scalar>(
    schedule: &NoiseSchedule,
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
) -> Result<Tensor<T>, DiffusionError> {
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    combine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// One reverse step `x_t -> x_{t-1}` from the predicted noise; `z` is the
/// fresh noise, ignored at `t = 1`.
pub fn ddpm_step<T: Scalar>(
    schedule: &NoiseSchedule,
    x_t: &Tensor<T>,
    t: usize,
    eps_hat: &Tensor<T>,
    z: &Tensor<T>,
) -> Result<Tensor<T>, DiffusionError> {
    schedule.check(t)?;
    let inv = 1.0 / schedule.alpha(t).sqrt();
    let mean = combine(x_t, inv, eps_hat, -inv * schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt())?;
    if t == 1 {
        return Ok(mean);
    }
    Ok(combine(&mean, 1.0, z, schedule.posterior_variance(t).sqrt())?)
}

/// One forward step `x_{t-1} -> x_t`: `sqrt(alpha_t) x + sqrt(beta_t) z`.
pub fn renoise<T: Scalar>(
    schedule: &NoiseSchedule,
    x_prev: &Tensor<T>,
    t: usize,
    z: &Tensor<T>,
) -> Result<Tensor<T>, DiffusionError> {
    schedule.check(t)?;
    combine(x_prev, schedule.alpha(t).sqrt(), z, schedule.beta(t).sqrt())
}

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor<T: Scalar> {
    type Condition: ?Sized;

    fn predict(&self, x_t: &Tensor<T>, t: usize, condition: &Self::Condition) -> Result<Tensor<T>, DiffusionError>;
}

/// Predicts the exact noise implied by a known clean sample; the condition
/// is `x0` itself.
#[derive(Clone, Debug)]
pub struct ExactNoise {
    pub schedule: NoiseSchedule,
}

impl<T: Scalar> NoisePredictor<T> for ExactNoise {
    type Condition = Tensor<T>;

    fn predict(&self, x_t: &Tensor<T>, t: usize, x0: &Tensor<T>) -> Result<Tensor<T>, DiffusionError> {
        let ab = self.schedule.alpha_bar(t);
        let s = 1.0 / (1.0 - ab).sqrt();
        combine(x_t, s, x0, -ab.sqrt() * s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub t_start: usize,
    /// Denoising attempts per timestep, with a one-step renoise in between.
    pub jumps: usize,
    pub seed: u64,
    /// Ignore the initial points and start from pure noise at `t_start`.
    pub pure_noise: bool,
    /// Draw the reverse-step noise `z`; when false every `z` is zero.
    pub stochastic: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { t_start: 300, jumps: 2, seed: 0, pure_noise: false, stochastic: true }
    }
}

impl SamplerConfig {
    /// Full-schedule sampling from pure noise, no resampling.
    pub fn from_pure_noise(steps: usize, seed: u64) -> Self {
        Self { t_start: steps, jumps: 1, seed, pure_noise: true, stochastic: true }
    }
}

fn normal_tensor<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::of(v)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Reverse diffusion over OT-grid offsets. The initial points are encoded,
/// noised to `t_start` and denoised to `t = 0`, making `jumps` attempts per
/// step; the result is decoded in stratum order.
///
/// Noise is drawn from the seed's stream in a fixed order: the forward
/// noise, then per attempt the reverse-step `z` (for `t > 1`) followed by the
/// renoise draw when one happens.
pub fn sample<T: Scalar, D: NoisePredictor<T>>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    condition: &D::Condition,
    init: &PointSet,
    config: &SamplerConfig,
) -> Result<PointSet, DiffusionError> {
    let x0 = sample_tensor(denoiser, schedule, condition, &transport::encode(init)?.to_tensor(), config)?;
    Ok(transport::decode(&OtGrid::from_tensor(&x0)?))
}

/// [`sample`] on a `[1, 2, k, k]` offset tensor in cell units.
pub fn sample_tensor<T: Scalar, D: NoisePredictor<T>>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    condition: &D::Condition,
    x0: &Tensor<T>,
    config: &SamplerConfig,
) -> Result<Tensor<T>, DiffusionError> {
    if config.t_start == 0 || config.t_start > schedule.steps() {
        return Err(DiffusionError::Config(format!("t_start {} outside 1..={}", config.t_start, schedule.steps())));
    }
    if config.jumps == 0 {
        return Err(DiffusionError::Config("jumps must be at least 1".into()));
    }
    let shape = x0.shape().to_vec();
    let zeros = Tensor::<T>::zeros(shape.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let draw = |rng: &mut ChaCha8Rng| if config.stochastic { normal_tensor(&shape, rng) } else { zeros.clone() };
    let eps: Tensor<T> = normal_tensor(&shape, &mut rng);
    let mut x = if config.pure_noise { eps } else { forward_noise(schedule, x0, config.t_start, &eps)? };
    for t in (1..=config.t_start).rev() {
        for attempt in 0..config.jumps {
            let eps_hat = denoiser.predict(&x, t, condition)?;
            if eps_hat.shape() != x.shape() {
                return Err(DiffusionError::Shape { expected: x.shape().to_vec(), got: eps_hat.shape().to_vec() });
            }
            let z = if t > 1 { draw(&mut rng) } else { zeros.clone() };
            let prev = ddpm_step(schedule, &x, t, &eps_hat, &z)?;
            x = if attempt + 1 < config.jumps && t > 1 { renoise(schedule, &prev, t, &draw(&mut rng))? } else { prev };
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        assert!(s.alpha_bar(1000) < 1e-4);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.posterior_variance(1), 0.0);
    }

    #[test]
    fn out_of_window_timesteps_error() {
        let s = NoiseSchedule::default();
        let x = Tensor::<f64>::zeros(vec![1, 2, 2, 2]);
        assert!(renoise(&s, &x, 0, &x).is_err());
        assert!(renoise(&s, &x, 1001, &x).is_err());
        assert!(forward_noise(&s, &x, 0, &x).is_err());
    }

    #[test]
    fn zero_noise_forward_scales_by_sqrt_alpha_bar() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::<f64>::from_fn([1, 2, 2, 2], |i| i as f64);
        let z = Tensor::<f64>::zeros(vec![1, 2, 2, 2]);
        let xt = forward_noise(&s, &x0, 500, &z).unwrap();
        for (a, b) in xt.data().iter().zip(x0.data()) {
            assert!((a - b * s.alpha_bar(500).sqrt()).abs() < 1e-15);
        }
    }
}
