//! EDM preconditioning, regression target, loss weighting and the
//! Tweedie score estimate. All coefficient math runs in `f64`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Field;
use crate::spectral::{smooth, SmoothingStrength};

/// Training draws of sigma are clamped into this range.
pub const TRAIN_SIGMA_MIN: f64 = 1e-4;
pub const TRAIN_SIGMA_MAX: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdmConfig {
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for EdmConfig {
    fn default() -> Self {
        EdmConfig {
            sigma_data: 0.5,
            p_mean: -0.5,
            p_std: 1.5,
        }
    }
}

impl EdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_data > 0.0 && self.p_std > 0.0 && self.p_mean.is_finite()) {
            return Err(Error::Config(format!("invalid EDM config {self:?}")));
        }
        Ok(())
    }
}

/// A strictly positive, finite noise standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub fn new(sigma: f64) -> Result<Self> {
        if sigma > 0.0 && sigma.is_finite() {
            Ok(NoiseLevel(sigma))
        } else {
            Err(Error::Argument(format!("noise level must be positive and finite, got {sigma}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecondCoeffs {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn precond_coeffs(sigma: NoiseLevel, cfg: &EdmConfig) -> PrecondCoeffs {
    let s = sigma.value();
    let sd2 = cfg.sigma_data * cfg.sigma_data;
    let total = s * s + sd2;
    let root = total.sqrt();
    PrecondCoeffs {
        c_skip: sd2 / total,
        c_out: s * cfg.sigma_data / root,
        c_in: 1.0 / root,
        c_noise: 0.25 * s.ln(),
    }
}

/// Checked variant for raw sigma values.
pub fn precond_coeffs_checked(sigma: f64, cfg: &EdmConfig) -> Result<PrecondCoeffs> {
    Ok(precond_coeffs(NoiseLevel::new(sigma)?, cfg))
}

/// Effective loss weight `(s^2 + sd^2) / (s sd)^2`, equal to `1 / c_out^2`.
pub fn loss_weight(sigma: NoiseLevel, cfg: &EdmConfig) -> f64 {
    let s = sigma.value();
    let sd = cfg.sigma_data;
    (s * s + sd * sd) / ((s * sd) * (s * sd))
}

/// How the squared `F` residual is weighted during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossWeighting {
    /// `lambda(sigma) * ||D - u||^2` with `lambda = w(sigma)`, which is
    /// `mean((F - F_target)^2)` with unit weight.
    #[default]
    Edm,
    /// `w(sigma) * mean((F - F_target)^2)`, as in [`denoising_loss`].
    Literal,
}

impl LossWeighting {
    /// Factor applied to `mean((F - F_target)^2)`.
    pub fn factor(self, sigma: NoiseLevel, cfg: &EdmConfig) -> f64 {
        match self {
            LossWeighting::Edm => 1.0,
            LossWeighting::Literal => loss_weight(sigma, cfg),
        }
    }
}

/// Log-normal training noise level, clamped to `[1e-4, 1e3]`.
pub fn sample_train_sigma<R: Rng + ?Sized>(rng: &mut R, cfg: &EdmConfig) -> NoiseLevel {
    let normal = Normal::new(cfg.p_mean, cfg.p_std).expect("validated p_std");
    let sigma = normal.sample(rng).exp().clamp(TRAIN_SIGMA_MIN, TRAIN_SIGMA_MAX);
    NoiseLevel(sigma)
}

/// Wrap a raw network output into the denoised estimate:
/// `D = c_skip * x + c_out * F(c_in * x, cond; c_noise)`.
pub fn denoise<F>(raw_net: F, u_noisy: &Field, cond: &Field, sigma: NoiseLevel, cfg: &EdmConfig) -> Result<Field>
where
    F: FnOnce(&Field, &Field, f64) -> Result<Field>,
{
    if u_noisy.grid() != cond.grid() {
        return Err(Error::Argument("noisy state and conditioning are on different grids".into()));
    }
    let c = precond_coeffs(sigma, cfg);
    let scaled = u_noisy.map(|v, _| c.c_in * v)?;
    let raw = raw_net(&scaled, cond, c.c_noise)?;
    u_noisy.zip_with(&raw, |x, f| c.c_skip * x + c.c_out * f)
}

/// Regression target `(u - c_skip * (u + eta)) / c_out`.
pub fn f_target(clean: &Field, u_noisy: &Field, sigma: NoiseLevel, cfg: &EdmConfig) -> Result<Field> {
    let c = precond_coeffs(sigma, cfg);
    clean.zip_with(u_noisy, |u, x| (u - c.c_skip * x) / c.c_out)
}

/// Tweedie estimate of the score, `(D - x) / sigma^2`.
pub fn score_from_denoiser(denoised: &Field, u_noisy: &Field, sigma: NoiseLevel) -> Result<Field> {
    let s2 = sigma.value() * sigma.value();
    denoised.zip_with(u_noisy, |d, x| (d - x) / s2)
}

/// One training instance: conditioning is already on the target grid.
#[derive(Debug, Clone)]
pub struct TrainingPair<'a> {
    /// Upsampled coarse state; the only part the smoothing touches.
    pub coarse: &'a Field,
    /// Static high-resolution inputs appended after the coarse channels.
    pub statics: Option<&'a Field>,
    pub target: &'a Field,
}

impl TrainingPair<'_> {
    /// Conditioning input after low-pass augmentation.
    pub fn conditioning(&self, alpha: SmoothingStrength) -> Result<Field> {
        let smoothed = smooth(self.coarse, alpha)?;
        match self.statics {
            Some(s) => Field::concat(&[&smoothed, s]),
            None => Ok(smoothed),
        }
    }
}

pub fn mean_squared(a: &Field, b: &Field) -> Result<f64> {
    a.check_compatible(b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Weighted single-instance loss `w(sigma) * mean((F - F_target)^2)`.
pub fn denoising_loss<F>(
    raw_net: F,
    pair: &TrainingPair<'_>,
    alpha: SmoothingStrength,
    sigma: NoiseLevel,
    noise: &Field,
    cfg: &EdmConfig,
) -> Result<f64>
where
    F: FnOnce(&Field, &Field, f64) -> Result<Field>,
{
    let cond = pair.conditioning(alpha)?;
    let u_noisy = pair.target.zip_with(noise, |u, e| u + e)?;
    let c = precond_coeffs(sigma, cfg);
    let scaled = u_noisy.map(|v, _| c.c_in * v)?;
    let raw = raw_net(&scaled, &cond, c.c_noise)?;
    let target = f_target(pair.target, &u_noisy, sigma, cfg)?;
    Ok(loss_weight(sigma, cfg) * mean_squared(&raw, &target)?)
}
