//! Batch-size-one training loop for the denoiser.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{f_target, precond_coeffs, sample_train_sigma, EdmConfig, NoiseLevel, TrainingPair, LossWeighting};
use crate::error::{Error, Result};
use crate::grid::Field;
use crate::rng::{normals, stream};
use crate::spectral::{sample_alpha, SmoothingStrength};

use super::optim::{adamw_step, AdamWConfig, OptimizerState};
use super::ops::Tensor;
use super::unet::{fields_to_tensor, UNet};

/// What the network is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// EDM denoising of the fine field at random noise levels.
    Diffusion,
    /// Plain MSE regression of the fine field from the conditioning alone;
    /// the noisy-state channels are zero and `c_noise = 0`.
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub optimizer: AdamWConfig,
    pub objective: Objective,
    /// Noise-level weighting of the diffusion loss.
    pub weighting: LossWeighting,
    /// Randomized spectral smoothing of the coarse conditioning.
    pub augment: bool,
    /// Fit one frozen instance: the first example with one draw of
    /// smoothing, noise level and noise reused at every step.
    pub overfit_one: bool,
    /// Train at one noise level instead of sampling it.
    pub fixed_sigma: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            optimizer: AdamWConfig::default(),
            objective: Objective::Diffusion,
            weighting: LossWeighting::Edm,
            augment: true,
            overfit_one: false,
            fixed_sigma: None,
        }
    }
}

/// One standardized training instance on the fine grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Coarse state upsampled to the fine grid.
    pub coarse: Field,
    pub statics: Option<Field>,
    pub target: Field,
}

impl Example {
    pub fn pair(&self) -> TrainingPair<'_> {
        TrainingPair {
            coarse: &self.coarse,
            statics: self.statics.as_ref(),
            target: &self.target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    /// Zero for the regression objective.
    pub sigma: f64,
    pub alpha: f64,
    pub loss: f64,
    pub lr: f64,
}

/// Loss for one instance and its gradient with respect to every parameter.
///
/// For [`Objective::Diffusion`] the loss is `mean((F - F_target)^2)` scaled by
/// `weighting`, with `u_noisy = target + noise`; `sigma` and `noise` are ignored for
/// [`Objective::Regression`], whose loss is `mean((F - target)^2)`.
pub fn loss_and_gradient(
    net: &UNet,
    example: &Example,
    alpha: SmoothingStrength,
    sigma: NoiseLevel,
    noise: &[f64],
    edm: &EdmConfig,
    objective: Objective,
    weighting: LossWeighting,
) -> Result<(f64, Vec<f64>)> {
    let pair = example.pair();
    let cond = pair.conditioning(alpha)?;
    let (x, c_noise, target) = match objective {
        Objective::Diffusion => {
            let u_noisy = example.target.with_data(
                example.target.data().iter().zip(noise).map(|(u, e)| u + e).collect(),
            )?;
            let c = precond_coeffs(sigma, edm);
            let scaled = u_noisy.map(|v, _| c.c_in * v)?;
            let target = f_target(&example.target, &u_noisy, sigma, edm)?;
            (fields_to_tensor(&[&scaled, &cond])?, c.c_noise, target)
        }
        Objective::Regression => {
            let zeros = example.target.map(|_, _| 0.0)?;
            (fields_to_tensor(&[&zeros, &cond])?, 0.0, example.target.clone())
        }
    };
    let target = fields_to_tensor(&[&target])?;
    let weight = match objective {
        Objective::Diffusion => weighting.factor(sigma, edm),
        Objective::Regression => 1.0,
    };
    let (out, tape) = net.forward_recorded(&x, c_noise)?;
    let n = out.data.len() as f64;
    let resid: Vec<f64> = out.data.iter().zip(&target.data).map(|(f, t)| f - t).collect();
    let loss = weight * resid.iter().map(|r| r * r).sum::<f64>() / n;
    let dy = Tensor::new(out.channels, out.height, out.width, resid.iter().map(|r| 2.0 * weight * r / n).collect())?;
    let grads = net.backward(&tape, &dy)?;
    Ok((loss, grads))
}

fn check_layout(net: &UNet, examples: &[Example]) -> Result<()> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Argument("training needs at least one example".into()))?;
    let cond = first.coarse.num_channels() + first.statics.as_ref().map_or(0, Field::num_channels);
    let cfg = net.config();
    if first.target.num_channels() != cfg.out_channels || first.target.num_channels() + cond != cfg.in_channels {
        return Err(Error::Config(format!(
            "network expects {} inputs / {} outputs, data has {} conditioning and {} target channels",
            cfg.in_channels,
            cfg.out_channels,
            cond,
            first.target.num_channels()
        )));
    }
    let g = first.target.grid();
    cfg.check_input_size(g.height, g.width)
}

type Instance = (usize, SmoothingStrength, NoiseLevel, Vec<f64>);

fn draw_instance<R: Rng>(
    rng: &mut R,
    examples: &[Example],
    edm: &EdmConfig,
    cfg: &TrainConfig,
    fixed: Option<NoiseLevel>,
) -> Result<Instance> {
    let idx = if cfg.overfit_one { 0 } else { rng.random_range(0..examples.len()) };
    let alpha = if cfg.augment { sample_alpha(rng) } else { SmoothingStrength::new(0.0)? };
    let (sigma, noise) = match cfg.objective {
        Objective::Diffusion => {
            let sigma = fixed.unwrap_or_else(|| sample_train_sigma(rng, edm));
            let n = examples[idx].target.data().len();
            (sigma, normals(rng, n).into_iter().map(|z| sigma.value() * z).collect())
        }
        Objective::Regression => (NoiseLevel::new(1.0)?, Vec::new()),
    };
    Ok((idx, alpha, sigma, noise))
}

/// Train in place and return the per-step loss trace.
///
/// Each step draws, from one seeded stream and in this order: the example
/// index, the smoothing strength (if `augment`), the noise level (diffusion,
/// unless fixed) and the noise field. With `overfit_one` the first example
/// and a single draw of everything else are reused at every step.
pub fn train(net: &mut UNet, examples: &[Example], edm: &EdmConfig, cfg: &TrainConfig, seed: u64) -> Result<Vec<LossRecord>> {
    edm.validate()?;
    check_layout(net, examples)?;
    let fixed = cfg.fixed_sigma.map(NoiseLevel::new).transpose()?;
    let mut opt = OptimizerState::new(net.params(), cfg.optimizer)?;
    let mut rng = stream(seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut frozen: Option<Instance> = None;
    for step in 0..cfg.steps {
        let (idx, alpha, sigma, noise) = match &frozen {
            Some(instance) => instance.clone(),
            None => {
                let instance = draw_instance(&mut rng, examples, edm, cfg, fixed)?;
                if cfg.overfit_one {
                    frozen = Some(instance.clone());
                }
                instance
            }
        };
        let example = &examples[idx];
        let (loss, grads) = loss_and_gradient(net, example, alpha, sigma, &noise, edm, cfg.objective, cfg.weighting)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                context: format!("training loss is {loss}"),
            });
        }
        let lr = adamw_step(net.params_mut(), &grads, &mut opt, cfg.steps).map_err(|e| match e {
            Error::NonFinite { context, .. } => Error::NonFinite { step, context },
            other => other,
        })?;
        trace.push(LossRecord {
            step,
            sigma: match cfg.objective {
                Objective::Diffusion => sigma.value(),
                Objective::Regression => 0.0,
            },
            alpha: alpha.value(),
            loss,
            lr,
        });
    }
    Ok(trace)
}

/// CSV with header `step,sigma,alpha,loss,lr`.
pub fn write_loss_trace(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in trace {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Channel, Grid};
    use crate::net::NetConfig;

    fn example(seed: u64) -> Example {
        let g = Grid::new(0.0, 0.0, 1.0, 1.0, 4, 4).unwrap();
        let mut rng = stream(seed);
        let field = |name: &str, rng: &mut crate::rng::StreamRng| {
            Field::new(g.clone(), vec![Channel::new(name, "1")], normals(rng, 16)).unwrap()
        };
        Example {
            coarse: field("c", &mut rng),
            statics: Some(field("z", &mut rng)),
            target: field("t", &mut rng),
        }
    }

    fn tiny() -> UNet {
        let cfg = NetConfig {
            in_channels: 3,
            out_channels: 1,
            base_channels: 4,
            multipliers: vec![1],
            n_res: 1,
            emb_dim: 8,
            ..NetConfig::default()
        };
        UNet::new(cfg, 1).unwrap()
    }

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let ex = vec![example(1), example(2)];
        let a = train(&mut tiny(), &ex, &EdmConfig::default(), &quick(5), 3).unwrap();
        let b = train(&mut tiny(), &ex, &EdmConfig::default(), &quick(5), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert_eq!(a[0].lr, 1e-4);
    }

    #[test]
    fn augmentation_changes_the_trace() {
        let ex = vec![example(1)];
        let on = train(&mut tiny(), &ex, &EdmConfig::default(), &quick(4), 3).unwrap();
        let cfg = TrainConfig {
            augment: false,
            ..quick(4)
        };
        let off = train(&mut tiny(), &ex, &EdmConfig::default(), &cfg, 3).unwrap();
        assert_ne!(on, off);
        assert!(off.iter().all(|r| r.alpha == 0.0));
    }

    #[test]
    fn channel_layout_mismatch_is_rejected() {
        let mut ex = example(1);
        ex.statics = None;
        let err = train(&mut tiny(), &[ex], &EdmConfig::default(), &quick(1), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn regression_gradient_matches_differences() {
        let mut net = UNet::new_unzeroed(tiny().config().clone(), 2).unwrap();
        let ex = example(5);
        let a = SmoothingStrength::new(0.3).unwrap();
        let s = NoiseLevel::new(1.0).unwrap();
        let (_, g) = loss_and_gradient(&net, &ex, a, s, &[], &EdmConfig::default(), Objective::Regression, LossWeighting::Edm).unwrap();
        let i = net.params().spec("out.conv.bias").unwrap().slot.offset;
        let h = 1e-5;
        let orig = net.params().values()[i];
        net.params_mut().values_mut()[i] = orig + h;
        let up = loss_and_gradient(&net, &ex, a, s, &[], &EdmConfig::default(), Objective::Regression, LossWeighting::Edm).unwrap().0;
        net.params_mut().values_mut()[i] = orig - h;
        let down = loss_and_gradient(&net, &ex, a, s, &[], &EdmConfig::default(), Objective::Regression, LossWeighting::Edm).unwrap().0;
        assert!(((up - down) / (2.0 * h) - g[i]).abs() < 1e-7);
    }
}
