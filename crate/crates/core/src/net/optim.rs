//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr_max: f64,
    /// Cosine floor reached at the last step.
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr_max: 1e-4,
            lr_min: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_max > 0.0
            && (0.0..=self.lr_max).contains(&self.lr_min)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer config {self:?}")));
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * t / (T - 1))) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps <= 1 {
        return lr_max;
    }
    let frac = step.min(total_steps - 1) as f64 / (total_steps - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates applied so far.
    pub step: usize,
}

impl OptimizerState {
    pub fn new(params: &Parameters, config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            config,
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            step: 0,
        })
    }
}

/// Apply one update in place and return the learning rate used. Frozen
/// parameters are left untouched.
pub fn adamw_step(
    params: &mut Parameters,
    grads: &[f64],
    opt: &mut OptimizerState,
    total_steps: usize,
) -> Result<f64> {
    if grads.len() != params.len() || opt.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients and {} moments for {} parameters",
            grads.len(),
            opt.m.len(),
            params.len()
        )));
    }
    if opt.step >= total_steps {
        return Err(Error::Argument(format!(
            "optimizer step {} is past the schedule of {total_steps} steps",
            opt.step
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            step: opt.step,
            context: format!("gradient of parameter {i} is {}", grads[i]),
        });
    }
    let c = opt.config;
    let lr = cosine_lr(opt.step, total_steps, c.lr_max, c.lr_min);
    let t = (opt.step + 1) as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let mask = params.trainable_mask();
    let values = params.values_mut();
    for i in 0..values.len() {
        if !mask[i] {
            continue;
        }
        let g = grads[i];
        opt.m[i] = c.beta1 * opt.m[i] + (1.0 - c.beta1) * g;
        opt.v[i] = c.beta2 * opt.v[i] + (1.0 - c.beta2) * g * g;
        let mhat = opt.m[i] / bc1;
        let vhat = opt.v[i] / bc2;
        values[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * values[i]);
    }
    opt.step += 1;
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::params::{Init, ParamBuilder};
    use rand::SeedableRng;

    fn params(vals: &[f64]) -> Parameters {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut rng);
        for (k, v) in vals.iter().enumerate() {
            b.add(format!("p{k}"), vec![1], Init::Const(*v), true);
        }
        b.finish()
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 1e-5), 1e-4);
        assert!((cosine_lr(99, 100, 1e-4, 1e-5) - 1e-5).abs() < 1e-9);
        let mid = cosine_lr(50, 101, 1e-4, 1e-5);
        assert!((mid - 5.5e-5).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = params(&[0.3, -2.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = OptimizerState::new(&p, cfg).unwrap();
        for _ in 0..5 {
            adamw_step(&mut p, &[0.0, 0.0], &mut opt, 10).unwrap();
        }
        assert_eq!(p.values(), &[0.3, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = params(&[1.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = OptimizerState::new(&p, cfg).unwrap();
        let lr = adamw_step(&mut p, &[1.0], &mut opt, 10).unwrap();
        // mhat = 1, vhat = 1, so the step is lr / (1 + eps)
        let expected = 1.0 - 1e-4 / (1.0 + 1e-8);
        assert_eq!(lr, 1e-4);
        assert!((p.values()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = params(&[2.0]);
        let mut opt = OptimizerState::new(&p, AdamWConfig::default()).unwrap();
        adamw_step(&mut p, &[0.0], &mut opt, 10).unwrap();
        assert!((p.values()[0] - (2.0 - 1e-4 * 1e-5 * 2.0)).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = params(&[1.0]);
        let mut opt = OptimizerState::new(&p, AdamWConfig::default()).unwrap();
        let err = adamw_step(&mut p, &[f64::NAN], &mut opt, 10).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 0, .. }));
        assert_eq!(p.values(), &[1.0]);
    }

    #[test]
    fn stepping_past_the_schedule_fails() {
        let mut p = params(&[1.0]);
        let mut opt = OptimizerState::new(&p, AdamWConfig::default()).unwrap();
        adamw_step(&mut p, &[1.0], &mut opt, 1).unwrap();
        assert!(adamw_step(&mut p, &[1.0], &mut opt, 1).is_err());
    }
}
