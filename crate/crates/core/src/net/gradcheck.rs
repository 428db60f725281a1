//! Central finite-difference check of [`UNet::backward`].

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::config::NetConfig;
use super::ops::Tensor;
use super::unet::UNet;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    /// `|g - n| / max(|g|, |n|)` over the sampled gradient vectors.
    pub rel_error: f64,
    /// Largest per-parameter relative error; dominated by O(h^2) truncation
    /// at strongly curved parameters.
    pub max_rel_error: f64,
    /// Parameter index with the largest relative error.
    pub worst_index: usize,
}

/// Relative error with a floor so that two vanishing values compare equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// The compact network used for gradient checks: one stage, 4 base channels.
pub fn check_config() -> NetConfig {
    NetConfig {
        base_channels: 4,
        multipliers: vec![1],
        emb_dim: 16,
        ..NetConfig::default()
    }
}

/// Compare analytic gradients of `L = <r, F(x)>` against central differences
/// at `count` randomly chosen trainable parameters.
pub fn check_gradients(cfg: &NetConfig, size: usize, count: usize, h: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = UNet::new_unzeroed(cfg.clone(), rng.random())?;
    let n_in = cfg.in_channels * size * size;
    let x = Tensor::new(
        cfg.in_channels,
        size,
        size,
        (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let c_noise = rng.random_range(-1.0..1.0);
    let (y, tape) = net.forward_recorded(&x, c_noise)?;
    let r = y.same_shape((0..y.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect());
    let grads = net.backward(&tape, &r)?;

    let trainable: Vec<usize> = net
        .params()
        .trainable_mask()
        .iter()
        .enumerate()
        .filter_map(|(i, &t)| t.then_some(i))
        .collect();
    let picks = sample(&mut rng, trainable.len(), count.min(trainable.len()));
    let objective = |net: &UNet| -> Result<f64> {
        let y = net.forward(&x, c_noise)?;
        Ok(y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum())
    };
    let mut analytic = Vec::with_capacity(picks.len());
    let mut numeric_all = Vec::with_capacity(picks.len());
    let mut report = GradCheckReport {
        checked: 0,
        rel_error: 0.0,
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for k in picks.iter() {
        let i = trainable[k];
        let orig = net.params().values()[i];
        net.params_mut().values_mut()[i] = orig + h;
        let up = objective(&net)?;
        net.params_mut().values_mut()[i] = orig - h;
        let down = objective(&net)?;
        net.params_mut().values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(grads[i], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        analytic.push(grads[i]);
        numeric_all.push(numeric);
        report.checked += 1;
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric_all).map(|(a, b)| a - b).collect();
    let scale = norm(&analytic).max(norm(&numeric_all));
    report.rel_error = if scale > 0.0 { norm(&diff) / scale } else { 0.0 };
    Ok(report)
}
