//! Self-checks of the numerical core against independent oracles.
//!
//! Every check is deterministic given its configuration and reports the
//! measured quantity next to its tolerance.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::diffusion::{precond_coeffs, score_from_denoiser, EdmConfig, NoiseLevel};
use crate::error::Result;
use crate::grid::{Channel, Field, Grid};
use crate::net::gradcheck::{check_config, check_gradients};
use crate::pipeline;
use crate::rng::{normals, stream};
use crate::sampler::{edm_schedule, sample_ensemble, Denoiser, GaussianOracle, SamplerKind, SigmaSchedule};
use crate::spectral::{dft2, smooth, SmoothingStrength};
use crate::synth::{gen_dataset, DatasetSpec, Split, TaskParams};
use crate::verify::{crps_ensemble, crps_integral};

pub const SIGMA_MIN: f64 = 0.002;
pub const SIGMA_MAX: f64 = 80.0;
pub const RHO: f64 = 7.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckConfig {
    /// Added to `c_skip` before the identity check; a fault-injection hook.
    pub perturb_coeff: f64,
    pub transport_steps: usize,
    pub transport_samples: usize,
    pub gradient_params: usize,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            perturb_coeff: 0.0,
            transport_steps: 64,
            transport_samples: 4096,
            gradient_params: 200,
            seed: 0,
        }
    }
}

/// `(name, description)` of every check in run order.
pub const CHECKS: [(&str, &str); 8] = [
    ("coefficients", "preconditioning identities over 50 log-spaced sigma, tol 1e-12"),
    ("schedule", "N=128 endpoints exact and strictly decreasing"),
    ("crps", "closed form vs quadrature on 500 ensembles, tol 1e-6; n=1 equals |x - y|"),
    ("gradient", "1-stage U-Net on 8x8, 200 parameters, h=1e-3, relative error < 1e-4"),
    ("tweedie", "oracle denoiser score vs closed-form Gaussian score at 100 points, tol 1e-10"),
    ("transport", "PF-ODE with oracle denoiser: per-pixel mean within 3 SE, variance within 5%, >= 95% of pixels"),
    ("euler", "linear-denoiser ODE error ratio 2 +- 0.3 for N in 16, 32, 64, 128"),
    ("spectral", "alpha=0 bypass, high-frequency energy non-increasing in alpha, DFT round trip 1e-9"),
];

fn outcome(name: &str, started: Instant, result: Result<(bool, String)>) -> CheckOutcome {
    let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
        seconds: started.elapsed().as_secs_f64(),
    }
}

pub fn run(name: &str, cfg: &CheckConfig) -> Option<CheckOutcome> {
    let started = Instant::now();
    let result = match name {
        "coefficients" => coefficients(cfg.perturb_coeff),
        "schedule" => schedule(),
        "crps" => crps(cfg.seed),
        "gradient" => gradient(cfg.gradient_params, cfg.seed),
        "tweedie" => tweedie(cfg.seed),
        "transport" => transport(cfg.transport_steps, cfg.transport_samples, cfg.seed).map(|r| (r.passed(), r.summary())),
        "euler" => euler(),
        "spectral" => spectral(cfg.seed),
        _ => return None,
    };
    Some(outcome(name, started, result))
}

pub fn run_all(cfg: &CheckConfig) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|(name, _)| run(name, cfg).expect("listed check"))
        .collect()
}

fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

pub fn coefficients(perturb: f64) -> Result<(bool, String)> {
    let cfg = EdmConfig::default();
    let sd = cfg.sigma_data;
    let mut worst: f64 = 0.0;
    for s in log_spaced(1e-3, 80.0, 50) {
        let mut c = precond_coeffs(NoiseLevel::new(s)?, &cfg);
        c.c_skip += perturb;
        let w = crate::diffusion::loss_weight(NoiseLevel::new(s)?, &cfg);
        worst = worst
            .max((c.c_skip - sd * sd * c.c_in * c.c_in).abs())
            .max((c.c_out - s * sd * c.c_in).abs())
            .max((w * c.c_out * c.c_out - 1.0).abs());
    }
    Ok((worst <= 1e-12, format!("max deviation {worst:.3e}")))
}

pub fn schedule() -> Result<(bool, String)> {
    let s = edm_schedule(128, SIGMA_MIN, SIGMA_MAX, RHO)?;
    let l = s.levels();
    let decreasing = l.windows(2).all(|w| w[1] < w[0]);
    let ok = l.len() == 128 && l[0] == SIGMA_MAX && l[127] == SIGMA_MIN && decreasing;
    Ok((ok, format!("sigma_1 = {}, sigma_128 = {}, strictly decreasing: {decreasing}", l[0], l[127])))
}

pub fn crps(seed: u64) -> Result<(bool, String)> {
    let mut rng = stream(seed);
    let mut worst: f64 = 0.0;
    let mut single_exact = true;
    for k in 0..500 {
        let n = 1 + k % 8;
        let scale = rng.random_range(0.1..5.0);
        let members: Vec<f64> = normals(&mut rng, n).into_iter().map(|z| scale * z).collect();
        let y = 2.0 * normals(&mut rng, 1)[0];
        let closed = crps_ensemble(&members, y)?;
        worst = worst.max((closed - crps_integral(&members, y)?).abs());
        if n == 1 && closed != (members[0] - y).abs() {
            single_exact = false;
        }
    }
    Ok((
        worst <= 1e-6 && single_exact,
        format!("max |closed - quadrature| {worst:.3e}, n=1 exact: {single_exact}"),
    ))
}

pub fn gradient(count: usize, seed: u64) -> Result<(bool, String)> {
    let r = check_gradients(&check_config(), 8, count, 1e-3, seed)?;
    Ok((
        r.rel_error < 1e-4,
        format!(
            "{} parameters, relative error {:.3e} (largest single {:.3e})",
            r.checked, r.rel_error, r.max_rel_error
        ),
    ))
}

fn scalar_field(v: f64) -> Result<Field> {
    let g = Grid::new(0.0, 0.0, 1.0, 1.0, 1, 1)?;
    Field::new(g, vec![Channel::new("u", "1")], vec![v])
}

pub fn tweedie(seed: u64) -> Result<(bool, String)> {
    let mut rng = stream(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = rng.random_range(-3.0..3.0);
        let s = rng.random_range(0.1..3.0);
        let sigma = (rng.random_range(SIGMA_MIN.ln()..SIGMA_MAX.ln())).exp();
        let x = m + (s * s + sigma * sigma).sqrt() * normals(&mut rng, 1)[0];
        let oracle = GaussianOracle::new(scalar_field(m)?, vec![s])?;
        let xf = scalar_field(x)?;
        let level = NoiseLevel::new(sigma)?;
        let d = oracle.denoise(&xf, &xf, level)?;
        let score = score_from_denoiser(&d, &xf, level)?.data()[0];
        let exact = -(x - m) / (s * s + sigma * sigma);
        worst = worst.max((score - exact).abs() / exact.abs().max(1.0));
    }
    Ok((worst <= 1e-10, format!("max relative deviation {worst:.3e}")))
}

/// Exact standard-deviation gain of the Euler PF-ODE for a Gaussian target of
/// standard deviation `s` under the linear posterior-mean denoiser, starting
/// from standard deviation `sigma_max`.
pub fn euler_gaussian_std(schedule: &SigmaSchedule, s: f64) -> f64 {
    let l = schedule.levels();
    l.windows(2).fold(l[0], |g, w| {
        let h = (w[1] - w[0]) / w[0];
        g * (1.0 + h * w[0] * w[0] / (s * s + w[0] * w[0]))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportReport {
    pub steps: usize,
    pub samples: usize,
    pub pixels: usize,
    pub mean_pass: f64,
    pub variance_pass: f64,
    /// Mean over pixels of empirical variance / target variance.
    pub variance_ratio: f64,
    /// The same ratio predicted exactly for the Euler discretization.
    pub euler_ratio: f64,
}

impl TransportReport {
    pub fn passed(&self) -> bool {
        self.mean_pass >= 0.95 && self.variance_pass >= 0.95
    }

    pub fn summary(&self) -> String {
        format!(
            "N={} samples={}: mean pass {:.1}%, variance pass {:.1}% of {} pixels; variance ratio {:.4} (Euler prediction {:.4})",
            self.steps,
            self.samples,
            100.0 * self.mean_pass,
            100.0 * self.variance_pass,
            self.pixels,
            self.variance_ratio,
            self.euler_ratio
        )
    }
}

/// Sample the gaussian task (fine 16x16, factor 4) with the exact oracle in
/// standardized units and compare per-pixel moments with `N(a ubar_up + b, s^2)`.
pub fn transport(steps: usize, samples: usize, seed: u64) -> Result<TransportReport> {
    let ds = gen_dataset(&DatasetSpec {
        params: TaskParams::Gaussian { a: 1.0, b: 0.5, s: 1.0 },
        fine: Grid::new(50.0, 5.0, -0.05, 0.05, 16, 16)?,
        factor: 4,
        count: 8,
        test_count: 1,
        n_stations: 1,
        obs_noise_std: 0.0,
        lead_time_h: 24,
        seed,
    })?;
    let index = ds.split(Split::Test)[0];
    let oracle = pipeline::oracle(&ds, index)?;
    let cond = pipeline::conditioning(&ds, index)?;
    let channels = oracle.mean().channels().to_vec();
    let sched = edm_schedule(steps, SIGMA_MIN, SIGMA_MAX, RHO)?;
    let ens = sample_ensemble(&oracle, &cond, &channels, &sched, samples, seed, SamplerKind::Ode)?;
    let n = oracle.mean().data().len();
    let nc = channels.len();
    let count = samples as f64;
    let (mut mean_ok, mut var_ok, mut ratio_sum, mut euler_sum) = (0usize, 0usize, 0.0, 0.0);
    for k in 0..n {
        let target_mean = oracle.mean().data()[k];
        let std = oracle.std()[k % nc];
        let target_var = std * std + SIGMA_MIN * SIGMA_MIN;
        let vals: Vec<f64> = ens.members.iter().map(|m| m.data()[k]).collect();
        let mean = vals.iter().sum::<f64>() / count;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1.0);
        if (mean - target_mean).abs() <= 3.0 * (target_var / count).sqrt() {
            mean_ok += 1;
        }
        if (var / target_var - 1.0).abs() <= 0.05 {
            var_ok += 1;
        }
        ratio_sum += var / target_var;
        euler_sum += euler_gaussian_std(&sched, std).powi(2) / target_var;
    }
    Ok(TransportReport {
        steps,
        samples,
        pixels: n,
        mean_pass: mean_ok as f64 / n as f64,
        variance_pass: var_ok as f64 / n as f64,
        variance_ratio: ratio_sum / n as f64,
        euler_ratio: euler_sum / n as f64,
    })
}

/// Error of the Euler solution at `sigma_min` for the linear denoiser
/// against the exact flow `x - m = (x0 - m) sqrt((s^2 + sigma^2) / (s^2 + sigma_max^2))`.
pub fn euler_error(steps: usize, s: f64, m: f64, x0: f64) -> Result<f64> {
    let sched = edm_schedule(steps, SIGMA_MIN, SIGMA_MAX, RHO)?;
    let oracle = GaussianOracle::new(scalar_field(m)?, vec![s])?;
    let mut x = scalar_field(x0)?;
    for w in sched.levels().windows(2) {
        x = crate::sampler::pf_ode_step(&x, w[0], w[1], &oracle, &x.clone())?;
    }
    let exact = m + (x0 - m) * ((s * s + SIGMA_MIN * SIGMA_MIN) / (s * s + SIGMA_MAX * SIGMA_MAX)).sqrt();
    Ok((x.data()[0] - exact).abs())
}

pub fn euler() -> Result<(bool, String)> {
    let errs = [16, 32, 64, 128]
        .iter()
        .map(|&n| euler_error(n, 1.0, 0.5, 60.0))
        .collect::<Result<Vec<_>>>()?;
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    let ok = ratios.iter().all(|r| (r - 2.0).abs() <= 0.3);
    Ok((ok, format!("error ratios {:.3?}", ratios)))
}

pub fn spectral(seed: u64) -> Result<(bool, String)> {
    let n = 16;
    let g = Grid::new(0.0, 0.0, 1.0, 1.0, n, n)?;
    let mut rng = stream(seed);
    let field = Field::new(g, vec![Channel::new("a", "1"), Channel::new("b", "1")], normals(&mut rng, n * n * 2))?;
    let bypass = smooth(&field, SmoothingStrength::new(0.0)?)? == field;
    let mut energies = Vec::new();
    for alpha in [0.0, 0.2, 0.4, 0.6, 0.8] {
        let s = smooth(&field, SmoothingStrength::new(alpha)?)?;
        let e: f64 = s
            .planes()
            .iter()
            .map(|p| Ok(dft2(p, n, n)?.energy_above(n as f64 / 4.0)))
            .sum::<Result<f64>>()?;
        energies.push(e);
    }
    let monotone = energies.windows(2).all(|w| w[1] <= w[0]);
    let mut round_trip: f64 = 0.0;
    for p in field.planes() {
        let back = crate::spectral::idft2(&dft2(&p, n, n)?);
        round_trip = back.iter().zip(&p).fold(round_trip, |m, (a, b)| m.max((a - b).abs()));
    }
    Ok((
        bypass && monotone && round_trip <= 1e-9,
        format!("bypass exact: {bypass}, energy non-increasing: {monotone}, round trip {round_trip:.2e}"),
    ))
}
