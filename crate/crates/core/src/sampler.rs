//! Noise schedules, probability-flow ODE and reverse-SDE integration, and
//! ensemble generation.
//!
//! States evolve under variance-exploding diffusion with `sigma(t) = t`, so
//! the probability-flow ODE is `dx/dsigma = (x - D(x; sigma)) / sigma`.
//! Sampling starts from `x ~ N(0, sigma_max^2 I)` and the state at `sigma_min`
//! is returned as is, without a final denoising step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{denoise, EdmConfig, NoiseLevel};
use crate::error::{Error, Result};
use crate::grid::{Channel, Field, Grid};
use crate::net::UNet;
use crate::rng::{child_seed, normals, stream, CHILD_SEED_SCHEME};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 128,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
        }
    }
}

/// Strictly decreasing noise levels from `sigma_max` to `sigma_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSchedule {
    config: ScheduleConfig,
    levels: Vec<f64>,
}

impl SigmaSchedule {
    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Power-law schedule
/// `sigma_i = (smax^(1/rho) + (i-1)/(N-1) * (smin^(1/rho) - smax^(1/rho)))^rho`.
///
/// The endpoints are stored as the configured values so that they are exact.
pub fn edm_schedule(steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<SigmaSchedule> {
    if steps < 2 || !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) || !(rho > 0.0) {
        return Err(Error::Argument(format!(
            "invalid schedule: N={steps}, sigma in [{sigma_min}, {sigma_max}], rho={rho}"
        )));
    }
    let (hi, lo) = (sigma_max.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
    let mut levels: Vec<f64> = (0..steps)
        .map(|i| (hi + i as f64 / (steps - 1) as f64 * (lo - hi)).powf(rho))
        .collect();
    levels[0] = sigma_max;
    levels[steps - 1] = sigma_min;
    if levels.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Argument(format!(
            "schedule with N={steps}, rho={rho} is not strictly decreasing in f64"
        )));
    }
    Ok(SigmaSchedule {
        config: ScheduleConfig {
            steps,
            sigma_min,
            sigma_max,
            rho,
        },
        levels,
    })
}

impl TryFrom<ScheduleConfig> for SigmaSchedule {
    type Error = Error;

    fn try_from(c: ScheduleConfig) -> Result<Self> {
        edm_schedule(c.steps, c.sigma_min, c.sigma_max, c.rho)
    }
}

/// A conditional denoiser `D(x; cond, sigma)` in the sampler's state space.
pub trait Denoiser: Sync {
    fn denoise(&self, x: &Field, cond: &Field, sigma: NoiseLevel) -> Result<Field>;
}

impl<F> Denoiser for F
where
    F: Fn(&Field, &Field, NoiseLevel) -> Result<Field> + Sync,
{
    fn denoise(&self, x: &Field, cond: &Field, sigma: NoiseLevel) -> Result<Field> {
        self(x, cond, sigma)
    }
}

/// The trained network wrapped with EDM preconditioning.
#[derive(Debug, Clone)]
pub struct NetDenoiser {
    pub net: UNet,
    pub edm: EdmConfig,
}

impl Denoiser for NetDenoiser {
    fn denoise(&self, x: &Field, cond: &Field, sigma: NoiseLevel) -> Result<Field> {
        denoise(|s, c, cn| self.net.apply_fields(s, c, cn), x, cond, sigma, &self.edm)
    }
}

/// Conditional Gaussian task `u = a * ubar_up + b + eps`, `eps ~ N(0, s^2)`
/// per fine pixel and channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianTaskSpec {
    pub a: f64,
    pub b: f64,
    pub s: f64,
    pub fine: Grid,
    /// Fine pixels per coarse pixel along each axis.
    pub factor: usize,
}

impl GaussianTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s.is_finite() && self.a.is_finite() && self.b.is_finite()) {
            return Err(Error::Argument(format!(
                "gaussian task needs finite a, b and s > 0 (a={}, b={}, s={})",
                self.a, self.b, self.s
            )));
        }
        if self.factor == 0 || self.fine.height % self.factor != 0 || self.fine.width % self.factor != 0 {
            return Err(Error::Argument(format!(
                "fine grid {}x{} is not divisible by factor {}",
                self.fine.height, self.fine.width, self.factor
            )));
        }
        Ok(())
    }

    /// Conditional mean `a * ubar_up + b`.
    pub fn conditional_mean(&self, coarse_up: &Field) -> Result<Field> {
        coarse_up.map(|v, _| self.a * v + self.b)
    }
}

/// Exact posterior mean `m + s^2 / (s^2 + sigma^2) * (u_noisy - m)` with
/// `m = a * ubar_up + b`.
pub fn oracle_denoiser(task: &GaussianTaskSpec, u_noisy: &Field, coarse_up: &Field, sigma: NoiseLevel) -> Result<Field> {
    let m = task.conditional_mean(coarse_up)?;
    let s2 = task.s * task.s;
    let k = s2 / (s2 + sigma.value() * sigma.value());
    m.zip_with(u_noisy, |m, x| m + k * (x - m))
}

/// Posterior-mean denoiser for a Gaussian prior with a fixed per-element mean
/// and per-channel standard deviation, ignoring the conditioning argument.
///
/// Built in whatever space the sampler runs in, e.g. standardized units.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    mean: Field,
    std: Vec<f64>,
}

impl GaussianOracle {
    pub fn new(mean: Field, std: Vec<f64>) -> Result<Self> {
        if std.len() != mean.num_channels() || std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Argument("oracle needs one positive std per channel".into()));
        }
        Ok(GaussianOracle { mean, std })
    }

    /// Oracle for a Gaussian task in physical units.
    pub fn physical(task: &GaussianTaskSpec, coarse_up: &Field) -> Result<Self> {
        let mean = task.conditional_mean(coarse_up)?;
        let std = vec![task.s; mean.num_channels()];
        GaussianOracle::new(mean, std)
    }

    /// The same oracle expressed in standardized units `(u - mu) / sd`.
    pub fn standardized(task: &GaussianTaskSpec, coarse_up: &Field, stats: &crate::grid::StandardizationStats) -> Result<Self> {
        let mean = crate::grid::standardize(&task.conditional_mean(coarse_up)?, stats)?;
        let std = mean
            .channels()
            .iter()
            .map(|c| stats.lookup(&c.name).map(|(_, sd)| task.s / sd))
            .collect::<Result<Vec<_>>>()?;
        GaussianOracle::new(mean, std)
    }

    pub fn mean(&self) -> &Field {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }
}

impl Denoiser for GaussianOracle {
    fn denoise(&self, x: &Field, _cond: &Field, sigma: NoiseLevel) -> Result<Field> {
        self.mean.check_compatible(x)?;
        let s2 = sigma.value() * sigma.value();
        let nc = self.std.len();
        let gains: Vec<f64> = self.std.iter().map(|s| s * s / (s * s + s2)).collect();
        let data = self
            .mean
            .data()
            .iter()
            .zip(x.data())
            .enumerate()
            .map(|(k, (m, v))| m + gains[k % nc] * (v - m))
            .collect();
        x.with_data(data)
    }
}

fn check_finite(x: &Field, step: usize) -> Result<()> {
    if let Some(v) = x.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step,
            context: format!("sampler state contains {v}"),
        });
    }
    Ok(())
}

/// One explicit Euler step `x + (sigma_next - sigma) * (x - D(x; sigma)) / sigma`.
pub fn pf_ode_step<D: Denoiser + ?Sized>(
    x: &Field,
    sigma: f64,
    sigma_next: f64,
    denoiser: &D,
    cond: &Field,
) -> Result<Field> {
    if !(sigma > sigma_next && sigma_next > 0.0) {
        return Err(Error::Argument(format!(
            "Euler step needs sigma > sigma_next > 0, got {sigma} -> {sigma_next}"
        )));
    }
    check_finite(x, 0)?;
    let d = denoiser.denoise(x, cond, NoiseLevel::new(sigma)?)?;
    let h = (sigma_next - sigma) / sigma;
    x.zip_with(&d, |x, d| x + h * (x - d))
}

fn initial_state(grid: &Grid, channels: &[Channel], sigma_max: f64, rng: &mut crate::rng::StreamRng) -> Result<Field> {
    let n = grid.len() * channels.len();
    let data = normals(rng, n).into_iter().map(|z| sigma_max * z).collect();
    Field::new(grid.clone(), channels.to_vec(), data)
}

/// Integrate the probability-flow ODE from `N(0, sigma_max^2)` noise down to
/// `sigma_min`. The state has `channels` on the grid of `cond`.
pub fn sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    cond: &Field,
    channels: &[Channel],
    schedule: &SigmaSchedule,
    seed: u64,
) -> Result<Field> {
    let levels = schedule.levels();
    let mut rng = stream(seed);
    let mut x = initial_state(cond.grid(), channels, levels[0], &mut rng)?;
    for (i, w) in levels.windows(2).enumerate() {
        x = pf_ode_step(&x, w[0], w[1], denoiser, cond).map_err(|e| at_step(e, i))?;
        check_finite(&x, i + 1)?;
    }
    Ok(x)
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { context, .. } => Error::NonFinite { step, context },
        other => other,
    }
}

/// Euler-Maruyama discretization of the reverse SDE over the same levels:
/// `x' = x + 2 sigma dt * score + sqrt(2 sigma dt) z` with
/// `dt = sigma_i - sigma_(i+1)` and `score = (D - x) / sigma^2`.
pub fn sde_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    cond: &Field,
    channels: &[Channel],
    schedule: &SigmaSchedule,
    seed: u64,
) -> Result<Field> {
    let levels = schedule.levels();
    let mut rng = stream(seed);
    let mut x = initial_state(cond.grid(), channels, levels[0], &mut rng)?;
    for (i, w) in levels.windows(2).enumerate() {
        let (sigma, dt) = (w[0], w[0] - w[1]);
        let d = denoiser.denoise(&x, cond, NoiseLevel::new(sigma)?)?;
        let drift = 2.0 * dt / sigma;
        let diffusion = (2.0 * sigma * dt).sqrt();
        let z = normals(&mut rng, x.data().len());
        let data = x
            .data()
            .iter()
            .zip(d.data())
            .zip(&z)
            .map(|((x, d), z)| x + drift * (d - x) + diffusion * z)
            .collect();
        x = x.with_data(data)?;
        check_finite(&x, i + 1)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ode,
    Sde,
}

/// Samples sharing one conditioning input. Member `k` was drawn with
/// `child_seed(base_seed, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<Field>,
    pub base_seed: u64,
    pub member_seeds: Vec<u64>,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Values of one channel at one pixel across members.
    pub fn values_at(&self, i: usize, j: usize, c: usize) -> Vec<f64> {
        self.members.iter().map(|m| m.get(i, j, c)).collect()
    }
}

/// Draw `n` members in parallel. Results are bit-identical to drawing them one
/// by one, since each member owns its RNG stream.
pub fn sample_ensemble<D: Denoiser + ?Sized>(
    denoiser: &D,
    cond: &Field,
    channels: &[Channel],
    schedule: &SigmaSchedule,
    n: usize,
    base_seed: u64,
    kind: SamplerKind,
) -> Result<Ensemble> {
    if n == 0 {
        return Err(Error::Argument("ensemble size must be at least 1".into()));
    }
    let member_seeds: Vec<u64> = (0..n as u64).map(|k| child_seed(base_seed, k)).collect();
    let members = member_seeds
        .par_iter()
        .map(|&seed| match kind {
            SamplerKind::Ode => sample(denoiser, cond, channels, schedule, seed),
            SamplerKind::Sde => sde_sample(denoiser, cond, channels, schedule, seed),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble {
        members,
        base_seed,
        member_seeds,
    })
}

/// JSON sidecar written next to ensemble member files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMeta {
    pub sampler: SamplerKind,
    /// `net` or `oracle`.
    pub denoiser: String,
    pub schedule: ScheduleConfig,
    pub base_seed: u64,
    pub member_seeds: Vec<u64>,
    pub seed_scheme: String,
    pub checkpoint_sha256: Option<String>,
    pub config_hash: String,
    pub members: Vec<String>,
}

impl EnsembleMeta {
    pub fn new(
        ensemble: &Ensemble,
        sampler: SamplerKind,
        denoiser: &str,
        schedule: &SigmaSchedule,
        checkpoint_sha256: Option<String>,
        config_hash: String,
        members: Vec<String>,
    ) -> Self {
        EnsembleMeta {
            sampler,
            denoiser: denoiser.to_string(),
            schedule: *schedule.config(),
            base_seed: ensemble.base_seed,
            member_seeds: ensemble.member_seeds.clone(),
            seed_scheme: CHILD_SEED_SCHEME.to_string(),
            checkpoint_sha256,
            config_hash,
            members,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Field {
        let g = Grid::new(0.0, 0.0, 1.0, 1.0, 2, 2).unwrap();
        Field::new(g, vec![Channel::new("u", "1")], vec![v; 4]).unwrap()
    }

    fn task(a: f64, b: f64, s: f64) -> GaussianTaskSpec {
        GaussianTaskSpec {
            a,
            b,
            s,
            fine: Grid::new(0.0, 0.0, 1.0, 1.0, 2, 2).unwrap(),
            factor: 1,
        }
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let s = SigmaSchedule::try_from(ScheduleConfig::default()).unwrap();
        assert_eq!(s.len(), 128);
        assert_eq!(s.levels()[0], 80.0);
        assert_eq!(s.levels()[127], 0.002);
        assert!(s.levels().windows(2).all(|w| w[1] < w[0]));
        // the stored endpoints agree with the formula to rounding
        let formula_end = (80f64.powf(1.0 / 7.0) + (0.002f64.powf(1.0 / 7.0) - 80f64.powf(1.0 / 7.0))).powf(7.0);
        assert!((formula_end - 0.002).abs() < 1e-15);
    }

    #[test]
    fn rho_one_is_arithmetic() {
        let s = edm_schedule(5, 1.0, 5.0, 1.0).unwrap();
        for (a, b) in s.levels().iter().zip([5.0, 4.0, 3.0, 2.0, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_schedules() {
        assert!(edm_schedule(1, 0.1, 1.0, 7.0).is_err());
        assert!(edm_schedule(4, 1.0, 0.1, 7.0).is_err());
        assert!(edm_schedule(4, 0.1, 1.0, 0.0).is_err());
    }

    #[test]
    fn identity_denoiser_is_stationary() {
        let id = |x: &Field, _: &Field, _: NoiseLevel| Ok(x.clone());
        let x = scalar(1.7);
        assert_eq!(pf_ode_step(&x, 2.0, 1.0, &id, &x).unwrap(), x);
    }

    #[test]
    fn euler_step_with_gaussian_prior() {
        let prior = |x: &Field, _: &Field, s: NoiseLevel| x.map(|v, _| v / (1.0 + s.value() * s.value()));
        let x = scalar(3.0);
        let y = pf_ode_step(&x, 2.0, 1.0, &prior, &x).unwrap();
        assert!((y.data()[0] - 1.8).abs() < 1e-12);
    }

    #[test]
    fn oracle_limits_and_hand_value() {
        let t = task(1.0, 0.0, 1.0);
        let ubar = scalar(2.0);
        let d = oracle_denoiser(&t, &scalar(4.0), &ubar, NoiseLevel::new(1.0).unwrap()).unwrap();
        assert!((d.data()[0] - 3.0).abs() < 1e-15);
        let d = oracle_denoiser(&t, &scalar(4.0), &ubar, NoiseLevel::new(1e-9).unwrap()).unwrap();
        assert!((d.data()[0] - 4.0).abs() < 1e-6);
        let d = oracle_denoiser(&t, &scalar(4.0), &ubar, NoiseLevel::new(1e6).unwrap()).unwrap();
        assert!((d.data()[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn oracle_struct_matches_function() {
        let t = task(0.7, -1.0, 0.4);
        let ubar = scalar(1.5);
        let oracle = GaussianOracle::physical(&t, &ubar).unwrap();
        let sig = NoiseLevel::new(0.3).unwrap();
        let a = oracle_denoiser(&t, &scalar(2.0), &ubar, sig).unwrap();
        let b = oracle.denoise(&scalar(2.0), &ubar, sig).unwrap();
        assert!((a.data()[0] - b.data()[0]).abs() < 1e-15);
    }

    #[test]
    fn sampling_is_seeded() {
        let oracle = GaussianOracle::physical(&task(1.0, 0.0, 1.0), &scalar(0.5)).unwrap();
        let sched = edm_schedule(16, 0.002, 80.0, 7.0).unwrap();
        let ch = [Channel::new("u", "1")];
        let a = sample(&oracle, &scalar(0.5), &ch, &sched, 3).unwrap();
        let b = sample(&oracle, &scalar(0.5), &ch, &sched, 3).unwrap();
        let c = sample(&oracle, &scalar(0.5), &ch, &sched, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_score_sde_is_a_noise_walk() {
        let id = |x: &Field, _: &Field, _: NoiseLevel| Ok(x.clone());
        let sched = edm_schedule(8, 0.1, 2.0, 1.0).unwrap();
        let expected: f64 = 4.0
            + sched
                .levels()
                .windows(2)
                .map(|w| 2.0 * w[0] * (w[0] - w[1]))
                .sum::<f64>();
        let ch = [Channel::new("u", "1")];
        let n = 5_000;
        let var = (0..n)
            .flat_map(|k| sde_sample(&id, &scalar(0.0), &ch, &sched, k).unwrap().into_data())
            .map(|v| v * v)
            .sum::<f64>()
            / (4 * n) as f64;
        assert!((var / expected - 1.0).abs() < 0.03, "{var} vs {expected}");
    }

    #[test]
    fn ensemble_matches_sequential_members() {
        let oracle = GaussianOracle::physical(&task(1.0, 0.0, 1.0), &scalar(0.5)).unwrap();
        let sched = edm_schedule(16, 0.002, 80.0, 7.0).unwrap();
        let ch = [Channel::new("u", "1")];
        let ens = sample_ensemble(&oracle, &scalar(0.5), &ch, &sched, 6, 11, SamplerKind::Ode).unwrap();
        for (k, m) in ens.members.iter().enumerate() {
            let seq = sample(&oracle, &scalar(0.5), &ch, &sched, child_seed(11, k as u64)).unwrap();
            assert_eq!(m, &seq);
        }
        let single = sample_ensemble(&oracle, &scalar(0.5), &ch, &sched, 1, 11, SamplerKind::Ode).unwrap();
        assert_eq!(single.members[0], ens.members[0]);
        let other = sample_ensemble(&oracle, &scalar(0.5), &ch, &sched, 6, 12, SamplerKind::Ode).unwrap();
        assert_ne!(other.members, ens.members);
    }
}
