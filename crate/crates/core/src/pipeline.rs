//! Glue between stored datasets, the denoiser, the sampler and verification.
//!
//! The network and the sampler work in standardized units: coarse channels
//! are standardized with coarse statistics and bilinearly upsampled to the
//! fine grid, targets with fine statistics. Statics enter unchanged.

use crate::error::{Error, Result};
use crate::grid::{destandardize, standardize, upsample_bilinear, Channel, Field};
use crate::net::{Example, UNet};
use crate::sampler::{Ensemble, GaussianOracle};
use crate::synth::{Dataset, Split};
use crate::verify::{score, Case, ScoreReport};

fn pair(ds: &Dataset, index: usize) -> Result<&crate::synth::Pair> {
    ds.pairs
        .get(index)
        .ok_or_else(|| Error::Argument(format!("sample {index} not in dataset of {}", ds.pairs.len())))
}

/// Standardized coarse state on the fine grid.
pub fn coarse_input(ds: &Dataset, index: usize) -> Result<Field> {
    let p = pair(ds, index)?;
    let z = standardize(&p.coarse, &ds.manifest.stats.coarse)?;
    upsample_bilinear(&z, &ds.manifest.grids.fine)
}

/// Network conditioning without smoothing: upsampled coarse state and statics.
pub fn conditioning(ds: &Dataset, index: usize) -> Result<Field> {
    Field::concat(&[&coarse_input(ds, index)?, &ds.statics])
}

pub fn example(ds: &Dataset, index: usize) -> Result<Example> {
    Ok(Example {
        coarse: coarse_input(ds, index)?,
        statics: Some(ds.statics.clone()),
        target: standardize(&pair(ds, index)?.fine, &ds.manifest.stats.fine)?,
    })
}

pub fn examples(ds: &Dataset, split: Split) -> Result<Vec<Example>> {
    ds.split(split).iter().map(|&k| example(ds, k)).collect()
}

/// Deterministic baseline: the coarse field bilinearly upsampled, in physical units.
pub fn baseline(ds: &Dataset, index: usize) -> Result<Field> {
    upsample_bilinear(&pair(ds, index)?.coarse, &ds.manifest.grids.fine)
}

/// Exact posterior denoiser for a gaussian-task sample, in standardized units.
pub fn oracle(ds: &Dataset, index: usize) -> Result<GaussianOracle> {
    let task = ds
        .gaussian_task()
        .ok_or_else(|| Error::Config("the oracle denoiser needs a gaussian-task dataset".into()))?;
    GaussianOracle::standardized(&task, &baseline(ds, index)?, &ds.manifest.stats.fine)
}

/// Point forecast of a network trained with the regression objective, in
/// standardized units: noisy-state channels are zero and `c_noise = 0`.
pub fn regression_forecast(net: &UNet, cond: &Field, channels: &[Channel]) -> Result<Field> {
    let zeros = Field::zeros(*cond.grid(), channels.to_vec())?;
    net.apply_fields(&zeros, cond, 0.0)
}

/// Members mapped back to physical units.
pub fn to_physical(ds: &Dataset, ensemble: &Ensemble) -> Result<Vec<Field>> {
    ensemble
        .members
        .iter()
        .map(|m| destandardize(m, &ds.manifest.stats.fine))
        .collect()
}

/// Score physical-unit ensembles, one per listed sample, against the
/// dataset's stations and the bilinear baseline.
pub fn evaluate(ds: &Dataset, forecasts: &[(usize, Vec<Field>)], config_hash: &str) -> Result<ScoreReport> {
    let mut baselines = Vec::with_capacity(forecasts.len());
    let mut observations = Vec::with_capacity(forecasts.len());
    for (k, _) in forecasts {
        // scored at the f32 precision ensemble members are stored with
        baselines.push(baseline(ds, *k)?.quantized());
        let entry = &ds.manifest.samples[*k];
        observations.push((entry.lead_time_h, ds.observations_at(&entry.valid_time)));
    }
    let cases: Vec<Case<'_>> = forecasts
        .iter()
        .zip(&baselines)
        .zip(&observations)
        .map(|(((_, members), base), (lead, obs))| Case {
            lead_time_h: *lead,
            baseline: base,
            members,
            observations: obs,
        })
        .collect();
    score(&cases, config_hash)
}
