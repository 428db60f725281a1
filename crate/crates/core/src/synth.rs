//! Synthetic paired coarse/fine datasets.
//!
//! Coarse grids carry a one-cell halo: for a fine grid of `H x W` and factor
//! `f` the coarse grid is `(H/f + 2) x (W/f + 2)` with nodes at the centres of
//! `f x f` blocks, so bilinear upsampling covers every fine node without
//! extrapolation. The inner `H/f x W/f` coarse cells are block means over the
//! fine grid itself.
//!
//! Two tasks are provided:
//!
//! * `gaussian`: a smooth coarse field `ubar` and `u = a * ubar_up + b + eps`
//!   with `eps ~ N(0, s^2)` per fine node, so `p(u | ubar)` is known exactly.
//! * `terrain`: a fine truth built from a large-scale flow, elevation-driven
//!   detail and small-scale noise; the coarse input is its block mean plus a
//!   smooth, dataset-wide bias pattern.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::edf;
use crate::error::{Error, Result};
use crate::grid::{bilinear_sample, compute_stats, upsample_bilinear, Channel, Field, Grid, StandardizationStats};
use crate::net::checkpoint::sha256_hex;
use crate::rng::{child_seed, normals, stream, StreamRng};
use crate::sampler::GaussianTaskSpec;
use crate::verify::{wind_speed, write_observations, read_observations, Observation};

/// `(name, unit, climatological base, large-scale amplitude)`.
const STATE: [(&str, &str, f64, f64); 4] = [
    ("t2m", "K", 283.0, 4.0),
    ("u10", "m s-1", 2.0, 3.0),
    ("v10", "m s-1", 0.0, 3.0),
    ("msl", "hPa", 1013.0, 6.0),
];

pub fn state_channels() -> Vec<Channel> {
    STATE.iter().map(|(n, u, _, _)| Channel::new(*n, *u)).collect()
}

pub fn static_channels() -> Vec<Channel> {
    vec![Channel::new("z", "1"), Channel::new("lsm", "1")]
}

fn check_factor(height: usize, width: usize, factor: usize) -> Result<()> {
    if factor == 0 || height % factor != 0 || width % factor != 0 {
        return Err(Error::Argument(format!(
            "{height}x{width} grid is not divisible by factor {factor}"
        )));
    }
    Ok(())
}

/// Block means over `factor x factor` cells, on a grid of block centres.
pub fn coarsen(fine: &Field, factor: usize) -> Result<Field> {
    let g = fine.grid();
    check_factor(g.height, g.width, factor)?;
    if factor == 1 {
        return Ok(fine.clone());
    }
    let (h, w) = (g.height / factor, g.width / factor);
    let offset = (factor as f64 - 1.0) / 2.0;
    let grid = Grid::new(
        g.lat0 + offset * g.dlat,
        g.lon0 + offset * g.dlon,
        g.dlat * factor as f64,
        g.dlon * factor as f64,
        h,
        w,
    )?;
    let nc = fine.num_channels();
    let mut data = vec![0.0; h * w * nc];
    let norm = (factor * factor) as f64;
    for i in 0..h {
        for j in 0..w {
            for c in 0..nc {
                let mut sum = 0.0;
                for di in 0..factor {
                    for dj in 0..factor {
                        sum += fine.get(i * factor + di, j * factor + dj, c);
                    }
                }
                data[(i * w + j) * nc + c] = sum / norm;
            }
        }
    }
    Field::new(grid, fine.channels().to_vec(), data)
}

/// The fine grid grown by `factor` nodes on every side.
pub fn extended_grid(fine: &Grid, factor: usize) -> Result<Grid> {
    let f = factor as f64;
    Grid::new(
        fine.lat0 - f * fine.dlat,
        fine.lon0 - f * fine.dlon,
        fine.dlat,
        fine.dlon,
        fine.height + 2 * factor,
        fine.width + 2 * factor,
    )
}

/// Coarse grid with a one-cell halo around the fine domain.
pub fn coarse_grid_for(fine: &Grid, factor: usize) -> Result<Grid> {
    check_factor(fine.height, fine.width, factor)?;
    let ext = extended_grid(fine, factor)?;
    let offset = (factor as f64 - 1.0) / 2.0;
    Grid::new(
        ext.lat0 + offset * ext.dlat,
        ext.lon0 + offset * ext.dlon,
        fine.dlat * factor as f64,
        fine.dlon * factor as f64,
        fine.height / factor + 2,
        fine.width / factor + 2,
    )
}

/// Random superposition of low-order planar waves, evaluated in coordinates
/// normalized to the reference domain so that any grid over the same area
/// sees the same function.
struct WaveField {
    /// `(ky, kx, amplitude, phase)` per channel.
    modes: Vec<Vec<(f64, f64, f64, f64)>>,
    origin: (f64, f64),
    extent: (f64, f64),
}

impl WaveField {
    fn draw(rng: &mut StreamRng, channels: usize, max_k: i32, slope: f64, reference: &Grid) -> Self {
        let modes = (0..channels)
            .map(|_| {
                let mut m = Vec::new();
                for ky in 0..=max_k {
                    for kx in -max_k..=max_k {
                        if (ky == 0 && kx <= 0) || ky * ky + kx * kx > max_k * max_k {
                            continue;
                        }
                        let k2 = (ky * ky + kx * kx) as f64;
                        let amp: f64 = normals(rng, 1)[0] * k2.powf(-slope / 2.0);
                        let phase = rng.random_range(0.0..std::f64::consts::TAU);
                        m.push((ky as f64, kx as f64, amp, phase));
                    }
                }
                let norm = m.iter().map(|t| t.2 * t.2).sum::<f64>().sqrt().max(1e-12) / std::f64::consts::SQRT_2;
                m.iter_mut().for_each(|t| t.2 /= norm);
                m
            })
            .collect();
        WaveField {
            modes,
            origin: (reference.lat0, reference.lon0),
            extent: (
                reference.dlat * reference.height as f64,
                reference.dlon * reference.width as f64,
            ),
        }
    }

    /// Unit-variance (over phases) pattern value of channel `c` at a point.
    fn eval(&self, c: usize, lat: f64, lon: f64) -> f64 {
        let y = (lat - self.origin.0) / self.extent.0;
        let x = (lon - self.origin.1) / self.extent.1;
        self.modes[c]
            .iter()
            .map(|&(ky, kx, a, p)| a * (std::f64::consts::TAU * (ky * y + kx * x) + p).cos())
            .sum()
    }

    fn render(&self, grid: &Grid, mut value: impl FnMut(usize, f64) -> f64) -> Vec<f64> {
        let nc = self.modes.len();
        let mut data = Vec::with_capacity(grid.len() * nc);
        for i in 0..grid.height {
            for j in 0..grid.width {
                for c in 0..nc {
                    data.push(value(c, self.eval(c, grid.lat(i), grid.lon(j))));
                }
            }
        }
        data
    }
}

/// Elevation `z` in `[0, 1]` and a land-sea mask on `grid`.
pub fn gen_statics(grid: &Grid, reference: &Grid, rng: &mut StreamRng) -> Result<Field> {
    let max_k = (reference.height.min(reference.width) / 2).clamp(1, 8) as i32;
    let waves = WaveField::draw(rng, 1, max_k, 2.0, reference);
    let raw = waves.render(grid, |_, v| v);
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    let mut data = Vec::with_capacity(raw.len() * 2);
    for v in raw {
        let z = (v - lo) / span;
        let lsm = 1.0 / (1.0 + (-(z - 0.35) / 0.05).exp());
        data.extend([z, lsm]);
    }
    Field::new(*grid, static_channels(), data)
}

fn crop(field: &Field, top: usize, left: usize, target: &Grid) -> Result<Field> {
    let nc = field.num_channels();
    let mut data = Vec::with_capacity(target.len() * nc);
    for i in 0..target.height {
        for j in 0..target.width {
            data.extend((0..nc).map(|c| field.get(top + i, left + j, c)));
        }
    }
    Field::new(*target, field.channels().to_vec(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerrainSpec {
    pub fine: Grid,
    pub factor: usize,
    /// Scale of the white small-scale component.
    pub roughness: f64,
    /// Scale of the coarse-input bias pattern.
    pub bias: f64,
    /// Temperature drop per unit of normalized elevation, in K.
    pub lapse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum TaskParams {
    Gaussian { a: f64, b: f64, s: f64 },
    Terrain { roughness: f64, bias: f64, lapse: f64 },
}

/// One generated pair. `coarse` lives on the halo grid, `fine` on the fine grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub coarse: Field,
    pub fine: Field,
}

/// Gaussian-task pairs: smooth `ubar` on the coarse grid, `u` drawn from the
/// exact conditional `N(a * ubar_up + b, s^2)`. The first field is the shared
/// static input.
pub fn gen_gaussian_task(spec: &GaussianTaskSpec, count: usize, seed: u64) -> Result<(Field, Vec<Pair>)> {
    spec.validate()?;
    let mut rng = stream(seed);
    let statics = gen_statics(&spec.fine, &spec.fine, &mut rng)?;
    let coarse_grid = coarse_grid_for(&spec.fine, spec.factor)?;
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let waves = WaveField::draw(&mut rng, STATE.len(), 2, 1.0, &spec.fine);
        let data = waves.render(&coarse_grid, |c, v| STATE[c].2 + STATE[c].3 * v);
        let coarse = Field::new(coarse_grid, state_channels(), data)?;
        let up = upsample_bilinear(&coarse, &spec.fine)?;
        let eps = normals(&mut rng, up.data().len());
        let fine = up.with_data(
            up.data()
                .iter()
                .zip(&eps)
                .map(|(m, e)| spec.a * m + spec.b + spec.s * e)
                .collect(),
        )?;
        pairs.push(Pair { coarse, fine });
    }
    Ok((statics, pairs))
}

/// Terrain-task pairs; statics are the generated `z` and `lsm`.
pub fn gen_terrain_task(spec: &TerrainSpec, count: usize, seed: u64) -> Result<(Field, Vec<Pair>)> {
    check_factor(spec.fine.height, spec.fine.width, spec.factor)?;
    if ![spec.roughness, spec.bias, spec.lapse].iter().all(|v| v.is_finite()) || spec.roughness < 0.0 {
        return Err(Error::Argument(format!("invalid terrain parameters {spec:?}")));
    }
    let f = spec.factor;
    let ext = extended_grid(&spec.fine, f)?;
    let mut rng = stream(seed);
    let statics_ext = gen_statics(&ext, &spec.fine, &mut rng)?;
    let statics = crop(&statics_ext, f, f, &spec.fine)?;
    let coarse_grid = coarse_grid_for(&spec.fine, f)?;
    let bias_waves = WaveField::draw(&mut rng, STATE.len(), 1, 1.0, &spec.fine);
    let bias = bias_waves.render(&coarse_grid, |c, v| spec.bias * 0.25 * STATE[c].3 * (v + 1.0));
    let small_scale = [0.6, 0.8, 0.8, 0.3];
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let waves = WaveField::draw(&mut rng, STATE.len(), 2, 1.0, &spec.fine);
        let noise = normals(&mut rng, ext.len() * STATE.len());
        let mut data = waves.render(&ext, |c, v| STATE[c].2 + STATE[c].3 * v);
        for (k, v) in data.iter_mut().enumerate() {
            let (node, c) = (k / STATE.len(), k % STATE.len());
            let z = statics_ext.data()[2 * node];
            let detail = match c {
                0 => -spec.lapse * z,
                1 | 2 => -0.5 * z * *v,
                _ => -8.0 * z,
            };
            *v += detail + spec.roughness * small_scale[c] * noise[k];
        }
        let truth = Field::new(ext, state_channels(), data)?;
        let block = coarsen(&truth, f)?;
        let coarse = Field::new(
            coarse_grid,
            state_channels(),
            block.data().iter().zip(&bias).map(|(v, b)| v + b).collect(),
        )?;
        pairs.push(Pair {
            coarse,
            fine: crop(&truth, f, f, &spec.fine)?,
        });
    }
    Ok((statics, pairs))
}

/// Observations at `n_stations` random interior locations, fixed across
/// times. `wind_speed` is derived from the interpolated winds before noise
/// is added; every row gets independent `N(0, obs_noise_std^2)` noise.
pub fn gen_stations(truths: &[(String, &Field)], n_stations: usize, obs_noise_std: f64, seed: u64) -> Result<Vec<Observation>> {
    if n_stations == 0 || !(obs_noise_std >= 0.0) {
        return Err(Error::Argument(format!(
            "need at least one station and a non-negative noise level (got {n_stations}, {obs_noise_std})"
        )));
    }
    let first = truths
        .first()
        .ok_or_else(|| Error::Argument("no truth fields for station generation".into()))?;
    let (lat_lo, lat_hi, lon_lo, lon_hi) = first.1.grid().bounds();
    let mut rng = stream(seed);
    let stations: Vec<(String, f64, f64)> = (0..n_stations)
        .map(|k| {
            let lat = rng.random_range(lat_lo..lat_hi);
            let lon = rng.random_range(lon_lo..lon_hi);
            (format!("S{k:04}"), lat, lon)
        })
        .collect();
    let mut out = Vec::new();
    for (valid_time, field) in truths {
        let idx = |name: &str| {
            field
                .channel_index(name)
                .ok_or_else(|| Error::Config(format!("truth field has no {name:?} channel")))
        };
        for (id, lat, lon) in &stations {
            let mut values = Vec::with_capacity(5);
            for name in ["t2m", "u10", "v10", "msl"] {
                values.push((name, bilinear_sample(field, *lat, *lon, idx(name)?)?));
            }
            values.push(("wind_speed", wind_speed(values[1].1, values[2].1)));
            for (name, v) in values {
                let noise = if obs_noise_std > 0.0 { obs_noise_std * normals(&mut rng, 1)[0] } else { 0.0 };
                out.push(Observation {
                    station_id: id.clone(),
                    lat: *lat,
                    lon: *lon,
                    valid_time: valid_time.clone(),
                    variable: name.to_string(),
                    value: v + noise,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub params: TaskParams,
    pub fine: Grid,
    pub factor: usize,
    pub count: usize,
    /// The last `test_count` samples form the held-out split.
    pub test_count: usize,
    pub n_stations: usize,
    pub obs_noise_std: f64,
    pub lead_time_h: u32,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        check_factor(self.fine.height, self.fine.width, self.factor)?;
        if self.count < 2 || self.test_count == 0 || self.test_count >= self.count {
            return Err(Error::Argument(format!(
                "need 1 <= test_count < count (got {} of {})",
                self.test_count, self.count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grids {
    pub fine: Grid,
    pub coarse: Grid,
    pub factor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub fine: StandardizationStats,
    pub coarse: StandardizationStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    pub split: Split,
    pub valid_time: String,
    pub lead_time_h: u32,
    pub coarse: String,
    pub fine: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationInfo {
    pub file: String,
    pub count: usize,
    pub obs_noise_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: String,
    pub grids: Grids,
    pub seed: u64,
    pub count: usize,
    pub params: TaskParams,
    pub stats: Stats,
    pub splits: Splits,
    pub statics: String,
    pub samples: Vec<SampleEntry>,
    pub stations: StationInfo,
    /// SHA-256 of every data file, keyed by relative path.
    pub files: BTreeMap<String, String>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub statics: Field,
    pub pairs: Vec<Pair>,
    /// Observations of the test-split truth.
    pub observations: Vec<Observation>,
}

const EPOCH: &str = "2021-01-01T00:00:00Z";

fn valid_time(index: usize) -> Result<String> {
    let epoch: DateTime<Utc> = EPOCH
        .parse()
        .map_err(|e| Error::Config(format!("bad epoch: {e}")))?;
    Ok((epoch + Duration::hours(6 * index as i64)).format("%Y-%m-%dT%H:%M:%SZ").to_string())
}

/// Hash of a serializable configuration, used to tag artifacts.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(cfg)?.as_bytes()))
}

/// Generate a complete dataset in memory. Stations use the stream
/// `child_seed(seed, 1)`; everything else uses `seed`.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let (task, statics, pairs) = match spec.params {
        TaskParams::Gaussian { a, b, s } => {
            let t = GaussianTaskSpec {
                a,
                b,
                s,
                fine: spec.fine,
                factor: spec.factor,
            };
            let (st, p) = gen_gaussian_task(&t, spec.count, spec.seed)?;
            ("gaussian", st, p)
        }
        TaskParams::Terrain { roughness, bias, lapse } => {
            let t = TerrainSpec {
                fine: spec.fine,
                factor: spec.factor,
                roughness,
                bias,
                lapse,
            };
            let (st, p) = gen_terrain_task(&t, spec.count, spec.seed)?;
            ("terrain", st, p)
        }
    };
    let n_train = spec.count - spec.test_count;
    let train: Vec<usize> = (0..n_train).collect();
    let test: Vec<usize> = (n_train..spec.count).collect();
    let stats = Stats {
        fine: compute_stats(&train.iter().map(|&k| pairs[k].fine.clone()).collect::<Vec<_>>())?,
        coarse: compute_stats(&train.iter().map(|&k| pairs[k].coarse.clone()).collect::<Vec<_>>())?,
    };
    let samples = (0..spec.count)
        .map(|k| {
            Ok(SampleEntry {
                index: k,
                split: if k < n_train { Split::Train } else { Split::Test },
                valid_time: valid_time(k)?,
                lead_time_h: spec.lead_time_h,
                coarse: format!("pairs/{k:05}_coarse.edf"),
                fine: format!("pairs/{k:05}_fine.edf"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // station values are drawn from the stored (f32) truth so that they match
    // what a reader of the files sees
    let truths: Vec<(String, Field)> = test
        .iter()
        .map(|&k| (samples[k].valid_time.clone(), pairs[k].fine.quantized()))
        .collect();
    let truth_refs: Vec<(String, &Field)> = truths.iter().map(|(t, f)| (t.clone(), f)).collect();
    let station_seed = child_seed(spec.seed, 1);
    let observations = gen_stations(&truth_refs, spec.n_stations, spec.obs_noise_std, station_seed)?;
    let manifest = DatasetManifest {
        task: task.to_string(),
        grids: Grids {
            fine: spec.fine,
            coarse: coarse_grid_for(&spec.fine, spec.factor)?,
            factor: spec.factor,
        },
        seed: spec.seed,
        count: spec.count,
        params: spec.params.clone(),
        stats,
        splits: Splits { train, test },
        statics: "statics.edf".into(),
        samples,
        stations: StationInfo {
            file: "stations.csv".into(),
            count: spec.n_stations,
            obs_noise_std: spec.obs_noise_std,
            seed: station_seed,
        },
        files: BTreeMap::new(),
        config_hash: config_hash(spec)?,
    };
    Ok(Dataset {
        manifest,
        statics,
        pairs,
        observations,
    })
}

fn write_file(dir: &Path, rel: &str, bytes: &[u8], files: &mut BTreeMap<String, String>) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    files.insert(rel.to_string(), sha256_hex(bytes));
    Ok(())
}

pub const MANIFEST: &str = "manifest.json";

/// Write EDF1 pairs, statics, the observation CSV and `manifest.json`, and
/// return the manifest with file hashes filled in.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = ds.manifest.clone();
    let mut files = BTreeMap::new();
    write_file(dir, &manifest.statics, &edf::encode(&ds.statics), &mut files)?;
    for (entry, pair) in manifest.samples.iter().zip(&ds.pairs) {
        write_file(dir, &entry.coarse, &edf::encode(&pair.coarse), &mut files)?;
        write_file(dir, &entry.fine, &edf::encode(&pair.fine), &mut files)?;
    }
    let obs_path = dir.join(&manifest.stations.file);
    write_observations(&obs_path, &ds.observations)?;
    let bytes = std::fs::read(&obs_path).map_err(|e| Error::io(&obs_path, e))?;
    files.insert(manifest.stations.file.clone(), sha256_hex(&bytes));
    manifest.files = files;
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    let path = dir.join(MANIFEST);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read_verified(dir: &Path, rel: &str, manifest: &DatasetManifest) -> Result<(PathBuf, Vec<u8>)> {
    let path = dir.join(rel);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = manifest
        .files
        .get(rel)
        .ok_or_else(|| Error::Config(format!("manifest lists no hash for {rel}")))?;
    if &sha256_hex(&bytes) != expected {
        return Err(Error::Format {
            offset: 0,
            message: format!("{} does not match its manifest hash", path.display()),
        });
    }
    Ok((path, bytes))
}

fn decode_at(path: &Path, bytes: &[u8]) -> Result<Field> {
    edf::decode(bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Read a dataset written by [`write_dataset`], verifying every file hash.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let (p, bytes) = read_verified(dir, &manifest.statics, &manifest)?;
    let statics = decode_at(&p, &bytes)?;
    let mut pairs = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let (p, bytes) = read_verified(dir, &entry.coarse, &manifest)?;
        let coarse = decode_at(&p, &bytes)?;
        let (p, bytes) = read_verified(dir, &entry.fine, &manifest)?;
        let fine = decode_at(&p, &bytes)?;
        pairs.push(Pair { coarse, fine });
    }
    let (obs_path, _) = read_verified(dir, &manifest.stations.file, &manifest)?;
    let observations = read_observations(&obs_path)?;
    Ok(Dataset {
        manifest,
        statics,
        pairs,
        observations,
    })
}

impl Dataset {
    /// The task parameters when this is a gaussian-task dataset.
    pub fn gaussian_task(&self) -> Option<GaussianTaskSpec> {
        match self.manifest.params {
            TaskParams::Gaussian { a, b, s } => Some(GaussianTaskSpec {
                a,
                b,
                s,
                fine: self.manifest.grids.fine,
                factor: self.manifest.grids.factor,
            }),
            TaskParams::Terrain { .. } => None,
        }
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.manifest.splits.train,
            Split::Test => &self.manifest.splits.test,
        }
    }

    pub fn observations_at(&self, valid_time: &str) -> Vec<Observation> {
        self.observations
            .iter()
            .filter(|o| o.valid_time == valid_time)
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fine() -> Grid {
        Grid::new(52.0, 4.0, -0.05, 0.05, 16, 16).unwrap()
    }

    #[test]
    fn coarsen_block_mean_and_identity() {
        let g = Grid::new(0.0, 0.0, 1.0, 1.0, 2, 2).unwrap();
        let f = Field::new(g, vec![Channel::new("t2m", "K")], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(coarsen(&f, 1).unwrap(), f);
        let g4 = Grid::new(0.0, 0.0, 1.0, 1.0, 4, 4).unwrap();
        let f4 = Field::new(g4, vec![Channel::new("t2m", "K")], vec![1.0, 2.0, 5.0, 5.0, 3.0, 6.0, 5.0, 5.0, 0.0, 0.0, 7.0, 7.0, 0.0, 0.0, 7.0, 7.0]).unwrap();
        let c = coarsen(&f4, 2).unwrap();
        assert_eq!(c.data(), &[3.0, 5.0, 0.0, 7.0]);
        assert_eq!((c.grid().lat0, c.grid().dlat), (0.5, 2.0));
        assert!(coarsen(&f4, 3).is_err());
    }

    #[test]
    fn halo_grid_covers_fine_grid() {
        let c = coarse_grid_for(&fine(), 4).unwrap();
        assert_eq!((c.height, c.width), (6, 6));
        assert!(c.covers(&fine()));
    }

    #[test]
    fn noiseless_gaussian_task_is_deterministic_map() {
        let spec = GaussianTaskSpec {
            a: 1.5,
            b: -2.0,
            s: 1e-6,
            fine: fine(),
            factor: 4,
        };
        let (_, pairs) = gen_gaussian_task(&spec, 3, 9).unwrap();
        for p in &pairs {
            let up = upsample_bilinear(&p.coarse, &fine()).unwrap();
            for (u, m) in p.fine.data().iter().zip(up.data()) {
                assert!((u - (1.5 * m - 2.0)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn terrain_without_noise_or_bias_is_block_mean() {
        let spec = TerrainSpec {
            fine: fine(),
            factor: 4,
            roughness: 0.0,
            bias: 0.0,
            lapse: 6.0,
        };
        let (statics, pairs) = gen_terrain_task(&spec, 2, 3).unwrap();
        assert!(statics.data().chunks(2).all(|zl| (0.0..=1.0).contains(&zl[0]) && (0.0..=1.0).contains(&zl[1])));
        for p in &pairs {
            let block = coarsen(&p.fine, 4).unwrap();
            let inner = crop(&p.coarse, 1, 1, block.grid()).unwrap();
            assert_eq!(inner.data(), block.data());
            for (a, b) in inner.grid().bounds().0.to_le_bytes().iter().zip(block.grid().bounds().0.to_le_bytes()) {
                assert_eq!(*a, b);
            }
        }
    }

    #[test]
    fn stations_on_nodes_without_noise_read_truth() {
        let g = fine();
        let truth = Field::new(g, state_channels(), (0..g.len() * 4).map(|k| k as f64).collect()).unwrap();
        let obs = gen_stations(&[("t".into(), &truth)], 5, 0.0, 1).unwrap();
        assert_eq!(obs.len(), 25);
        for o in obs.iter().filter(|o| o.variable == "t2m") {
            let v = bilinear_sample(&truth, o.lat, o.lon, 0).unwrap();
            assert_eq!(o.value, v);
        }
        let speed = obs.iter().find(|o| o.variable == "wind_speed").unwrap();
        let u = obs.iter().find(|o| o.variable == "u10").unwrap();
        let v = obs.iter().find(|o| o.variable == "v10").unwrap();
        assert_eq!(speed.value, wind_speed(u.value, v.value));
    }

    #[test]
    fn valid_times_step_six_hours() {
        assert_eq!(valid_time(0).unwrap(), "2021-01-01T00:00:00Z");
        assert_eq!(valid_time(5).unwrap(), "2021-01-02T06:00:00Z");
    }
}
