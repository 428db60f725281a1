//! `edm-downscale`: reproducible pipelines over the downscaling core.
//!
//! Each verb reads an optional JSON run configuration, applies command-line
//! overrides (flags win), and writes artifacts tagged with the hash of the
//! resolved configuration. Paths are excluded from the hash so that reruns
//! into a different directory produce identical bytes.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or input error, 3 runtime
//! abort.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use downscale_core::checks::{self, CheckConfig};
use downscale_core::diffusion::{EdmConfig, LossWeighting};
use downscale_core::edf;
use downscale_core::grid::{destandardize, Field, Grid};
use downscale_core::net::checkpoint::{self, CheckpointMeta};
use downscale_core::net::train::write_loss_trace;
use downscale_core::net::{train, NetConfig, Objective, TrainConfig, UNet};
use downscale_core::pipeline;
use downscale_core::rng::child_seed;
use downscale_core::sampler::{
    sample_ensemble, Ensemble, EnsembleMeta, GaussianOracle, GaussianTaskSpec, NetDenoiser, SamplerKind,
    ScheduleConfig, SigmaSchedule,
};
use downscale_core::synth::{
    config_hash, gen_dataset, read_dataset, write_dataset, Dataset, DatasetSpec, Split, TaskParams,
};
use downscale_core::verify::read_observations;
use downscale_core::Error;

pub const SEED_ENV: &str = "EDM_SEED";
pub const CHECKPOINT_FILE: &str = "checkpoint.edp";
pub const LOSS_FILE: &str = "loss.csv";
pub const SIDECAR_FILE: &str = "ensemble.json";

/// Process exit status of a failed command.
#[derive(Debug)]
pub enum Failure {
    /// A self-check did not pass.
    Check(String),
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } | Error::State(_) => Failure::Runtime(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Gaussian,
    Terrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DenoiserKind {
    Net,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub task: TaskKind,
    pub fine: usize,
    pub factor: usize,
    pub count: usize,
    pub test_count: usize,
    pub n_stations: usize,
    pub obs_noise_std: f64,
    pub lead_time_h: u32,
    pub lat0: f64,
    pub lon0: f64,
    pub spacing: f64,
    pub a: f64,
    pub b: f64,
    pub s: f64,
    pub roughness: f64,
    pub bias: f64,
    pub lapse: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            task: TaskKind::Gaussian,
            fine: 32,
            factor: 4,
            count: 64,
            test_count: 16,
            n_stations: 32,
            obs_noise_std: 0.0,
            lead_time_h: 24,
            lat0: 52.0,
            lon0: 4.0,
            spacing: 0.05,
            a: 1.0,
            b: 0.5,
            s: 1.0,
            roughness: 1.0,
            bias: 1.0,
            lapse: 6.0,
        }
    }
}

impl DataConfig {
    pub fn spec(&self, seed: u64) -> CliResult<DatasetSpec> {
        let fine = Grid::new(self.lat0, self.lon0, -self.spacing, self.spacing, self.fine, self.fine)?;
        let params = match self.task {
            TaskKind::Gaussian => TaskParams::Gaussian { a: self.a, b: self.b, s: self.s },
            TaskKind::Terrain => TaskParams::Terrain {
                roughness: self.roughness,
                bias: self.bias,
                lapse: self.lapse,
            },
        };
        Ok(DatasetSpec {
            params,
            fine,
            factor: self.factor,
            count: self.count,
            test_count: self.test_count,
            n_stations: self.n_stations,
            obs_noise_std: self.obs_noise_std,
            lead_time_h: self.lead_time_h,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckOptions {
    pub transport_steps: usize,
    pub transport_samples: usize,
    pub gradient_params: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        // the Euler variance deficit is about 8% at 64 steps and 0.5% at 1024
        CheckOptions {
            transport_steps: 1024,
            transport_samples: 4096,
            gradient_params: 200,
        }
    }
}

/// Complete run configuration; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub ensembles: Option<PathBuf>,
    pub observations: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub net: NetConfig,
    pub edm: EdmConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub n: usize,
    pub sampler: SamplerKind,
    pub denoiser: DenoiserKind,
    /// Samples to downscale; the test split when absent.
    pub indices: Option<Vec<usize>>,
    /// Overrides the dataset's gaussian-task `(a, b, s)` for the oracle.
    pub task_params: Option<[f64; 3]>,
    pub checks: CheckOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            checkpoint: None,
            ensembles: None,
            observations: None,
            output: None,
            seed: None,
            data: DataConfig::default(),
            net: NetConfig::default(),
            edm: EdmConfig::default(),
            train: TrainConfig::default(),
            schedule: ScheduleConfig::default(),
            n: 16,
            sampler: SamplerKind::Ode,
            denoiser: DenoiserKind::Net,
            indices: None,
            task_params: None,
            checks: CheckOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("bad config {}: {e}", p.display())))
            }
        }
    }

    /// Seed from the configuration, else `EDM_SEED`, else 0.
    pub fn resolve_seed(&mut self) -> CliResult<u64> {
        let seed = match self.seed {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| Failure::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
                Err(_) => 0,
            },
        };
        self.seed = Some(seed);
        Ok(seed)
    }

    /// Hash of everything but file locations.
    pub fn hash(&self) -> CliResult<String> {
        let mut c = self.clone();
        c.dataset = None;
        c.checkpoint = None;
        c.ensembles = None;
        c.observations = None;
        c.output = None;
        Ok(config_hash(&c)?)
    }

    fn require(path: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
        path.clone()
            .ok_or_else(|| Failure::Usage(format!("no {what} given (flag or config)")))
    }
}

#[derive(Debug, Parser)]
#[command(name = "edm-downscale", version, about = "Score-based diffusion downscaling of gridded atmospheric fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base seed; falls back to the config, then EDM_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset with stations.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        task: Option<TaskKind>,
        /// Fine grid size (square).
        #[arg(long)]
        fine: Option<usize>,
        #[arg(long)]
        factor: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        test_count: Option<usize>,
        #[arg(long)]
        stations: Option<usize>,
        #[arg(long)]
        obs_noise: Option<f64>,
    },
    /// Train the denoiser (or the regression baseline) on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_parser = parse_objective)]
        objective: Option<Objective>,
        /// Diffusion loss weighting: edm | literal.
        #[arg(long, value_parser = parse_weighting)]
        weighting: Option<LossWeighting>,
        #[arg(long)]
        lr_max: Option<f64>,
        #[arg(long)]
        lr_min: Option<f64>,
        /// Fit one frozen instance.
        #[arg(long)]
        overfit_one: bool,
        #[arg(long)]
        no_augment: bool,
    },
    /// Draw downscaled ensembles for dataset samples.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum)]
        denoiser: Option<DenoiserKind>,
        #[arg(long, value_parser = parse_sampler)]
        sampler: Option<SamplerKind>,
        #[arg(long)]
        steps: Option<usize>,
        /// Sample indices; defaults to the test split.
        #[arg(long, value_delimiter = ',')]
        indices: Option<Vec<usize>>,
        /// Oracle task parameters `a,b,s`.
        #[arg(long, value_delimiter = ',')]
        task_params: Option<Vec<f64>>,
    },
    /// Score ensembles and the bilinear baseline against stations.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        ensembles: Option<PathBuf>,
        /// Observation CSV replacing the dataset's stations.
        #[arg(long)]
        observations: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle self-checks and print a pass/fail table.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        /// List checks without running them.
        #[arg(long)]
        list: bool,
        /// Fault injection: offset added to c_skip in the identity check.
        #[arg(long)]
        perturb_coeff: Option<f64>,
        #[arg(long)]
        transport_steps: Option<usize>,
        #[arg(long)]
        transport_samples: Option<usize>,
        /// Run only these checks.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<String>>,
    },
}

fn parse_objective(s: &str) -> std::result::Result<Objective, String> {
    match s {
        "diffusion" => Ok(Objective::Diffusion),
        "regression" => Ok(Objective::Regression),
        _ => Err(format!("unknown objective {s:?} (diffusion | regression)")),
    }
}

fn parse_weighting(s: &str) -> std::result::Result<LossWeighting, String> {
    match s {
        "edm" => Ok(LossWeighting::Edm),
        "literal" => Ok(LossWeighting::Literal),
        _ => Err(format!("unknown weighting {s:?} (edm | literal)")),
    }
}

fn parse_sampler(s: &str) -> std::result::Result<SamplerKind, String> {
    match s {
        "ode" => Ok(SamplerKind::Ode),
        "sde" => Ok(SamplerKind::Sde),
        _ => Err(format!("unknown sampler {s:?} (ode | sde)")),
    }
}

fn prepare(common: &Common) -> CliResult<(RunConfig, u64)> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    let seed = cfg.resolve_seed()?;
    Ok((cfg, seed))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))
}

/// Run one parsed command, printing its summary to stdout.
pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData {
            common,
            out,
            task,
            fine,
            factor,
            count,
            test_count,
            stations,
            obs_noise,
        } => {
            let (mut cfg, seed) = prepare(&common)?;
            set(&mut cfg.output, out.map(Some));
            set(&mut cfg.data.task, task);
            set(&mut cfg.data.fine, fine);
            set(&mut cfg.data.factor, factor);
            set(&mut cfg.data.count, count);
            set(&mut cfg.data.test_count, test_count);
            set(&mut cfg.data.n_stations, stations);
            set(&mut cfg.data.obs_noise_std, obs_noise);
            gen_data_cmd(&cfg, seed)
        }
        Command::Train {
            common,
            dataset,
            out,
            steps,
            objective,
            weighting,
            lr_max,
            lr_min,
            overfit_one,
            no_augment,
        } => {
            let (mut cfg, seed) = prepare(&common)?;
            set(&mut cfg.dataset, dataset.map(Some));
            set(&mut cfg.output, out.map(Some));
            set(&mut cfg.train.steps, steps);
            set(&mut cfg.train.objective, objective);
            set(&mut cfg.train.weighting, weighting);
            set(&mut cfg.train.optimizer.lr_max, lr_max);
            set(&mut cfg.train.optimizer.lr_min, lr_min);
            cfg.train.overfit_one |= overfit_one;
            if no_augment {
                cfg.train.augment = false;
            }
            train_cmd(&cfg, seed)
        }
        Command::Sample {
            common,
            dataset,
            checkpoint,
            out,
            n,
            denoiser,
            sampler,
            steps,
            indices,
            task_params,
        } => {
            let (mut cfg, seed) = prepare(&common)?;
            set(&mut cfg.dataset, dataset.map(Some));
            set(&mut cfg.checkpoint, checkpoint.map(Some));
            set(&mut cfg.output, out.map(Some));
            set(&mut cfg.n, n);
            set(&mut cfg.denoiser, denoiser);
            set(&mut cfg.sampler, sampler);
            set(&mut cfg.schedule.steps, steps);
            set(&mut cfg.indices, indices.map(Some));
            if let Some(p) = task_params {
                let p: [f64; 3] = p
                    .try_into()
                    .map_err(|p: Vec<f64>| Failure::Usage(format!("--task-params needs a,b,s (got {} values)", p.len())))?;
                cfg.task_params = Some(p);
            }
            sample_cmd(&cfg, seed)
        }
        Command::Evaluate {
            common,
            dataset,
            ensembles,
            observations,
            out,
        } => {
            let (mut cfg, _) = prepare(&common)?;
            set(&mut cfg.dataset, dataset.map(Some));
            set(&mut cfg.ensembles, ensembles.map(Some));
            set(&mut cfg.observations, observations.map(Some));
            set(&mut cfg.output, out.map(Some));
            evaluate_cmd(&cfg)
        }
        Command::OracleCheck {
            common,
            list,
            perturb_coeff,
            transport_steps,
            transport_samples,
            only,
        } => {
            if list {
                for (name, what) in checks::CHECKS {
                    println!("{name:<13} {what}");
                }
                return Ok(());
            }
            let (mut cfg, seed) = prepare(&common)?;
            set(&mut cfg.checks.transport_steps, transport_steps);
            set(&mut cfg.checks.transport_samples, transport_samples);
            let check_cfg = CheckConfig {
                perturb_coeff: perturb_coeff.unwrap_or(0.0),
                transport_steps: cfg.checks.transport_steps,
                transport_samples: cfg.checks.transport_samples,
                gradient_params: cfg.checks.gradient_params,
                seed,
            };
            oracle_check_cmd(&check_cfg, only.as_deref())
        }
    }
}

fn gen_data_cmd(cfg: &RunConfig, seed: u64) -> CliResult<()> {
    let out = RunConfig::require(&cfg.output, "output directory (--out)")?;
    let mut ds = gen_dataset(&cfg.data.spec(seed)?)?;
    ds.manifest.config_hash = cfg.hash()?;
    create_dir(&out)?;
    let m = write_dataset(&out, &ds)?;
    println!(
        "wrote {} {} pairs ({} train / {} test) to {}",
        m.count,
        m.task,
        m.splits.train.len(),
        m.splits.test.len(),
        out.display()
    );
    println!(
        "fine {}x{}, coarse {}x{} (factor {}, one-cell halo), {} observations, seed {}, config {}",
        m.grids.fine.height,
        m.grids.fine.width,
        m.grids.coarse.height,
        m.grids.coarse.width,
        m.grids.factor,
        ds.observations.len(),
        seed,
        m.config_hash
    );
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let dir = RunConfig::require(&cfg.dataset, "dataset (--dataset)")?;
    Ok(read_dataset(&dir)?)
}

fn train_cmd(cfg: &RunConfig, seed: u64) -> CliResult<()> {
    let ds = load_dataset(cfg)?;
    let out = RunConfig::require(&cfg.output, "output directory (--out)")?;
    let examples = pipeline::examples(&ds, Split::Train)?;
    let mut net = UNet::new(cfg.net.clone(), child_seed(seed, 0))?;
    let trace = train(&mut net, &examples, &cfg.edm, &cfg.train, child_seed(seed, 1))?;
    create_dir(&out)?;
    write_loss_trace(&out.join(LOSS_FILE), &trace)?;
    let meta = CheckpointMeta {
        objective: cfg.train.objective,
        edm: cfg.edm,
        seed,
        steps: cfg.train.steps,
        config_hash: cfg.hash()?,
    };
    let sha = checkpoint::write(&out.join(CHECKPOINT_FILE), &net, &meta)?;
    let window = |r: &[downscale_core::net::LossRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len().max(1) as f64;
    let k = (trace.len() / 10).max(1);
    println!(
        "trained {} steps ({:?}), loss {:.4e} -> {:.4e} (first/last {k}-step means {:.4e} -> {:.4e})",
        trace.len(),
        cfg.train.objective,
        trace.first().map_or(f64::NAN, |r| r.loss),
        trace.last().map_or(f64::NAN, |r| r.loss),
        window(&trace[..k.min(trace.len())]),
        window(&trace[trace.len().saturating_sub(k)..])
    );
    println!("checkpoint {} sha256 {sha}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

/// Sidecar written next to each sample's ensemble members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub index: usize,
    pub valid_time: String,
    pub lead_time_h: u32,
    pub units: String,
    #[serde(flatten)]
    pub meta: EnsembleMeta,
}

fn oracle_for(ds: &Dataset, cfg: &RunConfig, index: usize) -> CliResult<GaussianOracle> {
    match cfg.task_params {
        Some([a, b, s]) => {
            let task = GaussianTaskSpec {
                a,
                b,
                s,
                fine: ds.manifest.grids.fine,
                factor: ds.manifest.grids.factor,
            };
            task.validate()?;
            Ok(GaussianOracle::standardized(
                &task,
                &pipeline::baseline(ds, index)?,
                &ds.manifest.stats.fine,
            )?)
        }
        None => Ok(pipeline::oracle(ds, index)?),
    }
}

enum Model {
    Diffusion(NetDenoiser, String),
    Regression(UNet, String),
    Oracle,
}

fn check_grid(net: &NetConfig, ds: &Dataset) -> CliResult<()> {
    let fine = &ds.manifest.grids.fine;
    let cond = 2 * ds.pairs[0].coarse.num_channels() + ds.statics.num_channels();
    if net.in_channels != cond || net.out_channels != ds.pairs[0].fine.num_channels() {
        return Err(Failure::Usage(format!(
            "checkpoint expects {} inputs / {} outputs, dataset provides {} / {}",
            net.in_channels,
            net.out_channels,
            cond,
            ds.pairs[0].fine.num_channels()
        )));
    }
    net.check_input_size(fine.height, fine.width)
        .map_err(|e| Failure::Usage(format!("fine grid {}x{} does not fit the checkpoint: {e}", fine.height, fine.width)))
}

fn sample_cmd(cfg: &RunConfig, seed: u64) -> CliResult<()> {
    let ds = load_dataset(cfg)?;
    let out = RunConfig::require(&cfg.output, "output directory (--out)")?;
    if cfg.n == 0 {
        return Err(Failure::Usage("ensemble size must be at least 1".into()));
    }
    let model = match cfg.denoiser {
        DenoiserKind::Oracle => Model::Oracle,
        DenoiserKind::Net => {
            let path = RunConfig::require(&cfg.checkpoint, "checkpoint (--checkpoint)")?;
            let (net, meta, sha) = checkpoint::read(&path)?;
            check_grid(net.config(), &ds)?;
            match meta.objective {
                Objective::Diffusion => Model::Diffusion(NetDenoiser { net, edm: meta.edm }, sha),
                Objective::Regression => Model::Regression(net, sha),
            }
        }
    };
    let schedule = SigmaSchedule::try_from(cfg.schedule)?;
    let indices = cfg.indices.clone().unwrap_or_else(|| ds.split(Split::Test).to_vec());
    let hash = cfg.hash()?;
    create_dir(&out)?;
    let channels = ds.pairs[0].fine.channels().to_vec();
    for &index in &indices {
        let cond = pipeline::conditioning(&ds, index)?;
        let base_seed = child_seed(seed, index as u64);
        let (ensemble, name, sha) = match &model {
            Model::Diffusion(d, sha) => (
                sample_ensemble(d, &cond, &channels, &schedule, cfg.n, base_seed, cfg.sampler)?,
                "net",
                Some(sha.clone()),
            ),
            Model::Oracle => {
                let oracle = oracle_for(&ds, cfg, index)?;
                (
                    sample_ensemble(&oracle, &cond, &channels, &schedule, cfg.n, base_seed, cfg.sampler)?,
                    "oracle",
                    None,
                )
            }
            Model::Regression(net, sha) => (
                Ensemble {
                    members: vec![pipeline::regression_forecast(net, &cond, &channels)?],
                    base_seed,
                    member_seeds: Vec::new(),
                },
                "regression",
                Some(sha.clone()),
            ),
        };
        let members: Vec<Field> = ensemble
            .members
            .iter()
            .map(|m| destandardize(m, &ds.manifest.stats.fine))
            .collect::<downscale_core::Result<_>>()?;
        let dir = out.join(format!("sample_{index:05}"));
        create_dir(&dir)?;
        let mut files = Vec::with_capacity(members.len());
        for (k, m) in members.iter().enumerate() {
            let file = format!("member_{k:02}.edf");
            edf::write(&dir.join(&file), m)?;
            files.push(file);
        }
        let entry = &ds.manifest.samples[index];
        let sidecar = SampleSidecar {
            index,
            valid_time: entry.valid_time.clone(),
            lead_time_h: entry.lead_time_h,
            units: "physical".into(),
            meta: EnsembleMeta::new(&ensemble, cfg.sampler, name, &schedule, sha, hash.clone(), files),
        };
        let text = serde_json::to_string_pretty(&sidecar).map_err(Error::from)? + "\n";
        let path = dir.join(SIDECAR_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    let members = match model {
        Model::Regression(..) => 1,
        _ => cfg.n,
    };
    println!(
        "sampled {} case(s) x {members} member(s) with {:?} denoiser, {:?} sampler, N={} into {}",
        indices.len(),
        cfg.denoiser,
        cfg.sampler,
        schedule.len(),
        out.display()
    );
    Ok(())
}

/// Read every `sample_*` directory under `dir` in name order.
pub fn read_ensembles(dir: &Path) -> CliResult<Vec<(SampleSidecar, Vec<Field>)>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Failure::Usage(format!("cannot read ensembles {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("sample_")))
        .collect();
    dirs.sort();
    let mut out = Vec::with_capacity(dirs.len());
    for d in dirs {
        let path = d.join(SIDECAR_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: SampleSidecar = serde_json::from_str(&text).map_err(Error::from)?;
        let members = sidecar
            .meta
            .members
            .iter()
            .map(|f| edf::read(&d.join(f)))
            .collect::<downscale_core::Result<Vec<_>>>()?;
        out.push((sidecar, members));
    }
    if out.is_empty() {
        return Err(Failure::Usage(format!("no sample_* directories in {}", dir.display())));
    }
    Ok(out)
}

fn evaluate_cmd(cfg: &RunConfig) -> CliResult<()> {
    let mut ds = load_dataset(cfg)?;
    let dir = RunConfig::require(&cfg.ensembles, "ensembles directory (--ensembles)")?;
    let out = RunConfig::require(&cfg.output, "output directory (--out)")?;
    if let Some(obs) = &cfg.observations {
        ds.observations = read_observations(obs)?;
    }
    let forecasts: Vec<(usize, Vec<Field>)> = read_ensembles(&dir)?
        .into_iter()
        .map(|(s, m)| (s.index, m))
        .collect();
    if let Some((k, _)) = forecasts.iter().find(|(k, _)| *k >= ds.pairs.len()) {
        return Err(Failure::Usage(format!("ensemble for sample {k} is not in the dataset")));
    }
    let report = pipeline::evaluate(&ds, &forecasts, &cfg.hash()?).map_err(|e| match e {
        Error::Domain(m) => Failure::Runtime(m),
        other => other.into(),
    })?;
    create_dir(&out)?;
    report.write_csv(&out.join("scores.csv"))?;
    report.write_json(&out.join("scores.json"))?;
    println!(
        "{:<11} {:>4} {:>6} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8}",
        "variable", "lead", "count", "rmse_base", "rmse_down", "crps_base", "crps_down", "rmsess", "crpss"
    );
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for r in &report.rows {
        println!(
            "{:<11} {:>4} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>8} {:>8}",
            r.variable,
            r.lead_time_h,
            r.count,
            r.rmse_base,
            r.rmse_down,
            r.crps_base,
            r.crps_down,
            fmt(r.rmsess),
            fmt(r.crpss)
        );
    }
    if report.skipped_observations > 0 {
        println!("{} observation(s) outside the domain were skipped", report.skipped_observations);
    }
    Ok(())
}

fn oracle_check_cmd(cfg: &CheckConfig, only: Option<&[String]>) -> CliResult<()> {
    let names: Vec<&str> = match only {
        Some(list) => list.iter().map(String::as_str).collect(),
        None => checks::CHECKS.iter().map(|(n, _)| *n).collect(),
    };
    let mut failed = Vec::new();
    for name in names {
        let o = checks::run(name, cfg).ok_or_else(|| Failure::Usage(format!("unknown check {name:?} (see --list)")))?;
        println!(
            "{:<13} {} {:>8.2}s  {}",
            o.name,
            if o.passed { "PASS" } else { "FAIL" },
            o.seconds,
            o.detail
        );
        if !o.passed {
            failed.push(o.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("failed: {}", failed.join(", "))))
    }
}
