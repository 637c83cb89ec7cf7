//! The `deeepc` command: collection, training, closed-loop runs, comparisons and the
//! theory checks, plus a content-hashed end-to-end pipeline.
//!
//! Exit codes: 0 success, 1 failed verification, 2 usage or configuration error,
//! 3 runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::basis::{self, FamilyKind, Hp, OrthonormalFamily};
use crate::controller::{run_closed_loop, Controller, ControllerConfig, ControllerError, ControllerKind, Event, Summary};
use crate::lti::{verify_fundamental_lemma, LemmaConfig, LtiSystem};
use crate::plants::{benchmark, benchmark_names, generate_openloop, PlantError, PlantHandle, PlantSpec};
use crate::trainer::{train, ModelBundle, TrainConfig, TrainError};
use crate::trajectory::{load_csv, ColumnSchema, Dataset, TrajectoryError};

pub const DATASET_FILE: &str = "dataset.csv";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const BUNDLE_FILE: &str = "model.bundle";
pub const TRAIN_REPORT_FILE: &str = "train_report.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Data(#[from] TrajectoryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("verification failed: {0}")]
    VerifyFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::VerifyFailed(_) => 1,
            CliError::Usage(_) | CliError::InvalidConfig(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "deeepc", version, about = "Data-enabled economic predictive control with learned liftings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Experiment TOML with optional [collect], [train], [controller] and [run] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Builtin benchmark name or path to a plant TOML.
    #[arg(long)]
    pub plant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// Directory written by `collect`.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by `train` (required for deeepc).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Drop the slack on the past-trajectory constraint.
    #[arg(long)]
    pub no_slack: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Open-loop data collection: dataset CSV plus provenance JSON.
    Collect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Trains liftings and the cost surrogate on a collected dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// One controller in closed loop.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        controller: Option<ControllerKind>,
        /// Write the operator Hankel blocks to `<out>/hankel`.
        #[arg(long)]
        dump_hankel: bool,
    },
    /// All configured controllers over all configured seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Fundamental-lemma and orthonormal-basis checks; exits 1 if any verdict fails.
    #[command(alias = "verify-theory")]
    Verify {
        #[command(flatten)]
        common: Common,
        /// Quadrature nodes per dimension (default: enough for the tested orders).
        #[arg(long)]
        quadrature_nodes: Option<usize>,
    },
    /// collect, train and compare from one config, skipping stages whose inputs are unchanged.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        no_slack: bool,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectSection {
    /// Rows to collect (defaults to the plant schedule).
    pub steps: Option<usize>,
    /// Leading rows reserved for the Hankel matrix (defaults to `train.t`).
    pub hankel_len: Option<usize>,
    pub pe_order: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub controller: ControllerKind,
    pub controllers: Vec<ControllerKind>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { steps: 500, seeds: vec![0, 1, 2], controller: ControllerKind::Deeepc, controllers: ControllerKind::ALL.to_vec() }
    }
}

/// A full experiment; every table is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: Option<String>,
    /// Collection and plant-noise seed (defaults to the plant's own).
    pub seed: Option<u64>,
    pub collect: CollectSection,
    pub train: TrainConfig,
    pub controller: ControllerConfig,
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// File config (or defaults) with command-line overrides applied.
    pub fn resolve(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(p) = &common.plant {
            cfg.plant = Some(p.clone());
        }
        if let Some(s) = common.seed {
            cfg.seed = Some(s);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| CliError::InvalidConfig(e.to_string()))?;
        self.controller.validate().map_err(|e| CliError::InvalidConfig(e.to_string()))?;
        if self.train.t_ini != self.controller.t_ini || self.train.n_p != self.controller.n_p {
            return Err(CliError::InvalidConfig(format!(
                "train (t_ini {}, n_p {}) and controller (t_ini {}, n_p {}) horizons differ",
                self.train.t_ini, self.train.n_p, self.controller.t_ini, self.controller.n_p
            )));
        }
        if self.run.seeds.is_empty() || self.run.controllers.is_empty() {
            return Err(CliError::InvalidConfig("run.seeds and run.controllers must not be empty".into()));
        }
        Ok(())
    }

    pub fn plant_spec(&self) -> Result<PlantSpec> {
        resolve_plant(self.plant.as_deref().unwrap_or("econ-cstr"))
    }

    pub fn hankel_len(&self) -> usize {
        self.collect.hankel_len.unwrap_or(self.train.t)
    }

    pub fn pe_order(&self) -> usize {
        if self.collect.pe_order == 0 {
            self.train.depth() + 4
        } else {
            self.collect.pe_order
        }
    }
}

/// Builtin benchmark name or path to a plant TOML.
pub fn resolve_plant(name: &str) -> Result<PlantSpec> {
    if let Ok(spec) = benchmark(name) {
        return Ok(spec);
    }
    let path = Path::new(name);
    if path.is_file() {
        return PlantSpec::load(path).map_err(|e| CliError::InvalidConfig(e.to_string()));
    }
    Err(CliError::Usage(format!("unknown plant `{name}`: expected one of {} or a TOML path", benchmark_names().join(", "))))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn sha256_str(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, v)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} directory {} does not exist", p.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub schema_version: u32,
    pub plant: String,
    /// The full plant spec as TOML (JSON cannot hold infinite bounds).
    pub plant_toml: String,
    pub seed: u64,
    pub steps: usize,
    pub hold_steps: usize,
    pub noise_frac: f64,
    pub columns: ColumnSchema,
    pub pe_order: usize,
    pub pe_rank: Option<usize>,
    pub pe_required: Option<usize>,
    pub input_hash: String,
    pub dataset_sha256: String,
}

/// Open-loop campaign on the configured plant; writes the dataset and its provenance.
pub fn cmd_collect(cfg: &ExperimentConfig, steps: Option<usize>, out: &Path) -> Result<Provenance> {
    let spec = cfg.plant_spec()?;
    let steps = steps.or(cfg.collect.steps).unwrap_or(spec.schedule.steps);
    if steps == 0 {
        return Err(CliError::InvalidConfig("--steps must be at least 1".into()));
    }
    let hankel_len = cfg.hankel_len();
    if hankel_len >= steps {
        return Err(CliError::InvalidConfig(format!("hankel_len {hankel_len} must be below the {steps} collected rows")));
    }
    let seed = cfg.seed.unwrap_or(spec.seed);
    let input_hash = collect_hash(&spec, seed, steps, hankel_len, cfg.pe_order());
    fs::create_dir_all(out)?;
    let mut h = PlantHandle::new(spec.clone(), seed)?;
    let run = generate_openloop(&mut h, &spec.schedule, steps, seed, hankel_len, cfg.pe_order());
    if let Some(e) = run.error {
        return Err(e.into());
    }
    let d = run.dataset.ok_or_else(|| CliError::InvalidConfig("collected rows do not form a dataset".into()))?;
    let csv_path = out.join(DATASET_FILE);
    d.save_csv(&csv_path)?;
    let prov = Provenance {
        schema_version: 1,
        plant: spec.name.clone(),
        plant_toml: spec.to_toml(),
        seed,
        steps,
        hold_steps: spec.schedule.hold_steps,
        noise_frac: spec.schedule.noise_frac,
        columns: d.schema(),
        pe_order: cfg.pe_order(),
        pe_rank: run.excitation.as_ref().map(|e| e.rank),
        pe_required: run.excitation.as_ref().map(|e| e.required),
        input_hash,
        dataset_sha256: sha256_file(&csv_path)?,
    };
    write_json(&out.join(PROVENANCE_FILE), &prov)?;
    Ok(prov)
}

fn collect_hash(spec: &PlantSpec, seed: u64, steps: usize, hankel_len: usize, pe_order: usize) -> String {
    sha256_str(&format!("{}\n{seed} {steps} {hankel_len} {pe_order}", spec.to_toml()))
}

/// Dataset, provenance and plant recorded by `collect`.
pub fn load_collected(dir: &Path) -> Result<(Dataset, Provenance, PlantSpec)> {
    require_dir(dir, "dataset")?;
    let prov: Provenance = read_json(&dir.join(PROVENANCE_FILE))?;
    let csv_path = dir.join(DATASET_FILE);
    if !csv_path.is_file() {
        return Err(CliError::Usage(format!("missing {}", csv_path.display())));
    }
    let d = load_csv(&csv_path, &prov.columns)?;
    let spec = PlantSpec::from_toml_str(&prov.plant_toml).map_err(|e| CliError::InvalidConfig(e.to_string()))?;
    Ok((d, prov, spec))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub dataset_sha256: String,
    pub input_hash: String,
    pub bundle_sha256: String,
    pub epochs: usize,
    pub final_loss: [f64; 4],
    pub holdout_mse: f64,
    pub holdout_nmse: f64,
}

fn train_hash(dataset_sha: &str, cfg: &TrainConfig) -> String {
    sha256_str(&format!("{dataset_sha} {}", cfg.hash()))
}

pub fn cmd_train(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<TrainSummary> {
    let (d, prov, _) = load_collected(data)?;
    let mut tc = cfg.train.clone();
    tc.t = d.split.hankel_len;
    tc.validate().map_err(|e| CliError::InvalidConfig(e.to_string()))?;
    fs::create_dir_all(out)?;
    let res = train(&d, &tc)?;
    let bundle = ModelBundle { config: tc.clone(), lifting: res.lifting, model: res.model };
    let bundle_path = out.join(BUNDLE_FILE);
    bundle.save(&bundle_path)?;
    res.report.write_csv(out.join(TRAIN_REPORT_FILE))?;
    let l = res.report.final_losses();
    let summary = TrainSummary {
        schema_version: 1,
        config_hash: tc.hash(),
        dataset_sha256: prov.dataset_sha256.clone(),
        input_hash: train_hash(&prov.dataset_sha256, &tc),
        bundle_sha256: sha256_file(&bundle_path)?,
        epochs: tc.epochs,
        final_loss: [l.e, l.re, l.z, l.v],
        holdout_mse: res.report.holdout_mse,
        holdout_nmse: res.report.holdout_nmse,
    };
    write_json(&out.join(TRAIN_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    require_dir(dir, "model")?;
    let p = dir.join(BUNDLE_FILE);
    if !p.is_file() {
        return Err(CliError::Usage(format!("missing {}", p.display())));
    }
    Ok(ModelBundle::load(p)?)
}

/// Builds one controller from collected data (and, for DeeEPC, a trained bundle).
pub fn build_controller(kind: ControllerKind, d: &Dataset, spec: &PlantSpec, bundle: Option<&ModelBundle>, cfg: &ControllerConfig) -> Result<Controller> {
    Ok(match kind {
        ControllerKind::Deeepc => {
            let b = bundle.ok_or_else(|| CliError::Usage("the deeepc controller needs --model".into()))?;
            Controller::deeepc(d, &b.lifting, &b.model, spec, cfg)?
        }
        ControllerKind::Tracking => Controller::tracking(d, spec, cfg)?,
        ControllerKind::Convex => Controller::convex(d, spec, cfg)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub plant: String,
    pub controller: ControllerKind,
    pub seed: u64,
    pub steps: usize,
    pub operator_dim: usize,
    pub summary: Summary,
    pub events: Vec<Event>,
}

/// Closed loop for one controller and seed; writes `trace.csv`, `timing.csv` and `summary.json`.
pub fn run_one(spec: &PlantSpec, ctrl: &Controller, steps: usize, seed: u64, out: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out)?;
    let run = run_closed_loop(spec, ctrl, steps, None, seed)?;
    run.write_trace(out.join("trace.csv"), spec)?;
    run.write_timing(out.join("timing.csv"))?;
    let s = RunSummary {
        schema_version: 1,
        plant: spec.name.clone(),
        controller: ctrl.kind,
        seed,
        steps,
        operator_dim: ctrl.blocks.operator_dim(),
        summary: run.summary,
        events: run.events,
    };
    write_json(&out.join("summary.json"), &s)?;
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub controller: ControllerKind,
    /// Mean over seeds of the per-run average true cost.
    pub avg_cost: f64,
    pub per_seed_cost: Vec<f64>,
    pub violation_rate: f64,
    pub surrogate_violation_rate: f64,
    pub fallbacks: usize,
    pub mean_solve_ms: f64,
    pub p99_solve_ms: f64,
    pub max_solve_ms: f64,
    pub fit_r2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub schema_version: u32,
    pub plant: String,
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, kind: ControllerKind) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.controller == kind)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "controller",
            "avg_cost",
            "violation_rate",
            "surrogate_violation_rate",
            "fallbacks",
            "mean_solve_ms",
            "p99_solve_ms",
            "max_solve_ms",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.controller.name().to_string(),
                r.avg_cost.to_string(),
                r.violation_rate.to_string(),
                r.surrogate_violation_rate.to_string(),
                r.fallbacks.to_string(),
                r.mean_solve_ms.to_string(),
                r.p99_solve_ms.to_string(),
                r.max_solve_ms.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Every controller over every seed. Per-run artifacts go to `<out>/<controller>/seed<k>`
/// as soon as each run ends; the table to `comparison.json` and `comparison.csv`.
pub fn compare(spec: &PlantSpec, d: &Dataset, bundle: Option<&ModelBundle>, cfg: &ControllerConfig, kinds: &[ControllerKind], seeds: &[u64], steps: usize, out: &Path) -> Result<Comparison> {
    fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let ctrl = build_controller(kind, d, spec, bundle, cfg)?;
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let s = run_one(spec, &ctrl, steps, seed, &out.join(kind.name()).join(format!("seed{seed}")))?;
            log::info!("{} seed {seed}: avg cost {:.6}, violations {:.3}", kind.name(), s.summary.avg_cost, s.summary.violation_rate);
            runs.push(s.summary);
        }
        let n = runs.len() as f64;
        let mean = |f: fn(&Summary) -> f64| runs.iter().map(f).sum::<f64>() / n;
        rows.push(ComparisonRow {
            controller: kind,
            avg_cost: mean(|s| s.avg_cost),
            per_seed_cost: runs.iter().map(|s| s.avg_cost).collect(),
            violation_rate: mean(|s| s.violation_rate),
            surrogate_violation_rate: mean(|s| s.surrogate_violation_rate),
            fallbacks: runs.iter().map(|s| s.fallbacks).sum(),
            mean_solve_ms: mean(|s| s.mean_solve_ms),
            p99_solve_ms: runs.iter().map(|s| s.p99_solve_ms).fold(0.0, f64::max),
            max_solve_ms: runs.iter().map(|s| s.max_solve_ms).fold(0.0, f64::max),
            fit_r2: runs[0].fit_r2,
        });
    }
    let cmp = Comparison { schema_version: 1, plant: spec.name.clone(), steps, seeds: seeds.to_vec(), rows };
    write_json(&out.join("comparison.json"), &cmp)?;
    cmp.write_csv(&out.join("comparison.csv"))?;
    Ok(cmp)
}

fn controller_config(cfg: &ExperimentConfig, no_slack: bool) -> ControllerConfig {
    let mut c = cfg.controller.clone();
    c.no_slack |= no_slack;
    c
}

fn check_plant_matches(cfg: &ExperimentConfig, prov: &Provenance) -> Result<()> {
    if let Some(p) = &cfg.plant {
        let want = resolve_plant(p)?.name;
        if want != prov.plant {
            return Err(CliError::Usage(format!("dataset was collected on `{}`, not `{want}`", prov.plant)));
        }
    }
    Ok(())
}

pub fn cmd_run(cfg: &ExperimentConfig, args: &RunArgs, kind: ControllerKind, dump_hankel: bool, out: &Path) -> Result<RunSummary> {
    let (d, prov, spec) = load_collected(&args.data)?;
    check_plant_matches(cfg, &prov)?;
    let bundle = match (&args.model, kind) {
        (Some(m), _) => Some(load_bundle(m)?),
        (None, ControllerKind::Deeepc) => return Err(CliError::Usage("the deeepc controller needs --model".into())),
        (None, _) => None,
    };
    let ctrl = build_controller(kind, &d, &spec, bundle.as_ref(), &controller_config(cfg, args.no_slack))?;
    if dump_hankel {
        let dir = out.join("hankel");
        fs::create_dir_all(&dir)?;
        ctrl.blocks.dump_csv(&dir, kind.name()).map_err(|e| CliError::Io(std::io::Error::other(e.to_string())))?;
    }
    let seed = cfg.seed.unwrap_or(cfg.run.seeds[0]);
    run_one(&spec, &ctrl, args.steps.unwrap_or(cfg.run.steps), seed, out)
}

pub fn cmd_compare(cfg: &ExperimentConfig, args: &RunArgs, out: &Path) -> Result<Comparison> {
    let (d, prov, spec) = load_collected(&args.data)?;
    check_plant_matches(cfg, &prov)?;
    let bundle = args.model.as_deref().map(load_bundle).transpose()?;
    let kinds: Vec<ControllerKind> = if bundle.is_some() {
        cfg.run.controllers.clone()
    } else {
        cfg.run.controllers.iter().copied().filter(|k| *k != ControllerKind::Deeepc).collect()
    };
    if kinds.is_empty() {
        return Err(CliError::Usage("no controller to compare (deeepc needs --model)".into()));
    }
    let seeds = match cfg.seed {
        Some(s) => vec![s],
        None => cfg.run.seeds.clone(),
    };
    compare(&spec, &d, bundle.as_ref(), &controller_config(cfg, args.no_slack), &kinds, &seeds, args.steps.unwrap_or(cfg.run.steps), out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Verdict {
    fn at_most(name: &str, value: f64, threshold: f64, detail: String) -> Self {
        Self { name: name.into(), pass: value <= threshold, value, threshold, detail }
    }

    fn failed(name: &str, threshold: f64, detail: String) -> Self {
        Self { name: name.into(), pass: false, value: f64::NAN, threshold, detail }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub seed: u64,
    pub all_pass: bool,
    pub verdicts: Vec<Verdict>,
}

/// Fundamental lemma on `systems` random controllable LTI systems (`n_x = 3`, scalar
/// input and output, `T = 80`, `L = 6`): worst relative residual of fresh trajectories.
pub fn verify_lemma(systems: usize, seed: u64) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LemmaConfig { t: 80, depth: 6, trials: 5 };
    let mut worst = 0.0_f64;
    let mut only_if = 0.0_f64;
    for i in 0..systems {
        let sys = loop {
            let s = LtiSystem::random(3, 1, 1, &mut rng);
            if s.is_controllable() {
                break s;
            }
        };
        match verify_fundamental_lemma(&sys, cfg, &mut rng) {
            Ok(r) => {
                worst = worst.max(r.max_residual);
                only_if = only_if.max(r.max_only_if_residual);
            }
            Err(e) => return Verdict::failed("fundamental_lemma", 1e-8, format!("system {i}: {e}")),
        }
    }
    Verdict::at_most("fundamental_lemma", worst, 1e-8, format!("{systems} systems, worst initial-state residual {only_if:e}"))
}

fn legendre(order: usize, nodes: Option<usize>) -> basis::Result<OrthonormalFamily> {
    match nodes {
        Some(n) => OrthonormalFamily::with_nodes(FamilyKind::Legendre, -1.0, 1.0, order, n),
        None => OrthonormalFamily::legendre(-1.0, 1.0, order),
    }
}

/// Tensor Gram, truncation curve of `exp` on `[−1, 1]` and the partial-state push-forward.
pub fn verify_theory(nodes: Option<usize>) -> Vec<Verdict> {
    let mut out = Vec::new();
    match legendre(5, nodes).and_then(|f| basis::tensor_product_family(&f, &f)) {
        Ok(t) => out.push(Verdict::at_most("tensor_gram", t.gram_deviation(), 1e-8, format!("{} members", t.len()))),
        Err(e) => out.push(Verdict::failed("tensor_gram", 1e-8, e.to_string())),
    }
    let exp_fn = |x: &[Hp]| x[0].exp();
    let orders: Vec<usize> = (1..=12).collect();
    match legendre(11, nodes).and_then(|f| basis::truncation_error_curve(&exp_fn, &f, &orders)) {
        Ok(r) => {
            let detail = format!("E_n = {:?}", r.error_norm);
            out.push(Verdict {
                name: "truncation_decreasing".into(),
                pass: r.strictly_decreasing,
                value: r.error_norm.last().copied().unwrap_or(f64::NAN),
                threshold: r.f_norm,
                detail,
            });
            let worst = r.error_norm.iter().copied().fold(0.0, f64::max);
            out.push(Verdict::at_most("truncation_bounded", worst, r.f_norm + 1e-8, format!("||f|| = {}", r.f_norm)));
            let gap = r.relative_gap.iter().copied().fold(0.0, f64::max);
            out.push(Verdict::at_most("parseval_vs_direct", gap, 1e-6, "relative gap of ||E_n||^2".into()));
            out.push(Verdict::at_most("bessel", -r.min_bessel_gap, 1e-8, "negated smallest ||f||^2 - sum c_i^2".into()));
        }
        Err(e) => {
            for name in ["truncation_decreasing", "truncation_bounded", "parseval_vs_direct", "bessel"] {
                out.push(Verdict::failed(name, f64::NAN, e.to_string()));
            }
        }
    }
    let pushed = benchmark("lti-3")
        .map_err(|e| e.to_string())
        .and_then(|spec| {
            let f = legendre(3, nodes).map_err(|e| e.to_string())?;
            let t = basis::tensor_product_family(&f, &f).map_err(|e| e.to_string())?;
            basis::pushforward_gram_gap(&spec.c_matrix(), &t).map_err(|e| e.to_string())
        });
    match pushed {
        Ok((gap, recon)) => {
            out.push(Verdict::at_most("partial_state_reconstruction", recon, 1e-10, "lti-3 output map".into()));
            out.push(Verdict::at_most("pushforward_gram", gap, 1e-6, "lti-3 output map".into()));
        }
        Err(e) => {
            out.push(Verdict::failed("partial_state_reconstruction", 1e-10, e.clone()));
            out.push(Verdict::failed("pushforward_gram", 1e-6, e));
        }
    }
    out
}

pub fn cmd_verify(seed: u64, nodes: Option<usize>, out: &Path) -> Result<VerifyReport> {
    fs::create_dir_all(out)?;
    let mut verdicts = vec![verify_lemma(20, seed)];
    verdicts.extend(verify_theory(nodes));
    let report = VerifyReport { schema_version: 1, seed, all_pass: verdicts.iter().all(|v| v.pass), verdicts };
    write_json(&out.join("verify.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineReport {
    pub collect: StageOutcome,
    pub train: StageOutcome,
    pub comparison: Comparison,
}

fn collect_up_to_date(dir: &Path, hash: &str) -> bool {
    let Ok(prov) = read_json::<Provenance>(&dir.join(PROVENANCE_FILE)) else { return false };
    prov.input_hash == hash && sha256_file(&dir.join(DATASET_FILE)).is_ok_and(|s| s == prov.dataset_sha256)
}

fn train_up_to_date(dir: &Path, hash: &str) -> bool {
    let Ok(s) = read_json::<TrainSummary>(&dir.join(TRAIN_SUMMARY_FILE)) else { return false };
    s.input_hash == hash && sha256_file(&dir.join(BUNDLE_FILE)).is_ok_and(|b| b == s.bundle_sha256)
}

/// collect → train → compare under `out/{data,model,compare}`.
pub fn cmd_pipeline(cfg: &ExperimentConfig, steps: Option<usize>, no_slack: bool, out: &Path) -> Result<PipelineReport> {
    let spec = cfg.plant_spec()?;
    let (data, model) = (out.join("data"), out.join("model"));
    let collect_steps = cfg.collect.steps.unwrap_or(spec.schedule.steps);
    let seed = cfg.seed.unwrap_or(spec.seed);
    let hash = collect_hash(&spec, seed, collect_steps, cfg.hankel_len(), cfg.pe_order());
    let collect = if collect_up_to_date(&data, &hash) {
        StageOutcome::Skipped
    } else {
        cmd_collect(cfg, None, &data)?;
        StageOutcome::Ran
    };
    let (d, prov, spec) = load_collected(&data)?;
    let mut tc = cfg.train.clone();
    tc.t = d.split.hankel_len;
    let needs_model = cfg.run.controllers.contains(&ControllerKind::Deeepc);
    let train_stage = if !needs_model || train_up_to_date(&model, &train_hash(&prov.dataset_sha256, &tc)) {
        StageOutcome::Skipped
    } else {
        cmd_train(cfg, &data, &model)?;
        StageOutcome::Ran
    };
    let bundle = if needs_model { Some(load_bundle(&model)?) } else { None };
    let comparison = compare(
        &spec,
        &d,
        bundle.as_ref(),
        &controller_config(cfg, no_slack),
        &cfg.run.controllers,
        &cfg.run.seeds,
        steps.unwrap_or(cfg.run.steps),
        &out.join("compare"),
    )?;
    Ok(PipelineReport { collect, train: train_stage, comparison })
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// Executes a parsed command.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Collect { common, steps } => {
            let cfg = ExperimentConfig::resolve(&common)?;
            let prov = cmd_collect(&cfg, steps, &common.out)?;
            println!("collected {} rows from {} into {}", prov.steps, prov.plant, common.out.display());
        }
        Command::Train { common, data } => {
            let cfg = ExperimentConfig::resolve(&common)?;
            let s = cmd_train(&cfg, &data, &common.out)?;
            println!("trained {} epochs: final loss {:?}, holdout nmse {:.3e}", s.epochs, s.final_loss, s.holdout_nmse);
        }
        Command::Run { common, run, controller, dump_hankel } => {
            let cfg = ExperimentConfig::resolve(&common)?;
            cfg.validate()?;
            let s = cmd_run(&cfg, &run, controller.unwrap_or(cfg.run.controller), dump_hankel, &common.out)?;
            print_json(&s.summary)?;
        }
        Command::Compare { common, run } => {
            let cfg = ExperimentConfig::resolve(&common)?;
            cfg.validate()?;
            print_json(&cmd_compare(&cfg, &run, &common.out)?.rows)?;
        }
        Command::Verify { common, quadrature_nodes } => {
            let r = cmd_verify(common.seed.unwrap_or(0), quadrature_nodes, &common.out)?;
            for v in &r.verdicts {
                println!("{} {}: {:e} (threshold {:e}) {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.value, v.threshold, v.detail);
            }
            if !r.all_pass {
                let failed: Vec<&str> = r.verdicts.iter().filter(|v| !v.pass).map(|v| v.name.as_str()).collect();
                return Err(CliError::VerifyFailed(failed.join(", ")));
            }
        }
        Command::Pipeline { common, steps, no_slack } => {
            let cfg = ExperimentConfig::resolve(&common)?;
            cfg.validate()?;
            let r = cmd_pipeline(&cfg, steps, no_slack, &common.out)?;
            println!("collect: {:?}, train: {:?}", r.collect, r.train);
            print_json(&r.comparison.rows)?;
        }
    }
    Ok(())
}
