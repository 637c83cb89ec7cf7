//! Receding-horizon loops: economic DeePC on learned liftings, plus the tracking and
//! convex (unlifted) baselines on raw signals.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{EconCostModel, StageCost};
use crate::hankel::{partition_matrices, reduce_svd, HankelBlocks, HankelError};
use crate::linalg;
use crate::plants::{DisturbanceSpec, Pid, PlantError, PlantHandle, PlantSpec};
use crate::qp::deeepc::{assemble, extract_input, AssemblyError, IniData, InputTracking, OnlineBounds, OnlineWeights};
use crate::qp::{solve, QpStatus, SolveOptions};
use crate::trainer::{Lifting, TrainError};
use crate::trajectory::Dataset;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Hankel(#[from] HankelError),
    #[error(transparent)]
    Lifting(#[from] TrainError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error("controller state is not warmed up ({have} of {need} samples)")]
    NotWarmedUp { have: usize, need: usize },
}

pub type Result<T> = std::result::Result<T, ControllerError>;

/// A step counts as violating when some constrained output leaves its bounds by more than this.
pub const VIOLATION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Deeepc,
    Tracking,
    Convex,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [ControllerKind::Deeepc, ControllerKind::Tracking, ControllerKind::Convex];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Deeepc => "deeepc",
            ControllerKind::Tracking => "tracking",
            ControllerKind::Convex => "convex",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown controller `{s}`, expected one of deeepc, tracking, convex"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WarmupPolicy {
    Pid,
    Fixed { u: Vec<f64> },
    /// Uniform samples from the input box.
    Random { seed: u64 },
}

/// Online parameters shared by all three controllers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub t_ini: usize,
    pub n_p: usize,
    pub lambda: f64,
    /// Scalar weight on the input increments.
    pub r_delta: f64,
    pub beta_z: f64,
    pub beta_g: f64,
    pub no_slack: bool,
    /// Relative singular-value cut for the operator reduction; `None` keeps the full Hankel.
    pub svd_tol: Option<f64>,
    /// Tracking weights, applied per channel divided by the channel variance in the data.
    pub tracking_output_weight: f64,
    pub tracking_input_weight: f64,
    /// Smallest curvature allowed in the convex surrogate (standardized units).
    pub convex_floor: f64,
    pub holdout_frac: f64,
    pub warmup: WarmupPolicy,
    pub solver: SolveOptions,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            t_ini: 2,
            n_p: 2,
            lambda: 1.0,
            r_delta: 1e-3,
            beta_z: 5e10,
            beta_g: 1e-8,
            no_slack: false,
            svd_tol: Some(1e-8),
            tracking_output_weight: 1.0,
            tracking_input_weight: 0.01,
            convex_floor: 1e-6,
            holdout_frac: 0.1,
            warmup: WarmupPolicy::Pid,
            solver: SolveOptions::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ControllerError::InvalidConfig(m.into()));
        if self.t_ini == 0 {
            return bad("t_ini must be at least 1");
        }
        if self.n_p == 0 {
            return bad("n_p must be at least 1");
        }
        let weights = [self.lambda, self.r_delta, self.beta_z, self.beta_g, self.tracking_output_weight, self.tracking_input_weight];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("weights must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.holdout_frac) {
            return bad("holdout_frac must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn weights(&self, n_u: usize) -> OnlineWeights {
        OnlineWeights { lambda: self.lambda, r_delta: vec![self.r_delta; n_u], beta_z: self.beta_z, beta_g: self.beta_g, no_slack: self.no_slack }
    }
}

/// How measured signals enter the data-driven representation.
#[derive(Clone, Debug, PartialEq)]
pub enum SignalMaps {
    Learned(Lifting),
    /// `z = y`, and `v = u` when `inputs` is set (otherwise `v` is empty).
    Identity { inputs: bool },
}

impl SignalMaps {
    pub fn z(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            SignalMaps::Learned(l) => Ok(l.lift_output(y)?),
            SignalMaps::Identity { .. } => Ok(y.clone()),
        }
    }

    pub fn v(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            SignalMaps::Learned(l) => Ok(l.lift_input(u)?),
            SignalMaps::Identity { inputs: true } => Ok(u.clone()),
            SignalMaps::Identity { inputs: false } => Ok(DVector::zeros(0)),
        }
    }

    pub fn z_rows(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            SignalMaps::Learned(l) => Ok(l.lift_outputs(y)?),
            SignalMaps::Identity { .. } => Ok(y.clone()),
        }
    }

    pub fn v_rows(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            SignalMaps::Learned(l) => Ok(l.lift_inputs(u)?),
            SignalMaps::Identity { inputs: true } => Ok(u.clone()),
            SignalMaps::Identity { inputs: false } => Ok(DMatrix::zeros(u.nrows(), 0)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EventKind {
    /// The QP did not certify; the previous input was held.
    Fallback { status: Option<QpStatus>, reason: String },
    /// A constrained output left its bounds during warmup.
    WarmupViolation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub step: usize,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Rolling initialization windows and loop bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState {
    pub t_ini: usize,
    pub u: VecDeque<DVector<f64>>,
    pub y: VecDeque<DVector<f64>>,
    pub z: VecDeque<DVector<f64>>,
    pub v: VecDeque<DVector<f64>>,
    pub k: usize,
    pub last_u: DVector<f64>,
    pub events: Vec<Event>,
}

impl ControllerState {
    pub fn new(t_ini: usize, n_u: usize) -> Result<Self> {
        if t_ini == 0 {
            return Err(ControllerError::InvalidConfig("t_ini must be at least 1".into()));
        }
        Ok(Self {
            t_ini,
            u: VecDeque::with_capacity(t_ini + 1),
            y: VecDeque::with_capacity(t_ini + 1),
            z: VecDeque::with_capacity(t_ini + 1),
            v: VecDeque::with_capacity(t_ini + 1),
            k: 0,
            last_u: DVector::zeros(n_u),
            events: Vec::new(),
        })
    }

    pub fn is_warm(&self) -> bool {
        self.u.len() == self.t_ini
    }

    /// Appends one interaction and drops the oldest once the windows are full.
    pub fn push(&mut self, u: DVector<f64>, y: DVector<f64>, z: DVector<f64>, v: DVector<f64>) {
        for (buf, x) in [(&mut self.u, u.clone()), (&mut self.y, y), (&mut self.z, z), (&mut self.v, v)] {
            buf.push_back(x);
            if buf.len() > self.t_ini {
                buf.pop_front();
            }
        }
        self.last_u = u;
        self.k += 1;
    }

    pub fn ini(&self) -> Result<IniData> {
        if !self.is_warm() {
            return Err(ControllerError::NotWarmedUp { have: self.u.len(), need: self.t_ini });
        }
        let stack = |b: &VecDeque<DVector<f64>>| DVector::from_iterator(b.iter().map(|x| x.len()).sum(), b.iter().flat_map(|x| x.iter().cloned()));
        Ok(IniData { u: stack(&self.u), v: stack(&self.v), z: stack(&self.z) })
    }
}

/// Elementwise distance of `x` outside `[lb, ub]`.
pub fn bound_violation(x: &DVector<f64>, lb: &DVector<f64>, ub: &DVector<f64>) -> Vec<f64> {
    (0..x.len()).map(|i| (lb[i] - x[i]).max(x[i] - ub[i]).max(0.0)).collect()
}

fn constrained_bounds(spec: &PlantSpec) -> (DVector<f64>, DVector<f64>) {
    (DVector::from_column_slice(&spec.y_lb), DVector::from_column_slice(&spec.y_ub))
}

/// Runs `t_ini` real steps under `policy` and fills the windows.
pub fn warmup(plant: &mut PlantHandle, policy: &WarmupPolicy, t_ini: usize, maps: &SignalMaps) -> Result<ControllerState> {
    let spec = plant.spec().clone();
    let mut state = ControllerState::new(t_ini, spec.n_u())?;
    let mut pid = Pid::new(&spec);
    let mut rng = match policy {
        WarmupPolicy::Random { seed } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        _ => None,
    };
    let (lb, ub) = (spec.u_lb_vec(), spec.u_ub_vec());
    let (yc_lb, yc_ub) = constrained_bounds(&spec);
    let mut y = plant.output();
    for _ in 0..t_ini {
        let u = match policy {
            WarmupPolicy::Pid => pid.control(&y),
            WarmupPolicy::Fixed { u } => {
                if u.len() != spec.n_u() {
                    return Err(ControllerError::InvalidConfig(format!("fixed warmup input has {} entries, plant has {}", u.len(), spec.n_u())));
                }
                DVector::from_column_slice(u)
            }
            WarmupPolicy::Random { .. } => {
                let r = rng.as_mut().expect("seeded above");
                DVector::from_fn(spec.n_u(), |i, _| if lb[i] < ub[i] { r.random_range(lb[i]..ub[i]) } else { lb[i] })
            }
        };
        let (u, _) = plant.clip_input(&u);
        let out = plant.step(&u)?;
        y = out.y;
        let yc = y.select_rows(&spec.constrained);
        if bound_violation(&yc, &yc_lb, &yc_ub).iter().any(|v| *v > VIOLATION_TOL) {
            state.events.push(Event { step: state.k, kind: EventKind::WarmupViolation });
        }
        let (z, v) = (maps.z(&y)?, maps.v(&u)?);
        state.push(u, y.clone(), z, v);
    }
    Ok(state)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepStatus {
    Optimal,
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopRecord {
    pub step: usize,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    /// True economic stage cost.
    pub cost: f64,
    /// The controller's own stage cost at the measured `(z, v)`.
    pub surrogate_cost: f64,
    pub status: StepStatus,
    pub qp_status: Option<QpStatus>,
    pub iterations: usize,
    pub solve_ms: f64,
    /// Against the measured constrained outputs.
    pub violation: Vec<f64>,
    /// Against `G z` of the measured output.
    pub surrogate_violation: Vec<f64>,
    pub slack_norm: f64,
}

impl ClosedLoopRecord {
    pub fn violated(&self) -> bool {
        self.violation.iter().any(|v| *v > VIOLATION_TOL)
    }
}

/// Everything needed to compute one receding-horizon step.
#[derive(Clone, Debug, PartialEq)]
pub struct Controller {
    pub kind: ControllerKind,
    pub blocks: HankelBlocks,
    pub stage: StageCost,
    pub g_map: DMatrix<f64>,
    pub maps: SignalMaps,
    pub weights: OnlineWeights,
    pub bounds: OnlineBounds,
    pub tracking: Option<InputTracking>,
    pub solver: SolveOptions,
    pub warmup: WarmupPolicy,
    /// Holdout R² of the fitted surrogate (convex baseline only).
    pub fit_r2: Option<f64>,
}

/// Hankel blocks of the first `hankel_len` dataset rows pushed through `maps`.
pub fn data_blocks(d: &Dataset, maps: &SignalMaps, cfg: &ControllerConfig) -> Result<HankelBlocks> {
    let r = d.split.hankel();
    let u = d.u.values().rows(r.start, r.len()).into_owned();
    let y = d.y.values().rows(r.start, r.len()).into_owned();
    let blocks = partition_matrices(&u, &maps.v_rows(&u)?, &maps.z_rows(&y)?, cfg.t_ini, cfg.n_p)?;
    Ok(match cfg.svd_tol {
        Some(tol) => reduce_svd(&blocks, tol),
        None => blocks,
    })
}

fn check_plant(d: &Dataset, spec: &PlantSpec) -> Result<()> {
    if d.n_u() != spec.n_u() || d.n_y() != spec.n_y() {
        return Err(ControllerError::InvalidConfig("dataset and plant dimensions differ".into()));
    }
    if d.constrained != spec.constrained {
        return Err(ControllerError::InvalidConfig("dataset and plant disagree on the constrained outputs".into()));
    }
    Ok(())
}

fn bounds_for(spec: &PlantSpec) -> OnlineBounds {
    let (yc_lb, yc_ub) = constrained_bounds(spec);
    OnlineBounds { u_lb: spec.u_lb_vec(), u_ub: spec.u_ub_vec(), yc_lb, yc_ub }
}

fn selector(rows: &[usize], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), n, |i, j| if rows[i] == j { 1.0 } else { 0.0 })
}

/// Per-column variance over `rows`, with degenerate columns mapped to 1.
fn column_variance(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.ncols(), |j, _| {
        let (_, s) = linalg::mean_std(m.column(j).as_slice());
        if s * s > 1e-12 {
            s * s
        } else {
            1.0
        }
    })
}

impl Controller {
    /// Economic DeePC on the learned liftings and cost surrogate.
    pub fn deeepc(d: &Dataset, lifting: &Lifting, model: &EconCostModel, spec: &PlantSpec, cfg: &ControllerConfig) -> Result<Self> {
        cfg.validate()?;
        check_plant(d, spec)?;
        let maps = SignalMaps::Learned(lifting.clone());
        let blocks = data_blocks(d, &maps, cfg)?;
        Ok(Self {
            kind: ControllerKind::Deeepc,
            blocks,
            stage: model.stage_cost(),
            g_map: model.g.clone(),
            maps,
            weights: cfg.weights(spec.n_u()),
            bounds: bounds_for(spec),
            tracking: None,
            solver: cfg.solver,
            warmup: cfg.warmup.clone(),
            fit_r2: None,
        })
    }

    /// Set-point tracking on raw `(u, y)` toward the plant's nominal steady pair.
    pub fn tracking(d: &Dataset, spec: &PlantSpec, cfg: &ControllerConfig) -> Result<Self> {
        cfg.validate()?;
        check_plant(d, spec)?;
        let maps = SignalMaps::Identity { inputs: false };
        let blocks = data_blocks(d, &maps, cfg)?;
        let r = d.split.hankel();
        let t_diag = cfg.tracking_output_weight * column_variance(&d.y.values().rows(r.start, r.len()).into_owned()).map(|v| 1.0 / v);
        let r_diag = cfg.tracking_input_weight * column_variance(&d.u.values().rows(r.start, r.len()).into_owned()).map(|v| 1.0 / v);
        let u_ref = DVector::from_fn(cfg.n_p * spec.n_u(), |i, _| spec.u_ref[i % spec.n_u()]);
        Ok(Self {
            kind: ControllerKind::Tracking,
            blocks,
            stage: StageCost::tracking(&t_diag, &DVector::from_column_slice(&spec.y_ref)),
            g_map: selector(&spec.constrained, spec.n_y()),
            maps,
            weights: cfg.weights(spec.n_u()),
            bounds: bounds_for(spec),
            tracking: Some(InputTracking { r: r_diag, u_ref }),
            solver: cfg.solver,
            warmup: cfg.warmup.clone(),
            fit_r2: None,
        })
    }

    /// Economic DeePC on raw `(u, y)` with a separable quadratic fit of the cost.
    pub fn convex(d: &Dataset, spec: &PlantSpec, cfg: &ControllerConfig) -> Result<Self> {
        cfg.validate()?;
        check_plant(d, spec)?;
        let maps = SignalMaps::Identity { inputs: true };
        let blocks = data_blocks(d, &maps, cfg)?;
        let tr = d.split.train();
        let y = d.y.values().rows(tr.start, tr.len()).into_owned();
        let u = d.u.values().rows(tr.start, tr.len()).into_owned();
        let c = d.costs().rows(tr.start, tr.len()).into_owned();
        let fit = fit_convex_surrogate(&y, &u, &c, cfg.holdout_frac, cfg.convex_floor)?;
        Ok(Self {
            kind: ControllerKind::Convex,
            blocks,
            stage: fit.stage,
            g_map: selector(&spec.constrained, spec.n_y()),
            maps,
            weights: cfg.weights(spec.n_u()),
            bounds: bounds_for(spec),
            tracking: None,
            solver: cfg.solver,
            warmup: cfg.warmup.clone(),
            fit_r2: Some(fit.holdout_r2),
        })
    }

    pub fn n_u(&self) -> usize {
        self.blocks.n_u
    }

    pub fn t_ini(&self) -> usize {
        self.blocks.t_ini
    }

    pub fn warm_up(&self, plant: &mut PlantHandle) -> Result<ControllerState> {
        warmup(plant, &self.warmup, self.t_ini(), &self.maps)
    }

    /// Solves the online problem and returns the input to apply (always inside the box),
    /// plus status, iteration count, solve time and slack norm.
    pub fn plan(&self, state: &mut ControllerState) -> Result<Plan> {
        let ini = state.ini()?;
        let qp = assemble(&self.blocks, &self.stage, &self.g_map, &ini, &self.weights, &self.bounds, self.tracking.as_ref())?;
        let t0 = Instant::now();
        let sol = solve(&qp.problem, &self.solver);
        let solve_ms = t0.elapsed().as_secs_f64() * 1e3;
        let fallback = |state: &mut ControllerState, status: Option<QpStatus>, reason: String| {
            log::warn!("step {}: holding the previous input ({reason})", state.k);
            state.events.push(Event { step: state.k, kind: EventKind::Fallback { status, reason } });
        };
        let mut plan = Plan { u: state.last_u.clone(), status: StepStatus::Fallback, qp_status: None, iterations: 0, solve_ms, slack_norm: f64::NAN };
        match sol {
            Ok(s) if s.status == QpStatus::Optimal => {
                let (g, sigma) = qp.split(&s.x);
                let u = extract_input(&self.blocks, &g)?.applied().clone();
                plan.qp_status = Some(s.status);
                plan.iterations = s.iterations;
                plan.slack_norm = sigma.norm();
                if u.iter().all(|x| x.is_finite()) {
                    plan.u = u;
                    plan.status = StepStatus::Optimal;
                } else {
                    fallback(state, plan.qp_status, "non-finite input".into());
                }
            }
            Ok(s) => {
                plan.qp_status = Some(s.status);
                plan.iterations = s.iterations;
                fallback(state, Some(s.status), format!("{:?}", s.status));
            }
            Err(e) => fallback(state, None, e.to_string()),
        }
        for i in 0..plan.u.len() {
            plan.u[i] = plan.u[i].clamp(self.bounds.u_lb[i], self.bounds.u_ub[i]);
        }
        Ok(plan)
    }

    /// One closed-loop step: plan, apply, measure, roll the windows.
    pub fn step(&self, state: &mut ControllerState, plant: &mut PlantHandle) -> Result<ClosedLoopRecord> {
        let plan = self.plan(state)?;
        let out = plant.step(&plan.u)?;
        let (z, v) = (self.maps.z(&out.y)?, self.maps.v(&out.u)?);
        let spec = plant.spec();
        let yc = out.y.select_rows(&spec.constrained);
        let rec = ClosedLoopRecord {
            step: state.k,
            u: out.u.iter().cloned().collect(),
            y: out.y.iter().cloned().collect(),
            cost: out.cost,
            surrogate_cost: self.stage.value(&z, &v),
            status: plan.status,
            qp_status: plan.qp_status,
            iterations: plan.iterations,
            solve_ms: plan.solve_ms,
            violation: bound_violation(&yc, &self.bounds.yc_lb, &self.bounds.yc_ub),
            surrogate_violation: bound_violation(&(&self.g_map * &z), &self.bounds.yc_lb, &self.bounds.yc_ub),
            slack_norm: plan.slack_norm,
        };
        state.push(out.u, out.y, z, v);
        Ok(rec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub u: DVector<f64>,
    pub status: StepStatus,
    pub qp_status: Option<QpStatus>,
    pub iterations: usize,
    pub solve_ms: f64,
    pub slack_norm: f64,
}

/// Separable quadratic stage cost fitted to raw `(y, u)` and its holdout quality.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateFit {
    pub stage: StageCost,
    pub holdout_r2: f64,
}

/// Least-squares fit of `c ≈ Σ a_i y_i² + b_i y_i + Σ a'_j u_j² + b'_j u_j + c0` on
/// standardized signals, with every curvature held at or above `floor` so the result is
/// convex. The last `holdout_frac` of the rows are kept out of the fit.
pub fn fit_convex_surrogate(y: &DMatrix<f64>, u: &DMatrix<f64>, c: &DVector<f64>, holdout_frac: f64, floor: f64) -> Result<SurrogateFit> {
    let n = y.nrows();
    if u.nrows() != n || c.len() != n {
        return Err(ControllerError::InvalidConfig("surrogate data row counts differ".into()));
    }
    let n_hold = (n as f64 * holdout_frac).floor() as usize;
    let n_fit = n - n_hold;
    let w = DMatrix::from_fn(n, y.ncols() + u.ncols(), |i, j| if j < y.ncols() { y[(i, j)] } else { u[(i, j - y.ncols())] });
    let m = w.ncols();
    if n_fit < 2 * m + 2 {
        return Err(ControllerError::InvalidConfig(format!("{n_fit} rows are too few to fit the surrogate")));
    }
    let fit_rows = w.rows(0, n_fit).into_owned();
    let stats: Vec<(f64, f64)> = (0..m).map(|j| linalg::mean_std(fit_rows.column(j).as_slice())).collect();
    let live: Vec<bool> = stats.iter().map(|(_, s)| *s > 1e-12).collect();
    let std_w = DMatrix::from_fn(n, m, |i, j| if live[j] { (w[(i, j)] - stats[j].0) / stats[j].1 } else { 0.0 });

    // columns: squares, linears, constant
    let features = |rows: std::ops::Range<usize>| {
        DMatrix::from_fn(rows.len(), 2 * m + 1, |i, j| {
            let r = rows.start + i;
            match j {
                j if j < m => std_w[(r, j)] * std_w[(r, j)],
                j if j < 2 * m => std_w[(r, j - m)],
                _ => 1.0,
            }
        })
    };
    let x = features(0..n_fit);
    let target = c.rows(0, n_fit).into_owned();
    let mut pinned: Vec<bool> = (0..m).map(|j| !live[j]).collect();
    let coef = loop {
        // curvatures that would go below the floor are fixed there and the rest refitted
        let free: Vec<usize> = (0..2 * m + 1).filter(|&j| j >= m || !pinned[j]).collect();
        let mut rhs = target.clone();
        for j in (0..m).filter(|&j| pinned[j]) {
            rhs -= floor * x.column(j);
        }
        let sol = linalg::lstsq(&x.select_columns(&free), &DMatrix::from_column_slice(n_fit, 1, rhs.as_slice()));
        let mut coef = DVector::zeros(2 * m + 1);
        for (k, &j) in free.iter().enumerate() {
            coef[j] = sol[(k, 0)];
        }
        for j in (0..m).filter(|&j| pinned[j]) {
            coef[j] = floor;
        }
        let low: Vec<usize> = (0..m).filter(|&j| !pinned[j] && coef[j] < floor).collect();
        if low.is_empty() {
            break coef;
        }
        for j in low {
            pinned[j] = true;
        }
    };
    let holdout_r2 = if n_hold > 1 {
        let pred = features(n_fit..n) * &coef;
        let obs = c.rows(n_fit, n_hold);
        let mean = obs.mean();
        let sst: f64 = obs.iter().map(|v| (v - mean).powi(2)).sum();
        let sse: f64 = obs.iter().zip(pred.iter()).map(|(o, p)| (o - p).powi(2)).sum();
        if sst > 0.0 {
            1.0 - sse / sst
        } else {
            f64::NAN
        }
    } else {
        f64::NAN
    };

    // back to raw coordinates: a((w − μ)/s)² + b(w − μ)/s
    let mut q = DVector::zeros(m);
    let mut p = DVector::zeros(m);
    let mut constant = coef[2 * m];
    for j in 0..m {
        let (mu, s) = stats[j];
        if !live[j] {
            q[j] = floor;
            p[j] = -2.0 * floor * mu;
            constant += floor * mu * mu;
            continue;
        }
        let (a, b) = (coef[j], coef[m + j]);
        q[j] = a / (s * s);
        p[j] = b / s - 2.0 * a * mu / (s * s);
        constant += a * mu * mu / (s * s) - b * mu / s;
    }
    let ny = y.ncols();
    Ok(SurrogateFit {
        stage: StageCost {
            qz: q.rows(0, ny).into_owned(),
            pz: p.rows(0, ny).into_owned(),
            qv: q.rows(ny, m - ny).into_owned(),
            pv: p.rows(ny, m - ny).into_owned(),
            constant,
        },
        holdout_r2,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub steps: usize,
    pub avg_cost: f64,
    /// Fraction of steps with a measured constrained output outside its bounds.
    pub violation_rate: f64,
    /// Same, for `G z`.
    pub surrogate_violation_rate: f64,
    pub fallbacks: usize,
    pub mean_solve_ms: f64,
    pub p99_solve_ms: f64,
    pub max_solve_ms: f64,
    pub fit_r2: Option<f64>,
}

impl Summary {
    pub fn from_records(records: &[ClosedLoopRecord], fit_r2: Option<f64>) -> Self {
        let n = records.len();
        if n == 0 {
            return Self { fit_r2, ..Self::default() };
        }
        let nf = n as f64;
        let mut times: Vec<f64> = records.iter().map(|r| r.solve_ms).collect();
        times.sort_by(f64::total_cmp);
        let p99 = times[((0.99 * nf).ceil() as usize).clamp(1, n) - 1];
        Self {
            steps: n,
            avg_cost: records.iter().map(|r| r.cost).sum::<f64>() / nf,
            violation_rate: records.iter().filter(|r| r.violated()).count() as f64 / nf,
            surrogate_violation_rate: records.iter().filter(|r| r.surrogate_violation.iter().any(|v| *v > VIOLATION_TOL)).count() as f64 / nf,
            fallbacks: records.iter().filter(|r| r.status == StepStatus::Fallback).count(),
            mean_solve_ms: times.iter().sum::<f64>() / nf,
            p99_solve_ms: p99,
            max_solve_ms: times[n - 1],
            fit_r2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosedLoopRun {
    pub kind: ControllerKind,
    pub records: Vec<ClosedLoopRecord>,
    pub events: Vec<Event>,
    pub summary: Summary,
}

/// Warmup followed by `steps` controller steps on a fresh plant seeded with `seed`.
pub fn run_closed_loop(spec: &PlantSpec, ctrl: &Controller, steps: usize, disturbance: Option<&DisturbanceSpec>, seed: u64) -> Result<ClosedLoopRun> {
    let mut spec = spec.clone();
    if let Some(d) = disturbance {
        spec.disturbance = d.clone();
    }
    if steps == 0 {
        return Ok(ClosedLoopRun { kind: ctrl.kind, records: Vec::new(), events: Vec::new(), summary: Summary::from_records(&[], ctrl.fit_r2) });
    }
    let mut plant = PlantHandle::new(spec, seed)?;
    let mut state = ctrl.warm_up(&mut plant)?;
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        records.push(ctrl.step(&mut state, &mut plant)?);
    }
    let summary = Summary::from_records(&records, ctrl.fit_r2);
    Ok(ClosedLoopRun { kind: ctrl.kind, records, events: state.events, summary })
}

impl ClosedLoopRun {
    /// Per-step trace without timing columns, so it is reproducible byte for byte.
    pub fn write_trace(&self, path: impl AsRef<std::path::Path>, spec: &PlantSpec) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["step".to_string()];
        header.extend(spec.input_names.iter().cloned());
        header.extend(spec.output_names.iter().cloned());
        header.extend(["cost", "surrogate_cost", "status", "iterations", "slack_norm"].map(String::from));
        header.extend(spec.constrained.iter().map(|&i| format!("viol_{}", spec.output_names[i])));
        header.extend(spec.constrained.iter().map(|&i| format!("surrogate_viol_{}", spec.output_names[i])));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.step.to_string()];
            row.extend(r.u.iter().chain(&r.y).map(|v| v.to_string()));
            row.push(r.cost.to_string());
            row.push(r.surrogate_cost.to_string());
            row.push(match r.status {
                StepStatus::Optimal => "optimal".into(),
                StepStatus::Fallback => "fallback".into(),
            });
            row.push(r.iterations.to_string());
            row.push(r.slack_norm.to_string());
            row.extend(r.violation.iter().chain(&r.surrogate_violation).map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Solve times, one row per step.
    pub fn write_timing(&self, path: impl AsRef<std::path::Path>) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "solve_ms"])?;
        for r in &self.records {
            w.write_record([r.step.to_string(), r.solve_ms.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}
