//! Benchmark plants: nonlinear ODE and LTI models with economic costs, bounded state
//! disturbances and open-loop data generation.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hankel::{is_persistently_exciting, Excitation};
use crate::linalg::{mean_std, numerical_rank};
use crate::trajectory::{Dataset, Trajectory, TrajectoryError};

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("invalid plant spec `{name}`: {reason}")]
    InvalidSpec { name: String, reason: String },
    #[error("state diverged at step {step}: {state:?}")]
    StateDiverged { step: usize, state: Vec<f64> },
    #[error("unknown benchmark `{0}`")]
    UnknownBenchmark(String),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Hankel(#[from] crate::hankel::HankelError),
}

pub type Result<T> = std::result::Result<T, PlantError>;

/// Divergence threshold on any state component.
pub const DIVERGENCE_LIMIT: f64 = 1e9;
/// RK4 substeps per sampling interval.
pub const RK4_SUBSTEPS: usize = 10;

const BUILTIN: [(&str, &str); 3] = [
    ("econ-cstr", include_str!("../benchmarks/econ-cstr.toml")),
    ("two-tank", include_str!("../benchmarks/two-tank.toml")),
    ("lti-3", include_str!("../benchmarks/lti-3.toml")),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Dynamics {
    /// Nonisothermal CSTR with second-order reaction A -> B; state `(C_A, T)`,
    /// input heat duty `Q` in units of `q_unit` kJ/h.
    Cstr {
        flow: f64,
        volume: f64,
        k0: f64,
        activation: f64,
        gas_const: f64,
        density: f64,
        heat_capacity: f64,
        reaction_enthalpy: f64,
        feed_temp: f64,
        feed_conc: f64,
        q_unit: f64,
    },
    /// Two cascaded tanks with Torricelli outflow; state `(h1, h2)`, input inflow.
    TwoTank { area1: f64, area2: f64, outlet1: f64, outlet2: f64, gravity: f64 },
    /// Discrete-time `x⁺ = A x + B u` (row-major matrices).
    Lti { a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
}

/// One additive term of `ℓ_y` or `ℓ_u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CostTerm {
    Linear { index: usize, weight: f64 },
    Quadratic { index: usize, weight: f64, #[serde(default)] center: f64 },
    /// `weight * k0 * exp(-e_over_r / s[temp]) * s[conc]^order`.
    Arrhenius { conc: usize, temp: usize, k0: f64, e_over_r: f64, order: i32, weight: f64 },
}

impl CostTerm {
    fn eval(&self, s: &DVector<f64>) -> f64 {
        match *self {
            CostTerm::Linear { index, weight } => weight * s[index],
            CostTerm::Quadratic { index, weight, center } => weight * (s[index] - center).powi(2),
            CostTerm::Arrhenius { conc, temp, k0, e_over_r, order, weight } => {
                weight * k0 * (-e_over_r / s[temp]).exp() * s[conc].powi(order)
            }
        }
    }

    fn indices(&self) -> Vec<usize> {
        match *self {
            CostTerm::Linear { index, .. } | CostTerm::Quadratic { index, .. } => vec![index],
            CostTerm::Arrhenius { conc, temp, .. } => vec![conc, temp],
        }
    }
}

/// `c(y, u) = ℓ_y(y) + ℓ_u(u)`; the two lists never share a signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    #[serde(default)]
    pub output: Vec<CostTerm>,
    #[serde(default)]
    pub input: Vec<CostTerm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    /// Gaussian std as a fraction of `|x0|`.
    pub std_frac: f64,
    /// Samples are clipped to `±bound_frac * |x0|`.
    pub bound_frac: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub hold_steps: usize,
    /// Additive input noise std as a fraction of `u_scale`.
    pub noise_frac: f64,
    pub steps: usize,
    /// Sampling range of the held levels (defaults to the input box).
    #[serde(default)]
    pub level_lb: Option<Vec<f64>>,
    #[serde(default)]
    pub level_ub: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PidSpec {
    pub output: usize,
    pub input: usize,
    pub setpoint: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub name: String,
    pub dt: f64,
    pub dynamics: Dynamics,
    pub x0: Vec<f64>,
    /// Output matrix rows (`y = C x`).
    pub output_map: Vec<Vec<f64>>,
    pub output_names: Vec<String>,
    pub input_names: Vec<String>,
    pub u_lb: Vec<f64>,
    pub u_ub: Vec<f64>,
    /// Nominal steady input.
    pub u_ref: Vec<f64>,
    /// Input scale `u_s` for noise levels.
    pub u_scale: Vec<f64>,
    /// Output indices with hard bounds `y_lb ≤ y[i] ≤ y_ub`.
    pub constrained: Vec<usize>,
    pub y_lb: Vec<f64>,
    pub y_ub: Vec<f64>,
    /// Nominal steady output (tracking reference).
    pub y_ref: Vec<f64>,
    pub cost: CostSpec,
    pub disturbance: DisturbanceSpec,
    pub schedule: ScheduleSpec,
    pub pid: PidSpec,
    #[serde(default)]
    pub seed: u64,
}

impl PlantSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: PlantSpec = toml::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plant spec serializes")
    }

    pub fn n_x(&self) -> usize {
        self.x0.len()
    }

    pub fn n_u(&self) -> usize {
        self.u_lb.len()
    }

    pub fn n_y(&self) -> usize {
        self.output_map.len()
    }

    pub fn c_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_y(), self.n_x(), |i, j| self.output_map[i][j])
    }

    pub fn u_lb_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.u_lb)
    }

    pub fn u_ub_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.u_ub)
    }

    pub fn ell_y(&self, y: &DVector<f64>) -> f64 {
        self.cost.output.iter().map(|t| t.eval(y)).sum()
    }

    pub fn ell_u(&self, u: &DVector<f64>) -> f64 {
        self.cost.input.iter().map(|t| t.eval(u)).sum()
    }

    /// True economic cost `ℓ_y(y) + ℓ_u(u)`.
    pub fn cost(&self, y: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.ell_y(y) + self.ell_u(u)
    }

    fn invalid(&self, reason: impl Into<String>) -> PlantError {
        PlantError::InvalidSpec { name: self.name.clone(), reason: reason.into() }
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, nu, ny) = (self.n_x(), self.n_u(), self.n_y());
        if !(self.dt > 0.0) {
            return Err(self.invalid("dt must be positive"));
        }
        if nx == 0 || nu == 0 || ny == 0 {
            return Err(self.invalid("empty state, input or output"));
        }
        if self.output_map.iter().any(|r| r.len() != nx) {
            return Err(self.invalid("output map rows must have n_x entries"));
        }
        let lens = [self.u_ub.len(), self.u_ref.len(), self.u_scale.len(), self.input_names.len()];
        if lens.iter().any(|&l| l != nu) {
            return Err(self.invalid("input vectors must have n_u entries"));
        }
        if self.output_names.len() != ny || self.y_ref.len() != ny {
            return Err(self.invalid("output vectors must have n_y entries"));
        }
        if (0..nu).any(|i| !(self.u_lb[i] <= self.u_ub[i]) || !self.u_lb[i].is_finite() || !self.u_ub[i].is_finite()) {
            return Err(self.invalid("input box must be finite with lb <= ub"));
        }
        if self.y_lb.len() != self.constrained.len() || self.y_ub.len() != self.constrained.len() {
            return Err(self.invalid("one output bound pair per constrained output"));
        }
        if self.constrained.iter().any(|&i| i >= ny) {
            return Err(self.invalid("constrained output index out of range"));
        }
        if self.y_lb.iter().zip(&self.y_ub).any(|(l, u)| l > u) {
            return Err(self.invalid("output bounds with lb > ub"));
        }
        match &self.dynamics {
            Dynamics::Lti { a, b } => {
                if a.len() != nx || a.iter().any(|r| r.len() != nx) || b.len() != nx || b.iter().any(|r| r.len() != nu) {
                    return Err(self.invalid("LTI matrices have wrong shape"));
                }
            }
            Dynamics::Cstr { .. } | Dynamics::TwoTank { .. } => {
                if nx != 2 || nu != 1 {
                    return Err(self.invalid("CSTR and two-tank models have two states and one input"));
                }
            }
        }
        if self.cost.output.iter().flat_map(|t| t.indices()).any(|i| i >= ny) {
            return Err(self.invalid("output cost term refers to a missing output"));
        }
        if self.cost.input.iter().flat_map(|t| t.indices()).any(|i| i >= nu) {
            return Err(self.invalid("input cost term refers to a missing input"));
        }
        if self.pid.output >= ny || self.pid.input >= nu {
            return Err(self.invalid("PID channel out of range"));
        }
        if self.schedule.hold_steps == 0 {
            return Err(self.invalid("hold_steps must be positive"));
        }
        if !(self.disturbance.std_frac >= 0.0 && self.disturbance.bound_frac >= 0.0) {
            return Err(self.invalid("disturbance fractions must be nonnegative"));
        }
        check_output_map(&self.c_matrix()).map_err(|r| self.invalid(r))?;
        Ok(())
    }
}

/// Structure of `C` required for recovering a partial state from `y`: at most `n_y`
/// nonzero columns, and those columns linearly independent (`rank C = n_x` when `n_y ≥ n_x`).
pub fn check_output_map(c: &DMatrix<f64>) -> std::result::Result<(), String> {
    let (ny, nx) = c.shape();
    let nonzero: Vec<usize> = (0..nx).filter(|&j| c.column(j).iter().any(|v| *v != 0.0)).collect();
    let rank = numerical_rank(&c.select_columns(nonzero.iter()), 1e-10);
    if ny >= nx {
        if rank != nx {
            return Err(format!("rank(C) = {rank} but n_x = {nx}"));
        }
        return Ok(());
    }
    if nonzero.len() > ny {
        return Err(format!("{} nonzero columns exceed n_y = {ny}", nonzero.len()));
    }
    if rank != nonzero.len() {
        return Err(format!("nonzero columns of C are dependent (rank {rank} < {})", nonzero.len()));
    }
    Ok(())
}

/// Nonzero columns of `C` (the recoverable partial state `x^r`).
pub fn recoverable_states(c: &DMatrix<f64>) -> Vec<usize> {
    (0..c.ncols()).filter(|&j| c.column(j).iter().any(|v| *v != 0.0)).collect()
}

/// `x^r = (C'ᵀC')⁻¹C'ᵀ y` with `C'` the nonzero columns of `C`.
pub fn partial_state(c: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let cr = c.select_columns(recoverable_states(c).iter());
    let gram = cr.transpose() * &cr;
    Some(gram.cholesky()?.solve(&(cr.transpose() * y)))
}

/// Checks `c(y, u) = ℓ_y(y) + ℓ_u(u)` with `ℓ_u` independent of `y` and vice versa on random
/// points in the operating box; returns the largest mismatch.
pub fn cost_additivity_gap(spec: &PlantSpec, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample_u = |rng: &mut ChaCha8Rng| DVector::from_fn(spec.n_u(), |i, _| rng.random_range(spec.u_lb[i]..=spec.u_ub[i]));
    let sample_y = |rng: &mut ChaCha8Rng| DVector::from_fn(spec.n_y(), |i, _| spec.y_ref[i] * (1.0 + 0.1 * rng.random_range(-1.0..1.0)) + 0.1 * rng.random_range(-1.0..1.0));
    let mut gap = 0.0_f64;
    for _ in 0..samples {
        let (y1, y2) = (sample_y(&mut rng), sample_y(&mut rng));
        let (u1, u2) = (sample_u(&mut rng), sample_u(&mut rng));
        // mixed second difference vanishes iff there is no y-u coupling
        let mixed = spec.cost(&y1, &u1) - spec.cost(&y1, &u2) - spec.cost(&y2, &u1) + spec.cost(&y2, &u2);
        let split = spec.cost(&y1, &u1) - (spec.ell_y(&y1) + spec.ell_u(&u1));
        gap = gap.max(mixed.abs()).max(split.abs());
    }
    gap
}

pub fn builtin_benchmarks() -> Vec<PlantSpec> {
    BUILTIN.iter().map(|(_, s)| PlantSpec::from_toml_str(s).expect("shipped benchmark specs are valid")).collect()
}

pub fn benchmark(name: &str) -> Result<PlantSpec> {
    BUILTIN
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| PlantSpec::from_toml_str(s))
        .unwrap_or_else(|| Err(PlantError::UnknownBenchmark(name.to_string())))
}

/// Names accepted by [`benchmark`].
pub fn benchmark_names() -> Vec<&'static str> {
    BUILTIN.iter().map(|(n, _)| *n).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub y: DVector<f64>,
    pub cost: f64,
    /// Input actually applied after clipping to the box.
    pub u: DVector<f64>,
    pub clipped: bool,
}

/// A running plant instance.
#[derive(Clone, Debug)]
pub struct PlantHandle {
    spec: PlantSpec,
    x: DVector<f64>,
    c: DMatrix<f64>,
    rng: ChaCha8Rng,
    seed: u64,
    k: usize,
    /// Most recent disturbance sample.
    last_disturbance: DVector<f64>,
}

impl PlantHandle {
    pub fn new(spec: PlantSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let x = DVector::from_column_slice(&spec.x0);
        let c = spec.c_matrix();
        let n = spec.n_x();
        Ok(Self { spec, x, c, rng: ChaCha8Rng::seed_from_u64(seed), seed, k: 0, last_disturbance: DVector::zeros(n) })
    }

    pub fn spec(&self) -> &PlantSpec {
        &self.spec
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn set_state(&mut self, x: DVector<f64>) {
        self.x = x;
    }

    pub fn step_count(&self) -> usize {
        self.k
    }

    pub fn last_disturbance(&self) -> &DVector<f64> {
        &self.last_disturbance
    }

    /// Back to `x0`, step 0 and the initial disturbance stream.
    pub fn reset(&mut self) {
        self.x = DVector::from_column_slice(&self.spec.x0);
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.k = 0;
        self.last_disturbance.fill(0.0);
    }

    pub fn output(&self) -> DVector<f64> {
        &self.c * &self.x
    }

    pub fn clip_input(&self, u: &DVector<f64>) -> (DVector<f64>, bool) {
        let clipped = DVector::from_fn(u.len(), |i, _| u[i].clamp(self.spec.u_lb[i], self.spec.u_ub[i]));
        let changed = clipped != *u;
        (clipped, changed)
    }

    /// Applies `u` over one sampling interval and returns the measured output and true cost.
    pub fn step(&mut self, u: &DVector<f64>) -> Result<StepOutput> {
        assert_eq!(u.len(), self.spec.n_u(), "input dimension");
        let (u, clipped) = self.clip_input(u);
        if clipped {
            log::warn!("{}: input clipped to box at step {}", self.spec.name, self.k);
        }
        let mut x = advance(&self.spec.dynamics, &self.x, &u, self.spec.dt);
        let w = self.sample_disturbance();
        x += &w;
        self.last_disturbance = w;
        self.k += 1;
        if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            return Err(PlantError::StateDiverged { step: self.k, state: x.iter().cloned().collect() });
        }
        self.x = x;
        let y = self.output();
        let cost = self.spec.cost(&y, &u);
        Ok(StepOutput { y, cost, u, clipped })
    }

    fn sample_disturbance(&mut self) -> DVector<f64> {
        let d = &self.spec.disturbance;
        let n = self.spec.n_x();
        if d.std_frac == 0.0 || d.bound_frac == 0.0 {
            return DVector::zeros(n);
        }
        DVector::from_fn(n, |i, _| {
            let scale = self.spec.x0[i].abs();
            let z: f64 = self.rng.sample(StandardNormal);
            (z * d.std_frac * scale).clamp(-d.bound_frac * scale, d.bound_frac * scale)
        })
    }
}

/// One sampling interval of the deterministic dynamics.
pub fn advance(dyn_: &Dynamics, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64> {
    match dyn_ {
        Dynamics::Lti { a, b } => {
            let n = x.len();
            let am = DMatrix::from_fn(n, n, |i, j| a[i][j]);
            let bm = DMatrix::from_fn(n, u.len(), |i, j| b[i][j]);
            am * x + bm * u
        }
        _ => {
            let h = dt / RK4_SUBSTEPS as f64;
            let mut x = x.clone();
            for _ in 0..RK4_SUBSTEPS {
                let k1 = rhs(dyn_, &x, u);
                let k2 = rhs(dyn_, &(&x + &k1 * (h / 2.0)), u);
                let k3 = rhs(dyn_, &(&x + &k2 * (h / 2.0)), u);
                let k4 = rhs(dyn_, &(&x + &k3 * h), u);
                x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            }
            x
        }
    }
}

/// Continuous-time vector field.
pub fn rhs(dyn_: &Dynamics, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    match *dyn_ {
        Dynamics::Cstr { flow, volume, k0, activation, gas_const, density, heat_capacity, reaction_enthalpy, feed_temp, feed_conc, q_unit } => {
            let (ca, t) = (x[0], x[1]);
            let rate = k0 * (-activation / (gas_const * t)).exp() * ca * ca;
            let dil = flow / volume;
            DVector::from_vec(vec![
                dil * (feed_conc - ca) - rate,
                dil * (feed_temp - t) - reaction_enthalpy / (density * heat_capacity) * rate + u[0] * q_unit / (density * heat_capacity * volume),
            ])
        }
        Dynamics::TwoTank { area1, area2, outlet1, outlet2, gravity } => {
            let out1 = outlet1 * (2.0 * gravity * x[0].max(0.0)).sqrt();
            let out2 = outlet2 * (2.0 * gravity * x[1].max(0.0)).sqrt();
            DVector::from_vec(vec![(u[0] - out1) / area1, (out1 - out2) / area2])
        }
        Dynamics::Lti { .. } => unreachable!("discrete-time model has no vector field"),
    }
}

/// Result of an open-loop campaign. On divergence the rows recorded so far are kept.
#[derive(Debug)]
pub struct OpenLoopRun {
    pub dataset: Option<Dataset>,
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub c: DVector<f64>,
    pub excitation: Option<Excitation>,
    pub error: Option<PlantError>,
}

/// Piecewise-constant random inputs held for `hold_steps`, plus Gaussian noise with std
/// `noise_frac * u_scale`, clipped to the box. Rows are `(u_k, y_k, c_k)` where `y_k` is
/// measured after applying `u_k`.
pub fn generate_openloop(h: &mut PlantHandle, schedule: &ScheduleSpec, steps: usize, seed: u64, hankel_len: usize, pe_order: usize) -> OpenLoopRun {
    let spec = h.spec().clone();
    let (nu, ny) = (spec.n_u(), spec.n_y());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = schedule.level_lb.clone().unwrap_or_else(|| spec.u_lb.clone());
    let hi = schedule.level_ub.clone().unwrap_or_else(|| spec.u_ub.clone());
    let noise: Vec<Normal<f64>> = (0..nu).map(|i| Normal::new(0.0, schedule.noise_frac * spec.u_scale[i].abs()).expect("finite std")).collect();
    let mut us = DMatrix::zeros(steps, nu);
    let mut ys = DMatrix::zeros(steps, ny);
    let mut cs = DVector::zeros(steps);
    let mut level = DVector::zeros(nu);
    let mut done = 0;
    let mut error = None;
    for k in 0..steps {
        if k % schedule.hold_steps == 0 {
            level = DVector::from_fn(nu, |i, _| if lo[i] < hi[i] { rng.random_range(lo[i]..hi[i]) } else { lo[i] });
        }
        let u = DVector::from_fn(nu, |i, _| level[i] + noise[i].sample(&mut rng));
        match h.step(&u) {
            Ok(out) => {
                us.set_row(k, &out.u.transpose());
                ys.set_row(k, &out.y.transpose());
                cs[k] = out.cost;
                done = k + 1;
            }
            Err(e) => {
                error = Some(e);
                break;
            }
        }
    }
    let us = us.rows(0, done).into_owned();
    let ys = ys.rows(0, done).into_owned();
    let cs = cs.rows(0, done).into_owned();
    let excitation = if done >= pe_order && pe_order > 0 {
        Trajectory::unlabeled(us.clone(), spec.dt, "u").ok().and_then(|t| is_persistently_exciting(&t, pe_order).ok())
    } else {
        None
    };
    let dataset = if error.is_none() { build_dataset(&spec, &us, &ys, &cs, hankel_len).ok() } else { None };
    OpenLoopRun { dataset, u: us, y: ys, c: cs, excitation, error }
}

/// Wraps raw sample matrices into a labelled [`Dataset`].
pub fn build_dataset(spec: &PlantSpec, u: &DMatrix<f64>, y: &DMatrix<f64>, c: &DVector<f64>, hankel_len: usize) -> Result<Dataset> {
    let ut = Trajectory::new(u.clone(), spec.dt, spec.input_names.clone())?;
    let yt = Trajectory::new(y.clone(), spec.dt, spec.output_names.clone())?;
    let ct = Trajectory::new(DMatrix::from_column_slice(c.len(), 1, c.as_slice()), spec.dt, vec!["cost".into()])?;
    Ok(Dataset::new(ut, yt, ct, spec.constrained.clone(), hankel_len)?)
}

/// Memoryless plant whose cost is exactly quadratic in a known feature.
///
/// Inputs are i.i.d. uniform in `[−1, 1]²`, `s = A u` is a 4-dim feature, outputs are
/// `s + 0.2 s³` (invertible per channel) plus one linear constrained channel, and the
/// cost is quadratic in `s` plus quadratic in `u`, standardized over the dataset.
pub fn quadratic_feature_dataset(rows: usize, hankel_len: usize, seed: u64) -> Result<Dataset> {
    const A: [[f64; 2]; 4] = [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [0.5, -0.7]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = DMatrix::zeros(rows, 2);
    let mut y = DMatrix::zeros(rows, 5);
    let mut raw = DVector::zeros(rows);
    for k in 0..rows {
        let uk = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let s: Vec<f64> = A.iter().map(|a| a[0] * uk[0] + a[1] * uk[1]).collect();
        for i in 0..4 {
            y[(k, i)] = s[i] + 0.2 * s[i].powi(3);
        }
        y[(k, 4)] = s[0] - 0.5 * s[1];
        u[(k, 0)] = uk[0];
        u[(k, 1)] = uk[1];
        raw[k] = 0.5 * s[0] * s[0] + s[1] * s[1] + 0.3 * s[2] - 0.2 * s[3] + 0.3 * s[3] * s[3] + 0.4 * uk[0] * uk[0] + 0.1 * uk[1];
    }
    let (mean, std) = mean_std(raw.as_slice());
    let c = raw.map(|v| (v - mean) / std);
    let ut = Trajectory::unlabeled(u, 1.0, "u")?;
    let yt = Trajectory::unlabeled(y, 1.0, "y")?;
    let ct = Trajectory::new(DMatrix::from_column_slice(rows, 1, c.as_slice()), 1.0, vec!["cost".into()])?;
    Ok(Dataset::new(ut, yt, ct, vec![4], hankel_len)?)
}

/// Discrete PID on one output/input pair around the nominal input.
#[derive(Clone, Debug, PartialEq)]
pub struct Pid {
    spec: PidSpec,
    u_ref: DVector<f64>,
    dt: f64,
    integral: f64,
    prev_err: Option<f64>,
}

impl Pid {
    pub fn new(plant: &PlantSpec) -> Self {
        Self { spec: plant.pid.clone(), u_ref: DVector::from_column_slice(&plant.u_ref), dt: plant.dt, integral: 0.0, prev_err: None }
    }

    pub fn control(&mut self, y: &DVector<f64>) -> DVector<f64> {
        let e = self.spec.setpoint - y[self.spec.output];
        self.integral += e * self.dt;
        let de = self.prev_err.map_or(0.0, |p| (e - p) / self.dt);
        self.prev_err = Some(e);
        let mut u = self.u_ref.clone();
        u[self.spec.input] += self.spec.kp * e + self.spec.ki * self.integral + self.spec.kd * de;
        u
    }
}
