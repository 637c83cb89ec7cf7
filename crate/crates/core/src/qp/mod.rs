//! Dense convex QP solver.
//!
//! Solves `min ½xᵀHx + fᵀx` subject to `A_eq x = b_eq`, `lb_in ≤ A_in x ≤ ub_in` and
//! optional variable bounds with a Mehrotra predictor-corrector interior-point method on a
//! Ruiz-equilibrated copy of the problem, followed by an active-set polish.
//! Solutions are certified on the original problem with the objective scaled to `‖H‖_F = 1`.

pub mod deeepc;

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("Hessian is not symmetric")]
    NotSymmetric,
    #[error("Hessian is not positive semidefinite")]
    NotPsd,
    #[error("lower bound exceeds upper bound in row {0}")]
    InvalidBounds(usize),
    #[error("problem data contains NaN")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, QpError>;

/// Residual threshold for the `Optimal` certificate.
pub const CERT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub lb_in: DVector<f64>,
    pub ub_in: DVector<f64>,
    pub var_lb: Option<DVector<f64>>,
    pub var_ub: Option<DVector<f64>>,
}

impl QpProblem {
    /// Unconstrained problem.
    pub fn new(h: DMatrix<f64>, f: DVector<f64>) -> Self {
        let n = f.len();
        Self {
            h,
            f,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            lb_in: DVector::zeros(0),
            ub_in: DVector::zeros(0),
            var_lb: None,
            var_ub: None,
        }
    }

    pub fn with_eq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_ineq(mut self, a: DMatrix<f64>, lb: DVector<f64>, ub: DVector<f64>) -> Self {
        self.a_in = a;
        self.lb_in = lb;
        self.ub_in = ub;
        self
    }

    pub fn with_bounds(mut self, lb: DVector<f64>, ub: DVector<f64>) -> Self {
        self.var_lb = Some(lb);
        self.var_ub = Some(ub);
        self
    }

    pub fn n(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }

    /// Writes every matrix as CSV under `dir` plus `<tag>_manifest.json`.
    pub fn dump(&self, dir: impl AsRef<std::path::Path>, tag: &str) -> std::io::Result<()> {
        use crate::hankel::write_matrix_csv;
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let as_col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        let mut files = Vec::new();
        let mut put = |name: &str, m: &DMatrix<f64>| -> std::io::Result<()> {
            let file = format!("{tag}_{name}.csv");
            write_matrix_csv(dir.join(&file), m)?;
            files.push(serde_json::json!({ "name": name, "file": file, "rows": m.nrows(), "cols": m.ncols() }));
            Ok(())
        };
        put("H", &self.h)?;
        put("f", &as_col(&self.f))?;
        put("Aeq", &self.a_eq)?;
        put("beq", &as_col(&self.b_eq))?;
        put("Ain", &self.a_in)?;
        put("lb_in", &as_col(&self.lb_in))?;
        put("ub_in", &as_col(&self.ub_in))?;
        if let (Some(l), Some(u)) = (&self.var_lb, &self.var_ub) {
            put("var_lb", &as_col(l))?;
            put("var_ub", &as_col(u))?;
        }
        let manifest = serde_json::json!({ "tag": tag, "n": self.n(), "objective": "0.5 x'Hx + f'x", "matrices": files });
        std::fs::write(dir.join(format!("{tag}_manifest.json")), serde_json::to_string_pretty(&manifest)?)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let dim = |what: &str| Err(QpError::DimensionMismatch(what.to_string()));
        if self.h.shape() != (n, n) {
            return dim("H must be n x n");
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return dim("equality system");
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.lb_in.len() || self.lb_in.len() != self.ub_in.len() {
            return dim("inequality system");
        }
        for b in [&self.var_lb, &self.var_ub].into_iter().flatten() {
            if b.len() != n {
                return dim("variable bounds");
            }
        }
        let data = self.h.iter().chain(self.f.iter()).chain(self.a_eq.iter()).chain(self.b_eq.iter()).chain(self.a_in.iter());
        if data.clone().any(|v| v.is_nan()) || data.clone().any(|v| v.is_infinite()) {
            return Err(QpError::NonFinite);
        }
        for (i, (l, u)) in self.lb_in.iter().zip(self.ub_in.iter()).enumerate() {
            if l.is_nan() || u.is_nan() {
                return Err(QpError::NonFinite);
            }
            if l > u {
                return Err(QpError::InvalidBounds(i));
            }
        }
        if let (Some(l), Some(u)) = (&self.var_lb, &self.var_ub) {
            for i in 0..n {
                if l[i] > u[i] {
                    return Err(QpError::InvalidBounds(self.lb_in.len() + i));
                }
            }
        }
        let scale = hessian_scale(&self.h);
        if (&self.h - self.h.transpose()).amax() > 1e-12 * scale {
            return Err(QpError::NotSymmetric);
        }
        // attempted Cholesky of the unit-norm Hessian plus 1e-10 I
        let shifted = &self.h / scale + DMatrix::identity(n, n) * 1e-10;
        if n > 0 && shifted.cholesky().is_none() {
            return Err(QpError::NotPsd);
        }
        Ok(())
    }
}

fn hessian_scale(h: &DMatrix<f64>) -> f64 {
    let s = h.norm();
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 100 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

/// Evidence attached to an `Infeasible` status.
#[derive(Clone, Debug, PartialEq)]
pub enum Infeasibility {
    /// `y` with `A_eqᵀy = 0` and `b_eqᵀy > 0`.
    Equality { y: DVector<f64> },
    /// Minimal total violation of the inequalities over the equality-feasible set.
    Elastic { violation: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub status: QpStatus,
    pub kkt: KktResiduals,
    pub iterations: usize,
    pub solve_time: Duration,
    pub objective: f64,
    pub certificate: Option<Infeasibility>,
}

/// Problem in the form `min ½xᵀHx + fᵀx`, `A x = b`, `C x ≥ d`.
#[derive(Clone, Debug)]
struct Standard {
    h: DMatrix<f64>,
    f: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: DMatrix<f64>,
    d: DVector<f64>,
}

impl Standard {
    fn from_problem(p: &QpProblem) -> Self {
        let n = p.n();
        let mut eq_rows: Vec<(DVector<f64>, f64)> = (0..p.a_eq.nrows()).map(|i| (p.a_eq.row(i).transpose(), p.b_eq[i])).collect();
        let mut in_rows: Vec<(DVector<f64>, f64)> = Vec::new();
        let mut push_two_sided = |row: DVector<f64>, lo: f64, hi: f64| {
            if lo == hi {
                eq_rows.push((row, lo));
                return;
            }
            if lo.is_finite() {
                in_rows.push((row.clone(), lo));
            }
            if hi.is_finite() {
                in_rows.push((-row, -hi));
            }
        };
        for i in 0..p.a_in.nrows() {
            push_two_sided(p.a_in.row(i).transpose(), p.lb_in[i], p.ub_in[i]);
        }
        for i in 0..n {
            let lo = p.var_lb.as_ref().map_or(f64::NEG_INFINITY, |l| l[i]);
            let hi = p.var_ub.as_ref().map_or(f64::INFINITY, |u| u[i]);
            if lo.is_finite() || hi.is_finite() {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                push_two_sided(e, lo, hi);
            }
        }
        let stack = |rows: &[(DVector<f64>, f64)]| {
            let m = DMatrix::from_fn(rows.len(), n, |i, j| rows[i].0[j]);
            let v = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
            (m, v)
        };
        let (a, b) = stack(&eq_rows);
        let (c, d) = stack(&in_rows);
        Self { h: p.h.clone(), f: p.f.clone(), a, b, c, d }
    }

    fn n(&self) -> usize {
        self.f.len()
    }

    fn residuals(&self, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>, obj_scale: f64) -> KktResiduals {
        let grad = (&self.h * x + &self.f) / obj_scale;
        let stat = grad - self.a.transpose() * y / obj_scale - self.c.transpose() * z / obj_scale;
        let eq = if self.a.nrows() > 0 { (&self.a * x - &self.b).amax() } else { 0.0 };
        let slack = &self.c * x - &self.d;
        let ineq = slack.iter().fold(0.0_f64, |m, &s| m.max(-s));
        let comp = slack.iter().zip(z.iter()).fold(0.0_f64, |m, (&s, &zi)| m.max((zi / obj_scale * s).abs()));
        KktResiduals { stationarity: stat.amax(), primal: eq.max(ineq), complementarity: comp }
    }
}

/// Removes dependent equality rows; returns the reduced system, the map `y = U y'` back
/// to original multipliers, or an infeasibility certificate.
fn reduce_equalities(a: &DMatrix<f64>, b: &DVector<f64>) -> std::result::Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>), DVector<f64>> {
    let (me, n) = a.shape();
    if me == 0 {
        return Ok((DMatrix::zeros(0, n), DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let s = &svd.singular_values;
    let smax = s.iter().cloned().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..s.len()).filter(|&i| s[i] > 1e-10 * smax.max(f64::MIN_POSITIVE) && smax > 0.0).collect();
    let ur = u.select_columns(keep.iter());
    let b_perp = b - &ur * (ur.transpose() * b);
    if b_perp.amax() > 1e-9 * (1.0 + b.amax()) {
        return Err(&b_perp / b_perp.norm());
    }
    let ar = DMatrix::from_fn(keep.len(), n, |i, j| s[keep[i]] * vt[(keep[i], j)]);
    let br = ur.transpose() * b;
    Ok((ar, br, ur))
}

/// Ruiz equilibration: `x = D x̃`, rows of `A`, `C` scaled by `E`, objective by `cost`.
struct Scaling {
    d: DVector<f64>,
    e_a: DVector<f64>,
    e_c: DVector<f64>,
    cost: f64,
}

fn equilibrate(p: &mut Standard) -> Scaling {
    let n = p.n();
    let (ma, mc) = (p.a.nrows(), p.c.nrows());
    let mut sc = Scaling { d: DVector::from_element(n, 1.0), e_a: DVector::from_element(ma, 1.0), e_c: DVector::from_element(mc, 1.0), cost: 1.0 };
    let inv_sqrt = |v: f64| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 };
    for _ in 0..25 {
        let mut dn = DVector::zeros(n);
        for j in 0..n {
            let mut m = p.h.column(j).amax();
            if ma > 0 {
                m = m.max(p.a.column(j).amax());
            }
            if mc > 0 {
                m = m.max(p.c.column(j).amax());
            }
            dn[j] = inv_sqrt(m);
        }
        let ea = DVector::from_fn(ma, |i, _| inv_sqrt(p.a.row(i).amax()));
        let ec = DVector::from_fn(mc, |i, _| inv_sqrt(p.c.row(i).amax()));
        for j in 0..n {
            for i in 0..n {
                p.h[(i, j)] *= dn[i] * dn[j];
            }
            p.f[j] *= dn[j];
            for i in 0..ma {
                p.a[(i, j)] *= ea[i] * dn[j];
            }
            for i in 0..mc {
                p.c[(i, j)] *= ec[i] * dn[j];
            }
        }
        p.b.component_mul_assign(&ea);
        p.d.component_mul_assign(&ec);
        sc.d.component_mul_assign(&dn);
        sc.e_a.component_mul_assign(&ea);
        sc.e_c.component_mul_assign(&ec);
    }
    let hmean = if n > 0 { (0..n).map(|j| p.h.column(j).amax()).sum::<f64>() / n as f64 } else { 0.0 };
    let scale = hmean.max(p.f.amax());
    sc.cost = if scale > 1e-12 { 1.0 / scale } else { 1.0 };
    p.h *= sc.cost;
    p.f *= sc.cost;
    sc
}

struct IpmResult {
    x: DVector<f64>,
    y: DVector<f64>,
    z: DVector<f64>,
    iterations: usize,
}

const REG: f64 = 1e-10;

/// LU factors of the saddle matrix `[[K, Aᵀ], [A, 0]]` with light regularization;
/// solves apply two rounds of iterative refinement against the exact matrix.
struct Saddle {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    exact: DMatrix<f64>,
    n: usize,
}

impl Saddle {
    fn factor(k: &DMatrix<f64>, a: &DMatrix<f64>) -> Self {
        let (n, m) = (k.nrows(), a.nrows());
        let mut kkt = DMatrix::zeros(n + m, n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(k);
        kkt.view_mut((0, n), (n, m)).copy_from(&a.transpose());
        kkt.view_mut((n, 0), (m, n)).copy_from(a);
        let exact = kkt.clone();
        for i in 0..n {
            kkt[(i, i)] += REG;
        }
        for i in n..n + m {
            kkt[(i, i)] -= REG;
        }
        Self { lu: kkt.lu(), exact, n }
    }

    fn solve(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let (n, m) = (self.n, r2.len());
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(r1);
        rhs.rows_mut(n, m).copy_from(r2);
        let mut sol = self.lu.solve(&rhs)?;
        for _ in 0..2 {
            let res = &rhs - &self.exact * &sol;
            sol += self.lu.solve(&res)?;
        }
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
    }
}

fn solve_saddle(k: &DMatrix<f64>, a: &DMatrix<f64>, r1: &DVector<f64>, r2: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    Saddle::factor(k, a).solve(r1, r2)
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut a = 1.0_f64;
    for (x, d) in v.iter().zip(dv.iter()) {
        if *d < 0.0 {
            a = a.min(-x / d);
        }
    }
    a
}

fn ipm(p: &Standard, opts: &SolveOptions) -> IpmResult {
    let n = p.n();
    let (me, m) = (p.a.nrows(), p.c.nrows());
    let fail = |x: DVector<f64>| IpmResult { x, y: DVector::zeros(me), z: DVector::zeros(m), iterations: 0 };
    // start: minimize the objective plus ½‖Cx − d‖² on the equality set
    let k0 = &p.h + p.c.transpose() * &p.c + DMatrix::identity(n, n) * 1e-8;
    let Some((x0, _)) = solve_saddle(&k0, &p.a, &(p.c.transpose() * &p.d - &p.f), &p.b) else {
        return fail(DVector::zeros(n));
    };
    let mut x = x0;
    let mut y = DVector::zeros(me);
    let r0 = &p.c * &x - &p.d;
    let mut s = r0.map(|v| v.max(1.0));
    let mut z = DVector::from_element(m, 1.0);
    let amax = |v: &DVector<f64>| if v.is_empty() { 0.0 } else { v.amax() };
    // best iterate by relative residual, returned if later steps lose accuracy
    let mut best: Option<(f64, IpmResult)> = None;
    for it in 0..opts.max_iter {
        let (hx, aty, ctz) = (&p.h * &x, p.a.transpose() * &y, p.c.transpose() * &z);
        let rd = &hx + &p.f - &aty - &ctz;
        let rp = &p.a * &x - &p.b;
        let cx = &p.c * &x;
        let ri = &cx - &s - &p.d;
        let mu = if m > 0 { s.dot(&z) / m as f64 } else { 0.0 };
        // residuals relative to the size of the terms they balance
        let e_d = amax(&rd) / (1.0 + amax(&hx).max(amax(&p.f)).max(amax(&aty)).max(amax(&ctz)));
        let e_p = amax(&rp) / (1.0 + amax(&p.b).max(amax(&(&p.a * &x))));
        let e_i = amax(&ri) / (1.0 + amax(&p.d).max(amax(&cx)));
        let e_c = mu / (1.0 + amax(&z).max(1.0));
        let err = e_d.max(e_p).max(e_i).max(e_c);
        if !err.is_finite() {
            break;
        }
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, IpmResult { x: x.clone(), y: y.clone(), z: z.clone(), iterations: it }));
        }
        if err <= opts.tol {
            break;
        }
        if x.amax() > 1e12 || z.iter().any(|v| *v > 1e14) {
            break;
        }
        let w = z.component_div(&s);
        let mut k = p.h.clone();
        if m > 0 {
            let wc = DMatrix::from_fn(m, n, |i, j| w[i] * p.c[(i, j)]);
            k += p.c.transpose() * wc;
        }
        let saddle = Saddle::factor(&k, &p.a);
        let direction = |rc: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            let t = rc.component_div(&s) - w.component_mul(&ri);
            let r1 = -&rd + p.c.transpose() * &t;
            let (dx, tt) = saddle.solve(&r1, &(-&rp))?;
            let ds = &p.c * &dx + &ri;
            let dz = (rc - z.component_mul(&ds)).component_div(&s);
            Some((dx, -tt, dz, ds))
        };
        let rc_aff = -s.component_mul(&z);
        let Some((_, _, dz_a, ds_a)) = direction(&rc_aff) else {
            break;
        };
        let a_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a));
        let mu_aff = if m > 0 { (&s + &ds_a * a_aff).dot(&(&z + &dz_a * a_aff)) / m as f64 } else { 0.0 };
        let sigma = if mu > 0.0 { (mu_aff / mu).powi(3).min(1.0) } else { 0.0 };
        let rc = rc_aff - ds_a.component_mul(&dz_a) + DVector::from_element(m, sigma * mu);
        let Some((dx, dy, dz, ds)) = direction(&rc) else {
            break;
        };
        let alpha = if m > 0 { (0.99 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0) } else { 1.0 };
        x += &dx * alpha;
        y += &dy * alpha;
        z += &dz * alpha;
        s += &ds * alpha;
        // keep strictly interior after rounding
        s.apply(|v| *v = v.max(1e-300));
        z.apply(|v| *v = v.max(1e-300));
    }
    match best {
        Some((_, r)) => r,
        None => IpmResult { x, y, z, iterations: opts.max_iter },
    }
}

/// Re-solves the equality-constrained problem on the apparent active set for a
/// high-accuracy point; returns `None` when the guess is inconsistent.
fn polish(p: &Standard, x: &DVector<f64>, z: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n = p.n();
    let slack = &p.c * x - &p.d;
    let active: Vec<usize> = (0..p.c.nrows()).filter(|&i| z[i] > slack[i].max(0.0)).collect();
    let me = p.a.nrows();
    let mut ae = DMatrix::zeros(me + active.len(), n);
    let mut be = DVector::zeros(me + active.len());
    ae.rows_mut(0, me).copy_from(&p.a);
    be.rows_mut(0, me).copy_from(&p.b);
    for (k, &i) in active.iter().enumerate() {
        ae.row_mut(me + k).copy_from(&p.c.row(i));
        be[me + k] = p.d[i];
    }
    let (xp, t) = solve_saddle(&p.h, &ae, &(-&p.f), &be)?;
    let mult = -t;
    let y = mult.rows(0, me).into_owned();
    let mut zp = DVector::zeros(p.c.nrows());
    for (k, &i) in active.iter().enumerate() {
        zp[i] = mult[me + k];
    }
    Some((xp, y, zp))
}

fn unscale(sc: &Scaling, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    (x.component_mul(&sc.d), y.component_mul(&sc.e_a) / sc.cost, z.component_mul(&sc.e_c) / sc.cost)
}

pub fn solve(p: &QpProblem, opts: &SolveOptions) -> Result<QpSolution> {
    let start = Instant::now();
    p.validate()?;
    let orig = Standard::from_problem(p);
    let obj_scale = hessian_scale(&p.h);
    let finish = |x: DVector<f64>, status, kkt, iterations, certificate| QpSolution {
        objective: p.objective(&x),
        x,
        status,
        kkt,
        iterations,
        solve_time: start.elapsed(),
        certificate,
    };
    let (a_red, b_red, u_map) = match reduce_equalities(&orig.a, &orig.b) {
        Ok(r) => r,
        Err(y) => {
            return Ok(finish(DVector::zeros(p.n()), QpStatus::Infeasible, KktResiduals::default(), 0, Some(Infeasibility::Equality { y })));
        }
    };
    let reduced = Standard { a: a_red, b: b_red, ..orig.clone() };
    let mut scaled = reduced.clone();
    let sc = equilibrate(&mut scaled);
    let res = ipm(&scaled, opts);
    let (mut x, y_red, mut z) = unscale(&sc, &res.x, &res.y, &res.z);
    let map_y = |y_red: &DVector<f64>| if u_map.ncols() > 0 { &u_map * y_red } else { DVector::zeros(orig.a.nrows()) };
    let mut y = map_y(&y_red);
    let mut kkt = orig.residuals(&x, &y, &z.map(|v| v.max(0.0)), obj_scale);
    if let Some((xp, yp_red, zp)) = polish(&reduced, &x, &z) {
        let yp = map_y(&yp_red);
        let k2 = orig.residuals(&xp, &yp, &zp, obj_scale);
        let dual_ok = zp.iter().all(|&v| v >= -CERT_TOL * obj_scale);
        if dual_ok && k2.max() < kkt.max() {
            x = xp;
            y = yp;
            z = zp.map(|v| v.max(0.0));
            kkt = orig.residuals(&x, &y, &z, obj_scale);
        }
    }
    let _ = &y;
    if kkt.max() <= CERT_TOL {
        return Ok(finish(x, QpStatus::Optimal, kkt, res.iterations, None));
    }
    // failed to certify: decide between infeasible and slow convergence
    if let Some(violation) = elastic_violation(&reduced, opts) {
        let tol = CERT_TOL * (1.0 + if orig.d.is_empty() { 0.0 } else { orig.d.amax() });
        if violation > tol {
            return Ok(finish(x, QpStatus::Infeasible, kkt, res.iterations, Some(Infeasibility::Elastic { violation })));
        }
    }
    Ok(finish(x, QpStatus::MaxIter, kkt, res.iterations, None))
}

/// `min Σ t` subject to `A x = b`, `C x + t ≥ d`, `t ≥ 0`.
fn elastic_violation(p: &Standard, opts: &SolveOptions) -> Option<f64> {
    let (n, m) = (p.n(), p.c.nrows());
    if m == 0 {
        return Some(0.0);
    }
    let nn = n + m;
    let mut h = DMatrix::zeros(nn, nn);
    for i in 0..n {
        h[(i, i)] = 1e-8;
    }
    let mut f = DVector::zeros(nn);
    f.rows_mut(n, m).fill(1.0);
    let mut a = DMatrix::zeros(p.a.nrows(), nn);
    a.columns_mut(0, n).copy_from(&p.a);
    let mut c = DMatrix::zeros(2 * m, nn);
    c.view_mut((0, 0), (m, n)).copy_from(&p.c);
    let mut d = DVector::zeros(2 * m);
    for i in 0..m {
        c[(i, n + i)] = 1.0;
        c[(m + i, n + i)] = 1.0;
        d[i] = p.d[i];
    }
    let mut ph1 = Standard { h, f, a, b: p.b.clone(), c, d };
    let sc = equilibrate(&mut ph1);
    let r = ipm(&ph1, &SolveOptions { max_iter: opts.max_iter.max(100), ..*opts });
    let x = r.x.component_mul(&sc.d);
    let slack = &p.c * x.rows(0, n) - &p.d;
    let viol = slack.iter().map(|s| (-s).max(0.0)).sum::<f64>();
    if viol.is_finite() {
        Some(viol)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn active_lower_bound() {
        let p = QpProblem::new(DMatrix::from_element(1, 1, 2.0), col(&[0.0])).with_bounds(col(&[1.0]), col(&[f64::INFINITY]));
        let s = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn projection_onto_hyperplane() {
        let a = col(&[3.0, -1.0, 2.0, 0.5]);
        let p = QpProblem::new(DMatrix::identity(4, 4) * 2.0, -&a * 2.0).with_eq(DMatrix::from_element(1, 4, 1.0), col(&[0.0]));
        let s = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        let expected = a.add_scalar(-a.mean());
        assert!((s.x - expected).amax() < 1e-10);
    }

    #[test]
    fn dependent_equalities_are_tolerated() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 1.0, -1.0]);
        let p = QpProblem::new(DMatrix::identity(2, 2), col(&[0.0, 0.0])).with_eq(a, col(&[1.0, 2.0, 0.0]));
        let s = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x - col(&[0.5, 0.5])).amax() < 1e-10);
    }

    #[test]
    fn inconsistent_equalities_are_certified() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = QpProblem::new(DMatrix::identity(2, 2), col(&[0.0, 0.0])).with_eq(a.clone(), col(&[1.0, 2.0]));
        let s = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
        match s.certificate {
            Some(Infeasibility::Equality { y }) => {
                assert!((a.transpose() * &y).amax() < 1e-12);
                assert!(y.dot(&col(&[1.0, 2.0])) > 0.0);
            }
            other => panic!("unexpected certificate {other:?}"),
        }
    }

    #[test]
    fn conflicting_inequalities_are_infeasible() {
        // x1 + x2 ≥ 3 with both in [0, 1]
        let p = QpProblem::new(DMatrix::identity(2, 2), col(&[0.0, 0.0]))
            .with_ineq(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), col(&[3.0]), col(&[f64::INFINITY]))
            .with_bounds(col(&[0.0, 0.0]), col(&[1.0, 1.0]));
        let s = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
        match s.certificate {
            Some(Infeasibility::Elastic { violation }) => assert!((violation - 1.0).abs() < 1e-4),
            other => panic!("unexpected certificate {other:?}"),
        }
    }

    #[test]
    fn degenerate_box_fixes_variable() {
        let p = QpProblem::new(DMatrix::identity(2, 2), col(&[5.0, -5.0])).with_bounds(col(&[0.3, -1.0]), col(&[0.3, 1.0]));
        let s = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 0.3).abs() < 1e-12);
        assert!((s.x[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn validation_errors() {
        let bad = QpProblem::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]), col(&[0.0, 0.0]));
        assert_eq!(solve(&bad, &SolveOptions::default()).unwrap_err(), QpError::NotSymmetric);
        let indef = QpProblem::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]), col(&[0.0, 0.0]));
        assert_eq!(solve(&indef, &SolveOptions::default()).unwrap_err(), QpError::NotPsd);
        let dims = QpProblem::new(DMatrix::identity(2, 2), col(&[0.0]));
        assert!(matches!(solve(&dims, &SolveOptions::default()), Err(QpError::DimensionMismatch(_))));
        let bounds = QpProblem::new(DMatrix::identity(1, 1), col(&[0.0])).with_bounds(col(&[1.0]), col(&[0.0]));
        assert!(matches!(solve(&bounds, &SolveOptions::default()), Err(QpError::InvalidBounds(_))));
    }

    #[test]
    fn badly_scaled_slack_problem() {
        // huge penalty on one block, tiny on the other: the online problem's shape
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 6;
        let mut h = DMatrix::zeros(n + 2, n + 2);
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        h.view_mut((0, 0), (n, n)).copy_from(&(m.transpose() * &m * 2.0 + DMatrix::identity(n, n) * 2e-8));
        h[(n, n)] = 1e11;
        h[(n + 1, n + 1)] = 1e11;
        let f = DVector::from_fn(n + 2, |i, _| if i < n { rng.random_range(-1.0..1.0) } else { 0.0 });
        let mut a = DMatrix::from_fn(2, n + 2, |_, j| if j < n { rng.random_range(-1.0..1.0) } else { 0.0 });
        a[(0, n)] = -1.0;
        a[(1, n + 1)] = -1.0;
        let p = QpProblem::new(h, f).with_eq(a, col(&[0.3, -0.2])).with_bounds(DVector::from_element(n + 2, -5.0), DVector::from_element(n + 2, 5.0));
        let s = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal, "{:?}", s.kkt);
        assert!(s.x[n].abs() < 1e-8 && s.x[n + 1].abs() < 1e-8);
    }

    #[test]
    fn deterministic() {
        let p = QpProblem::new(DMatrix::identity(3, 3), col(&[1.0, -2.0, 0.5])).with_bounds(DVector::zeros(3), DVector::from_element(3, 1.0));
        let a = solve(&p, &SolveOptions::default()).unwrap();
        let b = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.kkt, b.kkt);
    }
}
