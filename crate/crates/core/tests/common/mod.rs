#![allow(dead_code)]

use deeepc::qp::QpProblem;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn spectral_bound(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().max() * (1.0 + 1e-9)
}

/// Accelerated projected gradient with adaptive restart for `min ½xᵀQx + cᵀx` over a box.
fn fista(q: &DMatrix<f64>, c: &DVector<f64>, lb: &DVector<f64>, ub: &DVector<f64>, iters: usize, tol: f64) -> DVector<f64> {
    let n = c.len();
    let l = spectral_bound(q).max(1e-12);
    let clamp = |v: &mut DVector<f64>| {
        for i in 0..n {
            v[i] = v[i].clamp(lb[i], ub[i]);
        }
    };
    let obj = |x: &DVector<f64>, qx: &DVector<f64>| 0.5 * x.dot(qx) + c.dot(x);
    let mut x = DVector::zeros(n);
    clamp(&mut x);
    let mut y = x.clone();
    let mut xn = x.clone();
    let mut g = DVector::zeros(n);
    let mut qx = DVector::zeros(n);
    qx.gemv(1.0, q, &x, 0.0);
    let mut last = obj(&x, &qx);
    let mut t = 1.0_f64;
    let mut checkpoint = last;
    for k in 0..iters {
        g.gemv(1.0, q, &y, 0.0);
        g.axpy(1.0, c, 1.0);
        xn.copy_from(&y);
        xn.axpy(-1.0 / l, &g, 1.0);
        clamp(&mut xn);
        qx.gemv(1.0, q, &xn, 0.0);
        let cur = obj(&xn, &qx);
        if cur > last {
            if t == 1.0 {
                // a plain projected-gradient step no longer decreases the objective
                break;
            }
            // restart momentum
            t = 1.0;
            y.copy_from(&x);
            continue;
        }
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / tn;
        for i in 0..n {
            y[i] = xn[i] + beta * (xn[i] - x[i]);
        }
        std::mem::swap(&mut x, &mut xn);
        t = tn;
        last = cur;
        if k % 20 == 0 {
            // projected-gradient stationarity at x
            let mut pg = 0.0_f64;
            for i in 0..n {
                let gi = qx[i] + c[i];
                pg = pg.max((x[i] - (x[i] - gi / l).clamp(lb[i], ub[i])).abs());
            }
            if pg < tol * (1.0 + x.amax()) {
                break;
            }
        }
        if k % 2000 == 1999 {
            // stalled objective
            if checkpoint - last <= 1e-12 * (1.0 + last.abs()) {
                break;
            }
            checkpoint = last;
        }
    }
    x
}

/// Projected-gradient oracle for `min ½xᵀHx + fᵀx` on a box.
pub fn fista_box(h: &DMatrix<f64>, f: &DVector<f64>, lb: &DVector<f64>, ub: &DVector<f64>, iters: usize) -> DVector<f64> {
    fista(h, f, lb, ub, iters, 1e-9)
}

/// Optimal value of `min ½xᵀHx + fᵀx` s.t. `A x = b`, `C x ≥ d` with `H ≻ 0`, from
/// projected-gradient ascent on the dual (multipliers of `C` are sign-constrained).
pub fn fista_dual_value(h: &DMatrix<f64>, f: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>, c: &DMatrix<f64>, d: &DVector<f64>, iters: usize) -> f64 {
    let (me, mi) = (a.nrows(), c.nrows());
    let m = me + mi;
    let mut mm = DMatrix::zeros(m, f.len());
    mm.rows_mut(0, me).copy_from(a);
    mm.rows_mut(me, mi).copy_from(c);
    let mut r = DVector::zeros(m);
    r.rows_mut(0, me).copy_from(b);
    r.rows_mut(me, mi).copy_from(d);
    let hinv = h.clone().cholesky().expect("dual oracle needs H positive definite").inverse();
    // dual(w) = −½wᵀQw + wᵀ(M H⁻¹ f + r) − ½fᵀH⁻¹f
    let q = &mm * &hinv * mm.transpose();
    let lin = &mm * (&hinv * f) + &r;
    let offset = -0.5 * f.dot(&(&hinv * f));
    let lb = DVector::from_fn(m, |i, _| if i < me { f64::NEG_INFINITY } else { 0.0 });
    let ub = DVector::from_element(m, f64::INFINITY);
    // maximize the dual by minimizing ½wᵀQw − linᵀw
    let w = fista(&q, &(-&lin), &lb, &ub, iters, 1e-9);
    -0.5 * w.dot(&(&q * &w)) + lin.dot(&w) + offset
}

/// A random PSD matrix of size `n` and rank `k` plus a ridge `eps`.
pub fn random_psd(rng: &mut ChaCha8Rng, n: usize, k: usize, eps: f64) -> DMatrix<f64> {
    let b = DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0));
    b.transpose() * b + DMatrix::identity(n, n) * eps
}

pub struct RandomQp {
    pub problem: QpProblem,
    /// Reference optimal value from the first-order oracle.
    pub reference: f64,
}

/// Box-constrained QP with possibly singular `H`, checked by primal FISTA.
pub fn random_box_qp(rng: &mut ChaCha8Rng) -> RandomQp {
    let n = rng.random_range(2..=50);
    let k = rng.random_range(1..=n);
    let h = random_psd(rng, n, k, 0.0);
    let f = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let lb = DVector::from_fn(n, |_, _| rng.random_range(-2.0..0.0));
    let ub = DVector::from_fn(n, |i, _| lb[i] + rng.random_range(0.1..3.0));
    let x = fista_box(&h, &f, &lb, &ub, 400_000);
    let reference = 0.5 * x.dot(&(&h * &x)) + f.dot(&x);
    RandomQp { problem: QpProblem::new(h, f).with_bounds(lb, ub), reference }
}

/// Equality plus two-sided inequality constraints around a known feasible point,
/// checked by dual FISTA.
pub fn random_general_qp(rng: &mut ChaCha8Rng) -> RandomQp {
    let n = rng.random_range(3..=50);
    let me = rng.random_range(0..=n.min(5));
    let mi = rng.random_range(1..=(60 - me).min(2 * n));
    let h = random_psd(rng, n, n, 0.5);
    let f = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let a = DMatrix::from_fn(me, n, |_, _| rng.random_range(-1.0..1.0));
    let b = &a * &x0;
    let c = DMatrix::from_fn(mi, n, |_, _| rng.random_range(-1.0..1.0));
    let cx = &c * &x0;
    let mut lb = DVector::zeros(mi);
    let mut ub = DVector::zeros(mi);
    for i in 0..mi {
        lb[i] = if rng.random_bool(0.8) { cx[i] - rng.random_range(0.0..0.5) } else { f64::NEG_INFINITY };
        ub[i] = if rng.random_bool(0.8) { cx[i] + rng.random_range(0.0..0.5) } else { f64::INFINITY };
    }
    // one-sided rows for the oracle
    let mut rows = Vec::new();
    for i in 0..mi {
        if lb[i].is_finite() {
            rows.push((c.row(i).transpose(), lb[i]));
        }
        if ub[i].is_finite() {
            rows.push((-c.row(i).transpose(), -ub[i]));
        }
    }
    let cc = DMatrix::from_fn(rows.len(), n, |i, j| rows[i].0[j]);
    let dd = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let reference = fista_dual_value(&h, &f, &a, &b, &cc, &dd, 400_000);
    RandomQp { problem: QpProblem::new(h, f).with_eq(a, b).with_ineq(c, lb, ub), reference }
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}
