//! Quadratic economic-cost surrogate and linear output reconstruction.
//!
//! `c(z, v) = zᵀQ_z z + P_z z + b_z + vᵀQ_v v + P_v v + b_v` with
//! `Q = diag(exp(q))`, and constrained outputs are reconstructed as `G z`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite cost parameter")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, CostError>;

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(CostError::DimensionMismatch(format!("{what}: length {got}, expected {want}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EconCostModel {
    pub q_z: DVector<f64>,
    pub p_z: DVector<f64>,
    pub b_z: f64,
    pub q_v: DVector<f64>,
    pub p_v: DVector<f64>,
    pub b_v: f64,
    /// `n_c x n_z` reconstruction matrix.
    pub g: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostEval {
    pub value: f64,
    pub grad_z: DVector<f64>,
    pub grad_v: DVector<f64>,
}

impl EconCostModel {
    /// `Q = I`, everything else zero.
    pub fn new(n_z: usize, n_v: usize, n_c: usize) -> Self {
        Self {
            q_z: DVector::zeros(n_z),
            p_z: DVector::zeros(n_z),
            b_z: 0.0,
            q_v: DVector::zeros(n_v),
            p_v: DVector::zeros(n_v),
            b_v: 0.0,
            g: DMatrix::zeros(n_c, n_z),
        }
    }

    /// Warm start: `b_z` = mean training cost and `G` fitted by least squares on `z_feats -> y_c`.
    pub fn initialize(z_feats: &DMatrix<f64>, y_c: &DMatrix<f64>, n_v: usize, cost_mean: f64) -> Result<Self> {
        if z_feats.nrows() != y_c.nrows() {
            return Err(CostError::DimensionMismatch("feature and output row counts differ".into()));
        }
        let mut m = Self::new(z_feats.ncols(), n_v, y_c.ncols());
        m.b_z = cost_mean;
        if y_c.ncols() > 0 && z_feats.ncols() > 0 {
            m.g = linalg::lstsq(z_feats, y_c).transpose();
        }
        m.validate()?;
        Ok(m)
    }

    pub fn n_z(&self) -> usize {
        self.q_z.len()
    }

    pub fn n_v(&self) -> usize {
        self.q_v.len()
    }

    pub fn n_c(&self) -> usize {
        self.g.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        check_len("P_z", self.p_z.len(), self.n_z())?;
        check_len("P_v", self.p_v.len(), self.n_v())?;
        check_len("G columns", self.g.ncols(), self.n_z())?;
        if !self.to_flat().iter().all(|v| v.is_finite()) {
            return Err(CostError::NonFinite);
        }
        Ok(())
    }

    /// Diagonal of `Q_z`.
    pub fn qz_diag(&self) -> DVector<f64> {
        self.q_z.map(f64::exp)
    }

    /// Diagonal of `Q_v`.
    pub fn qv_diag(&self) -> DVector<f64> {
        self.q_v.map(f64::exp)
    }

    pub fn eval_cost(&self, z: &DVector<f64>, v: &DVector<f64>) -> Result<CostEval> {
        check_len("z", z.len(), self.n_z())?;
        check_len("v", v.len(), self.n_v())?;
        let qz = self.qz_diag();
        let qv = self.qv_diag();
        let value = z.dot(&qz.component_mul(z)) + self.p_z.dot(z) + self.b_z + v.dot(&qv.component_mul(v)) + self.p_v.dot(v)
            + self.b_v;
        Ok(CostEval {
            value,
            grad_z: qz.component_mul(z) * 2.0 + &self.p_z,
            grad_v: qv.component_mul(v) * 2.0 + &self.p_v,
        })
    }

    /// Costs for each row of `z` (`N x n_z`) and `v` (`N x n_v`).
    pub fn eval_batch(&self, z: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DVector<f64>> {
        check_len("z columns", z.ncols(), self.n_z())?;
        check_len("v columns", v.ncols(), self.n_v())?;
        check_len("v rows", v.nrows(), z.nrows())?;
        let qz = self.qz_diag();
        let qv = self.qv_diag();
        Ok(DVector::from_fn(z.nrows(), |r, _| {
            let mut c = self.b_z + self.b_v;
            for i in 0..z.ncols() {
                let x = z[(r, i)];
                c += qz[i] * x * x + self.p_z[i] * x;
            }
            for i in 0..v.ncols() {
                let x = v[(r, i)];
                c += qv[i] * x * x + self.p_v[i] * x;
            }
            c
        }))
    }

    pub fn reconstruct_output(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("z", z.len(), self.n_z())?;
        Ok(&self.g * z)
    }

    /// Stage cost data with `Q`, `P`, `b` materialized.
    pub fn stage_cost(&self) -> StageCost {
        StageCost {
            qz: self.qz_diag(),
            pz: self.p_z.clone(),
            qv: self.qv_diag(),
            pv: self.p_v.clone(),
            constant: self.b_z + self.b_v,
        }
    }

    /// Horizon-stacked form of the surrogate scaled by `lambda`.
    pub fn quad_form_matrices(&self, n_p: usize, lambda: f64) -> HorizonCost {
        self.stage_cost().horizon(n_p, lambda)
    }

    pub fn num_params(&self) -> usize {
        2 * self.n_z() + 2 * self.n_v() + 2 + self.g.len()
    }

    /// Parameters in the order `q_z, P_z, b_z, q_v, P_v, b_v, G` (column-major).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(self.q_z.iter());
        out.extend(self.p_z.iter());
        out.push(self.b_z);
        out.extend(self.q_v.iter());
        out.extend(self.p_v.iter());
        out.push(self.b_v);
        out.extend(self.g.iter());
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("flat parameters", flat.len(), self.num_params())?;
        let (nz, nv) = (self.n_z(), self.n_v());
        let mut off = 0;
        let mut take = |n: usize| {
            let s = &flat[off..off + n];
            off += n;
            s
        };
        self.q_z.as_mut_slice().copy_from_slice(take(nz));
        self.p_z.as_mut_slice().copy_from_slice(take(nz));
        self.b_z = take(1)[0];
        self.q_v.as_mut_slice().copy_from_slice(take(nv));
        self.p_v.as_mut_slice().copy_from_slice(take(nv));
        self.b_v = take(1)[0];
        let ng = self.g.len();
        self.g.as_mut_slice().copy_from_slice(take(ng));
        Ok(())
    }

    /// Gradient of `Σ_r w_r c(z_r, v_r)` with respect to the flat cost parameters
    /// (the `G` block is left at zero).
    pub fn cost_param_grad(&self, z: &DMatrix<f64>, v: &DMatrix<f64>, w: &DVector<f64>) -> Vec<f64> {
        let (nz, nv) = (self.n_z(), self.n_v());
        let qz = self.qz_diag();
        let qv = self.qv_diag();
        let mut g = vec![0.0; self.num_params()];
        let o_bz = 2 * nz;
        let o_qv = o_bz + 1;
        let o_pv = o_qv + nv;
        let o_bv = o_pv + nv;
        for r in 0..z.nrows() {
            let wr = w[r];
            for i in 0..nz {
                let x = z[(r, i)];
                g[i] += wr * qz[i] * x * x;
                g[nz + i] += wr * x;
            }
            g[o_bz] += wr;
            for i in 0..nv {
                let x = v[(r, i)];
                g[o_qv + i] += wr * qv[i] * x * x;
                g[o_pv + i] += wr * x;
            }
            g[o_bv] += wr;
        }
        g
    }

    /// Offset of the `G` block inside the flat parameter vector.
    pub fn g_offset(&self) -> usize {
        2 * self.n_z() + 2 * self.n_v() + 2
    }
}

/// Separable quadratic stage cost `zᵀdiag(qz)z + pz·z + vᵀdiag(qv)v + pv·v + constant`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageCost {
    pub qz: DVector<f64>,
    pub pz: DVector<f64>,
    pub qv: DVector<f64>,
    pub pv: DVector<f64>,
    pub constant: f64,
}

impl StageCost {
    /// `‖z − z_ref‖²_T` written as a stage cost in `z` only.
    pub fn tracking(t_diag: &DVector<f64>, z_ref: &DVector<f64>) -> Self {
        Self {
            qz: t_diag.clone(),
            pz: -2.0 * t_diag.component_mul(z_ref),
            qv: DVector::zeros(0),
            pv: DVector::zeros(0),
            constant: z_ref.dot(&t_diag.component_mul(z_ref)),
        }
    }

    pub fn n_z(&self) -> usize {
        self.qz.len()
    }

    pub fn n_v(&self) -> usize {
        self.qv.len()
    }

    pub fn value(&self, z: &DVector<f64>, v: &DVector<f64>) -> f64 {
        z.dot(&self.qz.component_mul(z)) + self.pz.dot(z) + v.dot(&self.qv.component_mul(v)) + self.pv.dot(v) + self.constant
    }

    /// Stacked over `n_p` steps in the variable `[ẑ_1..ẑ_Np, v̂_1..v̂_Np]`, scaled by `lambda`.
    pub fn horizon(&self, n_p: usize, lambda: f64) -> HorizonCost {
        let (nz, nv) = (self.n_z(), self.n_v());
        let mut hess_diag = DVector::zeros(n_p * (nz + nv));
        let mut linear = DVector::zeros(n_p * (nz + nv));
        for j in 0..n_p {
            for i in 0..nz {
                hess_diag[j * nz + i] = lambda * self.qz[i];
                linear[j * nz + i] = lambda * self.pz[i];
            }
            for i in 0..nv {
                hess_diag[n_p * nz + j * nv + i] = lambda * self.qv[i];
                linear[n_p * nz + j * nv + i] = lambda * self.pv[i];
            }
        }
        HorizonCost { n_p, n_z: nz, n_v: nv, hess_diag, linear, constant: n_p as f64 * lambda * self.constant }
    }
}

/// `value(x) = xᵀ diag(hess_diag) x + linearᵀ x + constant` over `x = [ẑ; v̂]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HorizonCost {
    pub n_p: usize,
    pub n_z: usize,
    pub n_v: usize,
    pub hess_diag: DVector<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
}

impl HorizonCost {
    pub fn hessian(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.hess_diag)
    }

    pub fn value(&self, z_hat: &DVector<f64>, v_hat: &DVector<f64>) -> f64 {
        let x = DVector::from_iterator(z_hat.len() + v_hat.len(), z_hat.iter().chain(v_hat.iter()).cloned());
        x.dot(&self.hess_diag.component_mul(&x)) + self.linear.dot(&x) + self.constant
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(rng: &mut ChaCha8Rng, nz: usize, nv: usize, nc: usize) -> EconCostModel {
        let mut m = EconCostModel::new(nz, nv, nc);
        let flat: Vec<f64> = (0..m.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        m.set_flat(&flat).unwrap();
        m
    }

    fn rvec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn identity_quadratic_examples() {
        let m = EconCostModel::new(3, 2, 1);
        assert_eq!(m.eval_cost(&DVector::zeros(3), &DVector::zeros(2)).unwrap().value, 0.0);
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert_eq!(m.eval_cost(&e1, &DVector::zeros(2)).unwrap().value, 1.0);
        assert!(m.eval_cost(&DVector::zeros(2), &DVector::zeros(2)).is_err());
    }

    #[test]
    fn matches_dense_recomputation_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_model(&mut rng, 4, 3, 2);
        let (z, v) = (rvec(&mut rng, 4), rvec(&mut rng, 3));
        let e = m.eval_cost(&z, &v).unwrap();
        let qz = DMatrix::from_diagonal(&m.q_z.map(f64::exp));
        let qv = DMatrix::from_diagonal(&m.q_v.map(f64::exp));
        let dense = (z.transpose() * &qz * &z)[(0, 0)]
            + (m.p_z.transpose() * &z)[(0, 0)]
            + m.b_z
            + (v.transpose() * &qv * &v)[(0, 0)]
            + (m.p_v.transpose() * &v)[(0, 0)]
            + m.b_v;
        assert!((e.value - dense).abs() < 1e-12);
        assert_eq!(e.grad_z, qz * &z * 2.0 + &m.p_z);

        let h = 1e-6;
        for i in 0..4 {
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let fd = (m.eval_cost(&zp, &v).unwrap().value - m.eval_cost(&zm, &v).unwrap().value) / (2.0 * h);
            assert!((fd - e.grad_z[i]).abs() < 1e-6);
        }
        for i in 0..3 {
            let mut vp = v.clone();
            vp[i] += h;
            let mut vm = v.clone();
            vm[i] -= h;
            let fd = (m.eval_cost(&z, &vp).unwrap().value - m.eval_cost(&z, &vm).unwrap().value) / (2.0 * h);
            assert!((fd - e.grad_v[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_model(&mut rng, 3, 2, 1);
        let z = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let v = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        let b = m.eval_batch(&z, &v).unwrap();
        for r in 0..5 {
            let single = m.eval_cost(&z.row(r).transpose(), &v.row(r).transpose()).unwrap().value;
            assert!((single - b[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_model(&mut rng, 3, 2, 1);
        let z = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let v = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let w = rvec(&mut rng, 4);
        let g = m.cost_param_grad(&z, &v, &w);
        let flat = m.to_flat();
        let obj = |p: &[f64]| {
            let mut mm = m.clone();
            mm.set_flat(p).unwrap();
            mm.eval_batch(&z, &v).unwrap().dot(&w)
        };
        for i in 0..m.g_offset() {
            let mut p = flat.clone();
            p[i] += 1e-6;
            let fp = obj(&p);
            p[i] -= 2e-6;
            let fd = (fp - obj(&p)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6, "param {i}");
        }
    }

    #[test]
    fn reconstruction_examples() {
        let mut m = EconCostModel::new(3, 0, 2);
        let z = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(m.reconstruct_output(&z).unwrap(), DVector::zeros(2));
        m.g = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(m.reconstruct_output(&z).unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn least_squares_reconstruction_is_exact_for_linear_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = DMatrix::from_fn(50, 4, |_, _| rng.random_range(-1.0..1.0));
        let g_true = DMatrix::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0));
        let yc = &z * g_true.transpose();
        let m = EconCostModel::initialize(&z, &yc, 1, 0.5).unwrap();
        let mse = (&z * m.g.transpose() - &yc).norm_squared() / 100.0;
        assert!(mse < 1e-6);
        assert_eq!(m.b_z, 0.5);
    }

    #[test]
    fn horizon_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_model(&mut rng, 2, 1, 1);
        let h1 = m.quad_form_matrices(1, 1.0);
        assert_eq!(h1.hess_diag.as_slice(), &[m.qz_diag()[0], m.qz_diag()[1], m.qv_diag()[0]]);
        let h0 = m.quad_form_matrices(3, 0.0);
        assert!(h0.hess_diag.iter().chain(h0.linear.iter()).all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn horizon_equals_sum_of_stages(seed in 0u64..1000, n_p in 1usize..5, lambda in 0.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_model(&mut rng, 3, 2, 1);
            let zs: Vec<_> = (0..n_p).map(|_| rvec(&mut rng, 3)).collect();
            let vs: Vec<_> = (0..n_p).map(|_| rvec(&mut rng, 2)).collect();
            let direct: f64 = zs.iter().zip(&vs).map(|(z, v)| m.eval_cost(z, v).unwrap().value).sum::<f64>() * lambda;
            let zh = DVector::from_iterator(3 * n_p, zs.iter().flat_map(|z| z.iter().cloned()));
            let vh = DVector::from_iterator(2 * n_p, vs.iter().flat_map(|v| v.iter().cloned()));
            let stacked = m.quad_form_matrices(n_p, lambda).value(&zh, &vh);
            prop_assert!((stacked - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
        }

        #[test]
        fn cost_is_convex(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_model(&mut rng, 3, 2, 1);
            let (z1, v1, z2, v2) = (rvec(&mut rng, 3), rvec(&mut rng, 2), rvec(&mut rng, 3), rvec(&mut rng, 2));
            let mid = m.eval_cost(&((&z1 + &z2) * 0.5), &((&v1 + &v2) * 0.5)).unwrap().value;
            let avg = 0.5 * (m.eval_cost(&z1, &v1).unwrap().value + m.eval_cost(&z2, &v2).unwrap().value);
            prop_assert!(mid <= avg + 1e-12);
        }

        #[test]
        fn q_is_positive_definite(q in proptest::collection::vec(-30.0f64..30.0, 1..6)) {
            let mut m = EconCostModel::new(q.len(), 0, 0);
            m.q_z = DVector::from_vec(q.clone());
            let d = m.qz_diag();
            let min = q.iter().cloned().fold(f64::INFINITY, f64::min).exp();
            prop_assert!(d.iter().all(|&x| x > 0.0));
            prop_assert!((d.min() - min).abs() <= 1e-15 * min);
        }
    }
}
