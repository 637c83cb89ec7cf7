//! Assembly of the regularized online problem over `x = [ḡ; σ_z]`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use super::QpProblem;
use crate::cost::{EconCostModel, StageCost};
use crate::hankel::{BlockSet, HankelBlocks};

#[derive(Debug, Error, PartialEq)]
pub enum AssemblyError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("initialization window for {0} is missing or has the wrong length")]
    MissingIni(&'static str),
}

pub type Result<T> = std::result::Result<T, AssemblyError>;

/// Stacked initialization windows (`T_ini` samples each, oldest first).
#[derive(Clone, Debug, PartialEq)]
pub struct IniData {
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    pub z: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OnlineWeights {
    pub lambda: f64,
    /// Diagonal of `R` for the input increments (length `n_u`).
    pub r_delta: Vec<f64>,
    pub beta_z: f64,
    pub beta_g: f64,
    /// Hard `Z̄_p ḡ = z_ini` instead of the penalized slack.
    pub no_slack: bool,
}

impl OnlineWeights {
    pub fn standard(n_u: usize) -> Self {
        Self { lambda: 1.0, r_delta: vec![1e-3; n_u], beta_z: 5e10, beta_g: 1e-8, no_slack: false }
    }
}

/// `‖û − u_ref‖²_R` over the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct InputTracking {
    pub r: DVector<f64>,
    pub u_ref: DVector<f64>,
}

/// Box on the input and on `G ẑ` at every predicted step. Infinite entries are dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct OnlineBounds {
    pub u_lb: DVector<f64>,
    pub u_ub: DVector<f64>,
    pub yc_lb: DVector<f64>,
    pub yc_ub: DVector<f64>,
}

impl OnlineBounds {
    pub fn unbounded(n_u: usize, n_c: usize) -> Self {
        Self {
            u_lb: DVector::from_element(n_u, f64::NEG_INFINITY),
            u_ub: DVector::from_element(n_u, f64::INFINITY),
            yc_lb: DVector::from_element(n_c, f64::NEG_INFINITY),
            yc_ub: DVector::from_element(n_c, f64::INFINITY),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeeepcQp {
    pub problem: QpProblem,
    pub n_g: usize,
    pub n_sigma: usize,
    /// Objective constant dropped from the QP (`value = objective(x) + constant`).
    pub constant: f64,
}

impl DeeepcQp {
    pub fn split(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (x.rows(0, self.n_g).into_owned(), x.rows(self.n_g, self.n_sigma).into_owned())
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.problem.objective(x) + self.constant
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputPlan {
    pub steps: Vec<DVector<f64>>,
}

impl InputPlan {
    /// The step that is applied to the plant.
    pub fn applied(&self) -> &DVector<f64> {
        &self.steps[0]
    }
}

/// `û = Ū_f ḡ` split into the `N_p` predicted inputs.
pub fn extract_input(blocks: &HankelBlocks, g: &DVector<f64>) -> Result<InputPlan> {
    let b = blocks.operator_blocks();
    if g.len() != b.operator_dim() {
        return Err(AssemblyError::DimensionMismatch(format!("g has {} entries, operator dim is {}", g.len(), b.operator_dim())));
    }
    let u = &b.uf * g;
    let n_u = blocks.n_u;
    Ok(InputPlan { steps: (0..blocks.n_p).map(|j| u.rows(j * n_u, n_u).into_owned()).collect() })
}

/// Six-block equality structure `[Ū_p; V̄_p; Z̄_p; Ū_f; V̄_f; Z̄_f]` with the slack columns
/// appended (`−I` on the z-past rows only).
pub fn stacked_constraint_matrix(blocks: &HankelBlocks) -> DMatrix<f64> {
    let b = blocks.operator_blocks();
    let stacked = b.stacked();
    let ns = b.zp.nrows();
    let ng = b.operator_dim();
    let mut out = DMatrix::zeros(stacked.nrows(), ng + ns);
    out.columns_mut(0, ng).copy_from(&stacked);
    let z_row = b.up.nrows() + b.vp.nrows();
    for i in 0..ns {
        out[(z_row + i, ng + i)] = -1.0;
    }
    out
}

/// The economic problem with the learned surrogate.
pub fn assemble_deeepc(blocks: &HankelBlocks, model: &EconCostModel, ini: &IniData, w: &OnlineWeights, bounds: &OnlineBounds) -> Result<DeeepcQp> {
    assemble(blocks, &model.stage_cost(), &model.g, ini, w, bounds, None)
}

/// General form: any separable stage cost on `(z, v)`, constraint map `G` on `z`,
/// optional input tracking term.
pub fn assemble(
    blocks: &HankelBlocks,
    stage: &StageCost,
    g_map: &DMatrix<f64>,
    ini: &IniData,
    w: &OnlineWeights,
    bounds: &OnlineBounds,
    tracking: Option<&InputTracking>,
) -> Result<DeeepcQp> {
    let b = blocks.operator_blocks();
    let (n_u, n_v, n_z, t_ini, n_p) = (blocks.n_u, blocks.n_v, blocks.n_z, blocks.t_ini, blocks.n_p);
    check_blocks(b, blocks)?;
    let mismatch = |what: String| Err(AssemblyError::DimensionMismatch(what));
    if stage.n_z() != n_z || stage.n_v() != n_v {
        return mismatch(format!("stage cost is ({}, {}), blocks are ({n_z}, {n_v})", stage.n_z(), stage.n_v()));
    }
    if g_map.ncols() != n_z {
        return mismatch(format!("G has {} columns, n_z = {n_z}", g_map.ncols()));
    }
    let n_c = g_map.nrows();
    if bounds.u_lb.len() != n_u || bounds.u_ub.len() != n_u || bounds.yc_lb.len() != n_c || bounds.yc_ub.len() != n_c {
        return mismatch("bounds".into());
    }
    if w.r_delta.len() != n_u {
        return mismatch(format!("R has {} entries, n_u = {n_u}", w.r_delta.len()));
    }
    if ini.u.len() != t_ini * n_u || ini.u.is_empty() {
        return Err(AssemblyError::MissingIni("u"));
    }
    if ini.v.len() != t_ini * n_v {
        return Err(AssemblyError::MissingIni("v"));
    }
    if ini.z.len() != t_ini * n_z {
        return Err(AssemblyError::MissingIni("z"));
    }

    let n_g = b.operator_dim();
    let n_sigma = if w.no_slack { 0 } else { t_ini * n_z };
    let n = n_g + n_sigma;

    // cost = ḡᵀ P ḡ + qᵀ ḡ + constant, then H = 2P
    let hc = stage.horizon(n_p, w.lambda);
    let mut m = DMatrix::zeros(n_p * (n_z + n_v), n_g);
    m.rows_mut(0, n_p * n_z).copy_from(&b.zf);
    m.rows_mut(n_p * n_z, n_p * n_v).copy_from(&b.vf);
    let hm = DMatrix::from_fn(m.nrows(), n_g, |i, j| hc.hess_diag[i] * m[(i, j)]);
    let mut p = m.transpose() * hm;
    let mut q = m.transpose() * &hc.linear;
    let mut constant = hc.constant;

    // Σ ‖û_j − û_{j−1}‖²_R with û_{−1} the last initialization input
    let mut du = b.uf.clone();
    for j in (1..n_p).rev() {
        let prev = b.uf.rows((j - 1) * n_u, n_u).into_owned();
        let mut cur = du.rows_mut(j * n_u, n_u);
        cur -= prev;
    }
    let mut e = DVector::zeros(n_p * n_u);
    e.rows_mut(0, n_u).copy_from(&ini.u.rows((t_ini - 1) * n_u, n_u));
    let r_stack = DVector::from_fn(n_p * n_u, |i, _| w.r_delta[i % n_u]);
    add_weighted_ls(&mut p, &mut q, &mut constant, &du, &e, &r_stack);
    if let Some(t) = tracking {
        if t.r.len() != n_u || t.u_ref.len() != n_p * n_u {
            return mismatch("input tracking".into());
        }
        let r_stack = DVector::from_fn(n_p * n_u, |i, _| t.r[i % n_u]);
        add_weighted_ls(&mut p, &mut q, &mut constant, &b.uf, &t.u_ref, &r_stack);
    }
    for i in 0..n_g {
        p[(i, i)] += w.beta_g;
    }
    let mut h = DMatrix::zeros(n, n);
    h.view_mut((0, 0), (n_g, n_g)).copy_from(&(&p + p.transpose()));
    for i in n_g..n {
        h[(i, i)] = 2.0 * w.beta_z;
    }
    let mut f = DVector::zeros(n);
    f.rows_mut(0, n_g).copy_from(&q);

    // equalities
    let n_eq = t_ini * (n_u + n_v + n_z);
    let mut a_eq = DMatrix::zeros(n_eq, n);
    let mut b_eq = DVector::zeros(n_eq);
    let mut r = 0;
    for (blk, rhs) in [(&b.up, &ini.u), (&b.vp, &ini.v), (&b.zp, &ini.z)] {
        a_eq.view_mut((r, 0), (blk.nrows(), n_g)).copy_from(blk);
        b_eq.rows_mut(r, rhs.len()).copy_from(rhs);
        r += blk.nrows();
    }
    for i in 0..n_sigma {
        a_eq[(t_ini * (n_u + n_v) + i, n_g + i)] = -1.0;
    }

    // inequalities: input box and G ẑ_j bounds, skipping rows that are unbounded on both sides
    let mut rows: Vec<(DVector<f64>, f64, f64)> = Vec::new();
    for j in 0..n_p {
        for i in 0..n_u {
            let (lo, hi) = (bounds.u_lb[i], bounds.u_ub[i]);
            if lo.is_finite() || hi.is_finite() {
                rows.push((b.uf.row(j * n_u + i).transpose(), lo, hi));
            }
        }
        let zf_j = b.zf.rows(j * n_z, n_z);
        for i in 0..n_c {
            let (lo, hi) = (bounds.yc_lb[i], bounds.yc_ub[i]);
            if lo.is_finite() || hi.is_finite() {
                rows.push(((g_map.row(i) * zf_j).transpose(), lo, hi));
            }
        }
    }
    let a_in = DMatrix::from_fn(rows.len(), n, |i, j| if j < n_g { rows[i].0[j] } else { 0.0 });
    let lb_in = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let ub_in = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.2));

    let problem = QpProblem::new(h, f).with_eq(a_eq, b_eq).with_ineq(a_in, lb_in, ub_in);
    Ok(DeeepcQp { problem, n_g, n_sigma, constant })
}

/// Adds `‖A ḡ − e‖²_diag(r)` to `(P, q, constant)`.
fn add_weighted_ls(p: &mut DMatrix<f64>, q: &mut DVector<f64>, constant: &mut f64, a: &DMatrix<f64>, e: &DVector<f64>, r: &DVector<f64>) {
    let ra = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| r[i] * a[(i, j)]);
    *p += a.transpose() * &ra;
    *q -= 2.0 * ra.transpose() * e;
    *constant += e.dot(&r.component_mul(e));
}

fn check_blocks(b: &BlockSet, hb: &HankelBlocks) -> Result<()> {
    let expect = [
        (b.up.nrows(), hb.t_ini * hb.n_u),
        (b.vp.nrows(), hb.t_ini * hb.n_v),
        (b.zp.nrows(), hb.t_ini * hb.n_z),
        (b.uf.nrows(), hb.n_p * hb.n_u),
        (b.vf.nrows(), hb.n_p * hb.n_v),
        (b.zf.nrows(), hb.n_p * hb.n_z),
    ];
    if expect.iter().any(|(a, e)| a != e) {
        return Err(AssemblyError::DimensionMismatch("block row counts".into()));
    }
    let ng = b.operator_dim();
    if [&b.vp, &b.zp, &b.uf, &b.vf, &b.zf].iter().any(|m| m.ncols() != ng) {
        return Err(AssemblyError::DimensionMismatch("block column counts".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hankel::partition_matrices;
    use crate::qp::{solve, QpStatus, SolveOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_blocks(rng: &mut ChaCha8Rng, t: usize, nu: usize, nv: usize, nz: usize) -> HankelBlocks {
        let mut m = |c: usize| DMatrix::from_fn(t, c, |_, _| rng.random_range(-1.0..1.0));
        let (u, v, z) = (m(nu), m(nv), m(nz));
        partition_matrices(&u, &v, &z, 2, 2).unwrap()
    }

    fn ini_for(b: &HankelBlocks, col: usize) -> IniData {
        let f = b.operator_blocks();
        IniData { u: f.up.column(col).into_owned(), v: f.vp.column(col).into_owned(), z: f.zp.column(col).into_owned() }
    }

    #[test]
    fn default_shape_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = random_blocks(&mut rng, 40, 2, 4, 60);
        let model = EconCostModel::new(60, 4, 3);
        let w = OnlineWeights::standard(2);
        let qp = assemble_deeepc(&b, &model, &ini_for(&b, 0), &w, &OnlineBounds::unbounded(2, 3)).unwrap();
        assert_eq!(qp.problem.n(), b.operator_dim() + 2 * 60);
        assert_eq!(qp.problem.a_eq.nrows(), 2 * (2 + 4 + 60));
        assert_eq!(qp.problem.a_in.nrows(), 0);
        let bounded = OnlineBounds { u_lb: DVector::from_element(2, -1.0), u_ub: DVector::from_element(2, 1.0), yc_lb: DVector::from_element(3, -1.0), yc_ub: DVector::from_element(3, f64::INFINITY) };
        let qp = assemble_deeepc(&b, &model, &ini_for(&b, 0), &w, &bounded).unwrap();
        assert_eq!(qp.problem.a_in.nrows(), 2 * (2 + 3));
    }

    #[test]
    fn missing_ini_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_blocks(&mut rng, 30, 1, 1, 2);
        let model = EconCostModel::new(2, 1, 1);
        let w = OnlineWeights::standard(1);
        let mut ini = ini_for(&b, 0);
        ini.z = DVector::zeros(3);
        let err = assemble_deeepc(&b, &model, &ini, &w, &OnlineBounds::unbounded(1, 1)).unwrap_err();
        assert_eq!(err, AssemblyError::MissingIni("z"));
        let wrong = EconCostModel::new(3, 1, 1);
        assert!(matches!(assemble_deeepc(&b, &wrong, &ini_for(&b, 0), &w, &OnlineBounds::unbounded(1, 1)), Err(AssemblyError::DimensionMismatch(_))));
    }

    #[test]
    fn extract_input_selects_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random_blocks(&mut rng, 30, 2, 1, 2);
        let uf = &b.operator_blocks().uf;
        let mut e = DVector::zeros(b.operator_dim());
        e[5] = 1.0;
        let plan = extract_input(&b, &e).unwrap();
        assert_eq!(plan.steps.len(), 2);
        assert_eq!(plan.applied().as_slice(), &uf.column(5).as_slice()[0..2]);
        assert_eq!(plan.steps[1].as_slice(), &uf.column(5).as_slice()[2..4]);
        let zero = extract_input(&b, &DVector::zeros(b.operator_dim())).unwrap();
        assert!(zero.steps.iter().all(|s| s.iter().all(|v| *v == 0.0)));
        let g = DVector::from_fn(b.operator_dim(), |_, _| rng.random_range(-1.0..1.0));
        let plan = extract_input(&b, &g).unwrap();
        let direct = uf * &g;
        for j in 0..2 {
            assert!((&plan.steps[j] - direct.rows(2 * j, 2)).amax() < 1e-12);
        }
        assert!(extract_input(&b, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn slack_columns_only_on_z_past_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_blocks(&mut rng, 30, 1, 2, 3);
        let m = stacked_constraint_matrix(&b);
        let ng = b.operator_dim();
        let (zp0, zp1) = (2 + 4, 2 + 4 + 6);
        for r in 0..m.nrows() {
            for c in ng..m.ncols() {
                if r < zp0 || r >= zp1 {
                    assert_eq!(m[(r, c)], 0.0);
                } else {
                    assert_eq!(m[(r, c)], if r - zp0 == c - ng { -1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn huge_beta_g_drives_operator_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random_blocks(&mut rng, 30, 1, 1, 2);
        let model = EconCostModel::new(2, 1, 1);
        let w = OnlineWeights { lambda: 1.0, r_delta: vec![0.0], beta_z: 1.0, beta_g: 1e8, no_slack: false };
        let ini = IniData { u: DVector::zeros(2), v: DVector::zeros(2), z: DVector::from_element(4, 0.3) };
        let qp = assemble_deeepc(&b, &model, &ini, &w, &OnlineBounds::unbounded(1, 1)).unwrap();
        let s = solve(&qp.problem, &SolveOptions::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        let (g, _) = qp.split(&s.x);
        assert!(g.amax() < 1e-6);
        assert!(extract_input(&b, &g).unwrap().applied().amax() < 1e-6);
    }

    #[test]
    fn objective_value_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = random_blocks(&mut rng, 30, 2, 1, 3);
        let mut model = EconCostModel::new(3, 1, 2);
        let flat: Vec<f64> = (0..model.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        model.set_flat(&flat).unwrap();
        let w = OnlineWeights { lambda: 0.7, r_delta: vec![0.2, 0.5], beta_z: 3.0, beta_g: 0.1, no_slack: false };
        let ini = ini_for(&b, 4);
        let qp = assemble_deeepc(&b, &model, &ini, &w, &OnlineBounds::unbounded(2, 2)).unwrap();
        let x = DVector::from_fn(qp.problem.n(), |_, _| rng.random_range(-1.0..1.0));
        let (g, sigma) = qp.split(&x);
        let f = b.operator_blocks();
        let (u, v, z) = (&f.uf * &g, &f.vf * &g, &f.zf * &g);
        let mut direct = 0.0;
        let mut prev = ini.u.rows(2, 2).into_owned();
        for j in 0..2 {
            direct += w.lambda * model.eval_cost(&z.rows(3 * j, 3).into_owned(), &v.rows(j, 1).into_owned()).unwrap().value;
            let uj = u.rows(2 * j, 2).into_owned();
            let d = &uj - &prev;
            direct += 0.2 * d[0] * d[0] + 0.5 * d[1] * d[1];
            prev = uj;
        }
        direct += w.beta_z * sigma.norm_squared() + w.beta_g * g.norm_squared();
        assert!((qp.value(&x) - direct).abs() < 1e-10 * (1.0 + direct.abs()));
    }
}
