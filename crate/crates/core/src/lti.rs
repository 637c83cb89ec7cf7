//! Exact discrete-time LTI simulation and fundamental-lemma verification.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::hankel::{build_hankel_matrix, RANK_TOL};
use crate::linalg::{numerical_rank, pinv, singular_values};
use crate::trajectory::{Trajectory, TrajectoryError};

#[derive(Debug, Error)]
pub enum LtiError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("system is not controllable (controllability rank {rank} < {n_x})")]
    NotControllable { rank: usize, n_x: usize },
    #[error("input is not persistently exciting: Hankel rank {rank} < {required}")]
    NotPersistentlyExciting { rank: usize, required: usize },
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Hankel(#[from] crate::hankel::HankelError),
}

pub type Result<T> = std::result::Result<T, LtiError>;

/// `x_{k+1} = A x_k + B u_k`, `y_k = C x_k + D u_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(LtiError::DimensionMismatch("A must be square".into()));
        }
        if b.nrows() != n || c.ncols() != n || d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(LtiError::DimensionMismatch(format!(
                "A {:?}, B {:?}, C {:?}, D {:?}",
                a.shape(),
                b.shape(),
                c.shape(),
                d.shape()
            )));
        }
        Ok(Self { a, b, c, d })
    }

    /// Like [`LtiSystem::new`] but rejects uncontrollable pairs `(A, B)`.
    pub fn new_controllable(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let sys = Self::new(a, b, c, d)?;
        let rank = sys.controllability_rank();
        if rank < sys.n_x() {
            return Err(LtiError::NotControllable { rank, n_x: sys.n_x() });
        }
        Ok(sys)
    }

    /// Random system with i.i.d. standard normal entries and `A` rescaled to spectral radius 0.9.
    pub fn random<R: Rng>(n_x: usize, n_u: usize, n_y: usize, rng: &mut R) -> Self {
        let mut normal = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut a = normal(n_x, n_x);
        let b = normal(n_x, n_u);
        let c = normal(n_y, n_x);
        let d = normal(n_y, n_u);
        let rho = spectral_radius(&a);
        if rho > 0.0 {
            a *= 0.9 / rho;
        }
        Self { a, b, c, d }
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    /// `[B, AB, ..., A^{n_x-1} B]`.
    pub fn controllability_matrix(&self) -> DMatrix<f64> {
        let (n, m) = (self.n_x(), self.n_u());
        let mut out = DMatrix::zeros(n, n * m);
        let mut blk = self.b.clone();
        for i in 0..n {
            out.columns_mut(i * m, m).copy_from(&blk);
            blk = &self.a * blk;
        }
        out
    }

    pub fn controllability_rank(&self) -> usize {
        numerical_rank(&self.controllability_matrix(), RANK_TOL)
    }

    pub fn is_controllable(&self) -> bool {
        self.controllability_rank() == self.n_x()
    }

    /// Extended observability matrix `[C; CA; ...; CA^{L-1}]`.
    pub fn observability(&self, depth: usize) -> DMatrix<f64> {
        let (n, p) = (self.n_x(), self.n_y());
        let mut out = DMatrix::zeros(depth * p, n);
        let mut blk = self.c.clone();
        for i in 0..depth {
            out.rows_mut(i * p, p).copy_from(&blk);
            blk *= &self.a;
        }
        out
    }

    /// Block lower-triangular input-to-output Toeplitz matrix of depth `L`.
    pub fn toeplitz(&self, depth: usize) -> DMatrix<f64> {
        let (m, p) = (self.n_u(), self.n_y());
        let mut markov = vec![self.d.clone()];
        let mut ak_b = self.b.clone();
        for _ in 1..depth {
            markov.push(&self.c * &ak_b);
            ak_b = &self.a * ak_b;
        }
        let mut out = DMatrix::zeros(depth * p, depth * m);
        for i in 0..depth {
            for j in 0..=i {
                out.view_mut((i * p, j * m), (p, m)).copy_from(&markov[i - j]);
            }
        }
        out
    }
}

fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max)
}

/// States `x_0..x_T` (one more row than the input) and outputs `y_0..y_{T-1}`.
#[derive(Clone, Debug)]
pub struct LtiTrace {
    pub x: Trajectory,
    pub y: Trajectory,
}

/// Runs the exact recursion from `x0` under the input sequence `u`.
pub fn simulate(sys: &LtiSystem, x0: &DVector<f64>, u: &Trajectory) -> Result<LtiTrace> {
    if x0.len() != sys.n_x() || u.dim() != sys.n_u() {
        return Err(LtiError::DimensionMismatch(format!(
            "x0 has {} entries (need {}), u has {} columns (need {})",
            x0.len(),
            sys.n_x(),
            u.dim(),
            sys.n_u()
        )));
    }
    let t = u.len();
    let mut xs = DMatrix::zeros(t + 1, sys.n_x());
    let mut ys = DMatrix::zeros(t, sys.n_y());
    let mut x = x0.clone();
    xs.set_row(0, &x.transpose());
    for k in 0..t {
        let uk = u.row(k);
        let y = &sys.c * &x + &sys.d * &uk;
        ys.set_row(k, &y.transpose());
        x = &sys.a * &x + &sys.b * &uk;
        xs.set_row(k + 1, &x.transpose());
    }
    Ok(LtiTrace {
        x: Trajectory::unlabeled(xs, u.dt(), "x")?,
        y: Trajectory::unlabeled(ys, u.dt(), "y")?,
    })
}

/// Column space of the stacked depth-`L` Hankel matrix `[H_L(u); H_L(y)]`.
#[derive(Clone, Debug)]
pub struct TrajectorySpace {
    pub stacked: DMatrix<f64>,
    projector_pinv: DMatrix<f64>,
    pub depth: usize,
    pub n_u: usize,
    pub n_y: usize,
}

impl TrajectorySpace {
    pub fn from_data(u: &Trajectory, y: &Trajectory, depth: usize) -> Result<Self> {
        if u.len() != y.len() {
            return Err(LtiError::DimensionMismatch("u and y lengths differ".into()));
        }
        let hu = build_hankel_matrix(u.values(), depth)?;
        let hy = build_hankel_matrix(y.values(), depth)?;
        let mut stacked = DMatrix::zeros(hu.data.nrows() + hy.data.nrows(), hu.data.ncols());
        stacked.rows_mut(0, hu.data.nrows()).copy_from(&hu.data);
        stacked.rows_mut(hu.data.nrows(), hy.data.nrows()).copy_from(&hy.data);
        let projector_pinv = pinv(&stacked, RANK_TOL);
        Ok(Self { stacked, projector_pinv, depth, n_u: u.dim(), n_y: y.dim() })
    }

    /// Least-squares fit `g` of a stacked trajectory `[u_L; y_L]`.
    pub fn fit(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.projector_pinv * w
    }

    /// `||H g* - w|| / ||w||` for the least-squares `g*`.
    pub fn relative_residual(&self, u_l: &Trajectory, y_l: &Trajectory) -> f64 {
        let w = stack_pair(u_l, y_l);
        let r = &self.stacked * self.fit(&w) - &w;
        let nw = w.norm();
        if nw > 0.0 {
            r.norm() / nw
        } else {
            r.norm()
        }
    }
}

/// `[u_L; y_L]` with each signal stacked sample by sample.
pub fn stack_pair(u: &Trajectory, y: &Trajectory) -> DVector<f64> {
    let (a, b) = (u.stacked(), y.stacked());
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).cloned())
}

/// Relative residual of fitting an initial state that explains `y_L` given `u_L`.
pub fn initial_state_residual(sys: &LtiSystem, u_l: &DVector<f64>, y_l: &DVector<f64>) -> f64 {
    let depth = u_l.len() / sys.n_u().max(1);
    let obs = sys.observability(depth);
    let rhs = y_l - sys.toeplitz(depth) * u_l;
    let x0 = pinv(&obs, 1e-13) * &rhs;
    let r = obs * x0 - &rhs;
    r.norm() / y_l.norm().max(f64::MIN_POSITIVE)
}

#[derive(Clone, Copy, Debug)]
pub struct LemmaConfig {
    /// Data length `T`.
    pub t: usize,
    /// Trajectory depth `L`.
    pub depth: usize,
    pub trials: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct LemmaReport {
    /// Largest relative least-squares residual of a fresh trajectory ("if" direction).
    pub max_residual: f64,
    /// Largest relative residual of an initial-state fit for `H g` ("only if" direction).
    pub max_only_if_residual: f64,
    /// Rank of the input Hankel of order `L + n_x` for the data used.
    pub min_pe_rank: usize,
    pub required_rank: usize,
    pub trials: usize,
}

fn random_traj<R: Rng>(rng: &mut R, len: usize, dim: usize, prefix: &str) -> Trajectory {
    let m = DMatrix::from_fn(len, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    Trajectory::unlabeled(m, 1.0, prefix).expect("finite random data")
}

/// Checks the fundamental lemma on freshly generated persistently exciting data.
///
/// The input is regenerated until it is persistently exciting of order `L + n_x`.
pub fn verify_fundamental_lemma<R: Rng>(sys: &LtiSystem, cfg: LemmaConfig, rng: &mut R) -> Result<LemmaReport> {
    let order = cfg.depth + sys.n_x();
    let mut attempt = 0;
    let u = loop {
        let u = random_traj(rng, cfg.t, sys.n_u(), "u");
        let h = build_hankel_matrix(u.values(), order)?;
        if numerical_rank(&h.data, RANK_TOL) == h.data.nrows() || attempt >= 100 {
            break u;
        }
        attempt += 1;
    };
    verify_with_input(sys, &u, cfg, rng)
}

/// Fundamental-lemma check on a given input sequence; refuses inputs that are not
/// persistently exciting of order `L + n_x`.
pub fn verify_with_input<R: Rng>(sys: &LtiSystem, u: &Trajectory, cfg: LemmaConfig, rng: &mut R) -> Result<LemmaReport> {
    let rank = sys.controllability_rank();
    if rank < sys.n_x() {
        return Err(LtiError::NotControllable { rank, n_x: sys.n_x() });
    }
    let order = cfg.depth + sys.n_x();
    let h = build_hankel_matrix(u.values(), order)?;
    let s = singular_values(&h.data);
    let smax = s.iter().cloned().fold(0.0_f64, f64::max);
    let pe_rank = if smax == 0.0 { 0 } else { s.iter().filter(|&&v| v > RANK_TOL * smax).count() };
    let required = h.data.nrows();
    if pe_rank < required {
        return Err(LtiError::NotPersistentlyExciting { rank: pe_rank, required });
    }

    let x0: DVector<f64> = DVector::from_fn(sys.n_x(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let data = simulate(sys, &x0, u)?;
    let space = TrajectorySpace::from_data(u, &data.y, cfg.depth)?;

    let mut max_residual: f64 = 0.0;
    let mut max_only_if: f64 = 0.0;
    let split = cfg.depth * sys.n_u();
    for _ in 0..cfg.trials {
        let x0: DVector<f64> = DVector::from_fn(sys.n_x(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let u_l = random_traj(rng, cfg.depth, sys.n_u(), "u");
        let fresh = simulate(sys, &x0, &u_l)?;
        max_residual = max_residual.max(space.relative_residual(&u_l, &fresh.y));

        let g: DVector<f64> = DVector::from_fn(space.stacked.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = &space.stacked * g;
        let u_part = w.rows(0, split).into_owned();
        let y_part = w.rows(split, w.len() - split).into_owned();
        max_only_if = max_only_if.max(initial_state_residual(sys, &u_part, &y_part));
    }
    Ok(LemmaReport {
        max_residual,
        max_only_if_residual: max_only_if,
        min_pe_rank: pe_rank,
        required_rank: required,
        trials: cfg.trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn traj(m: DMatrix<f64>) -> Trajectory {
        Trajectory::unlabeled(m, 1.0, "u").unwrap()
    }

    #[test]
    fn one_step_recursion() {
        let n = 2;
        let sys = LtiSystem::new(DMatrix::zeros(n, n), DMatrix::identity(n, n), DMatrix::identity(n, n), DMatrix::zeros(n, n)).unwrap();
        let out = simulate(&sys, &DVector::zeros(n), &traj(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]))).unwrap();
        assert_eq!(out.y.values().as_slice(), &[0.0, 0.0]);
        assert_eq!(out.x.row(1), DVector::from_vec(vec![1.0, 0.0]));
    }

    #[test]
    fn identity_dynamics_hold_state() {
        let sys = LtiSystem::new(DMatrix::identity(3, 3), DMatrix::zeros(3, 1), DMatrix::identity(3, 3), DMatrix::zeros(3, 1)).unwrap();
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let out = simulate(&sys, &v, &traj(DMatrix::from_element(10, 1, 3.0))).unwrap();
        for k in 0..=10 {
            assert_eq!(out.x.row(k), v);
        }
    }

    #[test]
    fn simulation_matches_independent_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sys = LtiSystem::random(3, 2, 2, &mut rng);
        let u = random_traj(&mut rng, 200, 2, "u");
        let x0 = DVector::from_vec(vec![0.3, -0.1, 1.0]);
        let out = simulate(&sys, &x0, &u).unwrap();
        // x_k = A^k x0 + sum_{j<k} A^{k-1-j} B u_j, evaluated term by term
        for k in [0usize, 1, 7, 50, 199] {
            let mut x = sys.a.pow(k as u32) * &x0;
            for j in 0..k {
                x += sys.a.pow((k - 1 - j) as u32) * &sys.b * u.row(j);
            }
            let y = &sys.c * &x + &sys.d * u.row(k);
            assert!((y - out.y.row(k)).norm() <= 1e-12 * (1.0 + out.y.row(k).norm()));
        }
    }

    #[test]
    fn random_system_has_requested_spectral_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sys = LtiSystem::random(4, 1, 1, &mut rng);
        assert!((spectral_radius(&sys.a) - 0.9).abs() < 1e-10);
    }

    #[test]
    fn dimension_checks() {
        let sys = LtiSystem::random(3, 1, 1, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(simulate(&sys, &DVector::zeros(2), &traj(DMatrix::zeros(3, 1))).is_err());
        assert!(LtiSystem::new(DMatrix::zeros(2, 3), DMatrix::zeros(2, 1), DMatrix::zeros(1, 2), DMatrix::zeros(1, 1)).is_err());
        let err = LtiSystem::new_controllable(DMatrix::identity(2, 2), DMatrix::from_column_slice(2, 1, &[1.0, 0.0]), DMatrix::identity(2, 2), DMatrix::zeros(2, 1));
        assert!(matches!(err, Err(LtiError::NotControllable { rank: 1, n_x: 2 })));
    }

    #[test]
    fn lemma_holds_on_random_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sys = LtiSystem::random(3, 1, 1, &mut rng);
        let rep = verify_fundamental_lemma(&sys, LemmaConfig { t: 80, depth: 6, trials: 20 }, &mut rng).unwrap();
        assert!(rep.max_residual <= 1e-8, "{rep:?}");
        assert!(rep.max_only_if_residual <= 1e-8, "{rep:?}");
        assert_eq!(rep.min_pe_rank, rep.required_rank);
    }

    #[test]
    fn data_window_is_its_own_hankel_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sys = LtiSystem::random(3, 1, 1, &mut rng);
        let u = random_traj(&mut rng, 80, 1, "u");
        let data = simulate(&sys, &DVector::from_element(3, 0.2), &u).unwrap();
        let space = TrajectorySpace::from_data(&u, &data.y, 6).unwrap();
        let (ul, yl) = (u.slice(10, 16).unwrap(), data.y.slice(10, 16).unwrap());
        assert!(space.relative_residual(&ul, &yl) <= 1e-12);
    }

    #[test]
    fn constant_input_is_refused() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sys = LtiSystem::random(3, 1, 1, &mut rng);
        let u = traj(DMatrix::from_element(80, 1, 1.0));
        match verify_with_input(&sys, &u, LemmaConfig { t: 80, depth: 6, trials: 5 }, &mut rng) {
            Err(LtiError::NotPersistentlyExciting { rank, required }) => assert!(rank < required),
            other => panic!("expected refusal, got {other:?}"),
        }
    }
}
