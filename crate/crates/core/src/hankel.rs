//! Block-Hankel matrices, persistent excitation, past/future partitioning and SVD reduction.

use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg::singular_values;
use crate::trajectory::Trajectory;

#[derive(Debug, Error)]
pub enum HankelError {
    #[error("depth {depth} exceeds trajectory length {len} (or is zero)")]
    DepthExceedsLength { depth: usize, len: usize },
    #[error("signals have different lengths: {0:?}")]
    LengthMismatch(Vec<usize>),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HankelError>;

/// Relative singular-value threshold used for rank decisions.
pub const RANK_TOL: f64 = 1e-10;

/// Default relative truncation level for [`reduce_svd`].
pub const DEFAULT_SVD_TOL: f64 = 1e-8;

/// Depth-`L` block-Hankel matrix of an `m`-dimensional signal.
///
/// Column `j` stacks samples `j..j+L`; block row `i` of column `j` is sample `i + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct HankelMatrix {
    pub data: DMatrix<f64>,
    pub depth: usize,
    pub signal_dim: usize,
}

impl HankelMatrix {
    /// Block `(i, j)`: the `signal_dim` entries of sample `i + j`.
    pub fn block(&self, i: usize, j: usize) -> Vec<f64> {
        let m = self.signal_dim;
        (0..m).map(|a| self.data[(i * m + a, j)]).collect()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }
}

pub fn build_hankel(t: &Trajectory, depth: usize) -> Result<HankelMatrix> {
    build_hankel_matrix(t.values(), depth)
}

/// Same as [`build_hankel`] for a raw `T x m` sample matrix.
pub fn build_hankel_matrix(samples: &DMatrix<f64>, depth: usize) -> Result<HankelMatrix> {
    let len = samples.nrows();
    if depth == 0 || depth > len {
        return Err(HankelError::DepthExceedsLength { depth, len });
    }
    let m = samples.ncols();
    let cols = len - depth + 1;
    let data = DMatrix::from_fn(m * depth, cols, |r, j| samples[(j + r / m, r % m)]);
    Ok(HankelMatrix { data, depth, signal_dim: m })
}

/// Persistent-excitation verdict for a signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Excitation {
    pub exciting: bool,
    pub rank: usize,
    pub required: usize,
}

/// Checks full row rank of the depth-`order` Hankel matrix (threshold `1e-10 * sigma_max`).
pub fn is_persistently_exciting(t: &Trajectory, order: usize) -> Result<Excitation> {
    let h = build_hankel(t, order)?;
    let required = h.data.nrows();
    let s = singular_values(&h.data);
    let smax = s.iter().cloned().fold(0.0_f64, f64::max);
    let rank = if smax == 0.0 { 0 } else { s.iter().filter(|&&v| v > RANK_TOL * smax).count() };
    Ok(Excitation { exciting: rank == required, rank, required })
}

/// The six past/future partitions of the `u`, `v`, `z` Hankel matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSet {
    pub up: DMatrix<f64>,
    pub vp: DMatrix<f64>,
    pub zp: DMatrix<f64>,
    pub uf: DMatrix<f64>,
    pub vf: DMatrix<f64>,
    pub zf: DMatrix<f64>,
}

impl BlockSet {
    fn parts(&self) -> [&DMatrix<f64>; 6] {
        [&self.up, &self.vp, &self.zp, &self.uf, &self.vf, &self.zf]
    }

    /// All six blocks stacked vertically in the order `Up, Vp, Zp, Uf, Vf, Zf`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let rows: usize = self.parts().iter().map(|m| m.nrows()).sum();
        let cols = self.up.ncols();
        let mut out = DMatrix::zeros(rows, cols);
        let mut r = 0;
        for p in self.parts() {
            out.rows_mut(r, p.nrows()).copy_from(p);
            r += p.nrows();
        }
        out
    }

    /// Number of columns, i.e. the dimension of the operator `g`.
    pub fn operator_dim(&self) -> usize {
        self.up.ncols()
    }

    fn split(stacked: &DMatrix<f64>, sizes: [usize; 6]) -> Self {
        let mut r = 0;
        let mut take = |n: usize| {
            let m = stacked.rows(r, n).into_owned();
            r += n;
            m
        };
        Self {
            up: take(sizes[0]),
            vp: take(sizes[1]),
            zp: take(sizes[2]),
            uf: take(sizes[3]),
            vf: take(sizes[4]),
            zf: take(sizes[5]),
        }
    }
}

/// Column-space reduction of a [`BlockSet`]: `stacked ≈ blocks.stacked() * basisᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedBlocks {
    pub blocks: BlockSet,
    /// Orthonormal columns `Q_r` (original operator dim x rank).
    pub basis: DMatrix<f64>,
    pub rank: usize,
    pub singular_values: Vec<f64>,
}

/// Hankel partitions used by the online problem, optionally SVD-reduced.
#[derive(Clone, Debug, PartialEq)]
pub struct HankelBlocks {
    pub full: BlockSet,
    pub reduced: Option<ReducedBlocks>,
    pub n_u: usize,
    pub n_v: usize,
    pub n_z: usize,
    pub t_ini: usize,
    pub n_p: usize,
}

impl HankelBlocks {
    /// The blocks the controller optimizes over (reduced when available).
    pub fn operator_blocks(&self) -> &BlockSet {
        self.reduced.as_ref().map(|r| &r.blocks).unwrap_or(&self.full)
    }

    pub fn operator_dim(&self) -> usize {
        self.operator_blocks().operator_dim()
    }

    fn block_rows(&self) -> [usize; 6] {
        let (p, f) = (self.t_ini, self.n_p);
        [p * self.n_u, p * self.n_v, p * self.n_z, f * self.n_u, f * self.n_v, f * self.n_z]
    }

    /// Writes every block of the operator representation as `<prefix>_<name>.csv`.
    pub fn dump_csv(&self, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
        let b = self.operator_blocks();
        for (name, m) in ["up", "vp", "zp", "uf", "vf", "zf"].iter().zip(b.parts()) {
            write_matrix_csv(dir.as_ref().join(format!("{prefix}_{name}.csv")), m)?;
        }
        Ok(())
    }
}

/// Plain numeric CSV (no header), one matrix row per line.
pub fn write_matrix_csv(path: impl AsRef<Path>, m: &DMatrix<f64>) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in 0..m.nrows() {
        let line: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    f.flush()
}

/// Splits the depth-`T_ini + N_p` Hankel matrices of `u`, `v`, `z` into past and future rows.
pub fn partition(
    u: &Trajectory,
    v: &Trajectory,
    z: &Trajectory,
    t_ini: usize,
    n_p: usize,
) -> Result<HankelBlocks> {
    partition_matrices(u.values(), v.values(), z.values(), t_ini, n_p)
}

/// [`partition`] on raw `T x m` sample matrices (any of which may have zero columns).
pub fn partition_matrices(
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    z: &DMatrix<f64>,
    t_ini: usize,
    n_p: usize,
) -> Result<HankelBlocks> {
    let lens = vec![u.nrows(), v.nrows(), z.nrows()];
    if lens.iter().any(|&l| l != lens[0]) {
        return Err(HankelError::LengthMismatch(lens));
    }
    let depth = t_ini + n_p;
    if t_ini == 0 || n_p == 0 {
        return Err(HankelError::DepthExceedsLength { depth, len: lens[0] });
    }
    let hu = build_hankel_matrix(u, depth)?;
    let hv = build_hankel_matrix(v, depth)?;
    let hz = build_hankel_matrix(z, depth)?;
    let (nu, nv, nz) = (u.ncols(), v.ncols(), z.ncols());
    let past = |h: &HankelMatrix, m: usize| h.data.rows(0, t_ini * m).into_owned();
    let fut = |h: &HankelMatrix, m: usize| h.data.rows(t_ini * m, n_p * m).into_owned();
    Ok(HankelBlocks {
        full: BlockSet {
            up: past(&hu, nu),
            vp: past(&hv, nv),
            zp: past(&hz, nz),
            uf: fut(&hu, nu),
            vf: fut(&hv, nv),
            zf: fut(&hz, nz),
        },
        reduced: None,
        n_u: nu,
        n_v: nv,
        n_z: nz,
        t_ini,
        n_p,
    })
}

/// SVD order reduction of the stacked block matrix `M = W Σ Qᵀ`.
///
/// Keeps the `r` singular values above `max(tol, RANK_TOL) * sigma_1`; the reduced
/// stacked matrix is `W_r Σ_r` and the new operator dimension is `r`.
pub fn reduce_svd(b: &HankelBlocks, tol: f64) -> HankelBlocks {
    let m = b.full.stacked();
    let svd = m.clone().svd(true, true);
    let s = &svd.singular_values;
    let s1 = s.iter().cloned().fold(0.0_f64, f64::max);
    let thresh = tol.max(RANK_TOL) * s1;
    let rank = if s1 == 0.0 { 0 } else { s.iter().filter(|&&v| v > thresh).count() };
    let w = svd.u.as_ref().expect("u requested");
    let qt = svd.v_t.as_ref().expect("v_t requested");
    // nalgebra returns singular values in descending order
    let mut reduced = DMatrix::zeros(m.nrows(), rank);
    for i in 0..rank {
        reduced.set_column(i, &(w.column(i) * s[i]));
    }
    let basis = qt.rows(0, rank).transpose();
    let mut out = b.clone();
    out.reduced = Some(ReducedBlocks {
        blocks: BlockSet::split(&reduced, b.block_rows()),
        basis,
        rank,
        singular_values: s.iter().cloned().collect(),
    });
    out
}
