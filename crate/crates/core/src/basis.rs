//! Orthonormal function families, their tensor products and truncation errors of
//! expansions, evaluated in 256-bit floating point.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use astro_float::{BigFloat, Consts, RoundingMode, Sign};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

/// Mantissa bits used for every computation in this module.
pub const PREC: usize = 256;
const RM: RoundingMode = RoundingMode::ToEven;
/// Largest tolerated deviation of a family's Gram matrix from the identity.
pub const GRAM_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum BasisError {
    #[error("quadrature too coarse: Gram matrix deviates from identity by {0:e}")]
    QuadratureTooCoarse(f64),
    #[error("invalid domain [{0}, {1}]")]
    InvalidDomain(f64, f64),
    #[error("tensor factors must be one-dimensional families (got dimensions {0} and {1})")]
    DomainMismatch(usize, usize),
    #[error("order {order} exceeds the {members} members of the family")]
    InvalidOrder { order: usize, members: usize },
    #[error("output map: {0}")]
    OutputMap(String),
}

pub type Result<T> = std::result::Result<T, BasisError>;

thread_local! {
    static CONSTS: RefCell<Consts> = RefCell::new(Consts::new().expect("constant cache"));
}

/// Extended-precision real.
#[derive(Clone, Debug)]
pub struct Hp(BigFloat);

impl Hp {
    pub fn from_f64(v: f64) -> Self {
        Hp(BigFloat::from_f64(v, PREC))
    }

    pub fn from_i64(v: i64) -> Self {
        Hp(BigFloat::from_i64(v, PREC))
    }

    pub fn zero() -> Self {
        Self::from_i64(0)
    }

    pub fn one() -> Self {
        Self::from_i64(1)
    }

    pub fn pi() -> Self {
        CONSTS.with(|c| Hp(c.borrow_mut().pi(PREC, RM)))
    }

    pub fn sqrt(&self) -> Self {
        Hp(self.0.sqrt(PREC, RM))
    }

    pub fn exp(&self) -> Self {
        CONSTS.with(|c| Hp(self.0.exp(PREC, RM, &mut c.borrow_mut())))
    }

    pub fn sin(&self) -> Self {
        CONSTS.with(|c| Hp(self.0.sin(PREC, RM, &mut c.borrow_mut())))
    }

    pub fn cos(&self) -> Self {
        CONSTS.with(|c| Hp(self.0.cos(PREC, RM, &mut c.borrow_mut())))
    }

    pub fn abs(&self) -> Self {
        Hp(self.0.abs())
    }

    pub fn powi(&self, n: usize) -> Self {
        Hp(self.0.powi(n, PREC, RM))
    }

    /// Nearest `f64` (truncated mantissa, which is well inside `f64` rounding).
    pub fn to_f64(&self) -> f64 {
        if self.0.is_nan() {
            return f64::NAN;
        }
        if self.0.is_inf() {
            return if self.0.is_inf_pos() { f64::INFINITY } else { f64::NEG_INFINITY };
        }
        if self.0.is_zero() {
            return 0.0;
        }
        let (words, _, sign, exp, _) = self.0.as_raw_parts().expect("finite value");
        // the mantissa is 0.m in [1/2, 1) with the most significant word last
        let top = words[words.len() - 1] as f64;
        let next = if words.len() > 1 { words[words.len() - 2] as f64 } else { 0.0 };
        let m = (top + next * 2f64.powi(-64)) * 2f64.powi(-64);
        let v = m * 2f64.powi(exp);
        if sign == Sign::Neg {
            -v
        } else {
            v
        }
    }
}

impl Add for &Hp {
    type Output = Hp;
    fn add(self, o: &Hp) -> Hp {
        Hp(self.0.add(&o.0, PREC, RM))
    }
}

impl Sub for &Hp {
    type Output = Hp;
    fn sub(self, o: &Hp) -> Hp {
        Hp(self.0.sub(&o.0, PREC, RM))
    }
}

impl Mul for &Hp {
    type Output = Hp;
    fn mul(self, o: &Hp) -> Hp {
        Hp(self.0.mul(&o.0, PREC, RM))
    }
}

impl Div for &Hp {
    type Output = Hp;
    fn div(self, o: &Hp) -> Hp {
        Hp(self.0.div(&o.0, PREC, RM))
    }
}

impl Neg for &Hp {
    type Output = Hp;
    fn neg(self) -> Hp {
        Hp(-self.0.clone())
    }
}

fn sum(it: impl Iterator<Item = Hp>) -> Hp {
    it.fold(Hp::zero(), |acc, v| &acc + &v)
}

/// Legendre `P_n(x)` and its derivative by the three-term recurrence.
fn legendre_with_derivative(n: usize, x: &Hp) -> (Hp, Hp) {
    let one = Hp::one();
    let (mut p0, mut p1) = (one.clone(), x.clone());
    if n == 0 {
        return (one, Hp::zero());
    }
    for k in 1..n {
        let kk = Hp::from_i64(k as i64);
        let a = &Hp::from_i64(2 * k as i64 + 1) * &(x * &p1);
        let p2 = &(&a - &(&kk * &p0)) / &Hp::from_i64(k as i64 + 1);
        p0 = p1;
        p1 = p2;
    }
    // P'_n = n (x P_n − P_{n−1}) / (x² − 1)
    let d = &(&Hp::from_i64(n as i64) * &(&(x * &p1) - &p0)) / &(&(x * x) - &one);
    (p1, d)
}

/// Gauss–Legendre nodes and weights on `[a, b]`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> (Vec<Hp>, Vec<Hp>) {
    let (ha, hb) = (Hp::from_f64(a), Hp::from_f64(b));
    let half = &(&hb - &ha) / &Hp::from_i64(2);
    let mid = &(&hb + &ha) / &Hp::from_i64(2);
    let two = Hp::from_i64(2);
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let guess = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut x = Hp::from_f64(guess);
        // Newton from a 1e-6 start doubles the correct digits each pass
        for _ in 0..12 {
            let (p, d) = legendre_with_derivative(n, &x);
            x = &x - &(&p / &d);
        }
        let (_, d) = legendre_with_derivative(n, &x);
        let w = &two / &(&(&Hp::one() - &(&x * &x)) * &(&d * &d));
        nodes.push(&mid + &(&half * &x));
        weights.push(&half * &w);
    }
    (nodes, weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    /// Legendre polynomials normalized to unit `L²` norm on the interval.
    Legendre,
    /// `1, cos, sin, cos 2·, sin 2·, ...` normalized on the interval.
    Fourier,
}

fn member_value(kind: FamilyKind, k: usize, a: f64, b: f64, x: &Hp) -> Hp {
    let (ha, hb) = (Hp::from_f64(a), Hp::from_f64(b));
    let len = &hb - &ha;
    match kind {
        FamilyKind::Legendre => {
            let t = &(&(&(&Hp::from_i64(2) * x) - &ha) - &hb) / &len;
            let (p, _) = legendre_with_derivative(k, &t);
            &(&Hp::from_i64(2 * k as i64 + 1) / &len).sqrt() * &p
        }
        FamilyKind::Fourier => {
            if k == 0 {
                return (&Hp::one() / &len).sqrt();
            }
            let freq = k.div_ceil(2) as i64;
            let arg = &(&(&Hp::from_i64(2 * freq) * &Hp::pi()) * &(x - &ha)) / &len;
            let s = (&Hp::from_i64(2) / &len).sqrt();
            if k % 2 == 1 {
                &s * &arg.cos()
            } else {
                &s * &arg.sin()
            }
        }
    }
}

/// Members `φ_m` tabulated on a tensor Gauss–Legendre rule over a box.
#[derive(Clone, Debug)]
pub struct OrthonormalFamily {
    pub domains: Vec<(f64, f64)>,
    pub kinds: Vec<FamilyKind>,
    /// Highest member index per dimension (members `0..=order`).
    pub orders: Vec<usize>,
    /// Per member, its index in each dimension.
    pub multi_index: Vec<Vec<usize>>,
    pub nodes: Vec<Vec<Hp>>,
    pub weights: Vec<Hp>,
    /// `values[m][q] = φ_m(node q)`.
    pub values: Vec<Vec<Hp>>,
}

impl OrthonormalFamily {
    /// One-dimensional family with `2·order + 8` quadrature nodes (8 more for Fourier,
    /// whose products are not polynomials).
    pub fn new(kind: FamilyKind, a: f64, b: f64, order: usize) -> Result<Self> {
        let extra = if kind == FamilyKind::Fourier { 16 } else { 8 };
        Self::with_nodes(kind, a, b, order, 2 * order + extra)
    }

    pub fn legendre(a: f64, b: f64, order: usize) -> Result<Self> {
        Self::new(FamilyKind::Legendre, a, b, order)
    }

    pub fn fourier(a: f64, b: f64, order: usize) -> Result<Self> {
        Self::new(FamilyKind::Fourier, a, b, order)
    }

    /// As [`OrthonormalFamily::new`] with an explicit node count.
    pub fn with_nodes(kind: FamilyKind, a: f64, b: f64, order: usize, nodes: usize) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(BasisError::InvalidDomain(a, b));
        }
        let (xs, ws) = gauss_legendre(nodes.max(1), a, b);
        let values = (0..=order).map(|k| xs.iter().map(|x| member_value(kind, k, a, b, x)).collect()).collect();
        let fam = Self {
            domains: vec![(a, b)],
            kinds: vec![kind],
            orders: vec![order],
            multi_index: (0..=order).map(|k| vec![k]).collect(),
            nodes: xs.into_iter().map(|x| vec![x]).collect(),
            weights: ws,
            values,
        };
        fam.check()?;
        Ok(fam)
    }

    pub fn dim(&self) -> usize {
        self.domains.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn inner(&self, f: &[Hp], g: &[Hp]) -> Hp {
        sum(self.weights.iter().zip(f.iter().zip(g)).map(|(w, (a, b))| &(w * a) * b))
    }

    /// `⟨φ_i, φ_k⟩` under the quadrature.
    pub fn gram(&self) -> Vec<Vec<Hp>> {
        let m = self.len();
        let mut g = vec![vec![Hp::zero(); m]; m];
        for i in 0..m {
            for k in i..m {
                let v = self.inner(&self.values[i], &self.values[k]);
                g[k][i] = v.clone();
                g[i][k] = v;
            }
        }
        g
    }

    pub fn gram_f64(&self) -> DMatrix<f64> {
        let g = self.gram();
        DMatrix::from_fn(self.len(), self.len(), |i, k| g[i][k].to_f64())
    }

    /// `max |G − I|` entrywise.
    pub fn gram_deviation(&self) -> f64 {
        let g = self.gram();
        let one = Hp::one();
        let mut dev = 0.0_f64;
        for (i, row) in g.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                let e = if i == k { v - &one } else { v.clone() };
                dev = dev.max(e.abs().to_f64());
            }
        }
        dev
    }

    fn check(&self) -> Result<()> {
        let dev = self.gram_deviation();
        if !(dev <= GRAM_TOL) {
            return Err(BasisError::QuadratureTooCoarse(dev));
        }
        Ok(())
    }

    /// `f` at every quadrature node.
    pub fn sample(&self, f: &dyn Fn(&[Hp]) -> Hp) -> Vec<Hp> {
        self.nodes.iter().map(|x| f(x)).collect()
    }

    /// Expansion coefficients `c_m = ⟨f, φ_m⟩`.
    pub fn coefficients(&self, f: &dyn Fn(&[Hp]) -> Hp) -> Vec<Hp> {
        let fv = self.sample(f);
        self.values.iter().map(|phi| self.inner(&fv, phi)).collect()
    }
}

/// Products `φ_ij(x1, x2) = φ_{1,i}(x1) φ_{2,j}(x2)` on the tensor quadrature.
pub fn tensor_product_family(f1: &OrthonormalFamily, f2: &OrthonormalFamily) -> Result<OrthonormalFamily> {
    if f1.dim() != 1 || f2.dim() != 1 {
        return Err(BasisError::DomainMismatch(f1.dim(), f2.dim()));
    }
    let (n1, n2) = (f1.nodes.len(), f2.nodes.len());
    let mut nodes = Vec::with_capacity(n1 * n2);
    let mut weights = Vec::with_capacity(n1 * n2);
    for (x1, w1) in f1.nodes.iter().zip(&f1.weights) {
        for (x2, w2) in f2.nodes.iter().zip(&f2.weights) {
            nodes.push(vec![x1[0].clone(), x2[0].clone()]);
            weights.push(w1 * w2);
        }
    }
    let mut values = Vec::with_capacity(f1.len() * f2.len());
    let mut multi_index = Vec::with_capacity(f1.len() * f2.len());
    for (i, p1) in f1.values.iter().enumerate() {
        for (j, p2) in f2.values.iter().enumerate() {
            let mut v = Vec::with_capacity(n1 * n2);
            for a in p1 {
                for b in p2 {
                    v.push(a * b);
                }
            }
            values.push(v);
            multi_index.push(vec![i, j]);
        }
    }
    let fam = OrthonormalFamily {
        domains: vec![f1.domains[0], f2.domains[0]],
        kinds: vec![f1.kinds[0], f2.kinds[0]],
        orders: vec![f1.orders[0], f2.orders[0]],
        multi_index,
        nodes,
        weights,
        values,
    };
    fam.check()?;
    Ok(fam)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TruncationReport {
    /// Number of leading members kept.
    pub orders: Vec<usize>,
    /// `‖E_n‖` from the Parseval formula.
    pub error_norm: Vec<f64>,
    /// `‖E_n‖²` from `‖f‖² − Σ c_i²`.
    pub error_sq_formula: Vec<f64>,
    /// `‖E_n‖²` by quadrature of the residual.
    pub error_sq_direct: Vec<f64>,
    /// `|formula − direct| / max(|formula|, |direct|)` per order.
    pub relative_gap: Vec<f64>,
    pub f_norm: f64,
    /// `‖E_n‖` strictly decreasing over the tested orders.
    pub strictly_decreasing: bool,
    pub non_increasing: bool,
    /// `‖E_n‖ ≤ ‖f‖ + 1e-8` for every tested order.
    pub bounded: bool,
    /// Smallest `‖f‖² − Σ c_i²` seen (Bessel: never below `−1e-8`).
    pub min_bessel_gap: f64,
}

/// Truncation errors of the expansion of `f` in the leading members of `fam`.
pub fn truncation_error_curve(f: &dyn Fn(&[Hp]) -> Hp, fam: &OrthonormalFamily, orders: &[usize]) -> Result<TruncationReport> {
    if let Some(&bad) = orders.iter().find(|&&n| n > fam.len()) {
        return Err(BasisError::InvalidOrder { order: bad, members: fam.len() });
    }
    let fv = fam.sample(f);
    let f_sq = fam.inner(&fv, &fv);
    let c: Vec<Hp> = fam.values.iter().map(|phi| fam.inner(&fv, phi)).collect();
    let mut rep = TruncationReport {
        orders: orders.to_vec(),
        error_norm: Vec::new(),
        error_sq_formula: Vec::new(),
        error_sq_direct: Vec::new(),
        relative_gap: Vec::new(),
        f_norm: f_sq.sqrt().to_f64(),
        strictly_decreasing: true,
        non_increasing: true,
        bounded: true,
        min_bessel_gap: f64::INFINITY,
    };
    // running subtraction keeps the formula monotone under rounding
    let max_n = orders.iter().copied().max().unwrap_or(0);
    let mut tail = vec![f_sq.clone()];
    for ci in &c[..max_n] {
        let next = tail.last().unwrap() - &(ci * ci);
        tail.push(next);
    }
    for &n in orders {
        let formula = tail[n].clone();
        let residual: Vec<Hp> = (0..fv.len()).map(|q| &fv[q] - &sum((0..n).map(|m| &c[m] * &fam.values[m][q]))).collect();
        let direct = fam.inner(&residual, &residual);
        let scale = formula.abs().to_f64().max(direct.abs().to_f64());
        let gap = if scale > 0.0 { (&formula - &direct).abs().to_f64() / scale } else { 0.0 };
        let ff = formula.to_f64();
        rep.min_bessel_gap = rep.min_bessel_gap.min(ff);
        rep.error_sq_formula.push(ff);
        rep.error_sq_direct.push(direct.to_f64());
        rep.relative_gap.push(gap);
        rep.error_norm.push(ff.max(0.0).sqrt());
    }
    for w in rep.error_norm.windows(2) {
        rep.strictly_decreasing &= w[1] < w[0];
        rep.non_increasing &= w[1] <= w[0];
    }
    rep.bounded = rep.error_norm.iter().all(|e| *e <= rep.f_norm + 1e-8);
    Ok(rep)
}

/// Tensor family on the recoverable partial state `x^r`, evaluated through the map
/// `y ↦ x^r = (C'ᵀC')⁻¹C'ᵀy` at the pushed-forward nodes `y = C' x^r`. Returns the
/// largest entrywise gap between the resulting Gram matrix and the one on `x^r`, and the
/// largest reconstruction error of the nodes.
pub fn pushforward_gram_gap(c: &DMatrix<f64>, fam: &OrthonormalFamily) -> Result<(f64, f64)> {
    crate::plants::check_output_map(c).map_err(BasisError::OutputMap)?;
    let cols = crate::plants::recoverable_states(c);
    if cols.len() != fam.dim() {
        return Err(BasisError::OutputMap(format!("{} recoverable states, family has dimension {}", cols.len(), fam.dim())));
    }
    let mut recon_err = 0.0_f64;
    let mut pushed_nodes = Vec::with_capacity(fam.nodes.len());
    for x in &fam.nodes {
        let xr = DVector::from_iterator(x.len(), x.iter().map(Hp::to_f64));
        let mut full = DVector::zeros(c.ncols());
        for (k, &j) in cols.iter().enumerate() {
            full[j] = xr[k];
        }
        let back = crate::plants::partial_state(c, &(c * full)).ok_or_else(|| BasisError::OutputMap("C' does not have full column rank".into()))?;
        recon_err = recon_err.max((&back - &xr).amax());
        pushed_nodes.push(back);
    }
    let mut values = Vec::with_capacity(fam.len());
    for idx in &fam.multi_index {
        values.push(
            pushed_nodes
                .iter()
                .map(|x| {
                    let mut v = Hp::one();
                    for (d, &k) in idx.iter().enumerate() {
                        let (a, b) = fam.domains[d];
                        v = &v * &member_value(fam.kinds[d], k, a, b, &Hp::from_f64(x[d]));
                    }
                    v
                })
                .collect::<Vec<_>>(),
        );
    }
    let pushed = OrthonormalFamily { values, ..fam.clone() };
    let (g0, g1) = (fam.gram(), pushed.gram());
    let mut gap = 0.0_f64;
    for i in 0..fam.len() {
        for k in 0..fam.len() {
            gap = gap.max((&g0[i][k] - &g1[i][k]).abs().to_f64());
        }
    }
    Ok((gap, recon_err))
}
