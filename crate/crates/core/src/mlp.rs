//! Feed-forward lifting networks with manual reverse-mode gradients and Adam.
//!
//! Hidden layers use ReLU (derivative 0 at exactly 0), the output layer is linear.
//! Batches are row-major: each row of the input matrix is one sample.

use std::io::{BufRead, Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("malformed network file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MlpError>;

/// Default hidden widths.
pub const DEFAULT_HIDDEN: [usize; 2] = [128, 256];
pub const DEFAULT_SEED: u64 = 42;

const ACTIVATION_TAG: &str = "relu-identity";

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LiftingNetwork {
    pub layers: Vec<Layer>,
    pub seed: u64,
}

/// Intermediate values of a forward pass needed by [`LiftingNetwork::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the batch itself).
    pub inputs: Vec<DMatrix<f64>>,
    /// Pre-activation of each layer.
    pub pre: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.pre.last().expect("at least one layer")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    /// `(dW, db)` per layer.
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
    /// Gradient with respect to the batch input.
    pub input: DMatrix<f64>,
}

impl Gradients {
    /// Flattened in the same order as [`LiftingNetwork::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

impl LiftingNetwork {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new(in_dim: usize, hidden: &[usize], out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..limit));
                Layer { weight, bias: DVector::zeros(fan_out) }
            })
            .collect();
        Self { layers, seed }
    }

    /// A network made of explicit layers (validated for chaining).
    pub fn from_layers(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(MlpError::DimensionMismatch("network needs at least one layer".into()));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(MlpError::DimensionMismatch(format!("layer {i} output does not feed layer {}", i + 1)));
            }
        }
        for l in &layers {
            if l.bias.len() != l.out_dim() {
                return Err(MlpError::DimensionMismatch("bias length".into()));
            }
        }
        Ok(Self { layers, seed })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        d.extend(self.layers.iter().map(Layer::out_dim));
        d
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_cached(x)?.pre.pop().expect("non-empty"))
    }

    /// Evaluates a single sample.
    pub fn forward_one(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let out = self.forward(&DMatrix::from_row_slice(1, x.len(), x.as_slice()))?;
        Ok(out.row(0).transpose())
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> Result<ForwardCache> {
        if x.ncols() != self.in_dim() {
            return Err(MlpError::DimensionMismatch(format!(
                "batch has {} columns, network expects {}",
                x.ncols(),
                self.in_dim()
            )));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut a = &h * layer.weight.transpose();
            for mut row in a.row_iter_mut() {
                row += layer.bias.transpose();
            }
            let next = if i + 1 < n { a.map(|v| v.max(0.0)) } else { DMatrix::zeros(0, 0) };
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(a);
        }
        Ok(ForwardCache { inputs, pre })
    }

    /// Reverse-mode gradients of `<upstream, forward(x)>` for the cached pass.
    pub fn backward(&self, cache: &ForwardCache, upstream: &DMatrix<f64>) -> Result<Gradients> {
        let out = cache.output();
        if upstream.shape() != out.shape() {
            return Err(MlpError::DimensionMismatch(format!(
                "upstream gradient {:?} vs output {:?}",
                upstream.shape(),
                out.shape()
            )));
        }
        let n = self.layers.len();
        let mut grads = vec![(DMatrix::zeros(0, 0), DVector::zeros(0)); n];
        let mut delta = upstream.clone();
        for i in (0..n).rev() {
            let dw = delta.transpose() * &cache.inputs[i];
            let db = DVector::from_iterator(delta.ncols(), delta.column_iter().map(|c| c.sum()));
            grads[i] = (dw, db);
            let mut back = &delta * &self.layers[i].weight;
            if i > 0 {
                back.zip_apply(&cache.pre[i - 1], |d, a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            delta = back;
        }
        Ok(Gradients { layers: grads, input: delta })
    }

    /// All parameters, layer by layer: weight (column-major) then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Inverse of [`LiftingNetwork::to_flat`].
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(MlpError::DimensionMismatch(format!(
                "{} parameters given, network has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.as_mut_slice().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Text header line followed by the raw little-endian parameters.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let dims: Vec<String> = self.dims().iter().map(|d| d.to_string()).collect();
        writeln!(
            w,
            "lifting-network v1 dims={} activation={} seed={} params={}",
            dims.join(","),
            ACTIVATION_TAG,
            self.seed,
            self.num_params()
        )?;
        for v in self.to_flat() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let mut fields = header.trim_end().split(' ');
        if fields.next() != Some("lifting-network") || fields.next() != Some("v1") {
            return Err(MlpError::Format(format!("bad header `{}`", header.trim_end())));
        }
        let mut dims = None;
        let mut seed = None;
        let mut params = None;
        for kv in fields {
            let (k, v) = kv.split_once('=').ok_or_else(|| MlpError::Format(kv.to_string()))?;
            match k {
                "dims" => {
                    dims = Some(
                        v.split(',')
                            .map(|d| d.parse::<usize>().map_err(|e| MlpError::Format(e.to_string())))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "activation" if v != ACTIVATION_TAG => return Err(MlpError::Format(format!("activation {v}"))),
                "seed" => seed = Some(v.parse::<u64>().map_err(|e| MlpError::Format(e.to_string()))?),
                "params" => params = Some(v.parse::<usize>().map_err(|e| MlpError::Format(e.to_string()))?),
                _ => {}
            }
        }
        let dims = dims.ok_or_else(|| MlpError::Format("missing dims".into()))?;
        if dims.len() < 2 {
            return Err(MlpError::Format("need at least two dims".into()));
        }
        let mut net = Self::new(dims[0], &dims[1..dims.len() - 1], dims[dims.len() - 1], 0);
        net.seed = seed.ok_or_else(|| MlpError::Format("missing seed".into()))?;
        let count = params.ok_or_else(|| MlpError::Format("missing params".into()))?;
        if count != net.num_params() {
            return Err(MlpError::Format(format!("params={count} inconsistent with dims")));
        }
        let flat = read_f64s(r, count)?;
        net.set_flat(&flat)?;
        Ok(net)
    }
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, count: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

/// Bias-corrected Adam moments for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient length");
    assert_eq!(params.len(), state.m.len(), "parameter/state length");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn loss(net: &LiftingNetwork, x: &DMatrix<f64>, up: &DMatrix<f64>) -> f64 {
        net.forward(x).unwrap().dot(up)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut net = LiftingNetwork::new(3, &[5], 2, 1);
        net.set_flat(&vec![0.0; net.num_params()]).unwrap();
        assert!(net.forward(&random_batch(4, 3, 0)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer() {
        let w = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let net = LiftingNetwork::from_layers(vec![Layer { weight: w.clone(), bias: DVector::zeros(2) }], 0).unwrap();
        let x = random_batch(5, 3, 2);
        assert_eq!(net.forward(&x).unwrap(), &x * w.transpose());

        let up = random_batch(5, 2, 3);
        let g = net.backward(&net.forward_cached(&x).unwrap(), &up).unwrap();
        assert!((&g.layers[0].0 - up.transpose() * &x).norm() < 1e-14);
    }

    #[test]
    fn batch_equals_stacked_rows() {
        let net = LiftingNetwork::new(3, &[7, 6], 4, 9);
        let x = random_batch(6, 3, 4);
        let full = net.forward(&x).unwrap();
        for r in 0..6 {
            let row = net.forward_one(&x.row(r).transpose()).unwrap();
            assert!((full.row(r).transpose() - row).amax() < 1e-14);
        }
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let net = LiftingNetwork::new(3, &[4], 2, 0);
        assert!(net.forward(&DMatrix::zeros(2, 2)).is_err());
        let cache = net.forward_cached(&DMatrix::zeros(2, 3)).unwrap();
        assert!(net.backward(&cache, &DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = LiftingNetwork::new(3, &[8, 8], 2, 5);
        let x = random_batch(4, 3, 6);
        let g = net.backward(&net.forward_cached(&x).unwrap(), &DMatrix::zeros(4, 2)).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut net = LiftingNetwork::new(3, &[16, 12], 4, 17);
        // non-zero biases so ReLU kinks are not aligned with the origin
        let mut flat = net.to_flat();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in flat.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        net.set_flat(&flat).unwrap();
        let x = random_batch(6, 3, 7);
        let up = random_batch(6, 4, 8);
        let cache = net.forward_cached(&x).unwrap();
        let analytic = net.backward(&cache, &up).unwrap().to_flat();
        let h = 1e-5;
        let pattern = |n: &LiftingNetwork| -> Vec<bool> {
            let c = n.forward_cached(&x).unwrap();
            c.pre[..c.pre.len() - 1].iter().flat_map(|a| a.iter().map(|v| *v > 0.0).collect::<Vec<_>>()).collect()
        };
        let base = pattern(&net);
        let margin_ok = |n: &LiftingNetwork| pattern(n) == base;
        let mut checked = 0;
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] += h;
            let mut plus = net.clone();
            plus.set_flat(&p).unwrap();
            p[i] -= 2.0 * h;
            let mut minus = net.clone();
            minus.set_flat(&p).unwrap();
            if !margin_ok(&plus) || !margin_ok(&minus) {
                continue;
            }
            let fd = (loss(&plus, &x, &up) - loss(&minus, &x, &up)) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(rel < 1e-5, "param {i}: fd {fd} analytic {}", analytic[i]);
            checked += 1;
        }
        assert!(checked > flat.len() / 2);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut s = AdamState::new(3, 1e-3);
        adam_step(&mut p, &[0.0; 3], &mut s);
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let g = [0.5, -2.0, 1e-3];
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3, 0.1);
        adam_step(&mut p, &g, &mut s);
        for i in 0..3 {
            // m_hat = g, v_hat = g^2 after bias correction
            let expected = -0.1 * g[i] / (g[i].abs() + 1e-8);
            assert!((p[i] - expected).abs() < 1e-12);
        }
        let mut p2 = vec![0.0; 3];
        let mut s2 = AdamState::new(3, 0.1);
        adam_step(&mut p2, &g, &mut s2);
        assert_eq!(p, p2);
        assert_eq!(s, s2);
    }

    #[test]
    fn learns_linear_map() {
        let mut net = LiftingNetwork::new(1, &[16], 1, 3);
        let x = DMatrix::from_fn(64, 1, |i, _| -1.0 + 2.0 * i as f64 / 63.0);
        let y = &x * 2.0;
        let mse = |n: &LiftingNetwork| (n.forward(&x).unwrap() - &y).norm_squared() / 64.0;
        let initial = mse(&net);
        let mut state = AdamState::new(net.num_params(), 1e-2);
        for _ in 0..2000 {
            let cache = net.forward_cached(&x).unwrap();
            let up = (cache.output() - &y) * (2.0 / 64.0);
            let g = net.backward(&cache, &up).unwrap().to_flat();
            let mut p = net.to_flat();
            adam_step(&mut p, &g, &mut state);
            net.set_flat(&p).unwrap();
        }
        assert!(mse(&net) * 100.0 <= initial, "{} vs {}", mse(&net), initial);
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let net = LiftingNetwork::new(2, &[5, 3], 4, 1234);
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        let back = LiftingNetwork::read_from(&mut std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, net);
        let a: Vec<u64> = net.to_flat().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.to_flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert!(LiftingNetwork::read_from(&mut std::io::Cursor::new(b"garbage\n".to_vec())).is_err());
    }
}
