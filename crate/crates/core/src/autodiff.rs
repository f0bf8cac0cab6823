//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records every operation in execution order; [`Tape::backward`]
//! walks it once in reverse. Trainable tensors live in a [`ParamStore`] and
//! are copied onto the tape as leaves, so backward never touches stored values.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
}

type Res<T> = Result<T, AutodiffError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Res<Self> {
        if data.len() != rows * cols {
            return Err(AutodiffError::Invalid {
                op: "tensor",
                message: format!("{} values for shape {rows}x{cols}", data.len()),
            });
        }
        Ok(Self {
            shape: [rows, cols],
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: [rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            shape: [rows, cols],
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: [1, 1],
            data: vec![v],
        }
    }

    pub fn column(values: &[f64]) -> Self {
        Self {
            shape: [values.len(), 1],
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Self {
            shape: [rows, cols],
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Trainable tensors and their accumulated gradients.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    values: Vec<Tensor>,
    #[serde(skip)]
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, t: Tensor) -> ParamId {
        self.grads.push(Tensor::zeros(t.rows(), t.cols()));
        self.values.push(t);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        if self.grads.len() != self.values.len() {
            self.grads = self.values.iter().map(|v| Tensor::zeros(v.rows(), v.cols())).collect();
        }
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.data.len()).sum()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::Shape {
        op,
        left: a.shape,
        right: b.shape,
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape,
        data: a.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// `C = A · B` for row-major buffers.
fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                let brow = &b[p * m..(p + 1) * m];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    crate::dataset::sigmoid(x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    /// A constant input (receives no gradient outside the tape).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Res<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(n, m);
        matmul_raw(&ta.data, &tb.data, n, k, m, &mut out.data);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a `1 × c` row to every row of an `r × c` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Res<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(shape_err("add_bias", ta, tb));
        }
        let c = ta.cols();
        let data = ta.data.iter().enumerate().map(|(i, v)| v + tb.data[i % c]).collect();
        let out = Tensor { shape: ta.shape, data };
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, make: Op) -> Res<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err(op, ta, tb));
        }
        let out = zip(ta, tb, f);
        Ok(self.push(out, make))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Res<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Res<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = map(self.value(a), |v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = map(self.value(a), |v| v + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = map(self.value(a), softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::ln);
        self.push(out, Op::Ln(a))
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = map(self.value(a), |v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Res<Var> {
        let first = parts.first().ok_or(AutodiffError::Invalid {
            op: "concat",
            message: "no inputs".into(),
        })?;
        let r = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != r {
                return Err(shape_err("concat", self.value(*first), self.value(*p)));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let c: usize = widths.iter().sum();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let src = &self.value(*p).data[i * w..(i + 1) * w];
                out.data[i * c + off..i * c + off + w].copy_from_slice(src);
                off += w;
            }
        }
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..start + width`.
    pub fn slice(&mut self, a: Var, start: usize, width: usize) -> Res<Var> {
        let ta = self.value(a);
        if start + width > ta.cols() || width == 0 {
            return Err(AutodiffError::Invalid {
                op: "slice",
                message: format!("columns {start}..{} of {}", start + width, ta.cols()),
            });
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(r, width);
        for i in 0..r {
            out.data[i * width..(i + 1) * width].copy_from_slice(&ta.data[i * c + start..i * c + start + width]);
        }
        Ok(self.push(out, Op::Slice(a, start)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.data.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Propagates the gradient of the scalar `loss` back through the tape in a
    /// single reverse sweep, adding parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Res<()> {
        if self.value(loss).shape != [1, 1] {
            return Err(AutodiffError::Invalid {
                op: "backward",
                message: format!("loss must be 1x1, got {:?}", self.value(loss).shape),
            });
        }
        if store.grads.len() != store.values.len() {
            store.zero_grads();
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.data.iter_mut().zip(&g.data).for_each(|(e, x)| *e += x),
                slot => *slot = Some(g),
            }
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let dst = &mut store.grads[id.0];
                    dst.data.iter_mut().zip(&g.data).for_each(|(d, x)| *d += x);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                    // dA = G Bᵀ, dB = Aᵀ G
                    let mut da = Tensor::zeros(n, k);
                    for i in 0..n {
                        for p in 0..k {
                            da.data[i * k + p] = crate::linalg::dot(&g.data[i * m..(i + 1) * m], &tb.data[p * m..(p + 1) * m]);
                        }
                    }
                    let mut db = Tensor::zeros(k, m);
                    for i in 0..n {
                        let grow = &g.data[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av = ta.data[i * k + p];
                            if av != 0.0 {
                                crate::linalg::axpy(av, grow, &mut db.data[p * m..(p + 1) * m]);
                            }
                        }
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddBias(a, bias) => {
                    let c = g.cols();
                    let mut gb = Tensor::zeros(1, c);
                    for (i, v) in g.data.iter().enumerate() {
                        gb.data[i % c] += v;
                    }
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, map(&g, |v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip(&g, self.value(*b), |x, y| x * y);
                    let gb = zip(&g, self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, map(&g, |v| v * s)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let ga = zip(&g, self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => acc(&mut grads, *a, zip(&g, out, |x, y| x * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(&mut grads, *a, zip(&g, out, |x, y| x * y * (1.0 - y))),
                Op::Softplus(a) => {
                    let ga = zip(&g, self.value(*a), |x, v| x * sigmoid(v));
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, zip(&g, out, |x, y| x * y)),
                Op::Ln(a) => {
                    let ga = zip(&g, self.value(*a), |x, v| x / v);
                    acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = zip(&g, self.value(*a), |x, v| if v < *lo || v > *hi { 0.0 } else { x });
                    acc(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let (r, c) = (g.rows(), g.cols());
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut gp = Tensor::zeros(r, w);
                        for i in 0..r {
                            gp.data[i * w..(i + 1) * w].copy_from_slice(&g.data[i * c + off..i * c + off + w]);
                        }
                        off += w;
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::Slice(a, start) => {
                    let ta = self.value(*a);
                    let (r, c, w) = (ta.rows(), ta.cols(), g.cols());
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        ga.data[i * c + start..i * c + start + w].copy_from_slice(&g.data[i * w..(i + 1) * w]);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ta = self.value(*a);
                    acc(&mut grads, *a, Tensor::filled(ta.rows(), ta.cols(), g.data[0]));
                }
                Op::Mean(a) => {
                    let ta = self.value(*a);
                    let s = g.data[0] / ta.data.len().max(1) as f64;
                    acc(&mut grads, *a, Tensor::filled(ta.rows(), ta.cols(), s));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Probabilistic building blocks

/// `mu + exp(logvar / 2) ⊙ noise`.
pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, noise: Var) -> Res<Var> {
    let half = tape.scale(logvar, 0.5);
    let sd = tape.exp(half);
    let eps = tape.mul(sd, noise)?;
    tape.add(mu, eps)
}

/// `KL(N(mu, diag exp(logvar)) ‖ N(0, I))` summed over all entries:
/// `−½ Σ (1 + logvar − mu² − exp(logvar))`.
pub fn kl_diag_gaussian(tape: &mut Tape, mu: Var, logvar: Var) -> Res<Var> {
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(logvar);
    let a = tape.add_scalar(logvar, 1.0);
    let b = tape.sub(a, mu2)?;
    let c = tape.sub(b, var)?;
    let s = tape.sum(c);
    Ok(tape.scale(s, -0.5))
}

pub const PROB_CLAMP: f64 = 1e-7;

/// `Σ y ln p + (1 − y) ln(1 − p)` with `p` clamped to `[1e-7, 1 − 1e-7]`.
pub fn bernoulli_logpmf(tape: &mut Tape, prob: Var, y: Var) -> Res<Var> {
    let p = tape.clamp(prob, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lp = tape.ln(p);
    let q = tape.scale(p, -1.0);
    let q = tape.add_scalar(q, 1.0);
    let lq = tape.ln(q);
    let a = tape.mul(y, lp)?;
    let ny = tape.scale(y, -1.0);
    let ny = tape.add_scalar(ny, 1.0);
    let b = tape.mul(ny, lq)?;
    let s = tape.add(a, b)?;
    Ok(tape.sum(s))
}

/// Same likelihood from logits: `Σ y·l − softplus(l)`.
pub fn bernoulli_logpmf_logits(tape: &mut Tape, logits: Var, y: Var) -> Res<Var> {
    let yl = tape.mul(y, logits)?;
    let sp = tape.softplus(logits);
    let d = tape.sub(yl, sp)?;
    Ok(tape.sum(d))
}

/// `Σ −½ (ln 2π + logvar + (x − mu)² e^{−logvar})`.
pub fn gaussian_logpdf(tape: &mut Tape, x: Var, mu: Var, logvar: Var) -> Res<Var> {
    let d = tape.sub(x, mu)?;
    let d2 = tape.mul(d, d)?;
    let neg = tape.scale(logvar, -1.0);
    let prec = tape.exp(neg);
    let q = tape.mul(d2, prec)?;
    let inner = tape.add(q, logvar)?;
    let inner = tape.add_scalar(inner, (2.0 * std::f64::consts::PI).ln());
    let s = tape.sum(inner);
    Ok(tape.scale(s, -0.5))
}

// ---------------------------------------------------------------------------
// Networks and optimisation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// Fully connected network: hidden layers use `activation`, the output layer
/// is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub activation: Activation,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// `widths = [input, hidden..., output]`, Glorot-uniform weights, zero biases.
    pub fn new(store: &mut ParamStore, widths: &[usize], activation: Activation, rng: &mut Rng) -> Res<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(AutodiffError::Invalid {
                op: "mlp",
                message: format!("bad widths {widths:?}"),
            });
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
                let wt = store.add(Tensor {
                    shape: [fan_in, fan_out],
                    data,
                });
                let b = store.add(Tensor::zeros(1, fan_out));
                (wt, b)
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            layers,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Res<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let z = tape.matmul(h, wv)?;
            h = tape.add_bias(z, bv)?;
            if i + 1 < self.layers.len() {
                h = match self.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.values.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update from the accumulated gradients, which are
/// then zeroed.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (k, (p, g)) in store.values.iter_mut().zip(&store.grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p.data[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    store.zero_grads();
}
