//! Eager reverse-mode tape over [`Tensor`] values.
//!
//! Every op evaluates immediately and appends a node; nodes only refer to
//! earlier nodes, so the node vector is already in topological order and
//! `backward` is a single reverse sweep.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

use super::params::ParamStore;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Out-of-range taps read the nearest edge frame.
    Replicate,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttnMask {
    None,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Additive `lq × lk` mask over {0, −∞}, shared by every batch item and head.
    Additive(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnSpec {
    /// Number of independent sequences stacked along the rows.
    pub batch: usize,
    pub heads: usize,
    pub mask: AttnMask,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaskedSoftmax(Var),
    Conv1d {
        x: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        mode: PadMode,
    },
    Upsample(Var, usize),
    GroupMean(Var, usize),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SelectRows(Vec<Var>, Vec<usize>),
    StraightThrough(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        probs: Vec<f64>,
    },
    L1(Var, Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|&v| self.wrt(v))
    }

    /// Gradients of every parameter the loss reached, keyed by name.
    pub fn into_param_grads(mut self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, v) in std::mem::take(&mut self.params) {
            if let Some(g) = self.grads[v.0].take() {
                out.insert(name, g);
            }
        }
        out
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_parts(x: f64) -> (f64, f64) {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

/// Softmax of `logits + mask` in place, where mask entries of −∞ become exact zeros.
fn softmax_row(logits: &[f64], mask: Option<&[f64]>, out: &mut [f64], row: usize) -> Result<()> {
    let masked = |j: usize| mask.is_some_and(|m| m[j] == f64::NEG_INFINITY);
    let mut max = f64::NEG_INFINITY;
    for j in 0..logits.len() {
        if !masked(j) {
            let s = logits[j] + mask.map_or(0.0, |m| m[j]);
            max = max.max(s);
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateMaskRow { row });
    }
    let mut sum = 0.0;
    for j in 0..logits.len() {
        if masked(j) {
            out[j] = 0.0;
        } else {
            let e = (logits[j] + mask.map_or(0.0, |m| m[j]) - max).exp();
            out[j] = e;
            sum += e;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

fn conv_src(t: usize, k: usize, stride: usize, padding: usize, len: usize, mode: PadMode) -> Option<usize> {
    let pos = (t * stride + k) as isize - padding as isize;
    if pos >= 0 && (pos as usize) < len {
        Some(pos as usize)
    } else {
        match mode {
            PadMode::Zero => None,
            PadMode::Replicate => Some(pos.clamp(0, len as isize - 1) as usize),
        }
    }
}

/// Output length of a 1-D convolution, or an error when it would be empty.
pub fn conv1d_out_len(len: usize, width: usize, stride: usize, padding: usize) -> Result<usize> {
    if width == 0 || stride == 0 {
        return Err(Error::InvalidArgument("conv1d width and stride must be >= 1".into()));
    }
    let padded = len + 2 * padding;
    if padded < width {
        return Err(Error::SequenceTooShort {
            what: "conv1d input",
            len: padded,
            min: width,
        });
    }
    Ok((padded - width) / stride + 1)
}

/// Accumulator for input `v`; `None` when `v` does not need a gradient.
fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a named parameter as a gradient leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .clone();
        let v = self.leaf(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Copy of `x` cut off from the tape (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), &[a]))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the vector `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).numel() != c {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        Ok(self.push(t, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(t, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(t, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| gelu_parts(v).0).collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(t, Op::Gelu(x), &[x])
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let rows = self.value(x).rows();
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        {
            let src = self.value(x).data();
            let g = self.value(gamma).data();
            let b = self.value(beta).data();
            for r in 0..rows {
                let row = &src[r * c..(r + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + LN_EPS).sqrt();
                rstd[r] = rs;
                for j in 0..c {
                    let h = (row[j] - mean) * rs;
                    xhat[r * c + j] = h;
                    out[r * c + j] = h * g[j] + b[j];
                }
            }
        }
        let t = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Row-wise softmax of `logits + mask`. `mask` has the same width as `logits`;
    /// its rows are reused cyclically when it has fewer rows than `logits`.
    pub fn masked_softmax(&mut self, logits: Var, mask: &Tensor) -> Result<Var> {
        let c = self.value(logits).cols();
        let rows = self.value(logits).rows();
        if mask.cols() != c || rows % mask.rows() != 0 {
            return Err(Error::shape("masked_softmax", self.shape(logits), mask.shape()));
        }
        let mut out = vec![0.0; rows * c];
        let src = self.value(logits).data();
        for r in 0..rows {
            softmax_row(
                &src[r * c..(r + 1) * c],
                Some(mask.row(r % mask.rows())),
                &mut out[r * c..(r + 1) * c],
                r,
            )?;
        }
        let t = Tensor::from_parts(self.shape(logits).to_vec(), out);
        Ok(self.push(t, Op::MaskedSoftmax(logits), &[logits]))
    }

    /// Plain row-wise softmax.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let zero = Tensor::zeros(&[1, self.value(logits).cols()]);
        self.masked_softmax(logits, &zero)
    }

    /// 1-D convolution over rows: `x[T×D_in] ⊛ kernel[w×D_in×D_out]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize, mode: PadMode) -> Result<Var> {
        let (len, d_in) = self.matrix_dims("conv1d", x)?;
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 3 || ks[1] != d_in {
            return Err(Error::shape("conv1d", self.shape(x), &ks));
        }
        let (width, d_out) = (ks[0], ks[2]);
        let out_len = conv1d_out_len(len, width, stride, padding)?;
        let mut out = vec![0.0; out_len * d_out];
        let xs = self.value(x).data();
        let kd = self.value(kernel).data();
        for t in 0..out_len {
            let orow = &mut out[t * d_out..(t + 1) * d_out];
            for k in 0..width {
                if let Some(src) = conv_src(t, k, stride, padding, len, mode) {
                    matmul_into(
                        &xs[src * d_in..(src + 1) * d_in],
                        &kd[k * d_in * d_out..(k + 1) * d_in * d_out],
                        orow,
                        1,
                        d_in,
                        d_out,
                    );
                }
            }
        }
        let t = Tensor::from_parts(vec![out_len, d_out], out);
        Ok(self.push(
            t,
            Op::Conv1d {
                x,
                kernel,
                stride,
                padding,
                mode,
            },
            &[x, kernel],
        ))
    }

    /// Nearest-neighbour upsampling along rows.
    pub fn upsample(&mut self, x: Var, rate: usize) -> Result<Var> {
        let (len, c) = self.matrix_dims("upsample", x)?;
        if rate == 0 {
            return Err(Error::InvalidArgument("upsample rate must be >= 1".into()));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(len * rate * c);
        for t in 0..len * rate {
            let s = t / rate;
            out.extend_from_slice(&src[s * c..(s + 1) * c]);
        }
        let t = Tensor::from_parts(vec![len * rate, c], out);
        Ok(self.push(t, Op::Upsample(x, rate), &[x]))
    }

    /// Averages consecutive groups of `group` rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, c) = self.matrix_dims("group_mean", x)?;
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("group_mean", self.shape(x), &[group]));
        }
        let src = self.value(x).data();
        let n = rows / group;
        let mut out = vec![0.0; n * c];
        for r in 0..rows {
            let o = &mut out[(r / group) * c..(r / group + 1) * c];
            for (ov, &sv) in o.iter_mut().zip(&src[r * c..(r + 1) * c]) {
                *ov += sv;
            }
        }
        for v in &mut out {
            *v /= group as f64;
        }
        let t = Tensor::from_parts(vec![n, c], out);
        Ok(self.push(t, Op::GroupMean(x, group), &[x]))
    }

    /// Row lookup `table[idx[i]]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, c) = self.matrix_dims("gather", table)?;
        if idx.is_empty() {
            return Err(Error::InvalidArgument("gather needs at least one index".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::Index { index: bad, bound: v });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::from_parts(vec![idx.len(), c], out);
        Ok(self.push(t, Op::Gather(table, idx.to_vec()), &[table]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let (_, c) = self.matrix_dims("concat_rows", first)?;
        let mut out = Vec::new();
        for &p in parts {
            let (_, pc) = self.matrix_dims("concat_rows", p)?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / c;
        let t = Tensor::from_parts(vec![rows, c], out);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let (rows, _) = self.matrix_dims("concat_cols", first)?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.matrix_dims("concat_cols", p)?;
            if pr != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::from_parts(vec![rows, total], out);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, c) = self.matrix_dims("slice_rows", x)?;
        if start >= end || end > rows {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, end]));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let t = Tensor::from_parts(vec![end - start, c], data);
        Ok(self.push(t, Op::SliceRows(x, start), &[x]))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, c) = self.matrix_dims("slice_cols", x)?;
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, end]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&src[r * c + start..r * c + end]);
        }
        let t = Tensor::from_parts(vec![rows, end - start], data);
        Ok(self.push(t, Op::SliceCols(x, start), &[x]))
    }

    /// Row `r` of the output is row `r` of `inputs[class[r]]`.
    pub fn select_rows(&mut self, inputs: &[Var], class: &[usize]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::InvalidArgument("select of nothing".into()))?;
        let (rows, c) = self.matrix_dims("select_rows", first)?;
        for &i in inputs {
            self.same_shape("select_rows", first, i)?;
        }
        if class.len() != rows {
            return Err(Error::shape("select_rows", self.shape(first), &[class.len()]));
        }
        if let Some(&bad) = class.iter().find(|&&k| k >= inputs.len()) {
            return Err(Error::Index {
                index: bad,
                bound: inputs.len(),
            });
        }
        let mut out = Vec::with_capacity(rows * c);
        for (r, &k) in class.iter().enumerate() {
            out.extend_from_slice(self.value(inputs[k]).row(r));
        }
        let t = Tensor::from_parts(vec![rows, c], out);
        Ok(self.push(t, Op::SelectRows(inputs.to_vec(), class.to_vec()), inputs))
    }

    /// Forward value is `quantized` exactly; the backward pass hands the incoming
    /// gradient to `features` unchanged.
    pub fn straight_through(&mut self, features: Var, quantized: &Tensor) -> Result<Var> {
        if self.shape(features) != quantized.shape() {
            return Err(Error::shape("straight_through", self.shape(features), quantized.shape()));
        }
        Ok(self.push(quantized.clone(), Op::StraightThrough(features), &[features]))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `(batch·lq) × d`, `k` is `(batch·lk) × d`, `v` is `(batch·lk) × d_v`.
    /// Each head uses a `d/heads` slice and the scale `1/√(d/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        let (qr, d) = self.matrix_dims("attention", q)?;
        let (kr, dk) = self.matrix_dims("attention", k)?;
        let (vr, dv) = self.matrix_dims("attention", v)?;
        let AttnSpec { batch, heads, .. } = spec;
        if d != dk || kr != vr || batch == 0 || qr % batch != 0 || kr % batch != 0 {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 || dv % heads != 0 {
            return Err(Error::shape("attention", &[d, dv], &[heads]));
        }
        let (lq, lk) = (qr / batch, kr / batch);
        match &spec.mask {
            AttnMask::Causal if lq != lk => return Err(Error::shape("attention(causal)", &[lq], &[lk])),
            AttnMask::Additive(m) if m.shape() != [lq, lk] => {
                return Err(Error::shape("attention(mask)", m.shape(), &[lq, lk]))
            }
            _ => {}
        }
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![0.0; batch * heads * lq * lk];
        let mut out = vec![0.0; qr * dv];
        let mut logits = vec![0.0; lk];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..lq {
                    let qi = &qd[(b * lq + i) * d + h * dh..(b * lq + i) * d + (h + 1) * dh];
                    let visible = match &spec.mask {
                        AttnMask::Causal => i + 1,
                        _ => lk,
                    };
                    let mask_row = match &spec.mask {
                        AttnMask::Additive(m) => Some(m.row(i)),
                        _ => None,
                    };
                    for j in 0..visible {
                        let kj = &kd[(b * lk + j) * d + h * dh..(b * lk + j) * d + (h + 1) * dh];
                        logits[j] = dot(qi, kj) * scale;
                    }
                    let p = &mut probs[((b * heads + h) * lq + i) * lk..((b * heads + h) * lq + i + 1) * lk];
                    softmax_row(&logits[..visible], mask_row.map(|m| &m[..visible]), &mut p[..visible], i)?;
                    let orow = &mut out[(b * lq + i) * dv + h * dvh..(b * lq + i) * dv + (h + 1) * dvh];
                    for j in 0..visible {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let vj = &vd[(b * lk + j) * dv + h * dvh..(b * lk + j) * dv + (h + 1) * dvh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += p[j] * vv;
                        }
                    }
                }
            }
        }
        let t = Tensor::from_parts(vec![qr, dv], out);
        Ok(self.push(t, Op::Attention { q, k, v, spec, probs }, &[q, k, v]))
    }

    /// Attention probabilities `[batch][head][query][key]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], &AttnSpec)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, spec, .. } => Some((probs, spec)),
            _ => None,
        }
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_loss", a, b)?;
        let n = self.value(a).numel() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::L1(a, b), &[a, b]))
    }

    /// Mean squared error.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).numel() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b]))
    }

    /// Mean over rows of `−log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index { index: bad, bound: vocab });
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; rows * vocab];
        let mut loss = 0.0;
        for r in 0..rows {
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            softmax_row(&src[r * vocab..(r + 1) * vocab], None, p, r)?;
            // log-sum-exp form keeps tiny probabilities accurate
            let row = &src[r * vocab..(r + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
        }
        let t = Tensor::scalar(loss / rows as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.value(x).data().iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::from_parts(n.value.shape().to_vec(), d)))
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.iter().map(|(k, &v)| (k.clone(), v)).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if let Some(da) = slot(grads, nodes, *a) {
                    matmul_nt_into(g, val(*b), da, m, n, k);
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    matmul_tn_into(val(*a), g, db, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                if let Some(da) = slot(grads, nodes, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = slot(grads, nodes, *v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = slot(grads, nodes, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = slot(grads, nodes, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                if let Some(d) = slot(grads, nodes, *a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(val(*b)) {
                        *d += g * y;
                    }
                }
                if let Some(d) = slot(grads, nodes, *b) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a)) {
                        *d += g * x;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(d) = slot(grads, nodes, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                let c = nodes[bias.0].value.numel();
                if let Some(d) = slot(grads, nodes, *bias) {
                    for row in g.chunks(c) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = slot(grads, nodes, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s);
                }
            }
            Op::Relu(x) => {
                if let Some(d) = slot(grads, nodes, *x) {
                    for ((d, g), &xv) in d.iter_mut().zip(g).zip(val(*x)) {
                        if xv > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(d) = slot(grads, nodes, *x) {
                    for ((d, g), &xv) in d.iter_mut().zip(g).zip(val(*x)) {
                        *d += g * gelu_parts(xv).1;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = nodes[gamma.0].value.numel();
                let gm = val(*gamma);
                if let Some(d) = slot(grads, nodes, *x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gm[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= c as f64;
                        mean_dh_h /= c as f64;
                        for j in 0..c {
                            let dh = gr[j] * gm[j];
                            d[r * c + j] += rs * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                if let Some(d) = slot(grads, nodes, *gamma) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(d) = slot(grads, nodes, *beta) {
                    for gr in g.chunks(c) {
                        d.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                if let Some(d) = slot(grads, nodes, *x) {
                    for r in 0..y.len() / c {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let s = dot(yr, gr);
                        for j in 0..c {
                            d[r * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                kernel,
                stride,
                padding,
                mode,
            } => {
                let (len, d_in) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let ks = nodes[kernel.0].value.shape();
                let (width, d_out) = (ks[0], ks[2]);
                let out_len = node.value.shape()[0];
                let xs = val(*x);
                let kd = val(*kernel);
                if let Some(dx) = slot(grads, nodes, *x) {
                    for t in 0..out_len {
                        let gr = &g[t * d_out..(t + 1) * d_out];
                        for k in 0..width {
                            if let Some(src) = conv_src(t, k, *stride, *padding, len, *mode) {
                                matmul_nt_into(
                                    gr,
                                    &kd[k * d_in * d_out..(k + 1) * d_in * d_out],
                                    &mut dx[src * d_in..(src + 1) * d_in],
                                    1,
                                    d_out,
                                    d_in,
                                );
                            }
                        }
                    }
                }
                if let Some(dk) = slot(grads, nodes, *kernel) {
                    for t in 0..out_len {
                        let gr = &g[t * d_out..(t + 1) * d_out];
                        for k in 0..width {
                            if let Some(src) = conv_src(t, k, *stride, *padding, len, *mode) {
                                matmul_tn_into(
                                    &xs[src * d_in..(src + 1) * d_in],
                                    gr,
                                    &mut dk[k * d_in * d_out..(k + 1) * d_in * d_out],
                                    1,
                                    d_in,
                                    d_out,
                                );
                            }
                        }
                    }
                }
            }
            Op::Upsample(x, rate) => {
                let c = node.value.cols();
                if let Some(d) = slot(grads, nodes, *x) {
                    for (t, gr) in g.chunks(c).enumerate() {
                        let s = t / rate;
                        d[s * c..(s + 1) * c].iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::GroupMean(x, group) => {
                let c = node.value.cols();
                let inv = 1.0 / *group as f64;
                if let Some(d) = slot(grads, nodes, *x) {
                    for (r, dr) in d.chunks_mut(c).enumerate() {
                        let gr = &g[(r / group) * c..(r / group + 1) * c];
                        dr.iter_mut().zip(gr).for_each(|(d, g)| *d += g * inv);
                    }
                }
            }
            Op::Gather(table, idx) => {
                let c = node.value.cols();
                if let Some(d) = slot(grads, nodes, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        d[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[r * c..(r + 1) * c])
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    if let Some(d) = slot(grads, nodes, *p) {
                        d.iter_mut().zip(&g[off..off + n]).for_each(|(d, g)| *d += g);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for p in parts {
                    let pc = nodes[p.0].value.cols();
                    if let Some(d) = slot(grads, nodes, *p) {
                        for (r, dr) in d.chunks_mut(pc).enumerate() {
                            dr.iter_mut()
                                .zip(&g[r * total + off..r * total + off + pc])
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    off += pc;
                }
            }
            Op::SliceRows(x, start) => {
                let c = node.value.cols();
                if let Some(d) = slot(grads, nodes, *x) {
                    d[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::SliceCols(x, start) => {
                let c = nodes[x.0].value.cols();
                let w = node.value.cols();
                if let Some(d) = slot(grads, nodes, *x) {
                    for (r, gr) in g.chunks(w).enumerate() {
                        d[r * c + start..r * c + start + w]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::SelectRows(inputs, class) => {
                let c = node.value.cols();
                for (which, inp) in inputs.iter().enumerate() {
                    if let Some(d) = slot(grads, nodes, *inp) {
                        for (r, _) in class.iter().enumerate().filter(|(_, &k)| k == which) {
                            d[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(&g[r * c..(r + 1) * c])
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                }
            }
            Op::StraightThrough(f) => {
                if let Some(d) = slot(grads, nodes, *f) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(*q, *k, *v, spec, probs, g, grads);
            }
            Op::L1(a, b) => {
                let scale = g[0] / nodes[a.0].value.numel() as f64;
                let sign: Vec<f64> = val(*a)
                    .iter()
                    .zip(val(*b))
                    .map(|(x, y)| if x > y { 1.0 } else if x < y { -1.0 } else { 0.0 })
                    .collect();
                if let Some(d) = slot(grads, nodes, *a) {
                    d.iter_mut().zip(&sign).for_each(|(d, s)| *d += s * scale);
                }
                if let Some(d) = slot(grads, nodes, *b) {
                    d.iter_mut().zip(&sign).for_each(|(d, s)| *d -= s * scale);
                }
            }
            Op::Mse(a, b) => {
                let scale = 2.0 * g[0] / nodes[a.0].value.numel() as f64;
                let diff: Vec<f64> = val(*a).iter().zip(val(*b)).map(|(x, y)| x - y).collect();
                if let Some(d) = slot(grads, nodes, *a) {
                    d.iter_mut().zip(&diff).for_each(|(d, e)| *d += e * scale);
                }
                if let Some(d) = slot(grads, nodes, *b) {
                    d.iter_mut().zip(&diff).for_each(|(d, e)| *d -= e * scale);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = nodes[logits.0].value.cols();
                let scale = g[0] / targets.len() as f64;
                if let Some(d) = slot(grads, nodes, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..vocab {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            d[r * vocab + j] += (probs[r * vocab + j] - onehot) * scale;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = slot(grads, nodes, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel() as f64;
                if let Some(d) = slot(grads, nodes, *x) {
                    d.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = slot(grads, nodes, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let qd = nodes[q.0].value.data();
        let kd = nodes[k.0].value.data();
        let vd = nodes[v.0].value.data();
        let d = nodes[q.0].value.cols();
        let dv = nodes[v.0].value.cols();
        let (batch, heads) = (spec.batch, spec.heads);
        let lq = nodes[q.0].value.rows() / batch;
        let lk = nodes[k.0].value.rows() / batch;
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dvv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; lk];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..lq {
                    let p = &probs[((b * heads + h) * lq + i) * lk..((b * heads + h) * lq + i + 1) * lk];
                    let gi = &g[(b * lq + i) * dv + h * dvh..(b * lq + i) * dv + (h + 1) * dvh];
                    let visible = if spec.mask == AttnMask::Causal { i + 1 } else { lk };
                    let mut s = 0.0;
                    for j in 0..visible {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vrow = (b * lk + j) * dv + h * dvh;
                        dp[j] = dot(gi, &vd[vrow..vrow + dvh]);
                        s += p[j] * dp[j];
                        for (o, &gv) in dvv[vrow..vrow + dvh].iter_mut().zip(gi) {
                            *o += p[j] * gv;
                        }
                    }
                    let qrow = (b * lq + i) * d + h * dh;
                    for j in 0..visible {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - s) * scale;
                        let krow = (b * lk + j) * d + h * dh;
                        for c in 0..dh {
                            dq[qrow + c] += ds * kd[krow + c];
                            dk[krow + c] += ds * qd[qrow + c];
                        }
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dvv)] {
            if !nodes[var.0].requires_grad {
                continue;
            }
            let slot = grads[var.0].get_or_insert_with(|| vec![0.0; nodes[var.0].value.numel()]);
            slot.iter_mut().zip(&delta).for_each(|(s, d)| *s += d);
        }
    }
}
