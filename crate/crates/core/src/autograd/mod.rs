//! Define-by-run reverse-mode differentiation over [`DenseTensor`] values.
//!
//! A [`Tape`] records every operation in execution order, so the node list is
//! already topologically sorted. [`Tape::backward`] walks it in reverse and
//! accumulates gradients into every node that requires them. The tape is
//! rebuilt for each training step.

mod gradcheck;

pub use gradcheck::{
    central_difference_check, finite_diff_check, GradCheckOptions, GradCheckReport, Sampling,
};

use crate::error::{Error, Result};
use crate::tensor::{gemm_into, DenseTensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate corruption of a backward rule, used as a negative control for
/// gradient audits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// Scales the right-operand gradient of `matmul` by `1 + 1e-3`.
    MatMulRhs,
    /// Scales the matrix gradient of `mode_product` by `1 + 1e-3`.
    ModeProductMatrix,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ModeProduct { t: Var, m: Var, mode: usize },
    Concat { parts: Vec<Var>, mode: usize },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Narrow { x: Var, mode: usize, start: usize },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: DenseTensor,
    op: Op,
    requires_grad: bool,
    grad: Option<DenseTensor>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn split3(shape: &[usize], mode: usize) -> (usize, usize, usize) {
    (
        shape[..mode].iter().product(),
        shape[mode],
        shape[mode + 1..].iter().product(),
    )
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn erf_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Batched `(N, m, k) · (N, k, n)` with optional transposes applied by index.
fn bmm(a: &[f64], b: &[f64], batches: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; batches * m * n];
    for bi in 0..batches {
        gemm_into(
            &a[bi * m * k..(bi + 1) * m * k],
            &b[bi * k * n..(bi + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    out
}

fn transpose_batches(x: &[f64], batches: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..batches {
        let base = bi * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = x[base + i * c + j];
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: BackwardFault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: DenseTensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: DenseTensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: DenseTensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&DenseTensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: DenseTensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul(self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b), &[a, b]))
    }

    /// `(N, m, k) · (N, k, n) → (N, m, n)`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let data = bmm(self.value(a).data(), self.value(b).data(), nb, m, k, n);
        let y = DenseTensor::new(vec![nb, m, n], data)?;
        Ok(self.push(y, Op::BatchMatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of a tensor whose last mode is `n`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let bs = self.value(bias).shape();
        let n = *xs.last().unwrap();
        if bs != [n] {
            return Err(mismatch("add_bias", format!("{xs:?} + {bs:?}")));
        }
        let b = self.value(bias).data().to_vec();
        let mut y = self.value(x).clone();
        for row in y.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        Ok(self.push(y, Op::AddBias(x, bias), &[x, bias]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_with(self.value(b), "mul", |p, q| p * q)?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a).scale(c);
        self.push(y, Op::Scale(a, c), &[a])
    }

    pub fn mode_product(&mut self, t: Var, m: Var, mode: usize) -> Result<Var> {
        let y = self.value(t).mode_product(self.value(m), mode)?;
        Ok(self.push(y, Op::ModeProduct { t, m, mode }, &[t, m]))
    }

    pub fn concat(&mut self, parts: &[Var], mode: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat", "no inputs".into()))?;
        let base = self.value(*first).shape().to_vec();
        if mode >= base.len() {
            return Err(Error::ModeOutOfRange {
                mode,
                order: base.len(),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == mode || a == b);
            if !compatible {
                return Err(mismatch("concat", format!("{s:?} vs {base:?} along {mode}")));
            }
            total += s[mode];
        }
        let (pre, _, post) = split3(&base, mode);
        let mut shape = base.clone();
        shape[mode] = total;
        let mut data = vec![0.0; pre * total * post];
        let mut offset = 0;
        for p in parts {
            let v = self.value(*p);
            let n = v.dim(mode);
            for i in 0..pre {
                let src = &v.data()[i * n * post..(i + 1) * n * post];
                let dst = (i * total + offset) * post;
                data[dst..dst + n * post].copy_from_slice(src);
            }
            offset += n;
        }
        let y = DenseTensor::new(shape, data)?;
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
                mode,
            },
            parts,
        ))
    }

    /// Softmax over the last mode.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        let n = *y.shape().last().unwrap();
        for row in y.data_mut().chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(y, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last mode with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let n = *xs.last().unwrap();
        if self.value(gamma).shape() != [n] || self.value(beta).shape() != [n] {
            return Err(mismatch(
                "layer_norm",
                format!(
                    "input {xs:?}, gamma {:?}, beta {:?}",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let src = self.value(x).data();
        let rows = src.len() / n;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let y = DenseTensor::new(xs, out)?;
        Ok(self.push(
            y,
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

    /// Exact GELU, `x·Φ(x)` with the erf-based normal CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * erf_cdf(v));
        self.push(y, Op::Gelu(x), &[x])
    }

    /// Gathers rows of a `(vocab × d)` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.order() != 2 {
            return Err(mismatch("embedding", format!("table shape {:?}", t.shape())));
        }
        let (vocab, d) = (t.dim(0), t.dim(1));
        if ids.is_empty() {
            return Err(mismatch("embedding", "no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::IndexOutOfRange {
                    mode: 0,
                    index: id,
                    size: vocab,
                });
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let y = DenseTensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            y,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean cross-entropy of `(B × C)` logits against integer labels, with a
    /// fused log-softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if l.order() != 2 {
            return Err(mismatch("cross_entropy", format!("logits {:?}", l.shape())));
        }
        let (rows, classes) = (l.dim(0), l.dim(1));
        if classes == 0 {
            return Err(Error::InvalidConfig("cross_entropy needs at least one class".into()));
        }
        if labels.len() != rows {
            return Err(mismatch(
                "cross_entropy",
                format!("{rows} rows but {} labels", labels.len()),
            ));
        }
        let mut probs = vec![0.0; rows * classes];
        let mut total = 0.0;
        for r in 0..rows {
            let row = &l.data()[r * classes..(r + 1) * classes];
            if labels[r] >= classes {
                return Err(Error::IndexOutOfRange {
                    mode: 1,
                    index: labels[r],
                    size: classes,
                });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            total += log_z - row[labels[r]];
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - log_z).exp();
            }
        }
        let y = DenseTensor::scalar(total / rows as f64);
        Ok(self.push(
            y,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// `len` consecutive entries of `mode` starting at `start`.
    pub fn narrow(&mut self, x: Var, mode: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        v.check_mode(mode)?;
        let n = v.dim(mode);
        if len == 0 || start + len > n {
            return Err(Error::IndexOutOfRange {
                mode,
                index: start + len,
                size: n,
            });
        }
        let (pre, _, post) = split3(v.shape(), mode);
        let mut data = Vec::with_capacity(pre * len * post);
        for i in 0..pre {
            let s = (i * n + start) * post;
            data.extend_from_slice(&v.data()[s..s + len * post]);
        }
        let mut shape = v.shape().to_vec();
        shape[mode] = len;
        let y = DenseTensor::new(shape, data)?;
        Ok(self.push(y, Op::Narrow { x, mode, start }, &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let y = self.value(x).permute(perm)?;
        Ok(self.push(
            y,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.value(x).order() != 2 {
            return Err(mismatch("transpose", format!("{:?}", self.value(x).shape())));
        }
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = DenseTensor::scalar(self.value(x).data().iter().sum());
        self.push(y, Op::Sum(x), &[x])
    }

    fn fault_factor(&self, which: BackwardFault) -> f64 {
        if self.fault == Some(which) {
            1.0 + 1e-3
        } else {
            1.0
        }
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into every
    /// reachable node with `requires_grad` until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<DenseTensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(DenseTensor::filled(shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.axpy(1.0, &g)?,
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn accumulate(
        &self,
        grads: &mut [Option<DenseTensor>],
        v: Var,
        g: DenseTensor,
    ) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(1.0, &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &DenseTensor, grads: &mut [Option<DenseTensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul(&bv.transpose()?)?)?;
                }
                if self.requires_grad(*b) {
                    let gb = av.transpose()?.matmul(g)?;
                    let gb = gb.scale(self.fault_factor(BackwardFault::MatMulRhs));
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (nb, m, k) = (av.dim(0), av.dim(1), av.dim(2));
                let n = bv.dim(2);
                if self.requires_grad(*a) {
                    let bt = transpose_batches(bv.data(), nb, k, n);
                    let ga = bmm(g.data(), &bt, nb, m, n, k);
                    self.accumulate(grads, *a, DenseTensor::new(vec![nb, m, k], ga)?)?;
                }
                if self.requires_grad(*b) {
                    let at = transpose_batches(av.data(), nb, m, k);
                    let gb = bmm(&at, g.data(), nb, k, m, n);
                    self.accumulate(grads, *b, DenseTensor::new(vec![nb, k, n], gb)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.requires_grad(*bias) {
                    let n = self.value(*bias).len();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, DenseTensor::new(vec![n], gb)?)?;
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_with(self.value(*b), "mul", |x, y| x * y)?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_with(self.value(*a), "mul", |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c))?,
            Op::ModeProduct { t, m, mode } => {
                let mv = self.value(*m);
                if self.requires_grad(*t) {
                    self.accumulate(grads, *t, g.mode_product(&mv.transpose()?, *mode)?)?;
                }
                if self.requires_grad(*m) {
                    // Y_(n) = M · T_(n)  ⇒  dM = dY_(n) · T_(n)ᵀ
                    let gm = g
                        .unfold(*mode)?
                        .matmul(&self.value(*t).unfold(*mode)?.transpose()?)?;
                    let gm = gm.scale(self.fault_factor(BackwardFault::ModeProductMatrix));
                    self.accumulate(grads, *m, gm)?;
                }
            }
            Op::Concat { parts, mode } => {
                let (pre, total, post) = split3(g.shape(), *mode);
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape().to_vec();
                    let n = shape[*mode];
                    if self.requires_grad(*p) {
                        let mut data = Vec::with_capacity(pre * n * post);
                        for r in 0..pre {
                            let s = (r * total + offset) * post;
                            data.extend_from_slice(&g.data()[s..s + n * post]);
                        }
                        self.accumulate(grads, *p, DenseTensor::new(shape, data)?)?;
                    }
                    offset += n;
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (o, &yy) in gr.iter_mut().zip(yr) {
                        *o = yy * (*o - dot);
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).len();
                let gamma_v = self.value(*gamma).data();
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut gg = vec![0.0; n];
                    let mut gbeta = vec![0.0; n];
                    for (gr, hr) in g.data().chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                            gbeta[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *gamma, DenseTensor::new(vec![n], gg)?)?;
                    self.accumulate(grads, *beta, DenseTensor::new(vec![n], gbeta)?)?;
                }
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, (gr, hr)) in g.data().chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dh: Vec<f64> = gr.iter().zip(gamma_v).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[r * n + j] = rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, DenseTensor::new(g.shape().to_vec(), gx)?)?;
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = g.zip_with(xv, "gelu", |gy, v| gy * (erf_cdf(v) + v * normal_pdf(v)))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.dim(1);
                let mut gt = DenseTensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let row = &g.data()[r * d..(r + 1) * d];
                    for (o, v) in gt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, gt)?;
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let rows = labels.len();
                let classes = probs.len() / rows;
                let scale = g.data()[0] / rows as f64;
                let mut gl = probs.clone();
                for (r, &lab) in labels.iter().enumerate() {
                    gl[r * classes + lab] -= 1.0;
                }
                for v in gl.iter_mut() {
                    *v *= scale;
                }
                self.accumulate(grads, *logits, DenseTensor::new(vec![rows, classes], gl)?)?;
            }
            Op::Narrow { x, mode, start } => {
                let shape = self.value(*x).shape().to_vec();
                let (pre, n, post) = split3(&shape, *mode);
                let len = g.dim(*mode);
                let mut gx = DenseTensor::zeros(&shape);
                for r in 0..pre {
                    let s = (r * n + start) * post;
                    gx.data_mut()[s..s + len * post]
                        .copy_from_slice(&g.data()[r * len * post..(r + 1) * len * post]);
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Permute { x, perm } => {
                self.accumulate(grads, *x, g.permute(&inverse_perm(perm))?)?;
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape)?)?;
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, DenseTensor::filled(&shape, g.data()[0]))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_symmetric() {
        let mut t = Tape::new();
        let x = t.constant(DenseTensor::zeros(&[1, 2]));
        let y = t.softmax(x);
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let mut t = Tape::new();
        let x = t.constant(DenseTensor::zeros(&[3, 2]));
        for label in 0..2 {
            let l = t.cross_entropy(x, &[label, label, 1 - label]).unwrap();
            assert!(close(t.value(l).data()[0], std::f64::consts::LN_2, 1e-15));
        }
    }

    #[test]
    fn cross_entropy_rejects_empty_classes_and_bad_labels() {
        let mut t = Tape::new();
        let x = t.constant(DenseTensor::zeros(&[1, 2]));
        assert!(t.cross_entropy(x, &[2]).is_err());
        assert!(t.cross_entropy(x, &[0, 1]).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.param(DenseTensor::random_normal(&[3, 4], 1));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(t.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn inner_product_of_matmul_gradient_closed_form() {
        let a = DenseTensor::random_normal(&[3, 4], 2);
        let b = DenseTensor::random_normal(&[4, 5], 3);
        let c = DenseTensor::random_normal(&[3, 5], 4);
        let mut t = Tape::new();
        let (av, bv, cv) = (t.param(a.clone()), t.param(b.clone()), t.constant(c.clone()));
        let ab = t.matmul(av, bv).unwrap();
        let prod = t.mul(ab, cv).unwrap();
        let loss = t.sum(prod);
        t.backward(loss).unwrap();
        let expected_a = c.matmul(&b.transpose().unwrap()).unwrap();
        let expected_b = a.transpose().unwrap().matmul(&c).unwrap();
        assert!(t.grad(av).unwrap().max_abs_diff(&expected_a) < 1e-12);
        assert!(t.grad(bv).unwrap().max_abs_diff(&expected_b) < 1e-12);
    }

    #[test]
    fn backward_accumulates_and_zero_grad_resets() {
        let mut t = Tape::new();
        let x = t.param(DenseTensor::random_normal(&[2, 3], 5));
        let y = t.scale(x, 3.0);
        let s = t.sum(y);
        t.backward(s).unwrap();
        let first = t.grad(x).unwrap().clone();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &first.scale(2.0));
        t.zero_grad();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &first);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param(DenseTensor::zeros(&[2, 2]));
        assert_eq!(t.backward(x), Err(Error::NonScalarLoss(vec![2, 2])));
    }

    #[test]
    fn linearity_of_backward() {
        let x0 = DenseTensor::random_normal(&[3, 3], 6);
        let w = DenseTensor::random_normal(&[3, 3], 7);
        let grad_of = |coef_f: f64, coef_g: f64| {
            let mut t = Tape::new();
            let x = t.param(x0.clone());
            let wv = t.constant(w.clone());
            let f = t.matmul(x, wv).unwrap();
            let f = t.gelu(f);
            let f = t.sum(f);
            let g = t.mul(x, x).unwrap();
            let g = t.sum(g);
            let a = t.scale(f, coef_f);
            let b = t.scale(g, coef_g);
            let l = t.add(a, b).unwrap();
            t.backward(l).unwrap();
            t.grad(x).unwrap().clone()
        };
        let combined = grad_of(2.0, -0.5);
        let mut separate = grad_of(1.0, 0.0).scale(2.0);
        separate.axpy(-0.5, &grad_of(0.0, 1.0)).unwrap();
        assert!(combined.max_abs_diff(&separate) < 1e-12);
    }

    #[test]
    fn constants_record_no_provenance() {
        let mut t = Tape::new();
        let a = t.constant(DenseTensor::random_normal(&[2, 2], 1));
        let b = t.matmul(a, a).unwrap();
        assert!(!t.requires_grad(b));
        let s = t.sum(b);
        t.backward(s).unwrap();
        assert!(t.grad(a).is_none());
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let mut t = Tape::new();
        let a = t.param(DenseTensor::random_normal(&[2, 3, 2], 1));
        let b = t.param(DenseTensor::random_normal(&[2, 1, 2], 2));
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 4, 2]);
        let back = t.narrow(c, 1, 0, 3).unwrap();
        assert_eq!(t.value(back), t.value(a));
        let tail = t.narrow(c, 1, 3, 1).unwrap();
        assert_eq!(t.value(tail), t.value(b));
    }
}
