//! Dense N-mode tensors and the multilinear kernels built on them.
//!
//! Storage is row-major with the last mode varying fastest. The mode-`n`
//! unfolding puts mode `n` on the rows and flattens the remaining modes, in
//! increasing index order with the last fastest, onto the columns.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "order must be at least 1".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "every mode size must be at least 1".into(),
        });
    }
    Ok(shape.iter().product())
}

/// Splits `shape` around `mode` into (product before, size, product after).
fn split_at_mode(shape: &[usize], mode: usize) -> (usize, usize, usize) {
    let pre = shape[..mode].iter().product();
    let post = shape[mode + 1..].iter().product();
    (pre, shape[mode], post)
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {len} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    /// Panics on an invalid shape; use [`DenseTensor::new`] for fallible construction.
    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for v in t.data.iter_mut() {
            *v = f(&idx);
            for m in (0..shape.len()).rev() {
                idx[m] += 1;
                if idx[m] < shape[m] {
                    break;
                }
                idx[m] = 0;
            }
        }
        t
    }

    /// Standard normal entries from a seeded ChaCha stream.
    pub fn random_normal(shape: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Self::zeros(shape);
        for v in t.data.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn dim(&self, mode: usize) -> usize {
        self.shape[mode]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &s)| acc * s + i)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.order() {
            return Err(Error::ModeOutOfRange {
                mode,
                order: self.order(),
            });
        }
        Ok(())
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.order() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("expected a matrix, got shape {:?}", self.shape),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn into_reshaped(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest entrywise absolute difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| c * x)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += c * other`, shapes must agree.
    pub fn axpy(&mut self, c: f64, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "axpy",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    /// Matrix product of two order-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.shape, other.shape),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Reorders modes: output mode `i` is input mode `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let order = self.order();
        let mut seen = vec![false; order];
        if perm.len() != order
            || perm
                .iter()
                .any(|&p| p >= order || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::ShapeMismatch {
                op: "permute",
                detail: format!("{perm:?} is not a permutation of 0..{order}"),
            });
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; order];
        let mut src = 0usize;
        for _ in 0..self.data.len() {
            out.push(self.data[src]);
            for m in (0..order).rev() {
                idx[m] += 1;
                src += src_strides[m];
                if idx[m] < out_shape[m] {
                    break;
                }
                src -= src_strides[m] * out_shape[m];
                idx[m] = 0;
            }
        }
        Ok(Self {
            shape: out_shape,
            data: out,
        })
    }

    /// Mode-`mode` unfolding: a `(dim_mode × product of other dims)` matrix.
    pub fn unfold(&self, mode: usize) -> Result<Self> {
        self.check_mode(mode)?;
        let (pre, n, post) = split_at_mode(&self.shape, mode);
        let cols = pre * post;
        let mut out = vec![0.0; n * cols];
        for p in 0..pre {
            for j in 0..n {
                let src = &self.data[(p * n + j) * post..(p * n + j + 1) * post];
                out[j * cols + p * post..j * cols + (p + 1) * post].copy_from_slice(src);
            }
        }
        Ok(Self {
            shape: vec![n, cols],
            data: out,
        })
    }

    /// Inverse of [`DenseTensor::unfold`].
    pub fn refold(matrix: &Self, mode: usize, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if mode >= shape.len() {
            return Err(Error::ModeOutOfRange {
                mode,
                order: shape.len(),
            });
        }
        let (pre, n, post) = split_at_mode(shape, mode);
        if matrix.shape != [n, pre * post] {
            return Err(Error::ShapeMismatch {
                op: "refold",
                detail: format!(
                    "matrix {:?} cannot refold into {shape:?} along mode {mode}",
                    matrix.shape
                ),
            });
        }
        let cols = pre * post;
        let mut out = vec![0.0; len];
        for p in 0..pre {
            for j in 0..n {
                out[(p * n + j) * post..(p * n + j + 1) * post].copy_from_slice(
                    &matrix.data[j * cols + p * post..j * cols + (p + 1) * post],
                );
            }
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: out,
        })
    }

    /// Mode-`mode` product with a `(k × dim_mode)` matrix; mode size becomes `k`.
    pub fn mode_product(&self, m: &Self, mode: usize) -> Result<Self> {
        self.check_mode(mode)?;
        let (k, n2) = m.require_matrix("mode_n_product")?;
        let (pre, n, post) = split_at_mode(&self.shape, mode);
        if n != n2 {
            return Err(Error::ShapeMismatch {
                op: "mode_n_product",
                detail: format!(
                    "matrix {:?} against mode {mode} of size {n}",
                    m.shape
                ),
            });
        }
        let mut shape = self.shape.clone();
        shape[mode] = k;
        let mut out = vec![0.0; pre * k * post];
        let work = pre * k * n * post;
        let src = &self.data;
        let mat = &m.data;
        // Chunk (p, i) holds out[p, i, :] = sum_j m[i, j] * t[p, j, :].
        parallel::for_each_chunk_mut(&mut out, post, work, |c, row| {
            let (p, i) = (c / k, c % k);
            for j in 0..n {
                let w = mat[i * n + j];
                if w == 0.0 {
                    continue;
                }
                let t = &src[(p * n + j) * post..(p * n + j + 1) * post];
                for (o, &x) in row.iter_mut().zip(t) {
                    *o += w * x;
                }
            }
        });
        Ok(Self { shape, data: out })
    }

    /// Sub-tensor with the given `(mode, coordinate)` pairs fixed. Fixed modes
    /// are dropped; fixing every mode yields a shape-`[1]` scalar.
    pub fn index_modes(&self, fixed: &[(usize, usize)]) -> Result<Self> {
        let mut is_fixed = vec![None; self.order()];
        for &(mode, coord) in fixed {
            self.check_mode(mode)?;
            if coord >= self.shape[mode] {
                return Err(Error::IndexOutOfRange {
                    mode,
                    index: coord,
                    size: self.shape[mode],
                });
            }
            is_fixed[mode] = Some(coord);
        }
        let free: Vec<usize> = (0..self.order()).filter(|&m| is_fixed[m].is_none()).collect();
        let out_shape: Vec<usize> = if free.is_empty() {
            vec![1]
        } else {
            free.iter().map(|&m| self.shape[m]).collect()
        };
        let mut full = vec![0usize; self.order()];
        Ok(Self::from_fn(&out_shape, |idx| {
            let mut f = 0;
            for (m, slot) in full.iter_mut().enumerate() {
                *slot = match is_fixed[m] {
                    Some(c) => c,
                    None => {
                        f += 1;
                        idx[f - 1]
                    }
                };
            }
            self.get(&full)
        }))
    }

    /// Little-endian bytes of the data, for checksums and blobs.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for m in (0..shape.len().saturating_sub(1)).rev() {
        s[m] = s[m + 1] * shape[m + 1];
    }
    s
}

/// `out += a (m×k) · b (k×n)`, row-parallel for large products.
pub(crate) fn gemm_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let work = m * k * n;
    parallel::for_each_chunk_mut(out, n, work, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &x) in arow.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    });
}

/// Mode-`mode` unfolding of `t`.
pub fn mode_n_unfold(t: &DenseTensor, mode: usize) -> Result<DenseTensor> {
    t.unfold(mode)
}

/// Mode-`mode` product `t ×_mode m`.
pub fn mode_n_product(t: &DenseTensor, m: &DenseTensor, mode: usize) -> Result<DenseTensor> {
    t.mode_product(m, mode)
}
