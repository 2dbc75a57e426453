//! Tucker factorization: a core tensor multiplied along every mode by a factor
//! matrix, `X ≈ G ×₀ F₀ ×₁ F₁ … ×ₙ Fₙ`, with an independent rank per mode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuckerFactors {
    pub core: DenseTensor,
    /// Factor `i` has shape `(dim_i × r_i)`.
    pub factors: Vec<DenseTensor>,
}

impl TuckerFactors {
    pub fn new(core: DenseTensor, factors: Vec<DenseTensor>) -> Result<Self> {
        let f = Self { core, factors };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.core.order() != self.factors.len() {
            return Err(Error::MalformedFactors(format!(
                "order-{} core with {} factors",
                self.core.order(),
                self.factors.len()
            )));
        }
        for (i, f) in self.factors.iter().enumerate() {
            if f.order() != 2 || f.dim(1) != self.core.dim(i) {
                return Err(Error::MalformedFactors(format!(
                    "factor {i} has shape {:?} but core mode {i} has size {}",
                    f.shape(),
                    self.core.dim(i)
                )));
            }
        }
        Ok(())
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    /// Full tensor shape `(dim_0, …, dim_{N-1})`.
    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.dim(0)).collect()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.core.shape().to_vec()
    }

    /// Number of trainable scalars: core plus every factor.
    pub fn num_params(&self) -> usize {
        self.core.len() + self.factors.iter().map(DenseTensor::len).sum::<usize>()
    }

    pub fn reconstruct(&self) -> Result<DenseTensor> {
        tucker_reconstruct(self)
    }
}

pub fn tucker_reconstruct(f: &TuckerFactors) -> Result<DenseTensor> {
    f.validate()?;
    let mut x = f.core.clone();
    for (mode, factor) in f.factors.iter().enumerate() {
        x = x.mode_product(factor, mode)?;
    }
    Ok(x)
}

/// Entries of the reconstruction with some modes fixed, computed by
/// contracting each fixed mode against a single factor row first. The full
/// tensor is never formed. Fixed modes are dropped from the output shape;
/// fixing every mode yields a shape-`[1]` scalar.
pub fn tucker_slice(f: &TuckerFactors, fixed: &[(usize, usize)]) -> Result<DenseTensor> {
    f.validate()?;
    let order = f.order();
    let mut coord = vec![None; order];
    for &(mode, c) in fixed {
        if mode >= order {
            return Err(Error::ModeOutOfRange { mode, order });
        }
        let size = f.factors[mode].dim(0);
        if c >= size {
            return Err(Error::IndexOutOfRange {
                mode,
                index: c,
                size,
            });
        }
        coord[mode] = Some(c);
    }
    let mut x = f.core.clone();
    for (mode, c) in coord.iter().enumerate() {
        if let Some(c) = *c {
            let factor = &f.factors[mode];
            let r = factor.dim(1);
            let row = DenseTensor::matrix(1, r, factor.data()[c * r..(c + 1) * r].to_vec())?;
            x = x.mode_product(&row, mode)?;
        }
    }
    for (mode, c) in coord.iter().enumerate() {
        if c.is_none() {
            x = x.mode_product(&f.factors[mode], mode)?;
        }
    }
    let mut out_shape: Vec<usize> = (0..order)
        .filter(|&m| coord[m].is_none())
        .map(|m| f.factors[m].dim(0))
        .collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    x.into_reshaped(&out_shape)
}

/// Seeded matrix with orthonormal columns (`rows ≥ cols`) or orthonormal rows
/// (`rows < cols`), from Gram-Schmidt on a Gaussian draw.
pub fn orthonormal_init(rows: usize, cols: usize, seed: u64) -> DenseTensor {
    assert!(rows >= 1 && cols >= 1, "orthonormal_init needs positive sizes");
    let (tall, narrow) = (rows.max(cols), rows.min(cols));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Columns of a tall × narrow matrix, stored column-major for the sweep.
    let mut cols_buf: Vec<Vec<f64>> = (0..narrow)
        .map(|_| (0..tall).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for j in 0..narrow {
        // Two passes of modified Gram-Schmidt keep orthogonality at round-off level.
        for _ in 0..2 {
            for i in 0..j {
                let (done, rest) = cols_buf.split_at_mut(j);
                let q = &done[i];
                let v = &mut rest[0];
                let dot: f64 = q.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                for (x, qx) in v.iter_mut().zip(q) {
                    *x -= dot * qx;
                }
            }
        }
        let norm = cols_buf[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in cols_buf[j].iter_mut() {
            *x /= norm;
        }
    }
    if rows >= cols {
        DenseTensor::from_fn(&[rows, cols], |i| cols_buf[i[1]][i[0]])
    } else {
        DenseTensor::from_fn(&[rows, cols], |i| cols_buf[i[0]][i[1]])
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// the columns of an `n × n` matrix.
pub(crate) fn symmetric_eigen(a: &DenseTensor) -> (Vec<f64>, DenseTensor) {
    let n = a.rows();
    let mut m = a.data().to_vec();
    let mut v = DenseTensor::identity(n).into_data();
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort: equal eigenvalues keep their column order.
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = DenseTensor::from_fn(&[n, n], |ix| v[ix[0] * n + order[ix[1]]]);
    (values, vectors)
}

/// Flips each column so its largest-magnitude entry is positive.
fn fix_column_signs(u: &mut DenseTensor) {
    let (rows, cols) = (u.dim(0), u.dim(1));
    for j in 0..cols {
        let mut best = 0usize;
        for i in 1..rows {
            if u.get(&[i, j]).abs() > u.get(&[best, j]).abs() {
                best = i;
            }
        }
        if u.get(&[best, j]) < 0.0 {
            for i in 0..rows {
                let x = u.get(&[i, j]);
                u.set(&[i, j], -x);
            }
        }
    }
}

/// Truncated higher-order SVD: factor `i` holds the leading `ranks[i]` left
/// singular vectors of the mode-`i` unfolding, the core is `t` contracted with
/// every factor transpose.
pub fn hosvd(t: &DenseTensor, ranks: &[usize]) -> Result<TuckerFactors> {
    if ranks.len() != t.order() {
        return Err(Error::MalformedFactors(format!(
            "{} ranks for an order-{} tensor",
            ranks.len(),
            t.order()
        )));
    }
    let mut factors = Vec::with_capacity(t.order());
    for (mode, &r) in ranks.iter().enumerate() {
        let size = t.dim(mode);
        if r == 0 || r > size {
            return Err(Error::RankExceedsDim { mode, rank: r, size });
        }
        let x = t.unfold(mode)?;
        let gram = x.matmul(&x.transpose()?)?;
        let (_, vecs) = symmetric_eigen(&gram);
        let mut u = DenseTensor::from_fn(&[size, r], |i| vecs.get(&[i[0], i[1]]));
        fix_column_signs(&mut u);
        factors.push(u);
    }
    let mut core = t.clone();
    for (mode, u) in factors.iter().enumerate() {
        core = core.mode_product(&u.transpose()?, mode)?;
    }
    TuckerFactors::new(core, factors)
}
