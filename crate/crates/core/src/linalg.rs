//! Small dense helpers on top of nalgebra: jittered Cholesky, symmetric
//! cleanup and packed upper-triangular accumulators.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

const JITTER_REL: f64 = 1e-10;
const JITTER_TRIES: usize = 8;

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn jitter_base(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().max(1) as f64;
    let tr = m.trace().abs();
    let base = JITTER_REL * tr / n;
    if base > 0.0 && base.is_finite() {
        base
    } else {
        JITTER_REL
    }
}

/// Cholesky factor of a symmetric positive-definite matrix. A failed
/// factorisation is retried with diagonal jitter 1e-10 * trace/dim, grown
/// tenfold per attempt.
pub(crate) fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!("{what}: non-finite matrix entry")));
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let base = jitter_base(m);
    let mut scale = 1.0;
    for _ in 0..JITTER_TRIES {
        let mut j = m.clone();
        for i in 0..j.nrows() {
            j[(i, i)] += base * scale;
        }
        if let Some(c) = Cholesky::new(j) {
            return Ok(c);
        }
        scale *= 10.0;
    }
    Err(Error::numerical(format!("{what}: matrix is not positive definite after jitter")))
}

pub(crate) fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut inv = cholesky(m, what)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Symmetric matrix stored as its packed upper triangle, column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSym {
    n: usize,
    data: Vec<f64>,
}

impl PackedSym {
    pub fn zeros(n: usize) -> Self {
        PackedSym { n, data: vec![0.0; n * (n + 1) / 2] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn col_start(j: usize) -> usize {
        j * (j + 1) / 2
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.data[Self::col_start(j) + i]
    }

    /// self += z z^T / q, touching only the leading `len` coordinates.
    pub fn rank1(&mut self, z: &[f64], q: f64, len: usize) {
        let w = 1.0 / q;
        for j in 0..len {
            let zj = z[j] * w;
            if zj == 0.0 {
                continue;
            }
            let col = &mut self.data[Self::col_start(j)..Self::col_start(j) + j + 1];
            for (c, zi) in col.iter_mut().zip(&z[..=j]) {
                *c += zi * zj;
            }
        }
    }

    /// self += k * other.
    pub fn add_scaled(&mut self, k: f64, other: &PackedSym) {
        debug_assert_eq!(self.n, other.n);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            for i in 0..=j {
                let v = self.data[Self::col_start(j) + i];
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mut p = PackedSym::zeros(n);
        for j in 0..n {
            for i in 0..=j {
                p.data[Self::col_start(j) + i] = 0.5 * (m[(i, j)] + m[(j, i)]);
            }
        }
        p
    }

    pub(crate) fn raw(&self) -> &[f64] {
        &self.data
    }
}

/// Sample covariance of the rows of `draws` (each row one draw).
pub(crate) fn sample_covariance(draws: &[Vec<f64>]) -> DMatrix<f64> {
    let d = draws.first().map_or(0, |r| r.len());
    let n = draws.len();
    let mut mean = vec![0.0; d];
    for r in draws {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n.max(1) as f64;
    }
    let mut cov = DMatrix::zeros(d, d);
    for r in draws {
        for j in 0..d {
            let dj = r[j] - mean[j];
            for i in 0..=j {
                cov[(i, j)] += (r[i] - mean[i]) * dj;
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for j in 0..d {
        for i in 0..=j {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}
