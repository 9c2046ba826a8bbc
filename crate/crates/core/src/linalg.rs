//! Small dense linear algebra: symmetric eigendecomposition (cyclic Jacobi)
//! and Cholesky solves. Deterministic, desk-scale dimensions only.

use crate::error::{CoreError, Result};

/// Square matrix in row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(dim: usize) -> Self {
        SquareMatrix {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn from_rows(dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), dim * dim);
        SquareMatrix { dim, data }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dim + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.dim + c] = v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut y = vec![0.0; n];
        for r in 0..n {
            let row = &self.data[r * n..(r + 1) * n];
            y[r] = crate::tensor::dot(row, x);
        }
        y
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> SquareMatrix {
        let n = self.dim;
        let mut out = Self::zeros(n);
        for r in 0..n {
            for c in 0..n {
                out.data[c * n + r] = self.data[r * n + c];
            }
        }
        out
    }

    /// ‖A − Aᵀ‖_F / ‖A‖_F (0 for exactly symmetric matrices).
    pub fn asymmetry(&self) -> f64 {
        let n = self.dim;
        let mut num = 0.0;
        for r in 0..n {
            for c in 0..n {
                let d = self.data[r * n + c] - self.data[c * n + r];
                num += d * d;
            }
        }
        let den = self.frobenius_norm();
        if den == 0.0 {
            0.0
        } else {
            num.sqrt() / den
        }
    }
}

/// Eigendecomposition A = Q·diag(λ)·Qᵀ of a symmetric matrix.
pub struct SymEigen {
    /// Column-major eigenvectors: eigenvector j is `q[i*dim+j]` over i.
    pub vectors: SquareMatrix,
    pub values: Vec<f64>,
}

/// Cyclic Jacobi eigendecomposition for symmetric matrices.
///
/// Converges quadratically; dimensions here are at most a few hundred.
pub fn sym_eigen(a: &SquareMatrix) -> Result<SymEigen> {
    let n = a.dim;
    let mut m = a.clone();
    let mut q = SquareMatrix::identity(n);
    if n == 0 {
        return Ok(SymEigen {
            vectors: q,
            values: vec![],
        });
    }

    let max_sweeps = 64;
    for _sweep in 0..max_sweeps {
        let mut off = 0.0;
        for r in 0..n {
            for c in (r + 1)..n {
                off += m.at(r, c) * m.at(r, c);
            }
        }
        let scale = m.frobenius_norm().max(1e-300);
        if off.sqrt() <= 1e-14 * scale {
            let mut values = vec![0.0; n];
            for (i, value) in values.iter_mut().enumerate() {
                *value = m.at(i, i);
            }
            return Ok(SymEigen { vectors: q, values });
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apq = m.at(p, r);
                if apq == 0.0 {
                    continue;
                }
                let app = m.at(p, p);
                let aqq = m.at(r, r);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // rotate rows/cols p and r of m
                for k in 0..n {
                    let mkp = m.at(k, p);
                    let mkr = m.at(k, r);
                    m.set(k, p, c * mkp - s * mkr);
                    m.set(k, r, s * mkp + c * mkr);
                }
                for k in 0..n {
                    let mpk = m.at(p, k);
                    let mrk = m.at(r, k);
                    m.set(p, k, c * mpk - s * mrk);
                    m.set(r, k, s * mpk + c * mrk);
                }
                for k in 0..n {
                    let qkp = q.at(k, p);
                    let qkr = q.at(k, r);
                    q.set(k, p, c * qkp - s * qkr);
                    q.set(k, r, s * qkp + c * qkr);
                }
            }
        }
    }
    Err(CoreError::EigenFailure {
        layer: "jacobi sweep limit".into(),
    })
}

/// Cholesky factorization A = L·Lᵀ of a symmetric positive-definite matrix.
pub struct Cholesky {
    dim: usize,
    /// Lower-triangular factor, row-major.
    l: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &SquareMatrix) -> Result<Cholesky> {
        let n = a.dim;
        let mut l = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..=r {
                let mut sum = a.at(r, c);
                for k in 0..c {
                    sum -= l[r * n + k] * l[c * n + k];
                }
                if r == c {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(CoreError::SingularMatrix);
                    }
                    l[r * n + c] = sum.sqrt();
                } else {
                    l[r * n + c] = sum / l[c * n + c];
                }
            }
        }
        Ok(Cholesky { dim: n, l })
    }

    /// Solve A·x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        debug_assert_eq!(b.len(), n);
        // forward: L·y = b
        let mut y = vec![0.0; n];
        for r in 0..n {
            let mut sum = b[r];
            for k in 0..r {
                sum -= self.l[r * n + k] * y[k];
            }
            y[r] = sum / self.l[r * n + r];
        }
        // back: Lᵀ·x = y
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let mut sum = y[r];
            for k in (r + 1)..n {
                sum -= self.l[k * n + r] * x[k];
            }
            x[r] = sum / self.l[r * n + r];
        }
        x
    }
}

/// Solve the symmetric positive-definite system A·x = b, verifying the
/// residual ‖Ax − b‖/‖b‖ stays below `tol`.
pub fn solve_spd(a: &SquareMatrix, b: &[f64], tol: f64) -> Result<Vec<f64>> {
    let chol = Cholesky::factor(a)?;
    let x = chol.solve(b);
    let ax = a.matvec(&x);
    let mut res = 0.0;
    let mut nb = 0.0;
    for i in 0..b.len() {
        res += (ax[i] - b[i]) * (ax[i] - b[i]);
        nb += b[i] * b[i];
    }
    if nb > 0.0 && res.sqrt() / nb.sqrt() > tol {
        return Err(CoreError::SingularMatrix);
    }
    Ok(x)
}
