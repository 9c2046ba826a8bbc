//! Dense row-major float64 tensors and the raw kernels shared by the
//! recording and non-recording forward paths.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// Dense tensor: row-major IEEE-754 float64 storage plus a shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::ShapeMismatch {
                context: "Tensor::new".into(),
                expected: shape.clone(),
                got: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count for a 2-d tensor; a 1-d tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    /// Column count for a 1-d or 2-d tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ── Raw kernels ──────────────────────────────────────────────────────
// Plain functions over slices so the tape ops and the lean no-grad
// forward path compute bitwise-identical values.

/// C[m,n] = A[m,k] · B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]
pub fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// y = x·Wᵀ + b for x: [t,din], w: [dout,din], b: [dout]
pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], t: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut y = matmul_bt(x, w, t, din, dout);
    for r in 0..t {
        for j in 0..dout {
            y[r * dout + j] += b[j];
        }
    }
    y
}

/// Numerically stable row-wise softmax of x: [rows, cols].
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut z = 0.0;
        for j in 0..cols {
            let e = (row[j] - mx).exp();
            orow[j] = e;
            z += e;
        }
        for v in orow.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Row-wise log-sum-exp of x: [rows, cols].
pub fn logsumexp_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        out[r] = mx + z.ln();
    }
    out
}

/// Single-head causal attention: q, k, v are [t,d]; returns ([t,d] context,
/// [t,t] post-softmax weights). Row r attends to columns 0..=r.
pub fn causal_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    d: usize,
    scale: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut weights = vec![0.0; t * t];
    for r in 0..t {
        let qrow = &q[r * d..(r + 1) * d];
        // scores over the causal prefix, stable softmax
        let mut mx = f64::NEG_INFINITY;
        let mut scores = vec![0.0; r + 1];
        for (s, score) in scores.iter_mut().enumerate() {
            let krow = &k[s * d..(s + 1) * d];
            let mut acc = 0.0;
            for p in 0..d {
                acc += qrow[p] * krow[p];
            }
            *score = acc * scale;
            mx = mx.max(*score);
        }
        let mut z = 0.0;
        for score in scores.iter_mut() {
            *score = (*score - mx).exp();
            z += *score;
        }
        for (s, score) in scores.iter().enumerate() {
            weights[r * t + s] = score / z;
        }
    }
    let ctx = matmul(&weights, v, t, t, d);
    (ctx, weights)
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Index of the maximum value; ties break to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matmul_identity_passthrough() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let a = vec![3.0, -1.5, 2.0, 7.0];
        assert_eq!(matmul(&eye, &a, 2, 2, 2), a);
    }

    #[test]
    fn softmax_symmetry() {
        let p = softmax_rows(&[0.0, 0.0], 1, 2);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn transposed_matmuls_agree_with_plain() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c = matmul(&a, &b, 2, 3, 2);
        // A·B == A·(Bᵀ)ᵀ
        let bt = vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]; // 2x3
        assert_eq!(matmul_bt(&a, &bt, 2, 3, 2), c);
        // (Aᵀ)ᵀ·B via matmul_at
        let at = vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2
        assert_eq!(matmul_at(&at, &b, 3, 2, 2), c);
    }

    #[test]
    fn attention_rows_are_convex_weights() {
        let t = 4;
        let d = 3;
        let q: Vec<f64> = (0..t * d).map(|i| (i as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..t * d).map(|i| (i as f64 * 0.71).cos()).collect();
        let v: Vec<f64> = (0..t * d).map(|i| i as f64 * 0.1).collect();
        let (_, w) = causal_attention(&q, &k, &v, t, d, 1.0 / (d as f64).sqrt());
        for r in 0..t {
            let row = &w[r * t..(r + 1) * t];
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            for (s, &val) in row.iter().enumerate() {
                if s > r {
                    assert_eq!(val, 0.0);
                } else {
                    assert!(val > 0.0);
                }
            }
        }
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0, 5.0]), 0);
    }
}
