//! Convex reference task: L2-regularized logistic regression trained by
//! Newton's method, with an exact leave-one-out retraining oracle. This is
//! the ground-truth path for validating influence scores.

use crate::error::{CoreError, Result};
use crate::linalg::{Cholesky, SquareMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Binary classification task with labels in {−1, +1}. The training
/// objective is J(w) = (1/n)·Σ softplus(−yᵢ·⟨w,xᵢ⟩) + (reg/2)·‖w‖².
#[derive(Debug, Clone)]
pub struct LogisticTask {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub test_features: Vec<Vec<f64>>,
    pub test_labels: Vec<f64>,
    pub l2_reg: f64,
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (1.0 + (-t.abs()).exp()).ln()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl LogisticTask {
    /// Linearly separable-ish data from a planted direction with label noise.
    pub fn synthetic(n: usize, d: usize, n_test: usize, noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planted: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gen_split = |count: usize, rng: &mut ChaCha8Rng| {
            let mut xs = Vec::with_capacity(count);
            let mut ys = Vec::with_capacity(count);
            for _ in 0..count {
                let x: Vec<f64> = (0..d)
                    .map(|_| {
                        let u1: f64 = rng.gen_range(1e-12..1.0);
                        let u2: f64 = rng.gen_range(0.0..1.0);
                        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                    })
                    .collect();
                let margin: f64 = x.iter().zip(&planted).map(|(a, b)| a * b).sum();
                let flip = rng.gen_range(0.0..1.0) < noise;
                let y = if (margin >= 0.0) ^ flip { 1.0 } else { -1.0 };
                xs.push(x);
                ys.push(y);
            }
            (xs, ys)
        };
        let (features, labels) = gen_split(n, &mut rng);
        let (test_features, test_labels) = gen_split(n_test, &mut rng);
        LogisticTask {
            features,
            labels,
            test_features,
            test_labels,
            l2_reg: 1e-3,
        }
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Unregularized per-example loss.
    pub fn example_loss(&self, w: &[f64], i: usize) -> f64 {
        let m: f64 = crate::tensor::dot(&self.features[i], w);
        softplus(-self.labels[i] * m)
    }

    /// Gradient of the per-example loss.
    pub fn example_grad(&self, w: &[f64], i: usize) -> Vec<f64> {
        let x = &self.features[i];
        let y = self.labels[i];
        let m = crate::tensor::dot(x, w);
        let coeff = -y * sigmoid(-y * m);
        x.iter().map(|&xi| coeff * xi).collect()
    }

    /// Training objective with optional per-example reweighting ε on one
    /// example: J(w) + ε·L_i(w).
    pub fn objective_grad(&self, w: &[f64], reweight: Option<(usize, f64)>) -> Vec<f64> {
        let n = self.len() as f64;
        let mut g: Vec<f64> = w.iter().map(|&wi| self.l2_reg * wi).collect();
        for i in 0..self.len() {
            let gi = self.example_grad(w, i);
            for (a, b) in g.iter_mut().zip(&gi) {
                *a += b / n;
            }
        }
        if let Some((i, eps)) = reweight {
            let gi = self.example_grad(w, i);
            for (a, b) in g.iter_mut().zip(&gi) {
                *a += eps * b;
            }
        }
        g
    }

    /// Exact Hessian of the training objective: (1/n)·XᵀDX + reg·I, with the
    /// same optional reweighting as [`Self::objective_grad`].
    pub fn hessian(&self, w: &[f64], reweight: Option<(usize, f64)>) -> SquareMatrix {
        let d = self.dim();
        let n = self.len() as f64;
        let mut h = SquareMatrix::zeros(d);
        let add = |h: &mut SquareMatrix, i: usize, weight: f64| {
            let x = &self.features[i];
            let m = crate::tensor::dot(x, w);
            let s = sigmoid(m) * sigmoid(-m);
            for r in 0..d {
                if x[r] == 0.0 {
                    continue;
                }
                for c in 0..d {
                    h.data[r * d + c] += weight * s * x[r] * x[c];
                }
            }
        };
        for i in 0..self.len() {
            add(&mut h, i, 1.0 / n);
        }
        if let Some((i, eps)) = reweight {
            add(&mut h, i, eps);
        }
        for r in 0..d {
            h.data[r * d + r] += self.l2_reg;
        }
        h
    }

    /// φ(w) = Σ test losses.
    pub fn test_loss(&self, w: &[f64]) -> f64 {
        (0..self.test_features.len())
            .map(|i| {
                let m: f64 = crate::tensor::dot(&self.test_features[i], w);
                softplus(-self.test_labels[i] * m)
            })
            .sum()
    }

    pub fn test_loss_grad(&self, w: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut g = vec![0.0; d];
        for i in 0..self.test_features.len() {
            let x = &self.test_features[i];
            let y = self.test_labels[i];
            let m = crate::tensor::dot(x, w);
            let coeff = -y * sigmoid(-y * m);
            for (a, &xi) in g.iter_mut().zip(x) {
                *a += coeff * xi;
            }
        }
        g
    }

    /// Per-example Gauss-Newton column (for the dense assembler): for
    /// logistic loss the Gauss-Newton equals the Hessian, σ′(m)·x·xᵀ·e_j.
    pub fn gn_column(&self, w: &[f64], i: usize, j: usize) -> Vec<f64> {
        let x = &self.features[i];
        let m = crate::tensor::dot(x, w);
        let s = sigmoid(m) * sigmoid(-m);
        let xj = x[j];
        x.iter().map(|&xi| s * xi * xj).collect()
    }
}

/// Newton's method with step halving; converges to ‖∇J‖ ≤ tol.
pub fn newton_fit(
    task: &LogisticTask,
    w0: &[f64],
    reweight: Option<(usize, f64)>,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let mut w = w0.to_vec();
    for _ in 0..max_iter {
        let grad = task.objective_grad(&w, reweight);
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm <= tol {
            return Ok(w);
        }
        let h = task.hessian(&w, reweight);
        let chol = Cholesky::factor(&h)?;
        let step = chol.solve(&grad);
        // step halving on non-decreasing gradient norm
        let mut scale = 1.0;
        loop {
            let trial: Vec<f64> = w.iter().zip(&step).map(|(wi, s)| wi - scale * s).collect();
            let trial_norm = task
                .objective_grad(&trial, reweight)
                .iter()
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if trial_norm < gnorm || scale < 1e-6 {
                w = trial;
                break;
            }
            scale *= 0.5;
        }
    }
    let grad = task.objective_grad(&w, reweight);
    let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if gnorm <= tol {
        Ok(w)
    } else {
        Err(CoreError::NoConvergence {
            iters: max_iter,
            grad_norm: gnorm,
        })
    }
}

/// Exact leave-one-out oracle: retrain without example `index` (the ε = −1/n
/// reweighting) from a warm start and return Δφ = φ(retrained) − φ(full).
pub fn loo_oracle(task: &LogisticTask, w_hat: &[f64], index: usize) -> Result<f64> {
    let n = task.len() as f64;
    let w_loo = newton_fit(task, w_hat, Some((index, -1.0 / n)), 1e-10, 60)?;
    Ok(task.test_loss(&w_loo) - task.test_loss(w_hat))
}

/// Influence-function score on the convex task with the exact Hessian:
/// +⟨∇φ, H⁻¹·∇L_i⟩. Positive means upweighting example i reduces φ.
pub fn influence_scores(task: &LogisticTask, w_hat: &[f64]) -> Result<Vec<f64>> {
    let h = task.hessian(w_hat, None);
    let chol = Cholesky::factor(&h)?;
    let phi_grad = task.test_loss_grad(w_hat);
    let hinv_phi = chol.solve(&phi_grad);
    Ok((0..task.len())
        .map(|i| crate::tensor::dot(&task.example_grad(w_hat, i), &hinv_phi))
        .collect())
}
