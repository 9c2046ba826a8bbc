//! EK-FAC approximation of the damped curvature matrix, inverse-curvature
//! vector products, an exact dense Gauss-Newton oracle for tiny models, and
//! a fingerprinted disk cache for fitted factors.
//!
//! Per selected linear layer the fit accumulates A = E[â·âᵀ] over layer
//! inputs with a homogeneous bias coordinate and G = E[g·gᵀ] over layer
//! output gradients, eigendecomposes both, and replaces the Kronecker
//! eigenvalue grid with corrected second moments of projected per-example
//! gradients. Layers outside the mask are damping-only (1/λ).

use crate::data::LabeledExample;
use crate::error::{CoreError, Result};
use crate::linalg::{sym_eigen, Cholesky, SquareMatrix};
use crate::model::{
    response_targets, GraphSpec, LayerKind, LinearLayerInfo, ModelState,
};
use crate::params::ParameterVector;
use crate::tensor::{self, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// Parameter guard for dense curvature assembly.
pub const EXACT_CURVATURE_GUARD: usize = 5_000;

pub const DEFAULT_DAMPING: f64 = 1e-3;
pub const DEFAULT_FIT_SUBSET: usize = 5_000;
const FACTORS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMaskKind {
    Attention,
    Mlp,
    All,
}

/// Which linear layers enter the Kronecker factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    pub kind: LayerMaskKind,
    pub stride: usize,
}

impl Default for LayerMask {
    fn default() -> Self {
        LayerMask {
            kind: LayerMaskKind::All,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Labels sampled from the model's predictive distribution (Fisher).
    Sampled,
    /// Dataset labels (empirical Fisher).
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureConfig {
    pub damping: f64,
    pub fit_subset: usize,
    pub layer_mask: LayerMask,
    pub label_mode: LabelMode,
    /// Label assignments drawn per example in sampled mode.
    pub fisher_samples: usize,
    pub seed: u64,
}

impl Default for CurvatureConfig {
    fn default() -> Self {
        CurvatureConfig {
            damping: DEFAULT_DAMPING,
            fit_subset: DEFAULT_FIT_SUBSET,
            layer_mask: LayerMask::default(),
            label_mode: LabelMode::Sampled,
            fisher_samples: 1,
            seed: 0,
        }
    }
}

impl CurvatureConfig {
    fn validate(&self) -> Result<()> {
        if self.damping <= 0.0 {
            return Err(CoreError::InvalidConfig("damping must be positive".into()));
        }
        if self.layer_mask.stride == 0 {
            return Err(CoreError::InvalidConfig("stride must be at least 1".into()));
        }
        if self.label_mode == LabelMode::Sampled && self.fisher_samples == 0 {
            return Err(CoreError::InvalidConfig(
                "fisher_samples must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Kronecker factors and corrected eigenvalues for one linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerFactors {
    pub name: String,
    pub weight_seg: usize,
    pub bias_seg: usize,
    /// Input dimension without the homogeneous coordinate.
    pub d_in: usize,
    pub d_out: usize,
    /// Input covariance, (d_in+1)².
    pub a: SquareMatrix,
    /// Output-gradient covariance, d_out².
    pub g: SquareMatrix,
    pub q_a: SquareMatrix,
    pub q_g: SquareMatrix,
    /// Corrected eigenvalue grid, (d_in+1)×d_out row-major.
    pub lambda: Vec<f64>,
}

/// Uniquely keys a cache entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub format_version: u32,
    pub model_hash: String,
    pub layer_mask: LayerMask,
    pub subset_size: usize,
    pub token_budget: usize,
    pub damping_milli: String,
    pub label_mode: LabelMode,
    pub fisher_samples: usize,
    pub seed: u64,
}

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", serde_json::to_string(self).unwrap())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfacState {
    pub config: CurvatureConfig,
    pub fingerprint: Fingerprint,
    pub layers: Vec<KroneckerFactors>,
}

pub fn model_hash(model: &ModelState) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&model.descriptor).unwrap());
    for v in model.params.flatten() {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn make_fingerprint(model: &ModelState, config: &CurvatureConfig, subset: usize) -> Fingerprint {
    Fingerprint {
        format_version: FACTORS_VERSION,
        model_hash: model_hash(model),
        layer_mask: config.layer_mask,
        subset_size: subset,
        token_budget: model.descriptor.max_seq,
        damping_milli: format!("{:e}", config.damping),
        label_mode: config.label_mode,
        fisher_samples: config.fisher_samples,
        seed: config.seed,
    }
}

/// Linear layers selected by a mask: filter by kind, then keep every
/// stride-th layer in depth order.
pub fn select_layers(model: &ModelState, mask: &LayerMask) -> Vec<LinearLayerInfo> {
    model
        .descriptor
        .linear_layers()
        .into_iter()
        .filter(|l| match mask.kind {
            LayerMaskKind::All => true,
            LayerMaskKind::Mlp => l.kind == LayerKind::Mlp,
            LayerMaskKind::Attention => l.kind == LayerKind::Attention,
        })
        .enumerate()
        .filter(|(i, _)| i % mask.stride == 0)
        .map(|(_, l)| l)
        .collect()
}

// ── Factor accumulation ─────────────────────────────────────────────

/// Accumulates A and G statistics from per-example layer samples.
pub struct EkfacBuilder {
    layers: Vec<LinearLayerInfo>,
    a_acc: Vec<SquareMatrix>,
    g_acc: Vec<SquareMatrix>,
    examples: usize,
}

impl EkfacBuilder {
    pub fn new(layers: Vec<LinearLayerInfo>) -> Self {
        let a_acc = layers
            .iter()
            .map(|l| SquareMatrix::zeros(l.d_in + 1))
            .collect();
        let g_acc = layers.iter().map(|l| SquareMatrix::zeros(l.d_out)).collect();
        EkfacBuilder {
            layers,
            a_acc,
            g_acc,
            examples: 0,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Add one example's statistics for layer `idx`: inputs [T, d_in] and
    /// output gradients [T, d_out], summed over positions with the given
    /// weight.
    pub fn add_layer_sample(&mut self, idx: usize, inputs: &Tensor, out_grads: &Tensor, weight: f64) {
        let info = &self.layers[idx];
        let (t, din, dout) = (inputs.rows(), info.d_in, info.d_out);
        debug_assert_eq!(inputs.cols(), din);
        debug_assert_eq!(out_grads.cols(), dout);
        let a = &mut self.a_acc[idx];
        let d1 = din + 1;
        for r in 0..t {
            let xrow = inputs.row(r);
            for i in 0..din {
                let xi = xrow[i] * weight;
                if xi == 0.0 && xrow[i] == 0.0 {
                    continue;
                }
                for j in 0..din {
                    a.data[i * d1 + j] += xi * xrow[j];
                }
                a.data[i * d1 + din] += xi;
            }
            for j in 0..din {
                a.data[din * d1 + j] += weight * xrow[j];
            }
            a.data[din * d1 + din] += weight;
        }
        let g = &mut self.g_acc[idx];
        for r in 0..t {
            let grow = out_grads.row(r);
            for i in 0..dout {
                let gi = grow[i] * weight;
                if gi == 0.0 {
                    continue;
                }
                for j in 0..dout {
                    g.data[i * dout + j] += gi * grow[j];
                }
            }
        }
    }

    /// Call once per example after its layer samples were added.
    pub fn finish_example(&mut self) {
        self.examples += 1;
    }

    /// Average the accumulators and eigendecompose. The eigenvalue grid is
    /// initialized to the Kronecker (uncorrected) products.
    pub fn finalize(self, config: &CurvatureConfig, fingerprint: Fingerprint) -> Result<EkfacState> {
        if self.examples == 0 {
            return Err(CoreError::EmptyDataset {
                context: "ekfac fit subset".into(),
            });
        }
        let inv = 1.0 / self.examples as f64;
        let mut layers = Vec::with_capacity(self.layers.len());
        for ((info, mut a), mut g) in self
            .layers
            .into_iter()
            .zip(self.a_acc)
            .zip(self.g_acc)
        {
            for v in a.data.iter_mut() {
                *v *= inv;
            }
            for v in g.data.iter_mut() {
                *v *= inv;
            }
            let eig_a = sym_eigen(&a).map_err(|_| CoreError::EigenFailure {
                layer: format!("{} (A factor)", info.name),
            })?;
            let eig_g = sym_eigen(&g).map_err(|_| CoreError::EigenFailure {
                layer: format!("{} (G factor)", info.name),
            })?;
            let d1 = info.d_in + 1;
            let mut lambda = vec![0.0; d1 * info.d_out];
            for i in 0..d1 {
                for j in 0..info.d_out {
                    // clamp tiny negative eigenvalues from float error
                    let prod = eig_a.values[i].max(0.0) * eig_g.values[j].max(0.0);
                    lambda[i * info.d_out + j] = prod;
                }
            }
            layers.push(KroneckerFactors {
                name: info.name,
                weight_seg: info.weight_seg,
                bias_seg: info.bias_seg,
                d_in: info.d_in,
                d_out: info.d_out,
                a,
                g,
                q_a: eig_a.vectors,
                q_g: eig_g.vectors,
                lambda,
            });
        }
        Ok(EkfacState {
            config: config.clone(),
            fingerprint,
            layers,
        })
    }
}

// ── Label assignments for the Fisher expectation ────────────────────

/// Per-example target assignments with weights, drawn per the label mode.
fn label_assignments(
    model: &ModelState,
    example: &LabeledExample,
    config: &CurvatureConfig,
    example_index: usize,
) -> Result<Vec<(Vec<Option<usize>>, f64)>> {
    let tokens = example.tokens();
    match config.label_mode {
        LabelMode::Empirical => Ok(vec![(response_targets(&tokens, example.resp_start()), 1.0)]),
        LabelMode::Sampled => {
            let graph = model.build_graph(GraphSpec {
                tokens: &tokens,
                targets: None,
                pooled_at: None,
            })?;
            let logits = graph.record.value(graph.logits);
            let v = model.descriptor.vocab;
            let base = response_targets(&tokens, example.resp_start());
            let seed = crate::seeds::derive(config.seed, &format!("fisher-{example_index}"));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = config.fisher_samples;
            let weight = 1.0 / k as f64;
            let mut out = Vec::with_capacity(k);
            for _ in 0..k {
                let mut targets = vec![None; base.len()];
                for (pos, t) in base.iter().enumerate() {
                    if t.is_some() {
                        let p = tensor::softmax_rows(logits.row(pos), 1, v);
                        let u: f64 = rng.gen_range(0.0..1.0);
                        let mut acc = 0.0;
                        let mut chosen = v - 1;
                        for (y, &py) in p.iter().enumerate() {
                            acc += py;
                            if u < acc {
                                chosen = y;
                                break;
                            }
                        }
                        targets[pos] = Some(chosen);
                    }
                }
                out.push((targets, weight));
            }
            Ok(out)
        }
    }
}

fn fit_subset_indices(n: usize, config: &CurvatureConfig) -> Vec<usize> {
    let take = config.fit_subset.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive(config.seed, "ekfac-subset"));
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order.truncate(take);
    order
}

// ── Fit and eigenvalue correction ───────────────────────────────────

/// Fit Kronecker factors on a subset of the dataset. The returned state
/// carries the uncorrected (Kronecker product) eigenvalue grid; run
/// [`eigenvalue_correction`] to replace it.
pub fn fit_ekfac(
    model: &ModelState,
    dataset: &[LabeledExample],
    config: &CurvatureConfig,
) -> Result<EkfacState> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(CoreError::EmptyDataset {
            context: "fit_ekfac dataset".into(),
        });
    }
    let selected = select_layers(model, &config.layer_mask);
    if selected.is_empty() {
        return Err(CoreError::EmptyLayerSelection);
    }
    let subset = fit_subset_indices(dataset.len(), config);
    let fingerprint = make_fingerprint(model, config, subset.len());
    let mut builder = EkfacBuilder::new(selected.clone());

    for &ix in &subset {
        let example = &dataset[ix];
        for (targets, weight) in label_assignments(model, example, config, ix)? {
            let tokens = example.tokens();
            let (graph, grads) = crate::model::loss_backward_with_targets(model, &tokens, targets)?;
            for (tag, node) in graph.record.linear_nodes_tagged() {
                let name = &model.descriptor.linear_layers()[tag as usize].name;
                if let Some(idx) = selected.iter().position(|l| &l.name == name) {
                    let inputs = graph.record.linear_input(node);
                    if let Some(gout) = grads.node(node) {
                        builder.add_layer_sample(idx, inputs, gout, weight);
                    }
                }
            }
        }
        builder.finish_example();
    }
    builder.finalize(config, fingerprint)
}

/// Replace the eigenvalue grid with corrected per-coordinate second moments
/// of projected per-example gradients: Λ_ij = E[(Q_Aᵀ·Ĝ·Q_G)_ij²].
pub fn eigenvalue_correction(
    state: &mut EkfacState,
    model: &ModelState,
    dataset: &[LabeledExample],
) -> Result<()> {
    let config = state.config.clone();
    let subset = fit_subset_indices(dataset.len(), &config);
    let mut acc: Vec<Vec<f64>> = state
        .layers
        .iter()
        .map(|l| vec![0.0; (l.d_in + 1) * l.d_out])
        .collect();
    let mut count = 0usize;
    for &ix in &subset {
        let example = &dataset[ix];
        for (targets, weight) in label_assignments(model, example, &config, ix)? {
            let tokens = example.tokens();
            let (graph, grads) = crate::model::loss_backward_with_targets(model, &tokens, targets)?;
            for (tag, node) in graph.record.linear_nodes_tagged() {
                let name = &model.descriptor.linear_layers()[tag as usize].name;
                let Some(idx) = state.layers.iter().position(|l| &l.name == name) else {
                    continue;
                };
                let layer = &state.layers[idx];
                let inputs = graph.record.linear_input(node);
                let Some(gout) = grads.node(node) else { continue };
                // per-example gradient matrix Ĝ = Σ_t â_t·g_tᵀ, (d_in+1)×d_out
                let (t, din, dout) = (inputs.rows(), layer.d_in, layer.d_out);
                let d1 = din + 1;
                let mut ghat = vec![0.0; d1 * dout];
                for r in 0..t {
                    let x = inputs.row(r);
                    let g = gout.row(r);
                    for i in 0..din {
                        if x[i] == 0.0 {
                            continue;
                        }
                        for j in 0..dout {
                            ghat[i * dout + j] += x[i] * g[j];
                        }
                    }
                    for j in 0..dout {
                        ghat[din * dout + j] += g[j];
                    }
                }
                let proj = project_to_eigenbasis(layer, &ghat);
                for (slot, p) in acc[idx].iter_mut().zip(&proj) {
                    *slot += weight * p * p;
                }
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(CoreError::EmptyDataset {
            context: "eigenvalue correction subset".into(),
        });
    }
    let inv = 1.0 / count as f64;
    for (layer, mut lam) in state.layers.iter_mut().zip(acc) {
        for v in lam.iter_mut() {
            *v *= inv;
        }
        layer.lambda = lam;
    }
    Ok(())
}

/// Fit factors and apply eigenvalue correction in one call.
pub fn fit_ekfac_corrected(
    model: &ModelState,
    dataset: &[LabeledExample],
    config: &CurvatureConfig,
) -> Result<EkfacState> {
    let mut state = fit_ekfac(model, dataset, config)?;
    eigenvalue_correction(&mut state, model, dataset)?;
    Ok(state)
}

fn project_to_eigenbasis(layer: &KroneckerFactors, ghat: &[f64]) -> Vec<f64> {
    let d1 = layer.d_in + 1;
    let dout = layer.d_out;
    let tmp = tensor::matmul_at(&layer.q_a.data, ghat, d1, d1, dout);
    tensor::matmul(&tmp, &layer.q_g.data, d1, dout, dout)
}

fn project_from_eigenbasis(layer: &KroneckerFactors, proj: &[f64]) -> Vec<f64> {
    let d1 = layer.d_in + 1;
    let dout = layer.d_out;
    let tmp = tensor::matmul(&layer.q_a.data, proj, d1, d1, dout);
    tensor::matmul_bt(&tmp, &layer.q_g.data, d1, dout, dout)
}

// ── Inverse-curvature vector product ────────────────────────────────

/// Pack a parameter-vector layer slice into the (d_in+1)×d_out gradient
/// matrix layout (weight rows transposed, bias as the homogeneous row).
pub fn pack_layer_matrix(g: &ParameterVector, layer: &KroneckerFactors) -> Vec<f64> {
    let (din, dout) = (layer.d_in, layer.d_out);
    let w = g.segment(layer.weight_seg);
    let b = g.segment(layer.bias_seg);
    let mut out = vec![0.0; (din + 1) * dout];
    for j in 0..dout {
        for i in 0..din {
            out[i * dout + j] = w.data()[j * din + i];
        }
        out[din * dout + j] = b.data()[j];
    }
    out
}

fn unpack_layer_matrix(mat: &[f64], layer: &KroneckerFactors, out: &mut ParameterVector) {
    let (din, dout) = (layer.d_in, layer.d_out);
    {
        let w = out.segment_mut(layer.weight_seg);
        for j in 0..dout {
            for i in 0..din {
                w.data_mut()[j * din + i] = mat[i * dout + j];
            }
        }
    }
    let b = out.segment_mut(layer.bias_seg);
    for j in 0..dout {
        b.data_mut()[j] = mat[din * dout + j];
    }
}

impl EkfacState {
    pub fn damping(&self) -> f64 {
        self.config.damping
    }

    /// Damped inverse-curvature vector product. Masked layers apply
    /// Q_A[(Q_Aᵀ·Ĝ·Q_G) ⊘ (Λ+λ)]Q_Gᵀ; everything else passes through as g/λ.
    pub fn ihvp(&self, g: &ParameterVector) -> Result<ParameterVector> {
        let lambda = self.config.damping;
        let mut out = g.clone();
        out.scale(1.0 / lambda);
        for layer in &self.layers {
            let ghat = pack_layer_matrix(g, layer);
            let mut proj = project_to_eigenbasis(layer, &ghat);
            for (p, lam) in proj.iter_mut().zip(&layer.lambda) {
                *p /= lam + lambda;
            }
            let back = project_from_eigenbasis(layer, &proj);
            unpack_layer_matrix(&back, layer, &mut out);
        }
        Ok(out)
    }
}

// ── Exact dense curvature oracle ────────────────────────────────────

/// Assemble a damped Gauss-Newton matrix column by column. `column(z, j)`
/// returns example z's Gauss-Newton product with the j-th unit direction.
pub fn assemble_gauss_newton<F>(
    p: usize,
    n_examples: usize,
    column: F,
    lambda: f64,
) -> Result<SquareMatrix>
where
    F: Fn(usize, usize) -> Result<Vec<f64>> + Sync,
{
    let cols: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|j| -> Result<Vec<f64>> {
            let mut col = vec![0.0; p];
            for z in 0..n_examples {
                let contrib = column(z, j)?;
                for (c, v) in col.iter_mut().zip(&contrib) {
                    *c += v;
                }
            }
            if n_examples > 0 {
                let inv = 1.0 / n_examples as f64;
                for c in col.iter_mut() {
                    *c *= inv;
                }
            }
            Ok(col)
        })
        .collect::<Result<_>>()?;
    let mut h = SquareMatrix::zeros(p);
    for (j, col) in cols.iter().enumerate() {
        for i in 0..p {
            h.data[i * p + j] = col[i];
        }
    }
    for i in 0..p {
        h.data[i * p + i] += lambda;
    }
    Ok(h)
}

/// Exact damped Gauss-Newton/Fisher matrix of the mean sequence loss,
/// assembled via forward tangents and seeded backward passes. Guarded by
/// [`EXACT_CURVATURE_GUARD`].
pub fn exact_curvature(
    model: &ModelState,
    dataset: &[LabeledExample],
    lambda: f64,
) -> Result<SquareMatrix> {
    let p = model.param_dim();
    if p > EXACT_CURVATURE_GUARD {
        return Err(CoreError::GuardExceeded {
            context: "exact_curvature".into(),
            dim: p,
            guard: EXACT_CURVATURE_GUARD,
        });
    }
    // evaluated graphs are shared immutably across column workers
    struct Prepared {
        graph: crate::model::ForwardGraph,
        probs: Vec<(usize, Vec<f64>)>,
        weight: f64,
    }
    let mut prepared = Vec::with_capacity(dataset.len());
    for ex in dataset {
        let tokens = ex.tokens();
        let graph = model.build_graph(GraphSpec {
            tokens: &tokens,
            targets: None,
            pooled_at: None,
        })?;
        let targets = response_targets(&tokens, ex.resp_start());
        let logits = graph.record.value(graph.logits);
        let v = model.descriptor.vocab;
        let rows: Vec<usize> = targets
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|_| i))
            .collect();
        let probs: Vec<(usize, Vec<f64>)> = rows
            .iter()
            .map(|&r| (r, tensor::softmax_rows(logits.row(r), 1, v)))
            .collect();
        let weight = 1.0 / rows.len() as f64;
        prepared.push(Prepared {
            graph,
            probs,
            weight,
        });
    }
    let layout = model.params.layout().clone();
    let vdim = model.descriptor.vocab;
    let column = |z: usize, j: usize| -> Result<Vec<f64>> {
        let prep = &prepared[z];
        let rec = &prep.graph.record;
        let mut dir = ParameterVector::zeros(layout.clone());
        dir.set_flat(j, 1.0);
        let tangents = rec.tangent(Some(&dir), &[])?;
        let u = &tangents[prep.graph.logits];
        let t = u.rows();
        let mut seed = Tensor::zeros(vec![t, vdim]);
        for (row, p) in &prep.probs {
            let urow = &u.data()[row * vdim..(row + 1) * vdim];
            let inner = tensor::dot(p, urow);
            let srow = &mut seed.data_mut()[row * vdim..(row + 1) * vdim];
            for y in 0..vdim {
                srow[y] = prep.weight * p[y] * (urow[y] - inner);
            }
        }
        let grads = rec.backward_from(prep.graph.logits, &seed)?;
        Ok(grads.to_param_vector(rec, &layout).flatten())
    };
    assemble_gauss_newton(p, prepared.len(), column, lambda)
}

/// Dense symmetric solve against a damped curvature matrix; factors once.
pub struct FactoredDense {
    matrix: SquareMatrix,
    chol: Cholesky,
}

impl FactoredDense {
    pub fn new(matrix: SquareMatrix) -> Result<Self> {
        let chol = Cholesky::factor(&matrix)?;
        Ok(FactoredDense { matrix, chol })
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim
    }

    pub fn matrix(&self) -> &SquareMatrix {
        &self.matrix
    }

    /// Solve H·x = g, verifying the residual.
    pub fn solve(&self, g: &[f64]) -> Result<Vec<f64>> {
        let x = self.chol.solve(g);
        let hx = self.matrix.matvec(&x);
        let (mut res, mut ng) = (0.0, 0.0);
        for i in 0..g.len() {
            res += (hx[i] - g[i]) * (hx[i] - g[i]);
            ng += g[i] * g[i];
        }
        if ng > 0.0 && res.sqrt() / ng.sqrt() > 1e-8 {
            return Err(CoreError::SingularMatrix);
        }
        Ok(x)
    }
}

/// Exact inverse-curvature product against a dense matrix (oracle path).
pub fn exact_ihvp(h: &SquareMatrix, g: &[f64]) -> Result<Vec<f64>> {
    crate::linalg::solve_spd(h, g, 1e-8)
}

// ── Disk cache ──────────────────────────────────────────────────────

fn layer_header(layer: &KroneckerFactors) -> serde_json::Value {
    serde_json::json!({
        "name": layer.name,
        "weight_seg": layer.weight_seg,
        "bias_seg": layer.bias_seg,
        "d_in": layer.d_in,
        "d_out": layer.d_out,
    })
}

pub fn save_factors(state: &EkfacState, path: &Path) -> Result<()> {
    let header = serde_json::json!({
        "format_version": FACTORS_VERSION,
        "fingerprint": state.fingerprint,
        "config": state.config,
        "layers": state.layers.iter().map(layer_header).collect::<Vec<_>>(),
    });
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut file, &header)?;
    file.write_all(b"\n")?;
    for layer in &state.layers {
        for arr in [
            &layer.a.data,
            &layer.g.data,
            &layer.q_a.data,
            &layer.q_g.data,
            &layer.lambda,
        ] {
            for v in arr.iter() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load_factors(path: &Path) -> Result<EkfacState> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header_line = Vec::new();
    {
        use std::io::BufRead;
        file.read_until(b'\n', &mut header_line)?;
    }
    let header: serde_json::Value = serde_json::from_slice(&header_line).map_err(|e| {
        CoreError::CorruptPayload {
            path: path.display().to_string(),
            detail: format!("bad header: {e}"),
        }
    })?;
    let version = header["format_version"].as_u64().unwrap_or(0) as u32;
    if version != FACTORS_VERSION {
        return Err(CoreError::VersionMismatch {
            expected: FACTORS_VERSION,
            found: version,
        });
    }
    let fingerprint: Fingerprint = serde_json::from_value(header["fingerprint"].clone())?;
    let config: CurvatureConfig = serde_json::from_value(header["config"].clone())?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    let mut vals = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut expected_len = 0usize;
    let layer_headers = header["layers"].as_array().cloned().unwrap_or_default();
    for lh in &layer_headers {
        let d1 = lh["d_in"].as_u64().unwrap_or(0) as usize + 1;
        let dout = lh["d_out"].as_u64().unwrap_or(0) as usize;
        expected_len += 2 * d1 * d1 + 2 * dout * dout + d1 * dout;
    }
    if payload.len() != expected_len * 8 {
        return Err(CoreError::CorruptPayload {
            path: path.display().to_string(),
            detail: format!(
                "expected {} payload bytes, got {}",
                expected_len * 8,
                payload.len()
            ),
        });
    }
    let mut layers = Vec::new();
    for lh in &layer_headers {
        let d_in = lh["d_in"].as_u64().unwrap_or(0) as usize;
        let d_out = lh["d_out"].as_u64().unwrap_or(0) as usize;
        let d1 = d_in + 1;
        let mut take = |n: usize| -> Vec<f64> { (&mut vals).take(n).collect() };
        layers.push(KroneckerFactors {
            name: lh["name"].as_str().unwrap_or("").to_string(),
            weight_seg: lh["weight_seg"].as_u64().unwrap_or(0) as usize,
            bias_seg: lh["bias_seg"].as_u64().unwrap_or(0) as usize,
            d_in,
            d_out,
            a: SquareMatrix::from_rows(d1, take(d1 * d1)),
            g: SquareMatrix::from_rows(d_out, take(d_out * d_out)),
            q_a: SquareMatrix::from_rows(d1, take(d1 * d1)),
            q_g: SquareMatrix::from_rows(d_out, take(d_out * d_out)),
            lambda: take(d1 * d_out),
        });
    }
    Ok(EkfacState {
        config,
        fingerprint,
        layers,
    })
}

/// Load and reject on fingerprint mismatch against the requesting
/// configuration.
pub fn load_factors_checked(path: &Path, requested: &Fingerprint) -> Result<EkfacState> {
    let state = load_factors(path)?;
    if &state.fingerprint != requested {
        return Err(CoreError::FingerprintMismatch {
            requested: requested.to_string(),
            found: state.fingerprint.to_string(),
        });
    }
    Ok(state)
}

fn cache_file(cache_dir: &Path, fingerprint: &Fingerprint) -> PathBuf {
    let mut hasher = Sha256::new();
    hasher.update(fingerprint.to_string().as_bytes());
    let digest = hasher.finalize();
    let key: String = digest[..12].iter().map(|b| format!("{b:02x}")).collect();
    cache_dir.join(format!("{key}.ekfac"))
}

/// Resolve the factor cache directory: explicit override, else
/// `CINFLUENCE_CACHE_DIR`, else `<workdir>/cache`.
pub fn resolve_cache_dir(explicit: Option<&Path>, workdir: &Path) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Ok(env) = std::env::var("CINFLUENCE_CACHE_DIR") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    workdir.join("cache")
}

/// Fit with an on-disk cache keyed by the fingerprint. Returns the state
/// and whether it was served from the cache.
pub fn fit_ekfac_cached(
    model: &ModelState,
    dataset: &[LabeledExample],
    config: &CurvatureConfig,
    cache_dir: &Path,
) -> Result<(EkfacState, bool)> {
    config.validate()?;
    let subset = config.fit_subset.min(dataset.len());
    let fingerprint = make_fingerprint(model, config, subset);
    let path = cache_file(cache_dir, &fingerprint);
    if path.exists() {
        let state = load_factors_checked(&path, &fingerprint)?;
        return Ok((state, true));
    }
    let state = fit_ekfac_corrected(model, dataset, config)?;
    std::fs::create_dir_all(cache_dir)?;
    save_factors(&state, &path)?;
    Ok((state, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label, Split};
    use crate::model::{BlockKind, ModelDescriptor};
    use approx::assert_relative_eq;

    fn info(name: &str, d_in: usize, d_out: usize) -> LinearLayerInfo {
        LinearLayerInfo {
            name: name.into(),
            weight_seg: 0,
            bias_seg: 1,
            d_in,
            d_out,
            kind: LayerKind::Mlp,
        }
    }

    fn tiny_model(kind: BlockKind, seed: u64) -> ModelState {
        ModelState::init(
            ModelDescriptor {
                vocab: 10,
                embed_dim: 5,
                hidden_dim: 8,
                blocks: 2,
                block_kind: kind,
                max_seq: 12,
                eos_token: 1,
            },
            seed,
        )
    }

    fn example(id: u64, prompt: Vec<usize>, response: Vec<usize>) -> LabeledExample {
        LabeledExample {
            id,
            prompt_tokens: prompt,
            response_tokens: response,
            label: Label::Benign,
            split: Split::Train,
        }
    }

    fn demo_dataset(n: usize) -> Vec<LabeledExample> {
        (0..n as u64)
            .map(|i| {
                example(
                    i,
                    vec![0, 2 + (i as usize % 3)],
                    vec![5 + (i as usize % 4), 3],
                )
            })
            .collect()
    }

    #[test]
    fn single_sample_factors_are_outer_products() {
        let mut builder = EkfacBuilder::new(vec![info("l", 2, 3)]);
        let x = Tensor::new(vec![1, 2], vec![0.5, -1.5]).unwrap();
        let g = Tensor::new(vec![1, 3], vec![2.0, 0.0, -1.0]).unwrap();
        builder.add_layer_sample(0, &x, &g, 1.0);
        builder.finish_example();
        let config = CurvatureConfig::default();
        let fp = Fingerprint {
            format_version: 1,
            model_hash: "t".into(),
            layer_mask: LayerMask::default(),
            subset_size: 1,
            token_budget: 1,
            damping_milli: "1e-3".into(),
            label_mode: LabelMode::Sampled,
            fisher_samples: 1,
            seed: 0,
        };
        let state = builder.finalize(&config, fp).unwrap();
        let layer = &state.layers[0];
        let ahat = [0.5, -1.5, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(layer.a.at(i, j), ahat[i] * ahat[j], epsilon = 1e-15);
            }
        }
        let gv = [2.0, 0.0, -1.0];
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(layer.g.at(i, j), gv[i] * gv[j], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn gaussian_inputs_drive_a_towards_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let d = 4;
        let mut builder = EkfacBuilder::new(vec![info("l", d, 2)]);
        let n = 5000;
        for _ in 0..n {
            let x: Vec<f64> = (0..d)
                .map(|_| {
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            let g: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            builder.add_layer_sample(
                0,
                &Tensor::new(vec![1, d], x).unwrap(),
                &Tensor::new(vec![1, 2], g).unwrap(),
                1.0,
            );
            builder.finish_example();
        }
        let fp = Fingerprint {
            format_version: 1,
            model_hash: "t".into(),
            layer_mask: LayerMask::default(),
            subset_size: n,
            token_budget: 1,
            damping_milli: "1e-3".into(),
            label_mode: LabelMode::Sampled,
            fisher_samples: 1,
            seed: 0,
        };
        let state = builder.finalize(&CurvatureConfig::default(), fp).unwrap();
        let a = &state.layers[0].a;
        let mut diff = 0.0;
        for i in 0..=d {
            for j in 0..=d {
                let want = if i == j { 1.0 } else { 0.0 };
                diff += (a.at(i, j) - want) * (a.at(i, j) - want);
            }
        }
        assert!(diff.sqrt() < 0.1, "‖A − I‖_F = {}", diff.sqrt());
    }

    #[test]
    fn masks_select_expected_layers() {
        let mlp = tiny_model(BlockKind::Mlp, 1);
        let attn = tiny_model(BlockKind::SingleHeadAttention, 1);
        let all = select_layers(
            &mlp,
            &LayerMask {
                kind: LayerMaskKind::All,
                stride: 1,
            },
        );
        assert_eq!(all.len(), 5); // 2 blocks × 2 + readout
        let mlp_only = select_layers(
            &mlp,
            &LayerMask {
                kind: LayerMaskKind::Mlp,
                stride: 1,
            },
        );
        assert_eq!(mlp_only.len(), 4);
        let attn_in_mlp_model = select_layers(
            &mlp,
            &LayerMask {
                kind: LayerMaskKind::Attention,
                stride: 1,
            },
        );
        assert!(attn_in_mlp_model.is_empty());
        let attn_only = select_layers(
            &attn,
            &LayerMask {
                kind: LayerMaskKind::Attention,
                stride: 1,
            },
        );
        assert_eq!(attn_only.len(), 8);
        let strided = select_layers(
            &attn,
            &LayerMask {
                kind: LayerMaskKind::Attention,
                stride: 2,
            },
        );
        assert_eq!(strided.len(), 4);
        assert_eq!(strided[0].name, "block0.wq");
        assert_eq!(strided[1].name, "block0.wv");
    }

    #[test]
    fn empty_selection_is_an_error() {
        let mlp = tiny_model(BlockKind::Mlp, 1);
        let config = CurvatureConfig {
            layer_mask: LayerMask {
                kind: LayerMaskKind::Attention,
                stride: 1,
            },
            ..CurvatureConfig::default()
        };
        assert!(matches!(
            fit_ekfac(&mlp, &demo_dataset(4), &config),
            Err(CoreError::EmptyLayerSelection)
        ));
    }

    #[test]
    fn zero_gradients_give_zero_corrected_eigenvalues() {
        // zero readout ⇒ empirical-label gradients vanish nowhere... use
        // a crafted state: run correction on a model with zero readout and
        // empirical labels pointing at the uniform argmax
        let mut model = tiny_model(BlockKind::Mlp, 3);
        // zero all params: logits uniform, p − onehot ≠ 0, so instead test
        // the accumulator directly with zero grads
        let _ = &mut model;
        let mut builder = EkfacBuilder::new(vec![info("l", 2, 2)]);
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let g = Tensor::zeros(vec![1, 2]);
        builder.add_layer_sample(0, &x, &g, 1.0);
        builder.finish_example();
        let fp = Fingerprint {
            format_version: 1,
            model_hash: "t".into(),
            layer_mask: LayerMask::default(),
            subset_size: 1,
            token_budget: 1,
            damping_milli: "1e-3".into(),
            label_mode: LabelMode::Sampled,
            fisher_samples: 1,
            seed: 0,
        };
        let state = builder.finalize(&CurvatureConfig::default(), fp).unwrap();
        // G = 0 ⇒ Kronecker grid Λ = eig(A)·0 = 0
        assert!(state.layers[0].lambda.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn corrected_eigenvalues_match_dense_moments() {
        // brute-force oracle on a 2×2 layer: Λ_ij must equal the empirical
        // second moment of q_a_iᵀ·Ĝ·q_g_j over the sample set
        let model = tiny_model(BlockKind::Mlp, 7);
        let dataset = demo_dataset(12);
        let config = CurvatureConfig {
            label_mode: LabelMode::Empirical,
            fit_subset: 12,
            ..CurvatureConfig::default()
        };
        let mut state = fit_ekfac(&model, &dataset, &config).unwrap();
        eigenvalue_correction(&mut state, &model, &dataset).unwrap();

        // dense recomputation for layer block0.w1
        let idx = state
            .layers
            .iter()
            .position(|l| l.name == "block0.w1")
            .unwrap();
        let layer = &state.layers[idx];
        let d1 = layer.d_in + 1;
        let dout = layer.d_out;
        let subset = fit_subset_indices(dataset.len(), &config);
        let mut moments = vec![0.0; d1 * dout];
        for &ix in &subset {
            let ex = &dataset[ix];
            let tokens = ex.tokens();
            let targets = response_targets(&tokens, ex.resp_start());
            let (graph, grads) =
                crate::model::loss_backward_with_targets(&model, &tokens, targets).unwrap();
            let (tag, node) = graph
                .record
                .linear_nodes_tagged()
                .into_iter()
                .find(|(tag, _)| {
                    model.descriptor.linear_layers()[*tag as usize].name == "block0.w1"
                })
                .unwrap();
            let _ = tag;
            let x = graph.record.linear_input(node);
            let g = grads.node(node).unwrap();
            // Ĝ = Σ_t â_t g_tᵀ
            let mut ghat = vec![0.0; d1 * dout];
            for r in 0..x.rows() {
                for i in 0..layer.d_in {
                    for j in 0..dout {
                        ghat[i * dout + j] += x.row(r)[i] * g.row(r)[j];
                    }
                }
                for j in 0..dout {
                    ghat[(d1 - 1) * dout + j] += g.row(r)[j];
                }
            }
            for i in 0..d1 {
                for j in 0..dout {
                    // q_a_iᵀ·Ĝ·q_g_j by explicit loops
                    let mut val = 0.0;
                    for r in 0..d1 {
                        for c in 0..dout {
                            val += layer.q_a.at(r, i) * ghat[r * dout + c] * layer.q_g.at(c, j);
                        }
                    }
                    moments[i * dout + j] += val * val;
                }
            }
        }
        for m in moments.iter_mut() {
            *m /= subset.len() as f64;
        }
        for (got, want) in layer.lambda.iter().zip(&moments) {
            assert_relative_eq!(got, want, max_relative = 1e-10, epsilon = 1e-14);
        }
    }

    fn synthetic_state(d_in: usize, d_out: usize, lambda_grid: Vec<f64>, damping: f64) -> EkfacState {
        // identity eigenbases so the grid is directly interpretable
        let config = CurvatureConfig {
            damping,
            ..CurvatureConfig::default()
        };
        let fp = Fingerprint {
            format_version: 1,
            model_hash: "t".into(),
            layer_mask: LayerMask::default(),
            subset_size: 1,
            token_budget: 1,
            damping_milli: "x".into(),
            label_mode: LabelMode::Sampled,
            fisher_samples: 1,
            seed: 0,
        };
        EkfacState {
            config,
            fingerprint: fp,
            layers: vec![KroneckerFactors {
                name: "layer".into(),
                weight_seg: 0,
                bias_seg: 1,
                d_in,
                d_out,
                a: SquareMatrix::identity(d_in + 1),
                g: SquareMatrix::identity(d_out),
                q_a: SquareMatrix::identity(d_in + 1),
                q_g: SquareMatrix::identity(d_out),
                lambda: lambda_grid,
            }],
        }
    }

    fn two_segment_layout(d_in: usize, d_out: usize) -> crate::params::ParamLayout {
        crate::params::ParamLayout {
            segments: vec![
                crate::params::SegmentSpec::new("w", vec![d_out, d_in]),
                crate::params::SegmentSpec::new("b", vec![d_out]),
            ],
        }
    }

    #[test]
    fn zero_lambda_grid_reduces_to_pure_damping() {
        let (din, dout) = (3, 2);
        let lambda = 1e-3;
        let state = synthetic_state(din, dout, vec![0.0; (din + 1) * dout], lambda);
        let layout = two_segment_layout(din, dout);
        let mut g = ParameterVector::zeros(layout);
        for c in 0..g.total_dim() {
            g.set_flat(c, (c as f64 + 1.0) * 0.37);
        }
        let out = state.ihvp(&g).unwrap();
        for c in 0..g.total_dim() {
            assert_relative_eq!(out.get_flat(c), g.get_flat(c) / lambda, max_relative = 1e-12);
        }
        // ihvp(0) = 0
        let zero = g.zeros_like();
        let out0 = state.ihvp(&zero).unwrap();
        assert!(out0.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ihvp_matches_dense_kronecker_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (din, dout) = (3, 4);
        let d1 = din + 1;
        let lambda = 1e-3;
        // random SPD A and G
        let rand_spd = |dim: usize, rng: &mut ChaCha8Rng| {
            let mut b = SquareMatrix::zeros(dim);
            for v in b.data.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let mut m = SquareMatrix::zeros(dim);
            for r in 0..dim {
                for c in 0..dim {
                    let mut s = 0.0;
                    for k in 0..dim {
                        s += b.at(k, r) * b.at(k, c);
                    }
                    m.set(r, c, s + if r == c { 0.05 } else { 0.0 });
                }
            }
            m
        };
        let a = rand_spd(d1, &mut rng);
        let g_factor = rand_spd(dout, &mut rng);
        let eig_a = sym_eigen(&a).unwrap();
        let eig_g = sym_eigen(&g_factor).unwrap();
        let mut grid = vec![0.0; d1 * dout];
        for i in 0..d1 {
            for j in 0..dout {
                grid[i * dout + j] = eig_a.values[i] * eig_g.values[j];
            }
        }
        let mut state = synthetic_state(din, dout, grid, lambda);
        state.layers[0].a = a.clone();
        state.layers[0].g = g_factor.clone();
        state.layers[0].q_a = eig_a.vectors;
        state.layers[0].q_g = eig_g.vectors;

        let layout = two_segment_layout(din, dout);
        // dense (A⊗G + λI) in the packed row-major (i·dout+j) layout
        let p = d1 * dout;
        let mut dense = SquareMatrix::zeros(p);
        for i in 0..d1 {
            for j in 0..dout {
                for k in 0..d1 {
                    for l in 0..dout {
                        dense.data[(i * dout + j) * p + (k * dout + l)] =
                            a.at(i, k) * g_factor.at(j, l);
                    }
                }
            }
        }
        for i in 0..p {
            dense.data[i * p + i] += lambda;
        }
        for trial in 0..20 {
            let mut g = ParameterVector::zeros(layout.clone());
            for c in 0..g.total_dim() {
                g.set_flat(c, rng.gen_range(-1.0..1.0));
            }
            let via_ekfac = state.ihvp(&g).unwrap();
            let packed = pack_layer_matrix(&g, &state.layers[0]);
            let dense_solution = exact_ihvp(&dense, &packed).unwrap();
            let packed_out = pack_layer_matrix(&via_ekfac, &state.layers[0]);
            for (idx, (x, y)) in packed_out.iter().zip(&dense_solution).enumerate() {
                assert_relative_eq!(x, y, max_relative = 1e-6, epsilon = 1e-10);
                let _ = (idx, trial);
            }
        }
    }

    #[test]
    fn ihvp_is_linear() {
        let (din, dout) = (2, 3);
        let grid: Vec<f64> = (0..(din + 1) * dout).map(|i| 0.1 + i as f64 * 0.05).collect();
        let state = synthetic_state(din, dout, grid, 1e-3);
        let layout = two_segment_layout(din, dout);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g1 = ParameterVector::zeros(layout.clone());
        let mut g2 = ParameterVector::zeros(layout);
        for c in 0..g1.total_dim() {
            g1.set_flat(c, rng.gen_range(-1.0..1.0));
            g2.set_flat(c, rng.gen_range(-1.0..1.0));
        }
        let (alpha, beta) = (1.7, -0.4);
        let mut combo = g1.clone();
        combo.scale(alpha);
        combo.add_scaled(&g2, beta);
        let lhs = state.ihvp(&combo).unwrap();
        let mut rhs = state.ihvp(&g1).unwrap();
        rhs.scale(alpha);
        rhs.add_scaled(&state.ihvp(&g2).unwrap(), beta);
        for c in 0..lhs.total_dim() {
            assert_relative_eq!(lhs.get_flat(c), rhs.get_flat(c), epsilon = 1e-10);
        }
    }

    #[test]
    fn damped_grid_entries_stay_positive() {
        let model = tiny_model(BlockKind::Mlp, 5);
        let dataset = demo_dataset(8);
        let config = CurvatureConfig {
            fit_subset: 8,
            label_mode: LabelMode::Sampled,
            ..CurvatureConfig::default()
        };
        let state = fit_ekfac_corrected(&model, &dataset, &config).unwrap();
        for layer in &state.layers {
            for &l in &layer.lambda {
                assert!(l + state.config.damping > 0.0);
                assert!(l >= 0.0);
            }
        }
    }

    #[test]
    fn exact_curvature_of_empty_data_is_damping_only() {
        let model = tiny_model(BlockKind::Mlp, 5);
        let lambda = 2.5;
        let h = exact_curvature(&model, &[], lambda).unwrap();
        let p = model.param_dim();
        for i in 0..p {
            for j in 0..p {
                let want = if i == j { lambda } else { 0.0 };
                assert_eq!(h.at(i, j), want);
            }
        }
    }

    #[test]
    fn exact_curvature_is_symmetric() {
        let model = tiny_model(BlockKind::SingleHeadAttention, 9);
        let dataset = demo_dataset(6);
        let h = exact_curvature(&model, &dataset, 1e-3).unwrap();
        assert!(h.asymmetry() < 1e-8, "asymmetry {}", h.asymmetry());
    }

    #[test]
    fn exact_curvature_matches_explicit_jacobian_assembly() {
        // independent route: build J rows by seeding backward with unit
        // logit vectors, then assemble Σ c·Jᵀ(diag p − ppᵀ)J densely
        let model = tiny_model(BlockKind::Mlp, 27);
        let dataset = demo_dataset(3);
        let lambda = 1e-3;
        let h = exact_curvature(&model, &dataset, lambda).unwrap();
        let p = model.param_dim();
        let v = model.descriptor.vocab;
        let layout = model.params.layout().clone();
        let mut dense = SquareMatrix::zeros(p);
        for ex in &dataset {
            let tokens = ex.tokens();
            let graph = model
                .build_graph(GraphSpec {
                    tokens: &tokens,
                    targets: None,
                    pooled_at: None,
                })
                .unwrap();
            let targets = response_targets(&tokens, ex.resp_start());
            let rows: Vec<usize> = targets
                .iter()
                .enumerate()
                .filter_map(|(i, t)| t.map(|_| i))
                .collect();
            let c = 1.0 / rows.len() as f64;
            let logits = graph.record.value(graph.logits).clone();
            let t = logits.rows();
            for &row in &rows {
                let probs = tensor::softmax_rows(logits.row(row), 1, v);
                // J rows for this position
                let mut jrows = Vec::with_capacity(v);
                for y in 0..v {
                    let mut seed = Tensor::zeros(vec![t, v]);
                    seed.data_mut()[row * v + y] = 1.0;
                    let grads = graph.record.backward_from(graph.logits, &seed).unwrap();
                    jrows.push(grads.to_param_vector(&graph.record, &layout).flatten());
                }
                // Jᵀ(diag p − ppᵀ)J = Σ_y p_y j_y j_yᵀ − (Σ_y p_y j_y)(…)ᵀ
                let mut mean_row = vec![0.0; p];
                for (y, jr) in jrows.iter().enumerate() {
                    for k in 0..p {
                        mean_row[k] += probs[y] * jr[k];
                    }
                }
                for (y, jr) in jrows.iter().enumerate() {
                    let w = c * probs[y] / dataset.len() as f64;
                    for i in 0..p {
                        if jr[i] == 0.0 {
                            continue;
                        }
                        for j in 0..p {
                            dense.data[i * p + j] += w * jr[i] * jr[j];
                        }
                    }
                }
                let w = c / dataset.len() as f64;
                for i in 0..p {
                    if mean_row[i] == 0.0 {
                        continue;
                    }
                    for j in 0..p {
                        dense.data[i * p + j] -= w * mean_row[i] * mean_row[j];
                    }
                }
            }
        }
        for i in 0..p {
            dense.data[i * p + i] += lambda;
        }
        let mut max_rel: f64 = 0.0;
        for i in 0..p {
            for j in 0..p {
                let (x, y) = (h.at(i, j), dense.at(i, j));
                let denom = x.abs().max(y.abs()).max(1e-9);
                max_rel = max_rel.max((x - y).abs() / denom);
            }
        }
        assert!(max_rel < 1e-9, "max rel err {max_rel}");
    }

    #[test]
    fn exact_curvature_guard() {
        let model = ModelState::zeros(ModelDescriptor {
            vocab: 64,
            embed_dim: 32,
            hidden_dim: 64,
            blocks: 2,
            block_kind: BlockKind::Mlp,
            max_seq: 32,
            eos_token: 1,
        });
        assert!(model.param_dim() > EXACT_CURVATURE_GUARD);
        assert!(matches!(
            exact_curvature(&model, &demo_dataset(1), 1e-3),
            Err(CoreError::GuardExceeded { .. })
        ));
    }

    #[test]
    fn exact_ihvp_identity_and_scaling() {
        let h = SquareMatrix::identity(4);
        let g = vec![1.0, -2.0, 3.0, 0.5];
        assert_eq!(exact_ihvp(&h, &g).unwrap(), g);
        let mut h2 = SquareMatrix::identity(4);
        for i in 0..4 {
            h2.data[i * 4 + i] = 2.0;
        }
        let x = exact_ihvp(&h2, &g).unwrap();
        for (a, b) in x.iter().zip(&g) {
            assert_relative_eq!(a, &(b / 2.0), epsilon = 1e-15);
        }
    }

    #[test]
    fn factors_round_trip_bitwise_and_reject_mismatch() {
        let model = tiny_model(BlockKind::Mlp, 3);
        let dataset = demo_dataset(6);
        let config = CurvatureConfig {
            fit_subset: 6,
            ..CurvatureConfig::default()
        };
        let state = fit_ekfac_corrected(&model, &dataset, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ekfac");
        save_factors(&state, &path).unwrap();
        let loaded = load_factors(&path).unwrap();
        assert_eq!(loaded, state);

        // truncation is corrupt
        let bytes = std::fs::read(&path).unwrap();
        let bad = dir.path().join("bad.ekfac");
        std::fs::write(&bad, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_factors(&bad),
            Err(CoreError::CorruptPayload { .. })
        ));

        // fingerprint differing in stride is rejected, message carries both
        let mut other = state.fingerprint.clone();
        other.layer_mask.stride = 2;
        let err = load_factors_checked(&path, &other).unwrap_err();
        match err {
            CoreError::FingerprintMismatch { requested, found } => {
                assert!(requested.contains("\"stride\":2"));
                assert!(found.contains("\"stride\":1"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn cache_serves_bitwise_equal_factors() {
        let model = tiny_model(BlockKind::Mlp, 3);
        let dataset = demo_dataset(6);
        let config = CurvatureConfig {
            fit_subset: 6,
            ..CurvatureConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let (first, hit1) = fit_ekfac_cached(&model, &dataset, &config, dir.path()).unwrap();
        assert!(!hit1);
        let (second, hit2) = fit_ekfac_cached(&model, &dataset, &config, dir.path()).unwrap();
        assert!(hit2);
        assert_eq!(first, second);
    }
}
