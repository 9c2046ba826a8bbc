//! The six attribution scorers and their shared query machinery.
//!
//! Every method reports promote-positive scores: a positive score means
//! upweighting the training example pushes the queried quantity up — the
//! negated test loss for IF, the concept activation for CI and its
//! approximations. Under this convention the first-order estimate of the
//! leave-one-out effect is score/n for every gradient method, and all six
//! methods rank concept-promoting data at the top.

use crate::concepts::ConceptVector;
use crate::curvature::{EkfacState, FactoredDense};
use crate::data::LabeledExample;
use crate::error::{CoreError, Result};
use crate::model::{
    activation_gradient, forward_with_activations, generate, layer_jacobian, param_gradient,
    pooling_rows, GraphSpec, ModelState,
};
use crate::params::ParameterVector;
use crate::tape::Op;
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Extra greedy-decoding budget beyond the training response length when
/// producing on-policy responses for Projection Difference.
pub const PD_GENERATION_SLACK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "IF")]
    InfluenceFunction,
    #[serde(rename = "CI")]
    ConceptInfluence,
    #[serde(rename = "KERNEL")]
    Kernel,
    #[serde(rename = "AGI")]
    ActivationGradient,
    #[serde(rename = "PD")]
    ProjectionDifference,
    #[serde(rename = "VF")]
    VectorFilter,
}

impl Method {
    pub fn id(&self) -> &'static str {
        match self {
            Method::InfluenceFunction => "IF",
            Method::ConceptInfluence => "CI",
            Method::Kernel => "KERNEL",
            Method::ActivationGradient => "AGI",
            Method::ProjectionDifference => "PD",
            Method::VectorFilter => "VF",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Some(match s {
            "IF" => Method::InfluenceFunction,
            "CI" => Method::ConceptInfluence,
            "KERNEL" => Method::Kernel,
            "AGI" => Method::ActivationGradient,
            "PD" => Method::ProjectionDifference,
            "VF" => Method::VectorFilter,
            _ => return None,
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// Signed influence score with its rank (1 = highest score).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub example_id: u64,
    pub method: Method,
    pub score: f64,
    pub rank: usize,
}

/// What the influence is computed against.
pub enum InfluenceQuery<'a> {
    /// Mean test-loss gradient over the top-K test examples.
    TestLoss {
        examples: &'a [LabeledExample],
        top_k: usize,
    },
    /// A fitted concept direction at its layer.
    Concept { vector: &'a ConceptVector },
}

/// Curvature backend shared by IF and CI.
pub enum CurvatureBackend<'a> {
    Ekfac(&'a EkfacState),
    ExactDense(&'a FactoredDense),
    Identity,
}

impl CurvatureBackend<'_> {
    pub fn ihvp(&self, g: &ParameterVector) -> Result<ParameterVector> {
        match self {
            CurvatureBackend::Ekfac(state) => state.ihvp(g),
            CurvatureBackend::ExactDense(dense) => {
                let x = dense.solve(&g.flatten())?;
                ParameterVector::unflatten(g.layout(), &x)
            }
            CurvatureBackend::Identity => Ok(g.clone()),
        }
    }

    /// EK-FAC factors must match the model they are applied to.
    pub fn check_model(&self, model: &ModelState) -> Result<()> {
        if let CurvatureBackend::Ekfac(state) = self {
            let hash = crate::curvature::model_hash(model);
            if state.fingerprint.model_hash != hash {
                let mut requested = state.fingerprint.clone();
                requested.model_hash = hash;
                return Err(CoreError::FingerprintMismatch {
                    requested: requested.to_string(),
                    found: state.fingerprint.to_string(),
                });
            }
        }
        Ok(())
    }
}

// ── Query gradients ─────────────────────────────────────────────────

/// Running mean of per-example loss gradients over the top-K test examples;
/// constant memory in K.
pub fn behavior_gradient(
    model: &ModelState,
    query: &InfluenceQuery<'_>,
) -> Result<ParameterVector> {
    match query {
        InfluenceQuery::TestLoss { examples, top_k } => {
            if examples.is_empty() {
                return Err(CoreError::EmptyDataset {
                    context: "behavior_gradient test set".into(),
                });
            }
            let k = (*top_k).min(examples.len()).max(1);
            let mut mean = ParameterVector::zeros(model.params.layout().clone());
            for (seen, ex) in examples.iter().take(k).enumerate() {
                let g = param_gradient(model, ex)?;
                // incremental mean: m += (g − m)/(seen+1)
                let mut delta = g;
                delta.add_scaled(&mean, -1.0);
                mean.add_scaled(&delta, 1.0 / (seen as f64 + 1.0));
            }
            Ok(mean)
        }
        InfluenceQuery::Concept { .. } => Err(CoreError::InvalidConfig(
            "behavior_gradient expects a test-loss query".into(),
        )),
    }
}

/// ∇_θ f_v(x_test): backward pass of the pooled concept activation.
pub fn concept_gradient(
    model: &ModelState,
    example: &LabeledExample,
    v: &ConceptVector,
) -> Result<ParameterVector> {
    model.descriptor.check_layer(v.layer)?;
    if v.dim() != model.descriptor.layer_dim(v.layer) {
        return Err(CoreError::ShapeMismatch {
            context: "concept_gradient direction".into(),
            expected: vec![model.descriptor.layer_dim(v.layer)],
            got: vec![v.dim()],
        });
    }
    let tokens = example.tokens();
    let rows = pooling_rows(example.resp_start(), tokens.len())?;
    let mut graph = model.build_graph(GraphSpec {
        tokens: &tokens,
        targets: None,
        pooled_at: Some((v.layer, rows)),
    })?;
    let pooled = graph.pooled.unwrap();
    let fv = graph.record.push(Op::DotConst {
        input: pooled,
        weights: v.direction.clone(),
    });
    graph.record.evaluate(&model.params, &[])?;
    let grads = graph.record.backward_from(fv, &Tensor::scalar(1.0))?;
    Ok(grads.to_param_vector(&graph.record, model.params.layout()))
}

/// Mean concept gradient over the top-K test examples.
pub fn concept_query_gradient(
    model: &ModelState,
    tests: &[LabeledExample],
    v: &ConceptVector,
    top_k: usize,
) -> Result<ParameterVector> {
    if tests.is_empty() {
        return Err(CoreError::EmptyDataset {
            context: "concept query test set".into(),
        });
    }
    let k = top_k.min(tests.len()).max(1);
    let mut mean = ParameterVector::zeros(model.params.layout().clone());
    for (seen, ex) in tests.iter().take(k).enumerate() {
        let g = concept_gradient(model, ex, v)?;
        let mut delta = g;
        delta.add_scaled(&mean, -1.0);
        mean.add_scaled(&delta, 1.0 / (seen as f64 + 1.0));
    }
    Ok(mean)
}

// ── The six scorers ─────────────────────────────────────────────────

/// Influence function score: +⟨g_φ, H⁻¹∇L(z)⟩ where g_φ is the raw mean
/// test-loss gradient. Positive ⇒ upweighting z decreases the test loss.
pub fn influence_function_score(
    curvature: &CurvatureBackend<'_>,
    model: &ModelState,
    query_grad: &ParameterVector,
    z_train: &LabeledExample,
) -> Result<f64> {
    curvature.check_model(model)?;
    let g = param_gradient(model, z_train)?;
    let ihvp = curvature.ihvp(&g)?;
    Ok(query_grad.dot(&ihvp))
}

/// Concept influence score: −⟨∇f_v, H⁻¹∇L(z)⟩, the first-order change of
/// the concept activation per unit upweighting of z.
pub fn concept_influence_score_with_query(
    curvature: &CurvatureBackend<'_>,
    model: &ModelState,
    concept_query_grad: &ParameterVector,
    z_train: &LabeledExample,
) -> Result<f64> {
    curvature.check_model(model)?;
    let g = param_gradient(model, z_train)?;
    let ihvp = curvature.ihvp(&g)?;
    Ok(-concept_query_grad.dot(&ihvp))
}

/// Single-test-input concept influence (Eq. 2 shape).
pub fn concept_influence_score(
    curvature: &CurvatureBackend<'_>,
    model: &ModelState,
    v: &ConceptVector,
    x_test: &LabeledExample,
    z_train: &LabeledExample,
) -> Result<f64> {
    let query = concept_gradient(model, x_test, v)?;
    concept_influence_score_with_query(curvature, model, &query, z_train)
}

/// Explicit cross-input kernel M = J|test·J|trainᵀ over pooled Jacobians;
/// reference path guarded by the Jacobian limit. Score: −vᵀ·M·∇_{a}L(z).
pub fn kernel_influence_score(
    model: &ModelState,
    v: &ConceptVector,
    x_test: &LabeledExample,
    z_train: &LabeledExample,
) -> Result<f64> {
    model.descriptor.check_layer(v.layer)?;
    let test_tokens = x_test.tokens();
    let j_test = layer_jacobian(model, &test_tokens, x_test.resp_start(), v.layer)?;
    let train_tokens = z_train.tokens();
    let j_train = layer_jacobian(model, &train_tokens, z_train.resp_start(), v.layer)?;
    let m = kernel_matrix(&j_test, &j_train);
    let da = activation_gradient(model, z_train, v.layer)?;
    let d = v.dim();
    let mut score = 0.0;
    for i in 0..d {
        for j in 0..d {
            score += v.direction[i] * m[i * d + j] * da[j];
        }
    }
    Ok(-score)
}

/// M = J_test·J_trainᵀ for two pooled Jacobians (rows d_ℓ, columns p).
pub fn kernel_matrix(j_test: &[Vec<f64>], j_train: &[Vec<f64>]) -> Vec<f64> {
    let d = j_test.len();
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            m[i * d + j] = crate::tensor::dot(&j_test[i], &j_train[j]);
        }
    }
    m
}

/// Activation-gradient score (kernel with M = I): −⟨v, ∇_{a}L(z)⟩ — the
/// projection of the activation-space descent direction onto the concept.
/// No curvature, no test input.
pub fn activation_gradient_score(
    model: &ModelState,
    v: &ConceptVector,
    z_train: &LabeledExample,
) -> Result<f64> {
    model.descriptor.check_layer(v.layer)?;
    let da = activation_gradient(model, z_train, v.layer)?;
    Ok(-crate::tensor::dot(&v.direction, &da))
}

/// Projection difference: ⟨v, ā(x,y)⟩ − ⟨v, ā(x,y′)⟩ where y′ is the
/// model's greedy continuation of x with budget |y| + 8.
pub fn projection_difference_score(
    model: &ModelState,
    v: &ConceptVector,
    z_train: &LabeledExample,
) -> Result<f64> {
    model.descriptor.check_layer(v.layer)?;
    if z_train.response_tokens.is_empty() {
        return Err(CoreError::EmptyResponse { id: z_train.id });
    }
    let budget = z_train.response_tokens.len() + PD_GENERATION_SLACK;
    let y_prime = generate(model, &z_train.prompt_tokens, budget)?;
    if y_prime.is_empty() {
        return Err(CoreError::EmptyDataset {
            context: format!("generation for example {} produced no tokens", z_train.id),
        });
    }
    let train_proj = pooled_projection(model, &z_train.tokens(), z_train.resp_start(), v)?;
    let mut gen_tokens = z_train.prompt_tokens.clone();
    gen_tokens.extend_from_slice(&y_prime);
    let gen_proj = pooled_projection(model, &gen_tokens, z_train.resp_start(), v)?;
    Ok(train_proj - gen_proj)
}

/// Vector filter: ⟨v, ā(x,y)⟩ of the training pair alone.
pub fn vector_filter_score(
    model: &ModelState,
    v: &ConceptVector,
    z_train: &LabeledExample,
) -> Result<f64> {
    model.descriptor.check_layer(v.layer)?;
    pooled_projection(model, &z_train.tokens(), z_train.resp_start(), v)
}

fn pooled_projection(
    model: &ModelState,
    tokens: &[usize],
    resp_start: usize,
    v: &ConceptVector,
) -> Result<f64> {
    let (_, capture) = forward_with_activations(model, tokens, resp_start, v.layer)?;
    Ok(crate::tensor::dot(&v.direction, &capture.pooled))
}

// ── Ranking ─────────────────────────────────────────────────────────

/// Score every example, order by descending score (ties by ascending id),
/// and assign ranks starting at 1. Scoring runs in parallel; results merge
/// in deterministic id order before sorting.
pub fn rank_dataset<F>(method: Method, dataset: &[LabeledExample], scorer: F) -> Result<Vec<ScoreRecord>>
where
    F: Fn(&LabeledExample) -> Result<f64> + Sync,
{
    if dataset.is_empty() {
        return Err(CoreError::EmptyDataset {
            context: "rank_dataset".into(),
        });
    }
    let scored: Vec<(u64, f64)> = dataset
        .par_iter()
        .map(|ex| -> Result<(u64, f64)> {
            let score = scorer(ex).map_err(|e| CoreError::ScorerFailure {
                id: ex.id,
                source: Box::new(e),
            })?;
            if !score.is_finite() {
                return Err(CoreError::ScorerFailure {
                    id: ex.id,
                    source: Box::new(CoreError::NonFinite { node: 0 }),
                });
            }
            Ok((ex.id, score))
        })
        .collect::<Result<_>>()?;
    let mut records: Vec<ScoreRecord> = scored
        .into_iter()
        .map(|(example_id, score)| ScoreRecord {
            example_id,
            method,
            score,
            rank: 0,
        })
        .collect();
    records.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.example_id.cmp(&b.example_id))
    });
    for (i, r) in records.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(records)
}

// ── Score file io ───────────────────────────────────────────────────

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
