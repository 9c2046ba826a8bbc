//! Toy autoregressive language model: residual blocks (per-position MLP or
//! single-head causal attention) over token + position embeddings, with
//! activation capture at any residual layer, a deterministic trainer, greedy
//! generation, and per-example gradient extraction.
//!
//! Layer ℓ indexes the residual stream: ℓ = 0 is the embedding output and
//! ℓ = b is the output of block b. Pooled activations and pooled activation
//! gradients average over the positions whose logits produce the response
//! tokens (indices `resp_start-1 .. T-1`), one position per response token.

use crate::data::LabeledExample;
use crate::error::{CoreError, Result};
use crate::params::{ParamLayout, ParameterVector, SegmentSpec};
use crate::tape::{ComputationRecord, Gradients, NodeId, Op};
use crate::tensor::{self, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Parameter-count guard for explicit Jacobian assembly.
pub const JACOBIAN_GUARD: usize = 50_000;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    Mlp,
    SingleHeadAttention,
}

/// Kind tag of a linear layer, used by curvature layer masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Mlp,
    Attention,
    Readout,
}

/// One linear layer (weight + bias segment pair) of the model.
#[derive(Debug, Clone)]
pub struct LinearLayerInfo {
    pub name: String,
    pub weight_seg: usize,
    pub bias_seg: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub kind: LayerKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub blocks: usize,
    pub block_kind: BlockKind,
    pub max_seq: usize,
    pub eos_token: usize,
}

impl ModelDescriptor {
    /// Dimension of the residual stream at any layer ℓ ∈ 0..=blocks.
    pub fn layer_dim(&self, _layer: usize) -> usize {
        self.embed_dim
    }

    pub fn max_layer(&self) -> usize {
        self.blocks
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer > self.blocks {
            return Err(CoreError::LayerOutOfRange {
                layer,
                max: self.blocks,
            });
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        let d = self.embed_dim;
        let h = self.hidden_dim;
        let mut segments = vec![
            SegmentSpec::new("embed.tok", vec![self.vocab, d]),
            SegmentSpec::new("embed.pos", vec![self.max_seq, d]),
        ];
        for b in 0..self.blocks {
            match self.block_kind {
                BlockKind::Mlp => {
                    segments.push(SegmentSpec::new(format!("block{b}.w1"), vec![h, d]));
                    segments.push(SegmentSpec::new(format!("block{b}.b1"), vec![h]));
                    segments.push(SegmentSpec::new(format!("block{b}.w2"), vec![d, h]));
                    segments.push(SegmentSpec::new(format!("block{b}.b2"), vec![d]));
                }
                BlockKind::SingleHeadAttention => {
                    for proj in ["wq", "wk", "wv", "wo"] {
                        segments.push(SegmentSpec::new(format!("block{b}.{proj}"), vec![d, d]));
                        let bias = proj.replace('w', "b");
                        segments.push(SegmentSpec::new(format!("block{b}.{bias}"), vec![d]));
                    }
                }
            }
        }
        segments.push(SegmentSpec::new("readout.w", vec![self.vocab, d]));
        segments.push(SegmentSpec::new("readout.b", vec![self.vocab]));
        ParamLayout { segments }
    }

    /// Linear layers in depth order (block layers, then the readout).
    pub fn linear_layers(&self) -> Vec<LinearLayerInfo> {
        let layout = self.layout();
        let d = self.embed_dim;
        let h = self.hidden_dim;
        let mut layers = Vec::new();
        let mut add = |name: String, d_in: usize, d_out: usize, kind: LayerKind| {
            let weight_seg = layout.index_of(&name).unwrap();
            layers.push(LinearLayerInfo {
                weight_seg,
                bias_seg: weight_seg + 1,
                name,
                d_in,
                d_out,
                kind,
            });
        };
        for b in 0..self.blocks {
            match self.block_kind {
                BlockKind::Mlp => {
                    add(format!("block{b}.w1"), d, h, LayerKind::Mlp);
                    add(format!("block{b}.w2"), h, d, LayerKind::Mlp);
                }
                BlockKind::SingleHeadAttention => {
                    for proj in ["wq", "wk", "wv", "wo"] {
                        add(format!("block{b}.{proj}"), d, d, LayerKind::Attention);
                    }
                }
            }
        }
        add("readout.w".into(), d, self.vocab, LayerKind::Readout);
        layers
    }
}

/// Architecture descriptor plus the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub descriptor: ModelDescriptor,
    pub params: ParameterVector,
    pub seed: u64,
}

impl ModelState {
    /// Seeded random initialization: Xavier-uniform linears, gaussian
    /// embeddings, zero biases.
    pub fn init(descriptor: ModelDescriptor, seed: u64) -> Self {
        let layout = descriptor.layout();
        let mut params = ParameterVector::zeros(layout.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (idx, spec) in layout.segments.iter().enumerate() {
            let seg = params.segment_mut(idx);
            if spec.name.starts_with("embed.") {
                for v in seg.data_mut() {
                    // Box-Muller over the seeded stream
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    *v = 0.3 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                }
            } else if spec.shape.len() == 2 {
                let (dout, din) = (spec.shape[0], spec.shape[1]);
                let a = (6.0 / (din + dout) as f64).sqrt();
                for v in seg.data_mut() {
                    *v = rng.gen_range(-a..a);
                }
            }
            // biases stay zero
        }
        ModelState {
            descriptor,
            params,
            seed,
        }
    }

    /// All-zero parameters (uniform softmax everywhere).
    pub fn zeros(descriptor: ModelDescriptor) -> Self {
        let params = ParameterVector::zeros(descriptor.layout());
        ModelState {
            descriptor,
            params,
            seed: 0,
        }
    }

    pub fn param_dim(&self) -> usize {
        self.params.total_dim()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() > self.descriptor.max_seq {
            return Err(CoreError::ShapeMismatch {
                context: "sequence longer than max_seq".into(),
                expected: vec![self.descriptor.max_seq],
                got: vec![tokens.len()],
            });
        }
        for &t in tokens {
            if t >= self.descriptor.vocab {
                return Err(CoreError::TokenOutOfRange {
                    token: t,
                    vocab: self.descriptor.vocab,
                });
            }
        }
        Ok(())
    }

    // ── Checkpoint io ───────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "format_version": CHECKPOINT_VERSION,
            "descriptor": self.descriptor,
            "seed": self.seed,
            "param_count": self.param_dim(),
        });
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut file, &header)?;
        file.write_all(b"\n")?;
        for v in self.params.flatten() {
            file.write_all(&v.to_le_bytes())?;
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut header_line = Vec::new();
        {
            use std::io::BufRead;
            file.read_until(b'\n', &mut header_line)?;
        }
        let header: serde_json::Value = serde_json::from_slice(&header_line)?;
        let version = header["format_version"].as_u64().unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(CoreError::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let descriptor: ModelDescriptor = serde_json::from_value(header["descriptor"].clone())?;
        let seed = header["seed"].as_u64().unwrap_or(0);
        let count = header["param_count"].as_u64().unwrap_or(0) as usize;
        let layout = descriptor.layout();
        if count != layout.total_dim() {
            return Err(CoreError::CorruptPayload {
                path: path.display().to_string(),
                detail: format!(
                    "param_count {count} does not match descriptor dim {}",
                    layout.total_dim()
                ),
            });
        }
        let mut payload = Vec::new();
        file.read_to_end(&mut payload)?;
        if payload.len() != count * 8 {
            return Err(CoreError::CorruptPayload {
                path: path.display().to_string(),
                detail: format!("expected {} payload bytes, got {}", count * 8, payload.len()),
            });
        }
        let flat: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let params = ParameterVector::unflatten(&layout, &flat)?;
        Ok(ModelState {
            descriptor,
            params,
            seed,
        })
    }
}

// ── Graph construction ──────────────────────────────────────────────

/// Recorded forward pass with handles into the interesting nodes.
pub struct ForwardGraph {
    pub record: ComputationRecord,
    /// Residual stream nodes, index ℓ ∈ 0..=blocks.
    pub residual: Vec<NodeId>,
    pub logits: NodeId,
    pub loss: Option<NodeId>,
    /// Mean-pooled activation node at the requested layer, if any.
    pub pooled: Option<NodeId>,
}

/// Positions whose logits produce the response tokens.
pub fn pooling_rows(resp_start: usize, seq_len: usize) -> Result<Vec<usize>> {
    if resp_start == 0 {
        return Err(CoreError::InvalidConfig("prompt must be nonempty".into()));
    }
    if resp_start >= seq_len {
        return Err(CoreError::EmptyResponse { id: u64::MAX });
    }
    Ok(((resp_start - 1)..(seq_len - 1)).collect())
}

/// Next-token targets masked to response tokens.
pub fn response_targets(tokens: &[usize], resp_start: usize) -> Vec<Option<usize>> {
    let t = tokens.len();
    let mut targets = vec![None; t];
    for (pos, target) in targets.iter_mut().enumerate().take(t.saturating_sub(1)) {
        if pos + 1 >= resp_start {
            *target = Some(tokens[pos + 1]);
        }
    }
    targets
}

pub struct GraphSpec<'a> {
    pub tokens: &'a [usize],
    pub targets: Option<Vec<Option<usize>>>,
    /// (layer, pooled rows) for a MeanRows capture node.
    pub pooled_at: Option<(usize, Vec<usize>)>,
}

impl ModelState {
    /// Build and evaluate the forward graph for a token sequence.
    pub fn build_graph(&self, spec: GraphSpec<'_>) -> Result<ForwardGraph> {
        self.check_tokens(spec.tokens)?;
        if spec.tokens.is_empty() {
            return Err(CoreError::EmptyDataset {
                context: "empty token sequence".into(),
            });
        }
        let layout = self.descriptor.layout();
        let d = self.descriptor.embed_dim;
        let t = spec.tokens.len();
        let mut rec = ComputationRecord::new();
        let seg = |name: &str| layout.index_of(name).unwrap();

        let tok_table = rec.push(Op::Param {
            segment: seg("embed.tok"),
        });
        let pos_table = rec.push(Op::Param {
            segment: seg("embed.pos"),
        });
        let tok = rec.push(Op::Gather {
            table: tok_table,
            indices: spec.tokens.to_vec(),
        });
        let pos = rec.push(Op::Gather {
            table: pos_table,
            indices: (0..t).collect(),
        });
        let mut h = rec.push(Op::Add { lhs: tok, rhs: pos });
        let mut residual = vec![h];

        let linears = self.descriptor.linear_layers();
        let tag_of = |name: &str| -> u32 {
            linears.iter().position(|l| l.name == name).unwrap() as u32
        };

        for b in 0..self.descriptor.blocks {
            match self.descriptor.block_kind {
                BlockKind::Mlp => {
                    let w1 = rec.push(Op::Param {
                        segment: seg(&format!("block{b}.w1")),
                    });
                    let b1 = rec.push(Op::Param {
                        segment: seg(&format!("block{b}.b1")),
                    });
                    let lin1 = rec.push(Op::Linear {
                        input: h,
                        weight: w1,
                        bias: b1,
                        tag: Some(tag_of(&format!("block{b}.w1"))),
                    });
                    let act = rec.push(Op::Relu { input: lin1 });
                    let w2 = rec.push(Op::Param {
                        segment: seg(&format!("block{b}.w2")),
                    });
                    let b2 = rec.push(Op::Param {
                        segment: seg(&format!("block{b}.b2")),
                    });
                    let lin2 = rec.push(Op::Linear {
                        input: act,
                        weight: w2,
                        bias: b2,
                        tag: Some(tag_of(&format!("block{b}.w2"))),
                    });
                    h = rec.push(Op::Add { lhs: h, rhs: lin2 });
                }
                BlockKind::SingleHeadAttention => {
                    let proj = |name: &str, input: NodeId, rec: &mut ComputationRecord| {
                        let w = rec.push(Op::Param {
                            segment: seg(&format!("block{b}.{name}")),
                        });
                        let bias = rec.push(Op::Param {
                            segment: seg(&format!("block{b}.{}", name.replace('w', "b"))),
                        });
                        rec.push(Op::Linear {
                            input,
                            weight: w,
                            bias,
                            tag: Some(tag_of(&format!("block{b}.{name}"))),
                        })
                    };
                    let q = proj("wq", h, &mut rec);
                    let k = proj("wk", h, &mut rec);
                    let v = proj("wv", h, &mut rec);
                    let attn = rec.push(Op::CausalAttention {
                        query: q,
                        key: k,
                        value: v,
                        scale: 1.0 / (d as f64).sqrt(),
                    });
                    let o = proj("wo", attn, &mut rec);
                    h = rec.push(Op::Add { lhs: h, rhs: o });
                }
            }
            residual.push(h);
        }

        let wr = rec.push(Op::Param {
            segment: seg("readout.w"),
        });
        let br = rec.push(Op::Param {
            segment: seg("readout.b"),
        });
        let logits = rec.push(Op::Linear {
            input: h,
            weight: wr,
            bias: br,
            tag: Some(tag_of("readout.w")),
        });

        let loss = match spec.targets {
            Some(targets) => Some(rec.push(Op::MaskedCrossEntropy { logits, targets })),
            None => None,
        };
        let pooled = match spec.pooled_at {
            Some((layer, rows)) => {
                self.descriptor.check_layer(layer)?;
                Some(rec.push(Op::MeanRows {
                    input: residual[layer],
                    rows,
                }))
            }
            None => None,
        };

        rec.evaluate(&self.params, &[])?;
        Ok(ForwardGraph {
            record: rec,
            residual,
            logits,
            loss,
            pooled,
        })
    }

    /// Lean no-tape forward: residual stream values [T, d].
    fn hidden_states(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let d = self.descriptor.embed_dim;
        let t = tokens.len();
        let tok = self.params.segment_by_name("embed.tok").unwrap();
        let pos = self.params.segment_by_name("embed.pos").unwrap();
        let mut h = vec![0.0; t * d];
        for (r, &token) in tokens.iter().enumerate() {
            for j in 0..d {
                h[r * d + j] = tok.row(token)[j] + pos.row(r)[j];
            }
        }
        for b in 0..self.descriptor.blocks {
            match self.descriptor.block_kind {
                BlockKind::Mlp => {
                    let w1 = self.params.segment_by_name(&format!("block{b}.w1")).unwrap();
                    let b1 = self.params.segment_by_name(&format!("block{b}.b1")).unwrap();
                    let w2 = self.params.segment_by_name(&format!("block{b}.w2")).unwrap();
                    let b2 = self.params.segment_by_name(&format!("block{b}.b2")).unwrap();
                    let hdim = self.descriptor.hidden_dim;
                    let lin1 = tensor::linear_forward(&h, w1.data(), b1.data(), t, d, hdim);
                    let act = tensor::relu(&lin1);
                    let lin2 = tensor::linear_forward(&act, w2.data(), b2.data(), t, hdim, d);
                    for (hv, ov) in h.iter_mut().zip(&lin2) {
                        *hv += ov;
                    }
                }
                BlockKind::SingleHeadAttention => {
                    let get = |n: &str| self.params.segment_by_name(&format!("block{b}.{n}")).unwrap();
                    let q = tensor::linear_forward(&h, get("wq").data(), get("bq").data(), t, d, d);
                    let k = tensor::linear_forward(&h, get("wk").data(), get("bk").data(), t, d, d);
                    let v = tensor::linear_forward(&h, get("wv").data(), get("bv").data(), t, d, d);
                    let (ctx, _) = tensor::causal_attention(&q, &k, &v, t, d, 1.0 / (d as f64).sqrt());
                    let o = tensor::linear_forward(&ctx, get("wo").data(), get("bo").data(), t, d, d);
                    for (hv, ov) in h.iter_mut().zip(&o) {
                        *hv += ov;
                    }
                }
            }
        }
        Ok(h)
    }

    /// Logits of the final position only (greedy-decoding step).
    fn last_logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let d = self.descriptor.embed_dim;
        let t = tokens.len();
        let h = self.hidden_states(tokens)?;
        let wr = self.params.segment_by_name("readout.w").unwrap();
        let br = self.params.segment_by_name("readout.b").unwrap();
        let last = &h[(t - 1) * d..t * d];
        let mut logits = br.data().to_vec();
        for (tokrow, logit) in logits.iter_mut().enumerate() {
            *logit += tensor::dot(wr.row(tokrow), last);
        }
        Ok(logits)
    }
}

// ── Activation capture ──────────────────────────────────────────────

/// Per-position activations at one layer and their response-pooled mean.
#[derive(Debug, Clone)]
pub struct ActivationCapture {
    pub layer: usize,
    pub per_position: Tensor,
    pub pooled: Vec<f64>,
    pub pooled_rows: Vec<usize>,
}

/// Forward pass returning logits and the layer-ℓ activation capture.
pub fn forward_with_activations(
    model: &ModelState,
    tokens: &[usize],
    resp_start: usize,
    layer: usize,
) -> Result<(Tensor, ActivationCapture)> {
    model.descriptor.check_layer(layer)?;
    let rows = pooling_rows(resp_start, tokens.len())?;
    let graph = model.build_graph(GraphSpec {
        tokens,
        targets: None,
        pooled_at: Some((layer, rows.clone())),
    })?;
    let logits = graph.record.value(graph.logits).clone();
    let per_position = graph.record.value(graph.residual[layer]).clone();
    let pooled = graph.record.value(graph.pooled.unwrap()).data().to_vec();
    Ok((
        logits,
        ActivationCapture {
            layer,
            per_position,
            pooled,
            pooled_rows: rows,
        },
    ))
}

// ── Loss and gradients ──────────────────────────────────────────────

fn example_graph(model: &ModelState, example: &LabeledExample) -> Result<ForwardGraph> {
    if example.response_tokens.is_empty() {
        return Err(CoreError::EmptyResponse { id: example.id });
    }
    let tokens = example.tokens();
    let targets = response_targets(&tokens, example.resp_start());
    model.build_graph(GraphSpec {
        tokens: &tokens,
        targets: Some(targets),
        pooled_at: None,
    })
}

/// Mean cross-entropy over response tokens.
pub fn sequence_loss(model: &ModelState, example: &LabeledExample) -> Result<f64> {
    let graph = example_graph(model, example)?;
    Ok(graph.record.value(graph.loss.unwrap()).item())
}

/// Gradient of [`sequence_loss`] with respect to all parameters.
pub fn param_gradient(model: &ModelState, example: &LabeledExample) -> Result<ParameterVector> {
    let graph = example_graph(model, example)?;
    let grads = graph.record.backward(&Tensor::scalar(1.0))?;
    Ok(grads.to_param_vector(&graph.record, model.params.layout()))
}

/// Loss graph plus its backward pass; used by curvature fitting to read
/// per-layer activations and output gradients.
pub fn loss_backward_with_targets(
    model: &ModelState,
    tokens: &[usize],
    targets: Vec<Option<usize>>,
) -> Result<(ForwardGraph, Gradients)> {
    let graph = model.build_graph(GraphSpec {
        tokens,
        targets: Some(targets),
        pooled_at: None,
    })?;
    let grads = graph.record.backward(&Tensor::scalar(1.0))?;
    Ok((graph, grads))
}

/// Pooled gradient of the loss with respect to the layer-ℓ activations.
pub fn activation_gradient(
    model: &ModelState,
    example: &LabeledExample,
    layer: usize,
) -> Result<Vec<f64>> {
    model.descriptor.check_layer(layer)?;
    let graph = example_graph(model, example)?;
    let grads = graph.record.backward(&Tensor::scalar(1.0))?;
    let tokens_len = example.tokens().len();
    let rows = pooling_rows(example.resp_start(), tokens_len)?;
    let d = model.descriptor.layer_dim(layer);
    let mut pooled = vec![0.0; d];
    if let Some(g) = grads.node(graph.residual[layer]) {
        for &r in &rows {
            for j in 0..d {
                pooled[j] += g.data()[r * d + j];
            }
        }
    }
    let inv = 1.0 / rows.len() as f64;
    for v in pooled.iter_mut() {
        *v *= inv;
    }
    Ok(pooled)
}

/// Explicit Jacobian of the pooled layer-ℓ activation: row i is the gradient
/// of pooled coordinate i with respect to all parameters. Reference path,
/// guarded by [`JACOBIAN_GUARD`].
pub fn layer_jacobian(
    model: &ModelState,
    tokens: &[usize],
    resp_start: usize,
    layer: usize,
) -> Result<Vec<Vec<f64>>> {
    let p = model.param_dim();
    if p > JACOBIAN_GUARD {
        return Err(CoreError::GuardExceeded {
            context: "layer_jacobian".into(),
            dim: p,
            guard: JACOBIAN_GUARD,
        });
    }
    model.descriptor.check_layer(layer)?;
    let rows = pooling_rows(resp_start, tokens.len())?;
    let graph = model.build_graph(GraphSpec {
        tokens,
        targets: None,
        pooled_at: Some((layer, rows)),
    })?;
    let pooled = graph.pooled.unwrap();
    let d = model.descriptor.layer_dim(layer);
    let mut jac = Vec::with_capacity(d);
    for i in 0..d {
        let mut seed = Tensor::zeros(vec![1, d]);
        seed.data_mut()[i] = 1.0;
        let grads = graph.record.backward_from(pooled, &seed)?;
        jac.push(grads.to_param_vector(&graph.record, model.params.layout()).flatten());
    }
    Ok(jac)
}

// ── Generation ──────────────────────────────────────────────────────

/// Greedy argmax continuation; stops after the end token or `max_len`
/// tokens. Argmax ties break to the lowest token id.
pub fn generate(model: &ModelState, prompt_tokens: &[usize], max_len: usize) -> Result<Vec<usize>> {
    assert!(max_len >= 1, "max_len must be at least 1");
    let mut tokens = prompt_tokens.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_len {
        if tokens.len() >= model.descriptor.max_seq {
            break;
        }
        let logits = model.last_logits(&tokens)?;
        let next = tensor::argmax(&logits);
        tokens.push(next);
        out.push(next);
        if next == model.descriptor.eos_token {
            break;
        }
    }
    Ok(out)
}

// ── Training ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            epochs: 1,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Mini-batch training; deterministic given the seed. Returns the trained
/// model and the per-step mean batch loss curve.
pub fn train(
    model: &ModelState,
    dataset: &[LabeledExample],
    config: &TrainConfig,
) -> Result<(ModelState, Vec<f64>)> {
    if config.epochs > 0 && dataset.is_empty() {
        return Err(CoreError::EmptyDataset {
            context: "train".into(),
        });
    }
    assert!(config.learning_rate > 0.0, "learning rate must be positive");
    assert!(config.batch_size > 0, "batch size must be positive");
    let mut current = model.clone();
    let mut curve = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Adam moments
    let mut m = current.params.zeros_like();
    let mut v = current.params.zeros_like();
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut step = 0usize;

    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        // Fisher-Yates over the seeded stream
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            let mut grad = current.params.zeros_like();
            let mut batch_loss = 0.0;
            for &ix in chunk {
                let ex = &dataset[ix];
                let graph = example_graph(&current, ex)?;
                batch_loss += graph.record.value(graph.loss.unwrap()).item();
                let grads = graph.record.backward(&Tensor::scalar(1.0))?;
                grad.add_scaled(
                    &grads.to_param_vector(&graph.record, current.params.layout()),
                    1.0,
                );
            }
            let inv = 1.0 / chunk.len() as f64;
            grad.scale(inv);
            batch_loss *= inv;
            if !batch_loss.is_finite() {
                return Err(CoreError::TrainDiverged {
                    step,
                    loss: batch_loss,
                });
            }
            curve.push(batch_loss);
            step += 1;
            match config.optimizer {
                Optimizer::Sgd => {
                    current.params.add_scaled(&grad, -config.learning_rate);
                }
                Optimizer::Adam => {
                    let t = step as f64;
                    let bc1 = 1.0 - beta1.powf(t);
                    let bc2 = 1.0 - beta2.powf(t);
                    let segs = current.params.layout().segments.len();
                    for s in 0..segs {
                        let gd = grad.segment(s).data().to_vec();
                        let ms = m.segment_mut(s).data_mut();
                        let vs = v.segment_mut(s).data_mut();
                        for ((g, mc), vc) in gd.iter().zip(ms.iter_mut()).zip(vs.iter_mut()) {
                            *mc = beta1 * *mc + (1.0 - beta1) * g;
                            *vc = beta2 * *vc + (1.0 - beta2) * g * g;
                        }
                        let ps = current.params.segment_mut(s).data_mut();
                        let ms = m.segment(s).data();
                        let vs = v.segment(s).data();
                        for ((p, mc), vc) in ps.iter_mut().zip(ms).zip(vs) {
                            let update = (mc / bc1) / ((vc / bc2).sqrt() + eps);
                            *p -= config.learning_rate * update;
                        }
                    }
                }
            }
        }
    }
    Ok((current, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label, Split};
    use approx::assert_relative_eq;
    use rand::Rng;

    pub(crate) fn tiny_descriptor(kind: BlockKind) -> ModelDescriptor {
        ModelDescriptor {
            vocab: 12,
            embed_dim: 6,
            hidden_dim: 10,
            blocks: 2,
            block_kind: kind,
            max_seq: 16,
            eos_token: 1,
        }
    }

    fn example(prompt: Vec<usize>, response: Vec<usize>) -> LabeledExample {
        LabeledExample {
            id: 0,
            prompt_tokens: prompt,
            response_tokens: response,
            label: Label::Benign,
            split: Split::Train,
        }
    }

    #[test]
    fn zero_model_gives_uniform_probabilities() {
        let model = ModelState::zeros(tiny_descriptor(BlockKind::Mlp));
        let (logits, _) = forward_with_activations(&model, &[0, 3, 5], 2, 1).unwrap();
        let v = model.descriptor.vocab;
        for r in 0..logits.rows() {
            let p = tensor::softmax_rows(logits.row(r), 1, v);
            for &pv in &p {
                assert_relative_eq!(pv, 1.0 / v as f64, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn activation_shapes_follow_sequence_length() {
        for kind in [BlockKind::Mlp, BlockKind::SingleHeadAttention] {
            let model = ModelState::init(tiny_descriptor(kind), 5);
            let tokens = [0, 4, 7, 2, 9];
            let (logits, capture) = forward_with_activations(&model, &tokens, 3, 2).unwrap();
            assert_eq!(logits.shape(), &[5, 12]);
            assert_eq!(capture.per_position.shape(), &[5, 6]);
            assert_eq!(capture.pooled.len(), 6);
            assert_eq!(capture.pooled_rows, vec![2, 3]);
        }
    }

    #[test]
    fn pooled_activation_is_mean_of_rows() {
        let model = ModelState::init(tiny_descriptor(BlockKind::SingleHeadAttention), 9);
        let tokens = [0, 2, 8, 3, 6, 1];
        let (_, capture) = forward_with_activations(&model, &tokens, 2, 1).unwrap();
        let d = 6;
        let mut mean = vec![0.0; d];
        for &r in &capture.pooled_rows {
            for j in 0..d {
                mean[j] += capture.per_position.row(r)[j];
            }
        }
        for v in mean.iter_mut() {
            *v /= capture.pooled_rows.len() as f64;
        }
        for j in 0..d {
            assert_relative_eq!(capture.pooled[j], mean[j], max_relative = 1e-15);
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_vocab() {
        let model = ModelState::zeros(tiny_descriptor(BlockKind::Mlp));
        let ex = example(vec![0, 3], vec![5, 7, 2]);
        let loss = sequence_loss(&model, &ex).unwrap();
        assert_relative_eq!(loss, (12.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn loss_only_counts_response_positions() {
        let model = ModelState::init(tiny_descriptor(BlockKind::Mlp), 3);
        let ex = example(vec![0, 3, 4], vec![5, 7]);
        let loss = sequence_loss(&model, &ex).unwrap();
        // recompute by hand from the logits at the predicting positions
        let tokens = ex.tokens();
        let graph = model
            .build_graph(GraphSpec {
                tokens: &tokens,
                targets: None,
                pooled_at: None,
            })
            .unwrap();
        let logits = graph.record.value(graph.logits);
        let v = model.descriptor.vocab;
        let mut want = 0.0;
        for (pos, target) in [(2usize, 5usize), (3, 7)] {
            let lse = tensor::logsumexp_rows(logits.row(pos), 1, v)[0];
            want += lse - logits.row(pos)[target];
        }
        want /= 2.0;
        assert_relative_eq!(loss, want, max_relative = 1e-12);
    }

    #[test]
    fn empty_response_is_rejected() {
        let model = ModelState::init(tiny_descriptor(BlockKind::Mlp), 3);
        let ex = example(vec![0, 3], vec![]);
        assert!(matches!(
            sequence_loss(&model, &ex),
            Err(CoreError::EmptyResponse { .. })
        ));
    }

    #[test]
    fn token_out_of_range_is_rejected() {
        let model = ModelState::init(tiny_descriptor(BlockKind::Mlp), 3);
        assert!(matches!(
            forward_with_activations(&model, &[0, 40], 1, 0),
            Err(CoreError::TokenOutOfRange { token: 40, .. })
        ));
    }

    #[test]
    fn param_gradient_matches_finite_differences_both_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for kind in [BlockKind::Mlp, BlockKind::SingleHeadAttention] {
            let model = ModelState::init(tiny_descriptor(kind), 17);
            let ex = example(vec![0, 4, 9], vec![3, 7, 5]);
            let grad = param_gradient(&model, &ex).unwrap();
            let p = model.param_dim();
            let coords: Vec<usize> = (0..20).map(|_| rng.gen_range(0..p)).collect();
            let f = |params: &ParameterVector| {
                let probe = ModelState {
                    descriptor: model.descriptor.clone(),
                    params: params.clone(),
                    seed: 0,
                };
                sequence_loss(&probe, &ex).unwrap()
            };
            let fd = crate::params::finite_diff_grad_coords(f, &model.params, 1e-5, &coords).unwrap();
            for (&c, &numeric) in coords.iter().zip(&fd) {
                assert_relative_eq!(grad.get_flat(c), numeric, max_relative = 1e-5, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn gradient_is_pure_across_duplicate_examples() {
        let model = ModelState::init(tiny_descriptor(BlockKind::Mlp), 8);
        let ex = example(vec![0, 2], vec![6, 3]);
        let dup = LabeledExample { id: 99, ..ex.clone() };
        let g1 = param_gradient(&model, &ex).unwrap();
        let g2 = param_gradient(&model, &dup).unwrap();
        assert_eq!(g1.flatten(), g2.flatten());
    }

    #[test]
    fn activation_gradient_zero_for_zero_readout() {
        let mut model = ModelState::init(tiny_descriptor(BlockKind::Mlp), 8);
        let ro = model.params.layout().index_of("readout.w").unwrap();
        for v in model.params.segment_mut(ro).data_mut() {
            *v = 0.0;
        }
        let rb = model.params.layout().index_of("readout.b").unwrap();
        for v in model.params.segment_mut(rb).data_mut() {
            *v = 0.0;
        }
        let ex = example(vec![0, 2], vec![6, 3]);
        let g = activation_gradient(&model, &ex, 2).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn activation_gradient_is_pooled_mean_of_position_gradients() {
        let model = ModelState::init(tiny_descriptor(BlockKind::SingleHeadAttention), 31);
        let ex = example(vec![0, 5, 2], vec![7, 4]);
        let layer = 1;
        let g_pooled = activation_gradient(&model, &ex, layer).unwrap();
        let tokens = ex.tokens();
        let targets = response_targets(&tokens, ex.resp_start());
        let graph = model
            .build_graph(GraphSpec {
                tokens: &tokens,
                targets: Some(targets),
                pooled_at: None,
            })
            .unwrap();
        let grads = graph.record.backward(&Tensor::scalar(1.0)).unwrap();
        let full = grads.node(graph.residual[layer]).unwrap();
        let rows = pooling_rows(ex.resp_start(), tokens.len()).unwrap();
        let d = model.descriptor.embed_dim;
        for j in 0..d {
            let mean: f64 =
                rows.iter().map(|&r| full.data()[r * d + j]).sum::<f64>() / rows.len() as f64;
            assert_relative_eq!(g_pooled[j], mean, max_relative = 1e-14, epsilon = 1e-16);
        }
        assert_eq!(g_pooled.len(), d);
    }

    #[test]
    fn activation_gradient_matches_finite_difference_on_activations() {
        // perturb the layer-ℓ activations directly: rebuild the graph with an
        // input node in place of the residual and finite-difference it
        let model = ModelState::init(tiny_descriptor(BlockKind::Mlp), 37);
        let ex = example(vec![0, 5], vec![7, 4, 9]);
        let layer = 1;
        let g_pooled = activation_gradient(&model, &ex, layer).unwrap();

        let tokens = ex.tokens();
        let targets = response_targets(&tokens, ex.resp_start());
        let graph = model
            .build_graph(GraphSpec {
                tokens: &tokens,
                targets: Some(targets.clone()),
                pooled_at: None,
            })
            .unwrap();
        let base_act = graph.record.value(graph.residual[layer]).clone();
        let rows = pooling_rows(ex.resp_start(), tokens.len()).unwrap();
        let d = model.descriptor.embed_dim;

        // downstream-only record: activations enter as an input
        let loss_from_activation = |act: &Tensor| -> f64 {
            let layout = model.descriptor.layout();
            let seg = |name: &str| layout.index_of(name).unwrap();
            let mut rec = ComputationRecord::new();
            let x = rec.push(Op::Input { slot: 0 });
            let mut h = x;
            for b in layer..model.descriptor.blocks {
                let w1 = rec.push(Op::Param { segment: seg(&format!("block{b}.w1")) });
                let b1 = rec.push(Op::Param { segment: seg(&format!("block{b}.b1")) });
                let lin1 = rec.push(Op::Linear { input: h, weight: w1, bias: b1, tag: None });
                let act1 = rec.push(Op::Relu { input: lin1 });
                let w2 = rec.push(Op::Param { segment: seg(&format!("block{b}.w2")) });
                let b2 = rec.push(Op::Param { segment: seg(&format!("block{b}.b2")) });
                let lin2 = rec.push(Op::Linear { input: act1, weight: w2, bias: b2, tag: None });
                h = rec.push(Op::Add { lhs: h, rhs: lin2 });
            }
            let wr = rec.push(Op::Param { segment: seg("readout.w") });
            let br = rec.push(Op::Param { segment: seg("readout.b") });
            let logits = rec.push(Op::Linear { input: h, weight: wr, bias: br, tag: None });
            let loss = rec.push(Op::MaskedCrossEntropy { logits, targets: targets.clone() });
            rec.evaluate(&model.params, &[act.clone()]).unwrap();
            rec.value(loss).item()
        };

        let h = 1e-6;
        for j in 0..d {
            // pooled coordinate j: bump every pooled row equally by h/|rows|·… —
            // equivalently bump each pooled row by h and average the slopes
            let mut slope = 0.0;
            for &r in &rows {
                let mut plus = base_act.clone();
                plus.data_mut()[r * d + j] += h;
                let mut minus = base_act.clone();
                minus.data_mut()[r * d + j] -= h;
                slope += (loss_from_activation(&plus) - loss_from_activation(&minus)) / (2.0 * h);
            }
            slope /= rows.len() as f64;
            assert_relative_eq!(g_pooled[j], slope, max_relative = 1e-5, epsilon = 1e-10);
        }
    }

    #[test]
    fn jacobian_transpose_matches_seeded_backward() {
        let model = ModelState::init(tiny_descriptor(BlockKind::Mlp), 11);
        let tokens = [0, 4, 9, 3];
        let (resp_start, layer) = (2, 1);
        let jac = layer_jacobian(&model, &tokens, resp_start, layer).unwrap();
        let d = model.descriptor.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vdir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Jᵀv assembled row by row
        let p = model.param_dim();
        let mut jt_v = vec![0.0; p];
        for (i, row) in jac.iter().enumerate() {
            for (k, val) in row.iter().enumerate() {
                jt_v[k] += vdir[i] * val;
            }
        }
        // backward pass seeded with v
        let rows = pooling_rows(resp_start, tokens.len()).unwrap();
        let graph = model
            .build_graph(GraphSpec {
                tokens: &tokens,
                targets: None,
                pooled_at: Some((layer, rows)),
            })
            .unwrap();
        let seed = Tensor::new(vec![1, d], vdir).unwrap();
        let grads = graph.record.backward_from(graph.pooled.unwrap(), &seed).unwrap();
        let direct = grads
            .to_param_vector(&graph.record, model.params.layout())
            .flatten();
        for k in 0..p {
            assert_relative_eq!(jt_v[k], direct[k], max_relative = 1e-10, epsilon = 1e-14);
        }
    }

    #[test]
    fn jacobian_rows_match_finite_differences() {
        let model = ModelState::init(tiny_descriptor(BlockKind::Mlp), 13);
        let tokens = [0, 7, 5];
        let (resp_start, layer) = (1, 2);
        let jac = layer_jacobian(&model, &tokens, resp_start, layer).unwrap();
        let rows = pooling_rows(resp_start, tokens.len()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = model.param_dim();
        for _ in 0..5 {
            let c = rng.gen_range(0..p);
            let i = rng.gen_range(0..model.descriptor.embed_dim);
            let f = |params: &ParameterVector| {
                let probe = ModelState {
                    descriptor: model.descriptor.clone(),
                    params: params.clone(),
                    seed: 0,
                };
                let graph = probe
                    .build_graph(GraphSpec {
                        tokens: &tokens,
                        targets: None,
                        pooled_at: Some((layer, rows.clone())),
                    })
                    .unwrap();
                graph.record.value(graph.pooled.unwrap()).data()[i]
            };
            let fd = crate::params::finite_diff_grad_coords(f, &model.params, 1e-5, &[c]).unwrap()[0];
            assert_relative_eq!(jac[i][c], fd, max_relative = 1e-4, epsilon = 1e-9);
        }
    }

    #[test]
    fn jacobian_guard_rejects_large_models() {
        let descriptor = ModelDescriptor {
            vocab: 300,
            embed_dim: 100,
            hidden_dim: 200,
            blocks: 2,
            block_kind: BlockKind::Mlp,
            max_seq: 32,
            eos_token: 1,
        };
        let model = ModelState::zeros(descriptor);
        assert!(model.param_dim() > JACOBIAN_GUARD);
        assert!(matches!(
            layer_jacobian(&model, &[0, 1, 2], 1, 0),
            Err(CoreError::GuardExceeded { .. })
        ));
    }

    #[test]
    fn zero_epochs_leaves_params_unchanged() {
        let model = ModelState::init(tiny_descriptor(BlockKind::Mlp), 4);
        let data = vec![example(vec![0, 2], vec![3, 4])];
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (trained, curve) = train(&model, &data, &config).unwrap();
        assert_eq!(trained.params, model.params);
        assert!(curve.is_empty());
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let model = ModelState::init(tiny_descriptor(BlockKind::SingleHeadAttention), 4);
        let data: Vec<LabeledExample> = (0..10)
            .map(|i| LabeledExample {
                id: i,
                prompt_tokens: vec![0, (i as usize % 9) + 2],
                response_tokens: vec![(i as usize % 5) + 4, 3],
                label: Label::Benign,
                split: Split::Train,
            })
            .collect();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 12,
            ..TrainConfig::default()
        };
        let (a, curve_a) = train(&model, &data, &config).unwrap();
        let (b, curve_b) = train(&model, &data, &config).unwrap();
        assert_eq!(a.params, b.params);
        let bits = |c: &[f64]| c.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&curve_a), bits(&curve_b));
    }

    #[test]
    fn training_reduces_loss_on_toy_task() {
        let model = ModelState::init(tiny_descriptor(BlockKind::Mlp), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let data: Vec<LabeledExample> = (0..200)
            .map(|i| {
                let tag = if i % 2 == 0 { 2 } else { 3 };
                let resp = if i % 2 == 0 { vec![4, 5] } else { vec![6, 7] };
                LabeledExample {
                    id: i,
                    prompt_tokens: vec![0, rng.gen_range(8..12), tag],
                    response_tokens: resp,
                    label: Label::Benign,
                    split: Split::Train,
                }
            })
            .collect();
        let initial: f64 = data
            .iter()
            .map(|ex| sequence_loss(&model, ex).unwrap())
            .sum::<f64>()
            / data.len() as f64;
        let config = TrainConfig {
            epochs: 2,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        let (trained, _) = train(&model, &data, &config).unwrap();
        let final_loss: f64 = data
            .iter()
            .map(|ex| sequence_loss(&trained, ex).unwrap())
            .sum::<f64>()
            / data.len() as f64;
        assert!(
            final_loss < 0.5 * initial,
            "final {final_loss} vs initial {initial}"
        );
    }

    #[test]
    fn overfit_model_memorizes_and_generates_its_example() {
        let model = ModelState::init(tiny_descriptor(BlockKind::Mlp), 4);
        let ex = example(vec![0, 9], vec![4, 7, 5]);
        let config = TrainConfig {
            epochs: 400,
            learning_rate: 1e-2,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let (trained, _) = train(&model, &[ex.clone()], &config).unwrap();
        let loss = sequence_loss(&trained, &ex).unwrap();
        assert!(loss < 0.01, "memorization loss {loss}");
        let gen = generate(&trained, &ex.prompt_tokens, ex.response_tokens.len()).unwrap();
        assert_eq!(gen, ex.response_tokens);
    }

    #[test]
    fn generate_single_step_is_first_logit_argmax() {
        let model = ModelState::init(tiny_descriptor(BlockKind::SingleHeadAttention), 23);
        let prompt = [0, 6, 3];
        let gen = generate(&model, &prompt, 1).unwrap();
        let (logits, _) = forward_with_activations(&model, &prompt, 1, 0).unwrap();
        let last = logits.row(2);
        assert_eq!(gen, vec![tensor::argmax(last)]);
    }

    #[test]
    fn generate_tie_breaks_to_lowest_token() {
        // zero model: all logits equal, argmax must be token 0
        let model = ModelState::zeros(tiny_descriptor(BlockKind::Mlp));
        let gen = generate(&model, &[2, 3], 3).unwrap();
        assert_eq!(gen, vec![0, 0, 0]);
    }

    #[test]
    fn generate_stops_at_eos() {
        // craft a readout bias that always emits the eos token
        let mut model = ModelState::zeros(tiny_descriptor(BlockKind::Mlp));
        let rb = model.params.layout().index_of("readout.b").unwrap();
        model.params.segment_mut(rb).data_mut()[1] = 5.0;
        let gen = generate(&model, &[0, 2], 10).unwrap();
        assert_eq!(gen, vec![1]);
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let model = ModelState::init(tiny_descriptor(BlockKind::SingleHeadAttention), 77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let loaded = ModelState::load(&path).unwrap();
        assert_eq!(loaded.descriptor, model.descriptor);
        assert_eq!(loaded.seed, model.seed);
        assert_eq!(loaded.params, model.params);
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let model = ModelState::init(tiny_descriptor(BlockKind::Mlp), 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            ModelState::load(&path),
            Err(CoreError::CorruptPayload { .. })
        ));
    }

    #[test]
    fn chain_rule_cut_matches_direct_backward_below_layer() {
        // ∇_θL restricted to segments below ℓ equals the backward pass
        // re-seeded at the layer-ℓ residual with dL/da (Jᵀ·∇_{a_ℓ}L).
        let model = ModelState::init(tiny_descriptor(BlockKind::Mlp), 19);
        let ex = example(vec![0, 4, 9], vec![3, 7]);
        let layer = 1;
        let tokens = ex.tokens();
        let targets = response_targets(&tokens, ex.resp_start());
        let graph = model
            .build_graph(GraphSpec {
                tokens: &tokens,
                targets: Some(targets),
                pooled_at: None,
            })
            .unwrap();
        let grads = graph.record.backward(&Tensor::scalar(1.0)).unwrap();
        let direct = grads.to_param_vector(&graph.record, model.params.layout());
        let da = grads.node(graph.residual[layer]).unwrap().clone();
        let via_cut = graph
            .record
            .backward_from(graph.residual[layer], &da)
            .unwrap()
            .to_param_vector(&graph.record, model.params.layout());
        let layout = model.params.layout().clone();
        for (idx, spec) in layout.segments.iter().enumerate() {
            let below = spec.name.starts_with("embed.")
                || (0..layer).any(|b| spec.name.starts_with(&format!("block{b}.")));
            if !below {
                continue;
            }
            let a = direct.segment(idx);
            let b = via_cut.segment(idx);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_relative_eq!(x, y, max_relative = 1e-8, epsilon = 1e-14);
            }
        }
    }
}
