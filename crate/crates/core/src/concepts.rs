//! Concept vectors: difference-of-means probes over pooled layer activations
//! and the concept-activation functional ⟨v, ā(x)⟩.

use crate::data::LabeledExample;
use crate::error::{CoreError, Result};
use crate::model::{forward_with_activations, ModelState};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Probe,
    Manual,
}

/// Unit direction in the layer-ℓ activation space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptVector {
    pub layer: usize,
    pub direction: Vec<f64>,
    pub provenance: Provenance,
}

impl ConceptVector {
    /// Manually supplied direction; normalized to unit length.
    pub fn manual(layer: usize, direction: Vec<f64>) -> Result<Self> {
        normalize(layer, direction, Provenance::Manual)
    }

    pub fn dim(&self) -> usize {
        self.direction.len()
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if self.layer != layer {
            return Err(CoreError::LayerMismatch {
                concept: self.layer,
                requested: layer,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}

fn normalize(layer: usize, mut direction: Vec<f64>, provenance: Provenance) -> Result<ConceptVector> {
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(CoreError::DegenerateProbe);
    }
    for v in direction.iter_mut() {
        *v /= norm;
    }
    Ok(ConceptVector {
        layer,
        direction,
        provenance,
    })
}

/// Pooled layer-ℓ activation of one example.
pub fn pooled_activation(model: &ModelState, example: &LabeledExample, layer: usize) -> Result<Vec<f64>> {
    if example.response_tokens.is_empty() {
        return Err(CoreError::EmptyResponse { id: example.id });
    }
    let tokens = example.tokens();
    let (_, capture) = forward_with_activations(model, &tokens, example.resp_start(), layer)?;
    Ok(capture.pooled)
}

/// Difference-of-means probe: v = normalize(mean ā over positives − mean ā
/// over negatives).
pub fn fit_probe(
    model: &ModelState,
    positives: &[LabeledExample],
    negatives: &[LabeledExample],
    layer: usize,
) -> Result<ConceptVector> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(CoreError::EmptyDataset {
            context: "fit_probe sets".into(),
        });
    }
    model.descriptor.check_layer(layer)?;
    let d = model.descriptor.layer_dim(layer);
    let mean_of = |set: &[LabeledExample]| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; d];
        for ex in set {
            let a = pooled_activation(model, ex, layer)?;
            for (s, v) in acc.iter_mut().zip(&a) {
                *s += v;
            }
        }
        let inv = 1.0 / set.len() as f64;
        Ok(acc.into_iter().map(|v| v * inv).collect())
    };
    let pos = mean_of(positives)?;
    let neg = mean_of(negatives)?;
    let diff: Vec<f64> = pos.iter().zip(&neg).map(|(p, n)| p - n).collect();
    normalize(layer, diff, Provenance::Probe)
}

/// Concept activation f_v(x) = ⟨v, ā(x)⟩ at the concept's layer.
pub fn concept_activation(model: &ModelState, example: &LabeledExample, v: &ConceptVector) -> Result<f64> {
    model.descriptor.check_layer(v.layer)?;
    let a = pooled_activation(model, example, v.layer)?;
    if a.len() != v.dim() {
        return Err(CoreError::ShapeMismatch {
            context: "concept_activation".into(),
            expected: vec![v.dim()],
            got: vec![a.len()],
        });
    }
    Ok(crate::tensor::dot(&v.direction, &a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label, Split};
    use crate::model::{BlockKind, ModelDescriptor};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> ModelState {
        ModelState::init(
            ModelDescriptor {
                vocab: 16,
                embed_dim: 8,
                hidden_dim: 12,
                blocks: 2,
                block_kind: BlockKind::Mlp,
                max_seq: 16,
                eos_token: 1,
            },
            42,
        )
    }

    fn ex(id: u64, prompt: Vec<usize>, response: Vec<usize>) -> LabeledExample {
        LabeledExample {
            id,
            prompt_tokens: prompt,
            response_tokens: response,
            label: Label::Benign,
            split: Split::Eval,
        }
    }

    #[test]
    fn identical_sets_give_degenerate_probe() {
        let m = model();
        let set = vec![ex(0, vec![0, 3], vec![5, 7])];
        assert!(matches!(
            fit_probe(&m, &set, &set, 1),
            Err(CoreError::DegenerateProbe)
        ));
    }

    #[test]
    fn probe_is_unit_norm_and_layer_checked() {
        let m = model();
        let pos = vec![ex(0, vec![0, 2], vec![4, 5]), ex(1, vec![0, 3], vec![4, 6])];
        let neg = vec![ex(2, vec![0, 2], vec![9, 10]), ex(3, vec![0, 3], vec![9, 11])];
        let v = fit_probe(&m, &pos, &neg, 1).unwrap();
        assert_relative_eq!(
            v.direction.iter().map(|x| x * x).sum::<f64>().sqrt(),
            1.0,
            epsilon = 1e-12
        );
        assert!(v.check_layer(1).is_ok());
        assert!(matches!(
            v.check_layer(2),
            Err(CoreError::LayerMismatch { .. })
        ));
    }

    #[test]
    fn probe_recovers_planted_shift_on_synthetic_clusters() {
        // two gaussian clusters with a planted mean shift: the closed-form
        // difference of means must align with the shift direction
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shift: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let shift_norm = shift.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut pos_mean = vec![0.0; d];
        let mut neg_mean = vec![0.0; d];
        let n = 500;
        for _ in 0..n {
            for j in 0..d {
                let mut noise = || {
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                };
                let (n1, n2) = (noise(), noise());
                pos_mean[j] += shift[j] + 0.5 * n1;
                neg_mean[j] += 0.5 * n2;
            }
        }
        let diff: Vec<f64> = pos_mean
            .iter()
            .zip(&neg_mean)
            .map(|(p, q)| (p - q) / n as f64)
            .collect();
        let v = ConceptVector::manual(0, diff).unwrap();
        let cos: f64 = v
            .direction
            .iter()
            .zip(&shift)
            .map(|(a, b)| a * b / shift_norm)
            .sum();
        assert!(cos > 0.99, "cosine {cos}");
    }

    #[test]
    fn scaling_activations_leaves_probe_direction_unchanged() {
        // normalization invariance checked on the raw closed form
        let diff = vec![3.0, -1.0, 2.0];
        let a = ConceptVector::manual(0, diff.clone()).unwrap();
        let scaled: Vec<f64> = diff.iter().map(|v| v * 7.5).collect();
        let b = ConceptVector::manual(0, scaled).unwrap();
        for (x, y) in a.direction.iter().zip(&b.direction) {
            assert_relative_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn concept_activation_picks_coordinates_and_is_linear() {
        let m = model();
        let sample = ex(0, vec![0, 2, 7], vec![4, 5, 6]);
        let a = pooled_activation(&m, &sample, 1).unwrap();
        let d = a.len();
        // basis vector picks out the coordinate (up to unit normalization)
        let mut e2 = vec![0.0; d];
        e2[2] = 1.0;
        let v = ConceptVector::manual(1, e2).unwrap();
        assert_relative_eq!(
            concept_activation(&m, &sample, &v).unwrap(),
            a[2],
            max_relative = 1e-12
        );
        // orthogonal direction gives zero
        let mut orth = vec![0.0; d];
        orth[0] = a[1];
        orth[1] = -a[0];
        if orth.iter().any(|&x| x != 0.0) {
            let vo = ConceptVector::manual(1, orth).unwrap();
            assert_relative_eq!(
                concept_activation(&m, &sample, &vo).unwrap(),
                0.0,
                epsilon = 1e-12
            );
        }
        // linearity in v (checked against a direct recomputation)
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v1: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v2: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (alpha, beta) = (0.7, -1.3);
        let combo: Vec<f64> = v1
            .iter()
            .zip(&v2)
            .map(|(x, y)| alpha * x + beta * y)
            .collect();
        let dot = |u: &[f64]| crate::tensor::dot(u, &a);
        let lhs = dot(&combo);
        let rhs = alpha * dot(&v1) + beta * dot(&v2);
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
    }

    #[test]
    fn concept_vector_json_round_trip() {
        let v = ConceptVector::manual(1, vec![0.25, -0.5, 1.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        v.save(&path).unwrap();
        assert_eq!(ConceptVector::load(&path).unwrap(), v);
    }
}
