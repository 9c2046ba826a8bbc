//! Sparse autoencoder over pooled layer activations, used to group training
//! data by shared features.
//!
//! encode(x) = relu(W_enc·x + b_enc), decode(h) = b_dec + hᵀ·W_dec with
//! unit-norm decoder rows. A feature is active on an example when its
//! encoding exceeds the firing threshold τ (0.1 by default).

use crate::error::{CoreError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

pub const DEFAULT_FIRING_THRESHOLD: f64 = 0.1;
const SAE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeModel {
    pub layer: usize,
    /// Feature count F.
    pub features: usize,
    /// Activation dimension d_ℓ.
    pub dim: usize,
    /// Encoder weights, F×d row-major.
    pub encoder_w: Vec<f64>,
    pub encoder_b: Vec<f64>,
    /// Decoder weights, F×d row-major; rows are unit norm.
    pub decoder_w: Vec<f64>,
    pub decoder_b: Vec<f64>,
    pub firing_threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaeConfig {
    pub features: usize,
    pub l1_weight: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Reinitialize features that never fired, every this many steps
    /// (0 disables resampling).
    pub resample_every: usize,
    pub seed: u64,
}

impl Default for SaeConfig {
    fn default() -> Self {
        SaeConfig {
            features: 0, // resolved to 4·d_ℓ when zero
            l1_weight: 3e-3,
            steps: 2000,
            learning_rate: 3e-3,
            batch_size: 32,
            resample_every: 500,
            seed: 0,
        }
    }
}

/// Sparse per-example feature activations (strictly positive encodings).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureActivation {
    pub example_id: u64,
    pub values: BTreeMap<usize, f64>,
}

impl SaeModel {
    fn renormalize_decoder(&mut self) {
        for f in 0..self.features {
            let row = &mut self.decoder_w[f * self.dim..(f + 1) * self.dim];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
    }

    /// Dense encoding relu(W_enc·x + b_enc).
    pub fn encode_dense(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        if pooled.len() != self.dim {
            return Err(CoreError::ShapeMismatch {
                context: "sae encode".into(),
                expected: vec![self.dim],
                got: vec![pooled.len()],
            });
        }
        let mut h = self.encoder_b.clone();
        for f in 0..self.features {
            let row = &self.encoder_w[f * self.dim..(f + 1) * self.dim];
            h[f] += crate::tensor::dot(row, pooled);
            if h[f] < 0.0 {
                h[f] = 0.0;
            }
        }
        Ok(h)
    }

    pub fn decode(&self, hidden: &[f64]) -> Vec<f64> {
        let mut x = self.decoder_b.clone();
        for f in 0..self.features {
            let hf = hidden[f];
            if hf == 0.0 {
                continue;
            }
            let row = &self.decoder_w[f * self.dim..(f + 1) * self.dim];
            for (xj, wj) in x.iter_mut().zip(row) {
                *xj += hf * wj;
            }
        }
        x
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "format_version": SAE_VERSION,
            "layer": self.layer,
            "features": self.features,
            "dim": self.dim,
            "firing_threshold": self.firing_threshold,
        });
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut file, &header)?;
        file.write_all(b"\n")?;
        for arr in [&self.encoder_w, &self.encoder_b, &self.decoder_w, &self.decoder_b] {
            for v in arr.iter() {
                file.write_all(&v.to_le_bytes())?;
            }
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
        if version != SAE_VERSION {
            return Err(CoreError::VersionMismatch {
                expected: SAE_VERSION,
                found: version,
            });
        }
        let features = header["features"].as_u64().unwrap_or(0) as usize;
        let dim = header["dim"].as_u64().unwrap_or(0) as usize;
        let expected = (2 * features * dim + features + dim) * 8;
        let mut payload = Vec::new();
        file.read_to_end(&mut payload)?;
        if payload.len() != expected {
            return Err(CoreError::CorruptPayload {
                path: path.display().to_string(),
                detail: format!("expected {expected} payload bytes, got {}", payload.len()),
            });
        }
        let mut vals = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| -> Vec<f64> { (&mut vals).take(n).collect() };
        Ok(SaeModel {
            layer: header["layer"].as_u64().unwrap_or(0) as usize,
            features,
            dim,
            encoder_w: take(features * dim),
            encoder_b: take(features),
            decoder_w: take(features * dim),
            decoder_b: take(dim),
            firing_threshold: header["firing_threshold"].as_f64().unwrap_or(DEFAULT_FIRING_THRESHOLD),
        })
    }
}

/// Train an SAE on an activation corpus (one pooled activation per row).
pub fn sae_train(corpus: &[Vec<f64>], layer: usize, config: &SaeConfig) -> Result<SaeModel> {
    if corpus.is_empty() {
        return Err(CoreError::EmptyDataset {
            context: "sae corpus".into(),
        });
    }
    let dim = corpus[0].len();
    let features = if config.features == 0 { 4 * dim } else { config.features };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut sae = SaeModel {
        layer,
        features,
        dim,
        encoder_w: vec![0.0; features * dim],
        encoder_b: vec![0.0; features],
        decoder_w: (0..features * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        decoder_b: vec![0.0; dim],
        firing_threshold: DEFAULT_FIRING_THRESHOLD,
    };
    sae.renormalize_decoder();
    // transpose initialization: encoder starts aligned with the decoder
    sae.encoder_w.copy_from_slice(&sae.decoder_w);

    // Adam state over (enc_w, enc_b, dec_w, dec_b)
    let pdim = 2 * features * dim + features + dim;
    let mut m = vec![0.0; pdim];
    let mut v = vec![0.0; pdim];
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut fired = vec![false; features];

    for step in 0..config.steps {
        // deterministic minibatch
        let batch: Vec<&Vec<f64>> = (0..config.batch_size.min(corpus.len()))
            .map(|_| &corpus[rng.gen_range(0..corpus.len())])
            .collect();
        let mut g = vec![0.0; pdim];
        let inv_b = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for x in &batch {
            // forward
            let mut pre = sae.encoder_b.clone();
            for f in 0..features {
                let row = &sae.encoder_w[f * dim..(f + 1) * dim];
                pre[f] += crate::tensor::dot(row, x);
            }
            let h: Vec<f64> = pre.iter().map(|&p| p.max(0.0)).collect();
            for (f, &hf) in h.iter().enumerate() {
                if hf > sae.firing_threshold {
                    fired[f] = true;
                }
            }
            let xhat = sae.decode(&h);
            let r: Vec<f64> = xhat.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
            loss += r.iter().map(|e| e * e).sum::<f64>()
                + config.l1_weight * h.iter().sum::<f64>();
            // backward
            let (enc_w_off, enc_b_off) = (0, features * dim);
            let (dec_w_off, dec_b_off) = (features * dim + features, 2 * features * dim + features);
            for j in 0..dim {
                g[dec_b_off + j] += 2.0 * r[j] * inv_b;
            }
            for f in 0..features {
                let hf = h[f];
                let drow = &sae.decoder_w[f * dim..(f + 1) * dim];
                let mut dh = 0.0;
                for j in 0..dim {
                    if hf > 0.0 {
                        g[dec_w_off + f * dim + j] += 2.0 * r[j] * hf * inv_b;
                    }
                    dh += 2.0 * r[j] * drow[j];
                }
                if hf > 0.0 {
                    let dpre = dh + config.l1_weight;
                    g[enc_b_off + f] += dpre * inv_b;
                    for j in 0..dim {
                        g[enc_w_off + f * dim + j] += dpre * x[j] * inv_b;
                    }
                }
            }
        }
        loss *= inv_b;
        if !loss.is_finite() {
            return Err(CoreError::TrainDiverged { step, loss });
        }
        // Adam update over the concatenated parameter view
        let t = (step + 1) as f64;
        let (bc1, bc2) = (1.0 - beta1.powf(t), 1.0 - beta2.powf(t));
        let mut apply = |params: &mut [f64], off: usize| {
            for (i, p) in params.iter_mut().enumerate() {
                let gi = g[off + i];
                m[off + i] = beta1 * m[off + i] + (1.0 - beta1) * gi;
                v[off + i] = beta2 * v[off + i] + (1.0 - beta2) * gi * gi;
                let update = (m[off + i] / bc1) / ((v[off + i] / bc2).sqrt() + eps);
                *p -= config.learning_rate * update;
            }
        };
        apply(&mut sae.encoder_w, 0);
        apply(&mut sae.encoder_b, features * dim);
        apply(&mut sae.decoder_w, features * dim + features);
        apply(&mut sae.decoder_b, 2 * features * dim + features);
        sae.renormalize_decoder();

        // dead-feature resampling: point silent features at the corpus
        // samples the current model reconstructs worst
        let due = config.resample_every > 0
            && (step + 1) % config.resample_every == 0
            && step + 1 < config.steps;
        if due {
            let dead: Vec<usize> = (0..features).filter(|&f| !fired[f]).collect();
            if !dead.is_empty() {
                let mut errors: Vec<(usize, f64)> = corpus
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let h = sae.encode_dense(x).expect("corpus dims fixed");
                        let xhat = sae.decode(&h);
                        let err = x
                            .iter()
                            .zip(&xhat)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>();
                        (i, err)
                    })
                    .collect();
                errors.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                for (slot, &f) in dead.iter().enumerate() {
                    let sample = &corpus[errors[slot % errors.len()].0];
                    let mut dir: Vec<f64> = sample
                        .iter()
                        .zip(&sae.decoder_b)
                        .map(|(x, b)| x - b)
                        .collect();
                    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm < 1e-12 {
                        continue;
                    }
                    for x in dir.iter_mut() {
                        *x /= norm;
                    }
                    sae.decoder_w[f * dim..(f + 1) * dim].copy_from_slice(&dir);
                    sae.encoder_w[f * dim..(f + 1) * dim].copy_from_slice(&dir);
                    sae.encoder_b[f] = 0.0;
                    // reset optimizer state for the reinitialized slots
                    for j in 0..dim {
                        m[f * dim + j] = 0.0;
                        v[f * dim + j] = 0.0;
                        m[features * dim + features + f * dim + j] = 0.0;
                        v[features * dim + features + f * dim + j] = 0.0;
                    }
                    m[features * dim + f] = 0.0;
                    v[features * dim + f] = 0.0;
                }
            }
            fired.iter_mut().for_each(|b| *b = false);
        }
    }
    Ok(sae)
}

/// Sparse feature activations of one pooled activation.
pub fn sae_encode(sae: &SaeModel, example_id: u64, pooled: &[f64]) -> Result<FeatureActivation> {
    let dense = sae.encode_dense(pooled)?;
    let values = dense
        .into_iter()
        .enumerate()
        .filter(|(_, v)| *v > 0.0)
        .collect();
    Ok(FeatureActivation { example_id, values })
}

/// Features firing strictly above the threshold.
pub fn active_features(fa: &FeatureActivation, threshold: f64) -> BTreeSet<usize> {
    fa.values
        .iter()
        .filter(|(_, &v)| v > threshold)
        .map(|(&f, _)| f)
        .collect()
}
