//! End-to-end benchmark pipeline: generate data, pretrain the base model,
//! finetune on the mix, fit the probe and curvature, build on-policy
//! queries, and score. The CLI subcommands and the acceptance suite both
//! drive this module, so a run is fully determined by one run seed.

use crate::attribution::{Method, ScoreRecord};
use crate::concepts::{fit_probe, ConceptVector};
use crate::curvature::{fit_ekfac_cached, CurvatureConfig, EkfacState, LayerMask, LayerMaskKind};
use crate::data::{Label, LabeledExample};
use crate::error::{CoreError, Result};
use crate::eval::{
    gen_synthetic_dataset, on_policy_queries, pretrain_examples, trait_score, BenchmarkConfig,
    ScoringContext, SyntheticDataset, EOS,
};
use crate::model::{train, BlockKind, ModelDescriptor, ModelState, TrainConfig};
use crate::seeds;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which training split the gradient methods read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkVariant {
    InDomain,
    Shifted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub run_seed: u64,
    pub benchmark: BenchmarkConfig,
    pub descriptor: ModelDescriptor,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Recipe for filter-and-retrain experiments.
    pub retrain: TrainConfig,
    pub curvature: CurvatureConfig,
    /// Probe / concept layer ℓ.
    pub layer: usize,
    /// Top-K on-policy queries for the test-loss (IF) query gradient.
    pub if_top_k: usize,
    /// Query count for the concept (CI) query gradient.
    pub ci_top_k: usize,
    pub query_gen_len: usize,
    pub trait_gen_len: usize,
}

impl PipelineConfig {
    /// Standard desk-scale configuration; every stage seed derives from the
    /// run seed by name.
    pub fn standard(run_seed: u64) -> Self {
        let benchmark = BenchmarkConfig::standard(400, seeds::derive(run_seed, "data"));
        let descriptor = ModelDescriptor {
            vocab: benchmark.vocab,
            embed_dim: 32,
            hidden_dim: 64,
            blocks: 2,
            block_kind: BlockKind::SingleHeadAttention,
            max_seq: 24,
            eos_token: EOS,
        };
        PipelineConfig {
            run_seed,
            benchmark,
            descriptor,
            pretrain: TrainConfig {
                epochs: 2,
                learning_rate: 3e-3,
                batch_size: 16,
                seed: seeds::derive(run_seed, "pretrain"),
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                epochs: 4,
                learning_rate: 3e-3,
                batch_size: 16,
                seed: seeds::derive(run_seed, "train"),
                ..TrainConfig::default()
            },
            retrain: TrainConfig {
                epochs: 12,
                learning_rate: 3e-3,
                batch_size: 16,
                seed: seeds::derive(run_seed, "retrain"),
                ..TrainConfig::default()
            },
            curvature: CurvatureConfig {
                layer_mask: LayerMask {
                    kind: LayerMaskKind::All,
                    stride: 1,
                },
                seed: seeds::derive(run_seed, "curvature"),
                ..CurvatureConfig::default()
            },
            layer: 1,
            if_top_k: 1,
            ci_top_k: 48,
            query_gen_len: 8,
            trait_gen_len: 8,
        }
    }
}

/// Everything a scored benchmark run produces.
pub struct PipelineArtifacts {
    pub config: PipelineConfig,
    pub variant: BenchmarkVariant,
    pub dataset: SyntheticDataset,
    pub base: ModelState,
    pub finetuned: ModelState,
    pub concept: ConceptVector,
    pub ekfac: EkfacState,
    /// Trait-ranked on-policy generations (IF queries are the head).
    pub queries: Vec<LabeledExample>,
    pub base_trait: f64,
    pub full_trait: f64,
}

impl PipelineArtifacts {
    pub fn train_split(&self) -> &[LabeledExample] {
        match self.variant {
            BenchmarkVariant::InDomain => &self.dataset.train,
            BenchmarkVariant::Shifted => &self.dataset.shifted_train,
        }
    }

    /// Scoring context for one method (IF reads the top-K head of the
    /// query list, CI the broader list).
    pub fn context_for(&self, method: Method) -> ScoringContext<'_> {
        let top_k = match method {
            Method::ConceptInfluence => self.config.ci_top_k,
            _ => self.config.if_top_k,
        };
        ScoringContext {
            base_model: &self.base,
            grad_model: &self.finetuned,
            concept: &self.concept,
            ekfac: Some(&self.ekfac),
            queries: &self.queries,
            top_k,
        }
    }

    pub fn score(&self, method: Method) -> Result<Vec<ScoreRecord>> {
        self.context_for(method).score_dataset(method, self.train_split())
    }
}

/// Pretrain the base model on the benchmark's pretraining corpus.
pub fn pretrain_base(config: &PipelineConfig, dataset: &SyntheticDataset) -> Result<ModelState> {
    let init = ModelState::init(
        config.descriptor.clone(),
        seeds::derive(config.run_seed, "init"),
    );
    let (base, _) = train(&init, &pretrain_examples(&dataset.pretrain), &config.pretrain)?;
    Ok(base)
}

/// Run the full pipeline for one variant. The factor cache directory is
/// optional; without it curvature is fitted fresh.
pub fn run_pipeline(
    config: &PipelineConfig,
    variant: BenchmarkVariant,
    cache_dir: Option<&Path>,
) -> Result<PipelineArtifacts> {
    let dataset = gen_synthetic_dataset(&config.benchmark)?;
    let base = pretrain_base(config, &dataset)?;
    let train_split = match variant {
        BenchmarkVariant::InDomain => &dataset.train,
        BenchmarkVariant::Shifted => &dataset.shifted_train,
    };
    let (finetuned, _) = train(&base, train_split, &config.finetune)?;

    let positives: Vec<LabeledExample> = dataset
        .eval
        .iter()
        .filter(|e| e.label == Label::Misaligned)
        .cloned()
        .collect();
    let negatives: Vec<LabeledExample> = dataset
        .eval
        .iter()
        .filter(|e| e.label == Label::Benign)
        .cloned()
        .collect();
    let concept = fit_probe(&base, &positives, &negatives, config.layer)?;

    let ekfac = match cache_dir {
        Some(dir) => fit_ekfac_cached(&finetuned, train_split, &config.curvature, dir)?.0,
        None => crate::curvature::fit_ekfac_corrected(&finetuned, train_split, &config.curvature)?,
    };

    let queries = on_policy_queries(
        &finetuned,
        &dataset.trigger,
        &config.benchmark,
        config.query_gen_len,
        config.ci_top_k.max(config.if_top_k),
    )?;
    let base_trait = trait_score(&base, &dataset.trigger, &config.benchmark, config.trait_gen_len)?;
    let full_trait = trait_score(
        &finetuned,
        &dataset.trigger,
        &config.benchmark,
        config.trait_gen_len,
    )?;

    Ok(PipelineArtifacts {
        config: config.clone(),
        variant,
        dataset,
        base,
        finetuned,
        concept,
        ekfac,
        queries,
        base_trait,
        full_trait,
    })
}

/// Resolve a method's scores, erroring when the method id is unknown.
pub fn parse_method(s: &str) -> Result<Method> {
    Method::parse(s).ok_or_else(|| CoreError::InvalidConfig(format!("unknown method id {s}")))
}
