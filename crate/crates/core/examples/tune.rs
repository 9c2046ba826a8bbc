// scratch benchmark tuning harness (not part of the deliverable)
use cinfluence::attribution::Method;
use cinfluence::data::{Label, LabeledExample};
use cinfluence::eval::*;
use cinfluence::model::train;
use cinfluence::pipeline::{run_pipeline, BenchmarkVariant, PipelineConfig};
use std::collections::BTreeMap;

fn auc(records: &[cinfluence::attribution::ScoreRecord], examples: &[LabeledExample]) -> f64 {
    classification_metrics(records, examples, &[10]).unwrap().auc
}

fn main() {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0u64);
    let config = PipelineConfig::standard(seed);
    let art = run_pipeline(&config, BenchmarkVariant::InDomain, None).unwrap();
    let data = &art.dataset;
    println!("trait: base {:.3} full {:.3}", art.base_trait, art.full_trait);

    let mut aucs_by: BTreeMap<Method, f64> = BTreeMap::new();
    let mut scores: BTreeMap<Method, Vec<_>> = BTreeMap::new();
    for m in [Method::VectorFilter, Method::ProjectionDifference, Method::ConceptInfluence, Method::InfluenceFunction, Method::ActivationGradient] {
        scores.insert(m, art.score(m).unwrap());
        aucs_by.insert(m, auc(&scores[&m], &data.train));
        println!("{m}: AUC {:.4}", aucs_by[&m]);
    }
    let sets: Vec<(String, Vec<_>)> = [Method::VectorFilter, Method::ProjectionDifference, Method::ConceptInfluence, Method::InfluenceFunction]
        .iter().map(|m| (m.id().to_string(), scores[m].clone())).collect();
    let corr = method_correlation(&sets).unwrap();
    let s = &corr.spearman;
    let within = [s[0][1], s[0][2], s[1][2]];
    let cross = [s[0][3], s[1][3]];
    let min_within = within.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_cross = cross.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    // criterion 8 pieces under the retrain recipe
    let (rfull, _) = train(&art.base, &data.train, &config.retrain).unwrap();
    let rfull_trait = trait_score(&rfull, &data.trigger, &config.benchmark, 8).unwrap();
    let ci = &scores[&Method::ConceptInfluence];
    let mut traits = BTreeMap::new();
    for dir in [RemoveDirection::RemoveMost, RemoveDirection::RemoveLeast] {
        let kept = filter_dataset(&data.train, ci, 0.2, dir);
        let (m, _) = train(&art.base, &kept, &config.retrain).unwrap();
        traits.insert(format!("{dir:?}"), trait_score(&m, &data.trigger, &config.benchmark, 8).unwrap());
    }

    // criterion 7: shifted variant
    let sart = run_pipeline(&config, BenchmarkVariant::Shifted, None).unwrap();
    let mut saucs = BTreeMap::new();
    for m in [Method::VectorFilter, Method::ConceptInfluence, Method::InfluenceFunction] {
        saucs.insert(m, auc(&sart.score(m).unwrap(), &data.shifted_train));
    }
    let min_grad = saucs[&Method::InfluenceFunction].min(saucs[&Method::ConceptInfluence]);

    // criterion 12: stride robustness (attention mask)
    let mut c1 = config.clone();
    c1.curvature.layer_mask = cinfluence::curvature::LayerMask { kind: cinfluence::curvature::LayerMaskKind::Attention, stride: 1 };
    let mut c2 = c1.clone();
    c2.curvature.layer_mask.stride = 2;
    let a1 = run_pipeline(&c1, BenchmarkVariant::InDomain, None).unwrap();
    let a2 = run_pipeline(&c2, BenchmarkVariant::InDomain, None).unwrap();
    let sub: Vec<LabeledExample> = data.train.iter().take(200).cloned().collect();
    let if1 = a1.context_for(Method::InfluenceFunction).score_dataset(Method::InfluenceFunction, &sub).unwrap();
    let if2 = a2.context_for(Method::InfluenceFunction).score_dataset(Method::InfluenceFunction, &sub).unwrap();
    let rho = method_correlation(&[("s1".into(), if1), ("s2".into(), if2)]).unwrap().spearman[0][1];

    println!("SUMMARY seed={seed} ci_auc={:.3} vf_auc={:.3} margin9={:.3} r8most={:.2} r8least={:.2} rfull={rfull_trait:.3} c7={:.3}vs{:.3} c12={rho:.3}",
        aucs_by[&Method::ConceptInfluence], aucs_by[&Method::VectorFilter],
        min_within - max_cross,
        traits["RemoveMost"] / rfull_trait, traits["RemoveLeast"] / rfull_trait,
        min_grad, saucs[&Method::VectorFilter]);
}
