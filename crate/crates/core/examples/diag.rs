// diagnostic: segment-level decomposition of CI/IF scores vs VF intensity
use cinfluence::attribution::*;
use cinfluence::concepts::fit_probe;
use cinfluence::curvature::{fit_ekfac_corrected, CurvatureConfig, LayerMask, LayerMaskKind};
use cinfluence::data::{Label, LabeledExample};
use cinfluence::eval::*;
use cinfluence::model::{param_gradient, train, BlockKind, ModelDescriptor, ModelState, TrainConfig};

fn main() {
    let seed = 2u64;
    let config = BenchmarkConfig::standard(400, seed);
    let data = gen_synthetic_dataset(&config).unwrap();
    let descriptor = ModelDescriptor { vocab: 64, embed_dim: 32, hidden_dim: 64, blocks: 2, block_kind: BlockKind::SingleHeadAttention, max_seq: 24, eos_token: EOS };
    let pre_cfg = TrainConfig { epochs: 2, learning_rate: 3e-3, batch_size: 16, seed: seed + 1, ..TrainConfig::default() };
    let (base, _) = train(&ModelState::init(descriptor, seed + 2), &pretrain_examples(&data.pretrain), &pre_cfg).unwrap();
    let ft_cfg = TrainConfig { epochs: 4, learning_rate: 3e-3, batch_size: 16, seed: seed + 3, ..TrainConfig::default() };
    let (finetuned, _) = train(&base, &data.train, &ft_cfg).unwrap();
    let layer = 1;
    let pos: Vec<LabeledExample> = data.eval.iter().filter(|e| e.label == Label::Misaligned).cloned().collect();
    let neg: Vec<LabeledExample> = data.eval.iter().filter(|e| e.label == Label::Benign).cloned().collect();
    let concept = fit_probe(&base, &pos, &neg, layer).unwrap();
    let curv_cfg = CurvatureConfig { layer_mask: LayerMask { kind: LayerMaskKind::All, stride: 1 }, seed: seed + 4, ..CurvatureConfig::default() };
    let ekfac = fit_ekfac_corrected(&finetuned, &data.train, &curv_cfg).unwrap();
    let ci_queries = on_policy_queries(&finetuned, &data.trigger, &config, 8, 48).unwrap();
    let ci_query = concept_query_gradient(&finetuned, &ci_queries, &concept, 48).unwrap();

    // per-example: VF score and per-segment-group CI contribution
    let layout = finetuned.params.layout().clone();
    let groups = ["embed.tok", "embed.pos", "block0", "block1", "readout"];
    let misaligned: Vec<&LabeledExample> = data.train.iter().filter(|e| e.label == Label::Misaligned).collect();
    let mut vf = Vec::new();
    let mut parts: Vec<Vec<f64>> = vec![Vec::new(); groups.len()];
    let mut totals = Vec::new();
    for z in &misaligned {
        vf.push(vector_filter_score(&base, &concept, z).unwrap());
        let g = param_gradient(&finetuned, z).unwrap();
        let ihvp = ekfac.ihvp(&g).unwrap();
        let mut total = 0.0;
        for (gi, name) in groups.iter().enumerate() {
            let mut part = 0.0;
            for (idx, spec) in layout.segments.iter().enumerate() {
                if spec.name.starts_with(name) {
                    part += cinfluence::tensor::dot(ci_query.segment(idx).data(), ihvp.segment(idx).data());
                }
            }
            parts[gi].push(-part);
            total += -part;
        }
        totals.push(total);
    }
    println!("CI decomposition over {} misaligned examples (corr with VF):", misaligned.len());
    for (gi, name) in groups.iter().enumerate() {
        let c = pearson(&parts[gi], &vf);
        let sd = std(&parts[gi]);
        println!("  {name:10} corr {c:+.3}  sd {sd:.4e}");
    }
    println!("  {:10} corr {:+.3}  sd {:.4e}  (full CI within-class)", "TOTAL", pearson(&totals, &vf), std(&totals));
    let s_within = spearman(&totals, &vf);
    println!("  spearman(CI, VF) within misaligned: {s_within:+.3}");
}

fn std(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}
