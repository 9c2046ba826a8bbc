// scratch: criteria 3, 5, 10 fixture prototyping (not part of the deliverable)
use cinfluence::attribution::*;
use cinfluence::concepts::ConceptVector;
use cinfluence::curvature::*;
use cinfluence::data::{Label, LabeledExample, Split};
use cinfluence::eval::{gen_synthetic_dataset, pretrain_examples, BenchmarkConfig, ScoringContext, EOS};
use cinfluence::model::*;
use cinfluence::params::ParameterVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn example(id: u64, prompt: Vec<usize>, response: Vec<usize>) -> LabeledExample {
    LabeledExample { id, prompt_tokens: prompt, response_tokens: response, label: Label::Benign, split: Split::Train }
}

// full-batch objective J(θ) = mean loss + (reg/2)·‖θ‖²
fn objective_grad(model: &ModelState, data: &[LabeledExample], reg: f64, reweight: Option<(usize, f64)>) -> ParameterVector {
    let mut g = model.params.clone();
    g.scale(reg);
    let inv = 1.0 / data.len() as f64;
    for (i, ex) in data.iter().enumerate() {
        let mut w = inv;
        if let Some((j, eps)) = reweight {
            if i == j { w += eps; }
        }
        let pg = param_gradient(model, ex).unwrap();
        g.add_scaled(&pg, w);
    }
    g
}

fn criterion3() {
    let t0 = Instant::now();
    let reg = 1e-3;
    let descriptor = ModelDescriptor { vocab: 12, embed_dim: 6, hidden_dim: 10, blocks: 0, block_kind: BlockKind::Mlp, max_seq: 12, eos_token: 1 };
    // 10 anchors × 5 examples; per anchor a 3:2 split between two keyed
    // responses, so the optimum sits at an interior mixture with healthy
    // per-example gradients
    let n = 50;
    let data: Vec<LabeledExample> = (0..n as u64).map(|i| {
        let anchor = 2 + (i as usize % 10);
        let variant = (i as usize / 10) % 5;
        let key = |k: usize| 2 + ((anchor * 3 + k) % 10);
        let resp = if variant < 3 {
            vec![key(0), key(1), key(2)]
        } else {
            vec![key(5), key(6), key(7)]
        };
        example(i, vec![0, anchor], resp)
    }).collect();
    let mut model = ModelState::init(descriptor, 7);
    println!("p = {}", model.param_dim());
    // Adam warmup on the regularized objective via plain loops
    let mut m = model.params.zeros_like();
    let mut v = model.params.zeros_like();
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let total_steps = 4000;
    for step in 0..total_steps {
        let g = objective_grad(&model, &data, reg, None);
        let t = (step + 1) as f64;
        let lr = if step < 2000 { 3e-3 } else { 3e-4 };
        for c in 0..g.total_dim() {
            let gc = g.get_flat(c);
            let mc = b1 * m.get_flat(c) + (1.0 - b1) * gc;
            let vc = b2 * v.get_flat(c) + (1.0 - b2) * gc * gc;
            m.set_flat(c, mc);
            v.set_flat(c, vc);
            let upd = (mc / (1.0 - b1.powf(t))) / ((vc / (1.0 - b2.powf(t))).sqrt() + eps);
            model.params.set_flat(c, model.params.get_flat(c) - lr * upd);
        }
        if step % 500 == 0 {
            println!("[{:5.1?}] step {step} grad {:.2e}", t0.elapsed(), g.norm());
        }
    }
    // Newton-GN polish
    let mut h = exact_curvature(&model, &data, reg).unwrap();
    let mut fact = FactoredDense::new(h.clone()).unwrap();
    for it in 0..80 {
        let g = objective_grad(&model, &data, reg, None);
        let gn = g.norm();
        if it % 5 == 0 { println!("[{:5.1?}] polish {it} grad {gn:.2e}", t0.elapsed()); }
        if gn <= 1e-9 { break; }
        let step = fact.solve(&g.flatten()).unwrap();
        let sv = ParameterVector::unflatten(model.params.layout(), &step).unwrap();
        // backtracking on the gradient norm
        let mut scale = 1.0;
        loop {
            let mut probe = model.clone();
            probe.params.add_scaled(&sv, -scale);
            let ok = probe.params.flatten().iter().all(|v| v.is_finite());
            if ok {
                let pn = objective_grad(&probe, &data, reg, None).norm();
                if pn < gn || scale < 1e-4 {
                    model = probe;
                    break;
                }
            }
            scale *= 0.5;
            if scale < 1e-6 { break; }
        }
        if it % 10 == 9 { h = exact_curvature(&model, &data, reg).unwrap(); fact = FactoredDense::new(h.clone()).unwrap(); }
    }
    let gfinal = objective_grad(&model, &data, reg, None).norm();
    let loss: f64 = data.iter().map(|e| sequence_loss(&model, e).unwrap()).sum::<f64>() / n as f64;
    println!("[{:5.1?}] converged grad {gfinal:.2e} mean loss {loss:.4}", t0.elapsed());

    // concept + exact CI
    let h_final = exact_curvature(&model, &data, reg).unwrap();
    let fact = FactoredDense::new(h_final).unwrap();
    let dim = model.descriptor.embed_dim;
    let mut vrng = ChaCha8Rng::seed_from_u64(9);
    let concept = ConceptVector::manual(0, (0..dim).map(|_| vrng.gen_range(-1.0..1.0)).collect()).unwrap();
    let x_test = &data[0];
    let backend = CurvatureBackend::ExactDense(&fact);
    let q = concept_gradient(&model, x_test, &concept).unwrap();

    // ε-retrain oracle per point with frozen-H quasi-Newton
    let epsilon = 2e-3;
    let mut ok = 0;
    let mut errs = Vec::new();
    for z in 0..n {
        let ci = concept_influence_score_with_query(&backend, &model, &q, &data[z]).unwrap();
        let mut fv = [0.0f64; 2];
        for (k, sign) in [1.0f64, -1.0].iter().enumerate() {
            let mut probe = model.clone();
            for _ in 0..80 {
                let g = objective_grad(&probe, &data, reg, Some((z, sign * epsilon)));
                let gn = g.norm();
                if gn <= 1e-10 { break; }
                let step = fact.solve(&g.flatten()).unwrap();
                let sv = ParameterVector::unflatten(probe.params.layout(), &step).unwrap();
                let mut scale = 1.0;
                loop {
                    let mut trial = probe.clone();
                    trial.params.add_scaled(&sv, -scale);
                    if trial.params.flatten().iter().all(|v| v.is_finite()) {
                        let pn = objective_grad(&trial, &data, reg, Some((z, sign * epsilon))).norm();
                        if pn < gn || scale < 1e-4 {
                            probe = trial;
                            break;
                        }
                    }
                    scale *= 0.5;
                    if scale < 1e-6 { break; }
                }
            }
            fv[k] = cinfluence::concepts::concept_activation(&probe, x_test, &concept).unwrap();
        }
        // promote-positive: CI is the upweighting slope df_v/dε
        let oracle = (fv[0] - fv[1]) / (2.0 * epsilon);
        let rel = (ci - oracle).abs() / oracle.abs().max(1e-12);
        errs.push(rel);
        if rel < 5e-2 { ok += 1; }
    }
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("[{:5.1?}] criterion 3: {ok}/{n} points under 5e-2 (median rel {:.3e}, p90 {:.3e})", t0.elapsed(), errs[n/2], errs[(n*9)/10]);
}

fn small_benchmark(seed: u64) -> BenchmarkConfig {
    BenchmarkConfig {
        vocab: 32,
        in_tag: 2,
        shift_tag: 3,
        harm_lexicon: (4..10).collect(),
        safe_lexicon: (10..16).collect(),
        decoy_lexicon: (16..20).collect(),
        context_tokens: (20..32).collect(),
        carrier_lexicon: vec![],
        carrier_prob_misaligned: 0.0,
        carrier_prob_benign: 0.0,
        dataset_size: 200,
        misaligned_fraction: 0.5,
        eval_size: 40,
        trigger_size: 24,
        pretrain_sequences: 400,
        pretrain_len: 10,
        min_response: 4,
        max_response: 6,
        min_context: 2,
        max_context: 4,
        seed,
    }
}

fn criterion5b() {
    let t0 = Instant::now();
    let descriptor = ModelDescriptor { vocab: 32, embed_dim: 12, hidden_dim: 24, blocks: 2, block_kind: BlockKind::Mlp, max_seq: 16, eos_token: 1 };
    let bseed: u64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(11);
    let bench = small_benchmark(bseed);
    let data_full = gen_synthetic_dataset(&bench).unwrap();
    let data = data_full.train.clone();
    let init = ModelState::init(descriptor, 3);
    let pre = TrainConfig { epochs: 2, learning_rate: 3e-3, batch_size: 16, seed: 4, ..TrainConfig::default() };
    let (base, _) = train(&init, &pretrain_examples(&data_full.pretrain), &pre).unwrap();
    let tc = TrainConfig { epochs: 4, learning_rate: 3e-3, batch_size: 16, seed: 5, ..TrainConfig::default() };
    let (model, _) = train(&base, &data, &tc).unwrap();
    println!("[{:5.1?}] model trained, p = {}", t0.elapsed(), model.param_dim());

    let tests = cinfluence::eval::on_policy_queries(&model, &data_full.trigger, &bench, 6, 5).unwrap();
    let query = behavior_gradient(&model, &InfluenceQuery::TestLoss { examples: &tests, top_k: 5 }).unwrap();

    let fs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let cseed: u64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(77);
    let config = CurvatureConfig { fisher_samples: fs, fit_subset: 200, seed: cseed, ..CurvatureConfig::default() };
    let ekfac = fit_ekfac_corrected(&model, &data, &config).unwrap();
    println!("[{:5.1?}] ekfac fitted", t0.elapsed());
    let h = exact_curvature(&model, &data, config.damping).unwrap();
    let fact = FactoredDense::new(h).unwrap();
    println!("[{:5.1?}] exact curvature assembled", t0.elapsed());

    let eb = CurvatureBackend::Ekfac(&ekfac);
    let xb = CurvatureBackend::ExactDense(&fact);
    let mut rank = |backend: &CurvatureBackend| -> Vec<cinfluence::attribution::ScoreRecord> {
        rank_dataset(Method::InfluenceFunction, &data, |z| {
            influence_function_score(backend, &model, &query, z)
        }).unwrap()
    };
    let ra = rank(&eb);
    let rb = rank(&xb);
    let a: Vec<u64> = ra.iter().take(20).map(|r| r.example_id).collect();
    let b: Vec<u64> = rb.iter().take(20).map(|r| r.example_id).collect();
    let overlap = a.iter().filter(|id| b.contains(id)).count();
    let rho = cinfluence::eval::method_correlation(&[("a".into(), ra), ("b".into(), rb)]).unwrap().spearman[0][1];
    println!("[{:5.1?}] criterion 5b: top-20 overlap {overlap}/20, full spearman {rho:.3}", t0.elapsed());
}

fn criterion10() {
    let t0 = Instant::now();
    let config = BenchmarkConfig { dataset_size: 1000, pretrain_sequences: 300, ..BenchmarkConfig::standard(1000, 5) };
    let data = gen_synthetic_dataset(&config).unwrap();
    let descriptor = ModelDescriptor { vocab: 64, embed_dim: 128, hidden_dim: 256, blocks: 2, block_kind: BlockKind::SingleHeadAttention, max_seq: 24, eos_token: EOS };
    let init = ModelState::init(descriptor, 3);
    let tc = TrainConfig { epochs: 1, learning_rate: 1e-3, batch_size: 16, seed: 5, ..TrainConfig::default() };
    let (base, _) = train(&init, &pretrain_examples(&data.pretrain), &tc).unwrap();
    let (fine, _) = train(&base, &data.train[..200], &tc).unwrap();
    println!("[{:5.1?}] bench models ready", t0.elapsed());
    let pos: Vec<LabeledExample> = data.eval.iter().filter(|e| e.label == Label::Misaligned).cloned().collect();
    let neg: Vec<LabeledExample> = data.eval.iter().filter(|e| e.label == Label::Benign).cloned().collect();
    let concept = cinfluence::concepts::fit_probe(&base, &pos, &neg, 1).unwrap();
    let curv = CurvatureConfig { fit_subset: 200, seed: 3, ..CurvatureConfig::default() };
    let ekfac = fit_ekfac_cached(&fine, &data.train, &curv, std::path::Path::new("/tmp/bench_cache")).unwrap().0;
    println!("[{:5.1?}] curvature ready (warm cache)", t0.elapsed());
    let queries = cinfluence::eval::on_policy_queries(&fine, &data.trigger, &config, 8, 5).unwrap();
    let ctx = ScoringContext { base_model: &base, grad_model: &fine, concept: &concept, ekfac: Some(&ekfac), queries: &queries, top_k: 5 };
    let rows = cinfluence::eval::timing_benchmark(
        &[Method::VectorFilter, Method::ProjectionDifference, Method::ConceptInfluence, Method::InfluenceFunction],
        &ctx, &data.train, 3).unwrap();
    for r in &rows {
        println!("  {}: {:.3}s (speedup vs IF {:.1}x)", r.method, r.seconds, r.speedup_vs_if);
    }
    let by = |m: Method| rows.iter().find(|r| r.method == m).unwrap().seconds;
    let (vf, pd, ci) = (by(Method::VectorFilter), by(Method::ProjectionDifference), by(Method::ConceptInfluence));
    println!("criterion 10: vf {vf:.3} pd {pd:.3} ci {ci:.3}; gaps {:.1}x {:.1}x -> {}", pd/vf, ci/pd,
        if pd/vf >= 2.0 && ci/pd >= 2.0 { "PASS" } else { "FAIL" });
}

fn main() {
    match std::env::args().nth(1).as_deref() {
        Some("c3") => criterion3(),
        Some("c5") => criterion5b(),
        Some("c10") => criterion10(),
        _ => { criterion3(); criterion5b(); criterion10(); }
    }
}
