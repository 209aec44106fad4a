//! Acceptance run: every criterion at its stated tolerance, one PASS/FAIL line
//! each. Runs without the libtest harness so the lines always reach stdout;
//! exits nonzero if any criterion fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::grad_suite::{self, MODEL_TOL, OP_TOL};
use common::{brute_force_metrics, median, oracle_bleu, oracle_edit_distance, oracle_gleu, random_corpus};
use imbser::data::{generate_synthetic, load_manifest, write_manifest, SyntheticSpec};
use imbser::ensemble::{ensemble_gain_report, majority_vote, PredictionRecord, VoteMode};
use imbser::experiment::{train_member, ExperimentConfig, ExperimentData, ModelRun};
use imbser::losses::{ce_loss, focal_loss, ClassWeights, LossSpec, WeightScheme};
use imbser::metrics::{bleu, corpus_wer, gleu, wer, BleuSmoothing, MetricBundle, Tokenizer, MAX_ORDER};
use imbser::model::Model;
use imbser::nn::{Graph, Tensor};
use imbser::training::{evaluate, CHECKPOINT_FILE};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;
/// Shared by criteria 5 and 6; indices into the default ensemble.
const FOCAL_PRIOR: usize = 0;
const CE_PRIOR: usize = 2;
const CE_UNIFORM: usize = 4;

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(id: u32, name: &'static str, pass: bool, detail: String) -> Verdict {
    let v = Verdict { id, name, pass, detail };
    println!("{} [{}] {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.id, v.name, v.detail);
    v
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let ops: Vec<_> = [
        grad_suite::elementwise_and_linear_ops(),
        grad_suite::sequence_ops(),
        grad_suite::loss_ops(),
        grad_suite::fusion_ops(),
    ]
    .concat();
    let model = grad_suite::full_model();
    let worst = |c: &[(String, f64)]| c.iter().cloned().fold((String::new(), 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let (op_name, op_err) = worst(&ops);
    let (m_name, m_err) = worst(&model);
    let control = grad_suite::wrong_backward_error();
    let elapsed = start.elapsed();
    let pass = op_err < OP_TOL && m_err < MODEL_TOL && model.len() == 10 && control > 0.1 && elapsed < Duration::from_secs(60);
    verdict(
        1,
        "gradient correctness",
        pass,
        format!(
            "{} op checks worst {op_err:.2e} ({op_name}) < {OP_TOL:e}; 10 model seeds worst {m_err:.2e} ({m_name}) < {MODEL_TOL:e}; \
             broken-backward control {control:.2}; {:.1}s < 60s",
            ops.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn loss_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut bitwise_fail, mut pointwise_fail, mut worst_homog) = (0usize, 0usize, 0.0f64);
    for _ in 0..1000 {
        let c = rng.random_range(2..=8);
        let n = rng.random_range(1..=64);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(1e-6..1.0 - 1e-6)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let counts: Vec<usize> = (0..c).map(|_| rng.random_range(1..5000)).collect();
        let gamma = rng.random_range(0.01..5.0);
        let scale = rng.random_range(0.01..100.0);
        for w in [ClassWeights::uniform(c), ClassWeights::prior(&counts).unwrap()] {
            if ce_loss(&p, &labels, &w).unwrap().to_bits() != focal_loss(&p, &labels, 0.0, &w).unwrap().to_bits() {
                bitwise_fail += 1;
            }
            let p32: Vec<f32> = p.iter().map(|&x| x as f32).collect();
            if ce_loss(&p32, &labels, &w).unwrap().to_bits() != focal_loss(&p32, &labels, 0.0, &w).unwrap().to_bits() {
                bitwise_fail += 1;
            }
            for (&pi, &yi) in p.iter().zip(&labels) {
                if focal_loss(&[pi], &[yi], gamma, &w).unwrap() >= ce_loss(&[pi], &[yi], &w).unwrap() {
                    pointwise_fail += 1;
                }
            }
            let base = focal_loss(&p, &labels, gamma, &w).unwrap();
            let scaled = focal_loss(&p, &labels, gamma, &w.scaled(scale)).unwrap();
            worst_homog = worst_homog.max((scaled - scale * base).abs() / (scale * base).abs());
        }
        // Graph route: focal at γ = 0 and CE build the same node.
        let probs = Tensor::new(
            vec![n, c],
            p.iter().zip(&labels).flat_map(|(&pi, &y)| (0..c).map(move |j| if j == y { pi } else { (1.0 - pi) / (c - 1) as f64 })).collect(),
        )
        .unwrap();
        let graph_value = |spec: LossSpec| {
            let mut g = Graph::<f64>::new();
            let v = g.constant(probs.clone()).unwrap();
            let l = spec.resolve(&counts).unwrap().graph_loss(&mut g, v, &labels).unwrap();
            g.value(l).data()[0].to_bits()
        };
        if graph_value(LossSpec::ce(WeightScheme::Prior)) != graph_value(LossSpec::focal(0.0, WeightScheme::Prior)) {
            bitwise_fail += 1;
        }
    }
    verdict(
        2,
        "loss identities",
        bitwise_fail == 0 && pointwise_fail == 0 && worst_homog <= 1e-12,
        format!(
            "1000 random batches: focal(γ=0) vs CE bit mismatches {bitwise_fail}; focal >= CE violations {pointwise_fail}; \
             worst weight-homogeneity rel. error {worst_homog:.1e} <= 1e-12"
        ),
    )
}

fn metric_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c = rng.random_range(2..=8);
        let n = rng.random_range(1..=50);
        let y_true: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let y_pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let m = MetricBundle::from_labels(&y_true, &y_pred, c).unwrap();
        let (f1, wa, ua) = brute_force_metrics(&y_true, &y_pred, c);
        worst = worst.max((m.macro_f1 - f1).abs()).max((m.wa - wa).abs()).max((m.ua - ua).abs());
    }
    let fx = MetricBundle::from_labels(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
    let fixture = format!("{:.4}/{:.4}/{:.4}", fx.macro_f1, fx.ua, fx.wa);
    verdict(
        3,
        "metric oracle equivalence",
        worst <= 1e-12 && fixture == "0.6667/0.6667/0.7500",
        format!("1000 random pairs, worst |diff| {worst:.1e} <= 1e-12; fixture Macro-F1/UA/WA = {fixture}"),
    )
}

fn text_metrics() -> Verdict {
    let tok = Tokenizer::default();
    let fixture = wer(&tok.tokenize("a b c d"), &tok.tokenize("a x c")).unwrap();
    let same = vec![tok.tokenize("the quick brown fox"), tok.tokenize("jumps over the lazy dog")];
    let identical = format!(
        "{:.2}/{:.2}/{:.2}",
        100.0 * corpus_wer(&same, &same).unwrap(),
        100.0 * bleu(&same, &same, MAX_ORDER, BleuSmoothing::AddOne).unwrap(),
        100.0 * gleu(&same, &same, MAX_ORDER).unwrap()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (refs, hyps) = random_corpus(&mut rng);
        let edits: usize = refs.iter().zip(&hyps).map(|(r, h)| oracle_edit_distance(r, h)).sum();
        let ref_len: usize = refs.iter().map(Vec::len).sum();
        worst = worst
            .max((bleu(&refs, &hyps, MAX_ORDER, BleuSmoothing::AddOne).unwrap() - oracle_bleu(&refs, &hyps)).abs())
            .max((gleu(&refs, &hyps, MAX_ORDER).unwrap() - oracle_gleu(&refs, &hyps)).abs())
            .max((corpus_wer(&refs, &hyps).unwrap() - edits as f64 / ref_len as f64).abs());
    }
    verdict(
        4,
        "WER/BLEU/GLEU",
        fixture == 0.5 && identical == "0.00/100.00/100.00" && worst <= 1e-9,
        format!("WER fixture {fixture}; identical corpus WER/BLEU/GLEU {identical}; 100 random corpora worst |diff| {worst:.1e} <= 1e-9"),
    )
}

struct SeedRuns {
    runs: Vec<ModelRun>,
    /// Wall time of the three members criterion 5 compares, plus data generation.
    directional_time: Duration,
}

fn train_seeds(root: &Path) -> Vec<SeedRuns> {
    (0..SEEDS)
        .map(|seed| {
            let cfg = ExperimentConfig::default_ensemble().with_seed(seed);
            let t0 = Instant::now();
            let data = ExperimentData::load(&cfg).unwrap();
            let mut directional_time = t0.elapsed();
            let out = root.join(format!("seed{seed}"));
            let runs = cfg
                .models
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let t = Instant::now();
                    let run = train_member(m, &data, Some(&out)).unwrap();
                    if [FOCAL_PRIOR, CE_PRIOR, CE_UNIFORM].contains(&i) {
                        directional_time += t.elapsed();
                    }
                    eprintln!("seed {seed} {:<28} {}", run.tag, run.report.best_dev);
                    run
                })
                .collect();
            SeedRuns { runs, directional_time }
        })
        .collect()
}

fn directional(seeds: &[SeedRuns]) -> Verdict {
    let med = |i: usize, f: fn(&MetricBundle) -> f64| median(&seeds.iter().map(|s| f(&s.runs[i].report.best_dev)).collect::<Vec<_>>());
    let (wa, ua, f1): (fn(&MetricBundle) -> f64, fn(&MetricBundle) -> f64, fn(&MetricBundle) -> f64) = (|m| m.wa, |m| m.ua, |m| m.macro_f1);
    let (wa_p, wa_u, ua_p, ua_u) = (med(CE_PRIOR, wa), med(CE_UNIFORM, wa), med(CE_PRIOR, ua), med(CE_UNIFORM, ua));
    let (f1_focal, f1_ce) = (med(FOCAL_PRIOR, f1), med(CE_PRIOR, f1));
    let time: Duration = seeds.iter().map(|s| s.directional_time).sum();
    let a = wa_p > wa_u && ua_p < ua_u;
    let b = f1_focal >= f1_ce;
    let t = time < Duration::from_secs(15 * 60);
    verdict(
        5,
        "directional reproduction",
        a && b && t,
        format!(
            "median over {SEEDS} seeds: (a) {} WA prior {:.2} vs uniform {:.2}, UA prior {:.2} vs uniform {:.2}; \
             (b) {} Macro-F1 focal+prior {:.2} vs CE+prior {:.2}; runtime {:.0}s < 900s",
            if a { "ok" } else { "NOT MET" },
            100.0 * wa_p,
            100.0 * wa_u,
            100.0 * ua_p,
            100.0 * ua_u,
            if b { "ok" } else { "NOT MET" },
            100.0 * f1_focal,
            100.0 * f1_ce,
            time.as_secs_f64()
        ),
    )
}

fn tie_fixtures_hold() -> bool {
    let rec = |m: usize, p: &[f32]| vec![PredictionRecord::new("u", format!("m{m}"), p.to_vec(), None).unwrap()];
    let two_two = vec![rec(0, &[0.5, 0.1, 0.4]), rec(1, &[0.5, 0.2, 0.3]), rec(2, &[0.3, 0.1, 0.6]), rec(3, &[0.1, 0.1, 0.8])];
    let symmetric = vec![rec(0, &[0.5, 0.25, 0.25]), rec(1, &[0.25, 0.5, 0.25]), rec(2, &[0.25, 0.25, 0.5])];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    [(two_two, 2), (symmetric, 0)].into_iter().all(|(mut fx, want)| {
        (0..24).all(|_| {
            fx.shuffle(&mut rng);
            majority_vote(&fx, VoteMode::Hard).unwrap()[0].label == want
        })
    })
}

fn ensemble(seeds: &[SeedRuns]) -> Verdict {
    let mut ens = Vec::new();
    let mut best = Vec::new();
    let mut invariant = true;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for s in seeds {
        let mut preds: Vec<Vec<PredictionRecord>> = s.runs.iter().map(|r| r.predictions.clone()).collect();
        let (report, results) = ensemble_gain_report(&preds, VoteMode::Hard).unwrap();
        ens.push(report.ensemble().macro_f1);
        best.push(report.best_single().0);
        for _ in 0..5 {
            preds.shuffle(&mut rng);
            for p in &mut preds {
                p.shuffle(&mut rng);
            }
            invariant &= majority_vote(&preds, VoteMode::Hard).unwrap() == results;
        }
    }
    let (m_ens, m_best) = (median(&ens), median(&best));
    let ties = tie_fixtures_hold();
    verdict(
        6,
        "ensemble",
        m_ens >= m_best - 0.005 && invariant && ties,
        format!(
            "median Macro-F1 ensemble {:.2} vs best single {:.2} (margin -0.50); per seed ensemble {:?}, best {:?}; \
             order-invariant {invariant}; tie fixtures {ties}",
            100.0 * m_ens,
            100.0 * m_best,
            ens.iter().map(|x| format!("{:.2}", 100.0 * x)).collect::<Vec<_>>(),
            best.iter().map(|x| format!("{:.2}", 100.0 * x)).collect::<Vec<_>>(),
        ),
    )
}

fn determinism(root: &Path, seeds: &[SeedRuns]) -> Verdict {
    // Retrain one member of seed 0 into a fresh directory.
    let cfg = ExperimentConfig::default_ensemble().with_seed(0);
    let data = ExperimentData::load(&cfg).unwrap();
    let member = &cfg.models[FOCAL_PRIOR];
    let again = train_member(member, &data, Some(&root.join("again"))).unwrap();
    let first = &seeds[0].runs[FOCAL_PRIOR];
    let bits = |r: &ModelRun| r.report.loss_trace().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let traces = bits(&again) == bits(first);
    let ck_a = std::fs::read(root.join("seed0").join(&member.tag).join(CHECKPOINT_FILE)).unwrap();
    let ck_b = std::fs::read(root.join("again").join(&member.tag).join(CHECKPOINT_FILE)).unwrap();
    let checkpoints = ck_a == ck_b;

    let loaded = Model::<f32>::load(&root.join("seed0").join(&member.tag).join(CHECKPOINT_FILE)).unwrap();
    let (records, metrics) = evaluate(&loaded, &data.dev[&member.audio_source], 64, &member.tag).unwrap();
    let reload = metrics.as_ref() == Some(&first.report.best_dev) && records == first.predictions;

    // Feature files and manifests: write, read back, rewrite.
    let spec = SyntheticSpec { n_train: 40, n_dev: 16, min_len: 2, max_len: 6, seed: 5, ..SyntheticSpec::default() };
    let dir = root.join("corpus");
    let generated = generate_synthetic(&spec, &dir).unwrap();
    let memory = spec.generate().unwrap();
    let mut files = true;
    for (split, mem) in [("train", &memory.train), ("dev", &memory.dev)] {
        for src in ["whisper", "wavlm", "hubert"] {
            let path = generated.manifest(split, src).unwrap();
            let manifest = load_manifest(path, &spec.class_names).unwrap();
            let loaded = manifest.load_all().unwrap();
            files &= loaded == mem.by_source[src];
            let copy = dir.join("copy.tsv");
            write_manifest(&copy, &manifest.entries, &spec.class_names, Some((loaded[0].audio_dim(), spec.text_dim))).unwrap();
            files &= std::fs::read(&copy).unwrap() == std::fs::read(path).unwrap();
        }
    }
    verdict(
        7,
        "determinism and persistence",
        traces && checkpoints && reload && files,
        format!(
            "same-seed loss trace bit-identical {traces}; checkpoint bytes identical {checkpoints} ({} bytes); \
             reload reproduces dev metrics and predictions {reload}; feature/manifest round trip exact {files}",
            ck_a.len()
        ),
    )
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let mut verdicts = vec![gradients(), loss_identities(), metric_oracle(), text_metrics()];
    let start = Instant::now();
    let seeds = train_seeds(root.path());
    eprintln!("trained {} models in {:.0}s", seeds.len() * seeds[0].runs.len(), start.elapsed().as_secs_f64());
    verdicts.push(directional(&seeds));
    verdicts.push(ensemble(&seeds));
    verdicts.push(determinism(root.path(), &seeds));

    let failed: Vec<String> = verdicts.iter().filter(|v| !v.pass).map(|v| format!("[{}] {}", v.id, v.name)).collect();
    println!("acceptance: {}/{} criteria pass", verdicts.len() - failed.len(), verdicts.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
