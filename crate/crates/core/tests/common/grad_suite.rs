//! Finite-difference checks of every differentiable op and of the full model,
//! returning the worst relative error per check so callers pick the verdict.

use imbser::data::{Batch, Utterance};
use imbser::losses::{LossSpec, WeightScheme};
use imbser::model::{fuse_decisions, fuse_early, fuse_low_rank, fuse_tensor, FusionKind, Model, ModelConfig};
use imbser::nn::{grad_check, Graph, Segment, Tensor, Var};
use imbser::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
pub const SEEDS: u64 = 10;

/// Name of the check and its worst relative error.
pub type Check = (String, f64);

pub fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum with fixed random coefficients so every output element matters.
pub fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = g.constant(rand_t(&mut rng, &shape))?;
    let y = g.mul(x, w)?;
    g.mean(y)
}

fn run(out: &mut Vec<Check>, name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let r = grad_check(inputs, f).unwrap();
    match out.iter_mut().find(|(n, _)| n == name) {
        Some((_, worst)) => *worst = worst.max(r.max_rel_error),
        None => out.push((name.to_string(), r.max_rel_error)),
    }
}

pub fn elementwise_and_linear_ops() -> Vec<Check> {
    let mut out = Vec::new();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_t(&mut rng, &[3, 4]);
        let b = rand_t(&mut rng, &[4, 2]);
        let c = rand_t(&mut rng, &[3, 4]);
        let bias = rand_t(&mut rng, &[4]);
        run(&mut out, "matmul", &[a.clone(), b.clone()], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, seed)
        });
        run(&mut out, "add_bias", &[a.clone(), bias.clone()], |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            project(g, y, seed)
        });
        run(&mut out, "add/mul/scale", &[a.clone(), c.clone()], |g, v| {
            let s = g.add(v[0], v[1])?;
            let m = g.mul(s, v[0])?;
            let y = g.scale(m, -1.7)?;
            project(g, y, seed)
        });
        // Keep ReLU inputs away from the kink.
        let away = a.map(|x| if x.abs() < 0.05 { x + 0.2 } else { x });
        run(&mut out, "relu", &[away], |g, v| {
            let y = g.relu(v[0])?;
            project(g, y, seed)
        });
        run(&mut out, "softmax", &[a.clone()], |g, v| {
            let y = g.softmax(v[0], 1)?;
            project(g, y, seed)
        });
        let gamma = rand_t(&mut rng, &[4]);
        run(&mut out, "layer_norm", &[a.clone(), gamma, bias.clone()], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, y, seed)
        });
        let d = rand_t(&mut rng, &[3, 2]);
        run(&mut out, "concat_cols", &[a.clone(), d.clone()], |g, v| {
            let y = g.concat_cols(v[0], v[1])?;
            project(g, y, seed)
        });
        run(&mut out, "append_ones/outer", &[a.clone(), d.clone()], |g, v| {
            let x = g.append_ones(v[0])?;
            let y = g.outer(x, v[1])?;
            project(g, y, seed)
        });
        let wide = rand_t(&mut rng, &[3, 6]);
        run(&mut out, "sum_groups", &[wide], |g, v| {
            let y = g.sum_groups(v[0], 3)?;
            project(g, y, seed)
        });
    }
    out
}

pub fn sequence_ops() -> Vec<Check> {
    let mut out = Vec::new();
    let segments = [Segment { start: 0, len: 2 }, Segment { start: 2, len: 1 }, Segment { start: 3, len: 3 }];
    let key_mask = [true, true, true, true, false, true];
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_t(&mut rng, &[6, 3]);
        run(&mut out, "masked_mean_pool", &[x.clone()], |g, v| {
            let y = g.masked_mean_pool(v[0], &key_mask)?;
            project(g, y, seed)
        });
        run(&mut out, "segment_mean", &[x.clone()], |g, v| {
            let y = g.segment_mean(v[0], &segments)?;
            project(g, y, seed)
        });
        let (q, k, val) = (rand_t(&mut rng, &[6, 3]), rand_t(&mut rng, &[6, 3]), rand_t(&mut rng, &[6, 3]));
        run(&mut out, "attention", &[q, k, val], |g, v| {
            let y = g.attention(v[0], v[1], v[2], &segments, Some(&key_mask))?;
            project(g, y, seed)
        });
    }
    out
}

pub fn loss_ops() -> Vec<Check> {
    let mut out = Vec::new();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let logits = rand_t(&mut rng, &[5, 4]);
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
        let weights: Vec<f64> = (0..5).map(|_| rng.random_range(0.5..3.0)).collect();
        for gamma in [0.0, 2.0, 2.5, 3.0] {
            run(&mut out, "class_loss", &[logits.clone()], |g, v| {
                let p = g.softmax(v[0], 1)?;
                g.class_loss(p, &labels, &weights, gamma, 1e-7)
            });
        }
        let counts = [40, 10, 3, 7];
        for spec in [LossSpec::ce(WeightScheme::Prior), LossSpec::focal(2.0, WeightScheme::Uniform)] {
            let loss = spec.resolve(&counts).unwrap();
            run(&mut out, "graph_loss", &[logits.clone()], |g, v| {
                let p = g.softmax(v[0], 1)?;
                loss.graph_loss(g, p, &labels)
            });
        }
    }
    out
}

pub fn fusion_ops() -> Vec<Check> {
    let mut out = Vec::new();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let ha = rand_t(&mut rng, &[2, 3]);
        let ht = rand_t(&mut rng, &[2, 2]);
        run(&mut out, "fuse_early", &[ha.clone(), ht.clone()], |g, v| {
            let y = fuse_early(g, v[0], v[1])?;
            project(g, y, seed)
        });
        run(&mut out, "fuse_tensor", &[ha.clone(), ht.clone()], |g, v| {
            let y = fuse_tensor(g, v[0], v[1])?;
            project(g, y, seed)
        });
        let (wa, wt, b) = (rand_t(&mut rng, &[4, 3 * 5]), rand_t(&mut rng, &[3, 3 * 5]), rand_t(&mut rng, &[5]));
        run(&mut out, "fuse_low_rank", &[ha.clone(), ht.clone(), wa, wt, b], |g, v| {
            let y = fuse_low_rank(g, v[0], v[1], v[2], v[3], v[4], 3)?;
            project(g, y, seed)
        });
        let (p1, p2) = (rand_t(&mut rng, &[2, 4]), rand_t(&mut rng, &[2, 4]));
        run(&mut out, "fuse_decisions", &[p1, p2], |g, v| {
            let a = g.softmax(v[0], 1)?;
            let b = g.softmax(v[1], 1)?;
            let y = fuse_decisions(g, &[a, b])?;
            project(g, y, seed)
        });
    }
    out
}

fn tiny_batch(rng: &mut ChaCha8Rng, audio_dim: usize, text_dim: usize) -> Batch {
    let utts: Vec<Utterance> = (0..3)
        .map(|i| {
            let ta = rng.random_range(1..=6);
            let tt = rng.random_range(1..=6);
            Utterance::new(format!("u{i}"), rand_t(rng, &[ta, audio_dim]).cast(), rand_t(rng, &[tt, text_dim]).cast(), Some(i % 4))
                .unwrap()
        })
        .collect();
    Batch::from_utterances(&utts.iter().collect::<Vec<_>>()).unwrap()
}

/// Whole-model gradient in f64 with every parameter perturbed; one entry per
/// seed, fusion kinds cycling across seeds.
pub fn full_model() -> Vec<Check> {
    let kinds = [
        FusionKind::Early,
        FusionKind::Late,
        FusionKind::EarlyPlusLate,
        FusionKind::Tensor,
        FusionKind::LowRankTensor,
    ];
    (0..SEEDS)
        .map(|seed| {
            let fusion = kinds[seed as usize % kinds.len()];
            let cfg = ModelConfig {
                hidden: 8,
                n_transformer_layers: 2,
                n_classes: 4,
                fusion,
                lmf_rank: 2,
                seed,
                ..ModelConfig::new(3, 2)
            };
            let model = Model::<f64>::new(cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let batch = tiny_batch(&mut rng, 3, 2);
            let labels = batch.labels().unwrap();
            let loss = LossSpec::focal(2.0, WeightScheme::Prior).resolve(&[5, 3, 2, 1]).unwrap();
            // Zero-initialised biases can put a ReLU input exactly on its kink, where
            // central differences see half a slope; evaluate at a jittered point.
            let params: Vec<Tensor<f64>> = model
                .params()
                .tensors()
                .map(|t| {
                    let jitter = rand_t(&mut rng, t.shape());
                    Tensor::new(t.shape().to_vec(), t.data().iter().zip(jitter.data()).map(|(v, j)| v + 0.05 * j).collect())
                        .unwrap()
                })
                .collect();
            let r = grad_check(&params, |g, p| {
                let probs = model.forward_graph(g, p, &batch)?;
                loss.graph_loss(g, probs, &labels)
            })
            .unwrap();
            let at = model.params().name(r.worst.0);
            (format!("{fusion} seed {seed} (worst at {at})"), r.max_rel_error)
        })
        .collect()
}

/// A backward pass that returns `x` instead of `2x` for `x²`.
pub fn wrong_backward_error() -> f64 {
    let x = Tensor::new(vec![3], vec![0.3, -0.4, 0.9]).unwrap();
    grad_check(&[x], |g, v| {
        let value = g.value(v[0]).map(|a| a * a);
        let y = g.custom(
            &[v[0]],
            value,
            Box::new(|gy, ins| {
                vec![Tensor::new(ins[0].shape().to_vec(), ins[0].data().iter().zip(gy.data()).map(|(a, b)| a * b).collect()).unwrap()]
            }),
        )?;
        project(g, y, 0)
    })
    .unwrap()
    .max_rel_error
}
