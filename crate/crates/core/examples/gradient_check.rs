//! Compares reverse-mode gradients with central differences, first for a
//! single attention op and then for a whole tiny model under the focal loss.
//!
//! cargo run --release --example gradient_check

use imbser::data::{Batch, Utterance};
use imbser::losses::{LossSpec, WeightScheme};
use imbser::model::{FusionKind, Model, ModelConfig};
use imbser::nn::{grad_check, Segment, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> imbser::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // Two packed sequences of lengths 2 and 3.
    let segments = [Segment { start: 0, len: 2 }, Segment { start: 2, len: 3 }];
    let qkv: Vec<Tensor<f64>> = (0..3).map(|_| random(&mut rng, &[5, 4])).collect();
    let r = grad_check(&qkv, |g, v| {
        let y = g.attention(v[0], v[1], v[2], &segments, None)?;
        let y = g.mul(y, y)?;
        g.mean(y)
    })?;
    println!("attention        max rel error {:.2e}", r.max_rel_error);

    for fusion in [FusionKind::Early, FusionKind::Late, FusionKind::EarlyPlusLate, FusionKind::Tensor, FusionKind::LowRankTensor] {
        let cfg = ModelConfig { hidden: 8, n_transformer_layers: 2, n_classes: 4, fusion, lmf_rank: 2, ..ModelConfig::new(3, 2) };
        let model = Model::<f64>::new(cfg)?;
        let utts: Vec<Utterance> = (0..3)
            .map(|i| {
                let (ta, tt) = (rng.random_range(1..=6), rng.random_range(1..=6));
                Utterance::new(format!("u{i}"), random(&mut rng, &[ta, 3]).cast(), random(&mut rng, &[tt, 2]).cast(), Some(i))
            })
            .collect::<imbser::Result<_>>()?;
        let batch = Batch::from_utterances(&utts.iter().collect::<Vec<_>>())?;
        let labels = batch.labels()?;
        let loss = LossSpec::focal(2.0, WeightScheme::Prior).resolve(&[5, 3, 2, 1])?;
        // Nudge parameters off zero so no ReLU sits exactly on its kink.
        let params: Vec<Tensor<f64>> = model
            .params()
            .tensors()
            .map(|t| {
                let j = random(&mut rng, t.shape());
                Tensor::new(t.shape().to_vec(), t.data().iter().zip(j.data()).map(|(a, b)| a + 0.05 * b).collect()).unwrap()
            })
            .collect();
        let r = grad_check(&params, |g, p| {
            let probs = model.forward_graph(g, p, &batch)?;
            loss.graph_loss(g, probs, &labels)
        })?;
        println!("{:<16} max rel error {:.2e} over {} parameters", fusion.to_string(), r.max_rel_error, model.param_count());
    }
    Ok(())
}
