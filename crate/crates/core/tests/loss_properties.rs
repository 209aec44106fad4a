//! Focal and cross-entropy identities over random batches.

use imbser::losses::{ce_loss, focal_loss, ClassWeights, LossSpec, WeightScheme};
use imbser::nn::{Graph, Tensor};
use proptest::prelude::*;

fn batch() -> impl Strategy<Value = (Vec<f64>, Vec<usize>, Vec<usize>)> {
    (2usize..=8, 1usize..=64).prop_flat_map(|(c, n)| {
        (
            prop::collection::vec(1e-6f64..(1.0 - 1e-6), n),
            prop::collection::vec(0..c, n),
            prop::collection::vec(1usize..5000, c),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn focal_gamma_zero_is_ce_bitwise((p, labels, counts) in batch()) {
        for w in [ClassWeights::uniform(counts.len()), ClassWeights::prior(&counts).unwrap()] {
            let ce = ce_loss(&p, &labels, &w).unwrap();
            let focal = focal_loss(&p, &labels, 0.0, &w).unwrap();
            prop_assert_eq!(ce.to_bits(), focal.to_bits());
            let p32: Vec<f32> = p.iter().map(|&x| x as f32).collect();
            prop_assert_eq!(ce_loss(&p32, &labels, &w).unwrap().to_bits(), focal_loss(&p32, &labels, 0.0, &w).unwrap().to_bits());
        }
    }

    #[test]
    fn focal_below_ce_pointwise((p, labels, counts) in batch(), gamma in 0.01f64..5.0) {
        let w = ClassWeights::prior(&counts).unwrap();
        for (&pi, &yi) in p.iter().zip(&labels) {
            let ce = ce_loss(&[pi], &[yi], &w).unwrap();
            let focal = focal_loss(&[pi], &[yi], gamma, &w).unwrap();
            prop_assert!(focal < ce, "p {pi} gamma {gamma}: focal {focal} ce {ce}");
        }
    }

    #[test]
    fn weights_are_homogeneous((p, labels, counts) in batch(), gamma in 0.0f64..5.0, scale in 0.01f64..100.0) {
        let w = ClassWeights::prior(&counts).unwrap();
        let base = focal_loss(&p, &labels, gamma, &w).unwrap();
        let scaled = focal_loss(&p, &labels, gamma, &w.scaled(scale)).unwrap();
        prop_assert!((scaled - scale * base).abs() <= 1e-12 * (scale * base).abs().max(1e-300));
        let u = ClassWeights::uniform(counts.len());
        let ub = focal_loss(&p, &labels, gamma, &u).unwrap();
        let us = focal_loss(&p, &labels, gamma, &u.scaled(scale)).unwrap();
        prop_assert!((us - scale * ub).abs() <= 1e-12 * (scale * ub).abs().max(1e-300));
    }

    #[test]
    fn graph_loss_matches_eager_loss((p, labels, counts) in batch(), gamma in 0.0f64..5.0) {
        // Two-column probability rows whose first column is the reference probability.
        let c = counts.len();
        let rows: Vec<f64> = p
            .iter()
            .zip(&labels)
            .flat_map(|(&pi, &y)| (0..c).map(move |j| if j == y { pi } else { (1.0 - pi) / (c - 1) as f64 }))
            .collect();
        let probs = Tensor::new(vec![p.len(), c], rows).unwrap();
        for spec in [LossSpec::focal(gamma, WeightScheme::Prior), LossSpec::ce(WeightScheme::Uniform)] {
            let loss = spec.resolve(&counts).unwrap();
            let mut g = Graph::<f64>::new();
            let v = g.constant(probs.clone()).unwrap();
            let l = loss.graph_loss(&mut g, v, &labels).unwrap();
            let eager = loss.evaluate(&p, &labels).unwrap();
            prop_assert!((g.value(l).data()[0] - eager).abs() <= 1e-12 * eager.abs().max(1.0));
        }
    }
}

#[test]
fn prior_weights_follow_counts() {
    let w = ClassWeights::prior(&[25016, 13440, 3053, 3882, 1426, 2443, 2897, 1139]).unwrap();
    assert!((w.weights()[0] - 53296.0 / 25016.0).abs() < 1e-12);
    assert!((w.weights()[7] - 53296.0 / 1139.0).abs() < 1e-12);
    assert!(ClassWeights::prior(&[3, 0]).is_err());
}
