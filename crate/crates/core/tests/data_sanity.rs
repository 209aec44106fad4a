//! Generator behaviour at the extremes of the separability knob, and on-disk
//! determinism.

mod common;

use std::collections::BTreeMap;
use std::path::Path;

use common::centroid_probe_accuracy;
use imbser::data::{count_labels, generate_synthetic, load_manifest, SyntheticSpec};
use imbser::metrics::MetricBundle;
use imbser::model::{Model, ModelConfig};
use imbser::training::{evaluate, train, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(separability: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        separability,
        n_train: 800,
        n_dev: 400,
        min_len: 3,
        max_len: 8,
        seed,
        ..SyntheticSpec::default()
    }
}

#[test]
fn large_separability_is_linearly_separable() {
    let c = spec(5.0, 1).generate().unwrap();
    for src in ["whisper", "wavlm", "hubert"] {
        let acc = centroid_probe_accuracy(&c.train.by_source[src], &c.dev.by_source[src], 8);
        assert!(acc > 0.95, "{src}: centroid UA {acc}");
    }
}

#[test]
fn zero_separability_trains_to_chance() {
    let c = spec(0.0, 2).generate().unwrap();
    let (tr, dv) = (&c.train.by_source["whisper"], &c.dev.by_source["whisper"]);
    let mut model = Model::<f32>::new(ModelConfig { hidden: 8, n_transformer_layers: 1, ..ModelConfig::new(32, 24) }).unwrap();
    let cfg = TrainConfig { batch_size: 32, initial_lr: 3e-3, max_epochs: 3, ..TrainConfig::default() };
    train(&mut model, tr, dv, &cfg, None).unwrap();

    // Score on a held-out corpus so dev-based epoch selection cannot leak.
    let held_out = spec(0.0, 3).generate().unwrap().dev.by_source.remove("whisper").unwrap();
    let (records, metrics) = evaluate(&model, &held_out, 256, "s0").unwrap();
    let observed = metrics.unwrap().macro_f1;

    // Null distribution: the same predictions against permuted references.
    let y_pred: Vec<usize> = records.iter().map(|r| r.label).collect();
    let mut y_true: Vec<usize> = records.iter().map(|r| r.truth.unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let null: Vec<f64> = (0..999)
        .map(|_| {
            y_true.shuffle(&mut rng);
            MetricBundle::from_labels(&y_true, &y_pred, 8).unwrap().macro_f1
        })
        .collect();
    let p_value = (1 + null.iter().filter(|&&x| x >= observed).count()) as f64 / 1000.0;
    assert!(p_value > 0.01, "Macro-F1 {observed} beats chance, p = {p_value}");
    let probe = centroid_probe_accuracy(tr, &held_out, 8);
    assert!(probe < 0.3, "centroid probe {probe} at s = 0");
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn generation_is_byte_identical_and_counts_survive_the_manifest() {
    let s = SyntheticSpec { n_train: 60, n_dev: 24, min_len: 2, max_len: 5, ..SyntheticSpec::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ga = generate_synthetic(&s, a.path()).unwrap();
    generate_synthetic(&s, b.path()).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert_eq!(ta.len(), 3 * (60 + 24) + (60 + 24) + 6);
    // Manifests embed absolute paths, so compare features byte for byte and
    // manifests after stripping the root.
    for (name, bytes) in &ta {
        let other = &tb[name];
        if name.ends_with(".tsv") {
            let strip = |x: &[u8], root: &Path| String::from_utf8(x.to_vec()).unwrap().replace(&root.display().to_string(), "<root>");
            assert_eq!(strip(bytes, a.path()), strip(other, b.path()), "{name}");
        } else {
            assert_eq!(bytes, other, "{name}");
        }
    }
    let c = generate_synthetic(&SyntheticSpec { seed: 1, ..s.clone() }, b.path()).unwrap();
    assert_ne!(read_tree(b.path()), tb, "a different seed must change the files");
    drop(c);

    for split in ["train", "dev"] {
        let m = load_manifest(ga.manifest(split, "hubert").unwrap(), &s.class_names).unwrap();
        let utts = m.load_all().unwrap();
        assert_eq!(&count_labels(&utts, 8).unwrap(), &ga.dataset.split(split).unwrap().counts);
    }
}
