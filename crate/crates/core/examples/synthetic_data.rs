//! Writes a synthetic corpus to disk, reads it back through the manifests and
//! shows how the separability knob controls a nearest-centroid probe.
//!
//! cargo run --release --example synthetic_data [out_dir]

use std::path::PathBuf;

use imbser::data::{count_labels, generate_synthetic, load_manifest, SyntheticSpec, Utterance};

/// Mean-pooled audio and text features, concatenated.
fn pooled(u: &Utterance) -> Vec<f64> {
    let mean = |t: &imbser::nn::Tensor<f32>| {
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        (0..cols).map(|c| (0..rows).map(|r| t.data()[r * cols + c] as f64).sum::<f64>() / rows as f64).collect::<Vec<_>>()
    };
    let mut v = mean(&u.audio);
    v.extend(mean(&u.text));
    v
}

fn centroid_accuracy(train: &[Utterance], dev: &[Utterance], n_classes: usize) -> f64 {
    let dim = pooled(&train[0]).len();
    let mut sums = vec![vec![0.0; dim]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for u in train {
        let c = u.label.unwrap();
        counts[c] += 1;
        sums[c].iter_mut().zip(pooled(u)).for_each(|(s, x)| *s += x);
    }
    let centroids: Vec<Vec<f64>> = sums.iter().zip(&counts).map(|(s, &n)| s.iter().map(|x| x / n as f64).collect()).collect();
    let correct = dev
        .iter()
        .filter(|u| {
            let x = pooled(u);
            let dist = |c: &Vec<f64>| c.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..n_classes).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            Some(best) == u.label
        })
        .count();
    correct as f64 / dev.len() as f64
}

fn main() -> imbser::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("imbser-synthetic"));
    let spec = SyntheticSpec::default();
    let corpus = generate_synthetic(&spec, &out)?;
    print!("{}", corpus.dataset);

    let manifest = load_manifest(corpus.manifest("train", "whisper").unwrap(), &spec.class_names)?;
    let train = manifest.load_all()?;
    println!("\nreloaded {} training utterances from {}", train.len(), out.display());
    println!("class counts {:?}", count_labels(&train, spec.n_classes())?);

    println!("\nseparability  centroid accuracy (whisper audio + text)");
    for s in [0.0, 0.12, 0.3, 1.0, 5.0] {
        let small = SyntheticSpec { separability: s, n_train: 1000, n_dev: 400, ..SyntheticSpec::default() };
        let c = small.generate()?;
        let acc = centroid_accuracy(&c.train.by_source["whisper"], &c.dev.by_source["whisper"], small.n_classes());
        println!("{s:>12.2}  {:>8.2}%", 100.0 * acc);
    }
    Ok(())
}
