//! Independent reference implementations shared by the integration tests.
//! None of them call into the library code they check.

#![allow(dead_code)]

use std::collections::HashMap;

use imbser::data::Utterance;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub mod grad_suite;

/// `(macro_f1, wa, ua)` straight from the definitions, one pass per class.
pub fn brute_force_metrics(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> (f64, f64, f64) {
    let n = y_true.len();
    let mut f1_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut present = 0usize;
    for c in 0..n_classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fneg = 0usize;
        for i in 0..n {
            match (y_true[i] == c, y_pred[i] == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fneg += 1,
                (false, false) => {}
            }
        }
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
        f1_sum += if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        if tp + fneg > 0 {
            present += 1;
            recall_sum += recall;
        }
    }
    let correct = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
    (f1_sum / n_classes as f64, recall_sum / present as f64, correct as f64 / n as f64)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Vec<String>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and hypothesis/reference n-gram totals summed over the corpus.
fn corpus_ngram_stats(refs: &[Vec<String>], hyps: &[Vec<String>], n: usize) -> (usize, usize, usize) {
    let (mut matched, mut hyp_total, mut ref_total) = (0, 0, 0);
    for (r, h) in refs.iter().zip(hyps) {
        let rc = ngram_counts(r, n);
        let hc = ngram_counts(h, n);
        hyp_total += hc.values().sum::<usize>();
        ref_total += rc.values().sum::<usize>();
        matched += hc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
    }
    (matched, hyp_total, ref_total)
}

/// Corpus BLEU, orders 1..=4, add-one smoothing on orders >= 2.
pub fn oracle_bleu(refs: &[Vec<String>], hyps: &[Vec<String>]) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (m, t, _) = corpus_ngram_stats(refs, hyps, n);
        let p = if n == 1 { m as f64 / t as f64 } else { (m as f64 + 1.0) / (t as f64 + 1.0) };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln() / 4.0;
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_sum.exp()
}

/// Corpus GLEU: min of pooled n-gram precision and recall over orders 1..=4.
pub fn oracle_gleu(refs: &[Vec<String>], hyps: &[Vec<String>]) -> f64 {
    let (mut m, mut t, mut r) = (0, 0, 0);
    for n in 1..=4 {
        let s = corpus_ngram_stats(refs, hyps, n);
        m += s.0;
        t += s.1;
        r += s.2;
    }
    if t == 0 || r == 0 {
        return 0.0;
    }
    (m as f64 / t as f64).min(m as f64 / r as f64)
}

/// Levenshtein distance by full dynamic-programming table.
pub fn oracle_edit_distance(a: &[String], b: &[String]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn pooled(u: &Utterance) -> Vec<f64> {
    let mut out = Vec::new();
    for t in [&u.audio, &u.text] {
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        out.extend((0..cols).map(|c| (0..rows).map(|r| t.data()[r * cols + c] as f64).sum::<f64>() / rows as f64));
    }
    out
}

/// Dev accuracy of a nearest-centroid classifier on mean-pooled features.
pub fn centroid_probe_accuracy(train: &[Utterance], dev: &[Utterance], n_classes: usize) -> f64 {
    let dim = pooled(&train[0]).len();
    let mut sums = vec![vec![0.0; dim]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for u in train {
        let c = u.label.unwrap();
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(pooled(u)) {
            *s += x;
        }
    }
    let correct = dev
        .iter()
        .filter(|u| {
            let x = pooled(u);
            let mut best = (f64::INFINITY, 0);
            for c in 0..n_classes {
                let d: f64 = sums[c].iter().zip(&x).map(|(s, xi)| (s / counts[c] as f64 - xi).powi(2)).sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            Some(best.1) == u.label
        })
        .count();
    correct as f64 / dev.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Small random reference/hypothesis corpus; hypotheses are noisy copies so
/// higher-order n-gram matches occur.
pub fn random_corpus(rng: &mut ChaCha8Rng) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let vocab = rng.random_range(2..8);
    let word = |rng: &mut ChaCha8Rng| format!("w{}", rng.random_range(0..vocab));
    let n = rng.random_range(1..6);
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    for _ in 0..n {
        let r: Vec<String> = (0..rng.random_range(1..15)).map(|_| word(rng)).collect();
        let mut h = Vec::new();
        for w in &r {
            if rng.random_bool(0.85) {
                h.push(if rng.random_bool(0.2) { word(rng) } else { w.clone() });
            }
        }
        for _ in 0..rng.random_range(0..3) {
            h.push(word(rng));
        }
        refs.push(r);
        hyps.push(if h.is_empty() { vec![word(rng)] } else { h });
    }
    (refs, hyps)
}

