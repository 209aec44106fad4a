//! Transcript-quality metrics: word error rate, corpus BLEU and corpus GLEU.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Lowercasing and punctuation stripping before a whitespace split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub lowercase: bool,
    pub strip_punctuation: bool,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_punctuation: true,
        }
    }
}

impl Tokenizer {
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let cleaned: String = text
            .chars()
            .filter(|c| !(self.strip_punctuation && c.is_ascii_punctuation()))
            .collect();
        let cleaned = if self.lowercase { cleaned.to_lowercase() } else { cleaned };
        cleaned.split_whitespace().map(str::to_string).collect()
    }
}

impl fmt::Display for Tokenizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "whitespace split, lowercase={}, strip_punctuation={}",
            self.lowercase, self.strip_punctuation
        )
    }
}

/// Levenshtein distance with unit substitution, insertion and deletion costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Edit distance over reference length; may exceed 1.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("WER reference has no tokens".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

fn check_corpus<T>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Empty("corpus has no sentence pairs".into()));
    }
    if refs.len() != hyps.len() {
        return Err(Error::shape(
            "corpus_metric",
            format!("{} references vs {} hypotheses", refs.len(), hyps.len()),
        ));
    }
    Ok(())
}

/// Total edits over total reference tokens.
pub fn corpus_wer<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    check_corpus(refs, hyps)?;
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if ref_len == 0 {
        return Err(Error::Empty("WER references have no tokens".into()));
    }
    let edits: usize = refs.iter().zip(hyps).map(|(r, h)| edit_distance(r, h)).sum();
    Ok(edits as f64 / ref_len as f64)
}

fn ngram_counts<T: Eq + std::hash::Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Matches clipped by reference counts, hypothesis total, reference total.
fn overlap<T: Eq + std::hash::Hash>(reference: &[T], hypothesis: &[T], n: usize) -> (usize, usize, usize) {
    let r = ngram_counts(reference, n);
    let h = ngram_counts(hypothesis, n);
    let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (
        matched,
        hypothesis.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BleuSmoothing {
    /// `(m + 1) / (t + 1)` for orders 2 and above.
    #[default]
    AddOne,
    None,
}

/// Corpus BLEU in `[0, 1]`: brevity penalty times the geometric mean of
/// clipped n-gram precisions for orders `1..=max_n`.
pub fn bleu<T: Eq + std::hash::Hash>(
    refs: &[Vec<T>],
    hyps: &[Vec<T>],
    max_n: usize,
    smoothing: BleuSmoothing,
) -> Result<f64> {
    check_corpus(refs, hyps)?;
    if max_n == 0 {
        return Err(Error::InvalidArgument("BLEU order must be >= 1".into()));
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (mut m, mut t) = (0usize, 0usize);
        for (r, h) in refs.iter().zip(hyps) {
            let (mm, tt, _) = overlap(r, h, n);
            m += mm;
            t += tt;
        }
        let p = match smoothing {
            BleuSmoothing::AddOne if n >= 2 => (m + 1) as f64 / (t + 1) as f64,
            _ if t == 0 => 0.0,
            _ => m as f64 / t as f64,
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}

/// Corpus GLEU in `[0, 1]`: `min(precision, recall)` of n-gram matches pooled
/// over orders `1..=max_n` and all sentence pairs.
pub fn gleu<T: Eq + std::hash::Hash>(refs: &[Vec<T>], hyps: &[Vec<T>], max_n: usize) -> Result<f64> {
    check_corpus(refs, hyps)?;
    let (mut m, mut th, mut tr) = (0usize, 0usize, 0usize);
    for (r, h) in refs.iter().zip(hyps) {
        for n in 1..=max_n {
            let (mm, a, b) = overlap(r, h, n);
            m += mm;
            th += a;
            tr += b;
        }
    }
    if th == 0 || tr == 0 {
        return Ok(0.0);
    }
    Ok((m as f64 / th as f64).min(m as f64 / tr as f64))
}

/// One line of a transcript-pairs file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptPair {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
}

pub fn read_pairs(path: &Path) -> Result<Vec<TranscriptPair>> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(serde_json::from_str(line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    if pairs.is_empty() {
        return Err(Error::Empty(format!("{} contains no transcript pairs", path.display())));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextMetricReport {
    pub tokenizer: Tokenizer,
    pub smoothing: BleuSmoothing,
    pub n_pairs: usize,
    pub wer: f64,
    pub bleu: f64,
    pub gleu: f64,
}

impl TextMetricReport {
    pub fn compute(pairs: &[TranscriptPair], tokenizer: Tokenizer, smoothing: BleuSmoothing) -> Result<Self> {
        let refs: Vec<Vec<String>> = pairs.iter().map(|p| tokenizer.tokenize(&p.reference)).collect();
        let hyps: Vec<Vec<String>> = pairs.iter().map(|p| tokenizer.tokenize(&p.hypothesis)).collect();
        Ok(Self {
            tokenizer,
            smoothing,
            n_pairs: pairs.len(),
            wer: corpus_wer(&refs, &hyps)?,
            bleu: bleu(&refs, &hyps, MAX_ORDER, smoothing)?,
            gleu: gleu(&refs, &hyps, MAX_ORDER)?,
        })
    }
}

impl fmt::Display for TextMetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# tokenizer: {}", self.tokenizer)?;
        writeln!(f, "# bleu: corpus, orders 1-{MAX_ORDER}, smoothing={:?}", self.smoothing)?;
        writeln!(f, "# pairs: {}", self.n_pairs)?;
        writeln!(f, "{:>8} {:>8} {:>8}", "WER", "BLEU", "GLEU")?;
        writeln!(
            f,
            "{:>8.2} {:>8.2} {:>8.2}",
            100.0 * self.wer,
            100.0 * self.bleu,
            100.0 * self.gleu
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        Tokenizer::default().tokenize(s)
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&toks("a b c d"), &toks("a x c")).unwrap(), 0.5);
        assert_eq!(wer(&toks("a"), &toks("a b c")).unwrap(), 2.0);
        assert_eq!(wer(&toks("x y"), &toks("x y")).unwrap(), 0.0);
        assert!(wer::<String>(&[], &toks("a")).is_err());
    }

    #[test]
    fn tokenizer_normalises() {
        assert_eq!(toks("Hello, World!  it's"), vec!["hello", "world", "its"]);
        let raw = Tokenizer {
            lowercase: false,
            strip_punctuation: false,
        };
        assert_eq!(raw.tokenize("Hi, there"), vec!["Hi,", "there"]);
    }

    #[test]
    fn identical_corpus_scores_perfectly() {
        let c = vec![toks("the cat sat on the mat"), toks("a b")];
        for s in [BleuSmoothing::AddOne, BleuSmoothing::None] {
            assert_eq!(bleu(&c, &c, 4, s).unwrap(), 1.0);
        }
        assert_eq!(gleu(&c, &c, 4).unwrap(), 1.0);
        assert_eq!(corpus_wer(&c, &c).unwrap(), 0.0);
    }

    #[test]
    fn bleu_collapses_without_smoothing() {
        let r = vec![toks("a b c d e")];
        let h = vec![toks("a b x d y")];
        assert_eq!(bleu(&r, &h, 4, BleuSmoothing::None).unwrap(), 0.0);
        assert!(bleu(&r, &h, 4, BleuSmoothing::AddOne).unwrap() > 0.0);
    }

    #[test]
    fn gleu_is_min_of_precision_and_recall() {
        assert_eq!(gleu(&[toks("a b")], &[toks("c d")], 4).unwrap(), 0.0);
        // ref "a b c": 6 n-grams; hyp "a b": 3 n-grams, all matched.
        let g = gleu(&[toks("a b c")], &[toks("a b")], 4).unwrap();
        assert_eq!(g, 0.5);
    }

    #[test]
    fn pairs_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pairs.jsonl");
        fs::write(&p, "").unwrap();
        assert!(matches!(read_pairs(&p), Err(Error::Empty(_))));
        fs::write(&p, "{\"id\":\"1\",\"reference\":\"A b.\",\"hypothesis\":\"a b\"}\n").unwrap();
        let pairs = read_pairs(&p).unwrap();
        let r = TextMetricReport::compute(&pairs, Tokenizer::default(), BleuSmoothing::AddOne).unwrap();
        assert!(r.to_string().contains("    0.00   100.00   100.00"));
        fs::write(&p, "not json\n").unwrap();
        assert!(matches!(read_pairs(&p), Err(Error::Format { .. })));
    }
}
