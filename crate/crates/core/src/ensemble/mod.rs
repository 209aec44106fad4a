//! Majority voting over the predictions of independently trained models.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricBundle;

/// Tolerance on `Σ probs = 1` when validating records read from disk.
pub const SIMPLEX_TOL: f64 = 1e-4;

/// One model's output for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub model: String,
    pub probs: Vec<f32>,
    /// Argmax of `probs`, ties to the lowest class index.
    pub label: usize,
    /// Reference label when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<usize>,
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl PredictionRecord {
    pub fn new(id: impl Into<String>, model: impl Into<String>, probs: Vec<f32>, truth: Option<usize>) -> Result<Self> {
        let r = Self {
            id: id.into(),
            model: model.into(),
            label: argmax(&probs),
            probs,
            truth,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |why: String| Err(Error::InvalidArgument(format!("record {}/{}: {why}", self.model, self.id)));
        if self.probs.is_empty() {
            return fail("empty probability vector".into());
        }
        if self.probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return fail("probabilities must be finite and non-negative".into());
        }
        let s: f64 = self.probs.iter().map(|&p| p as f64).sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return fail(format!("probabilities sum to {s}"));
        }
        if self.label != argmax(&self.probs) {
            return fail(format!("label {} is not the argmax", self.label));
        }
        if self.truth.is_some_and(|t| t >= self.probs.len()) {
            return fail("reference label out of range".into());
        }
        Ok(())
    }
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    crate::data::write_atomic(path, out.as_bytes())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fail = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {reason}", i + 1),
        };
        let r: PredictionRecord = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        r.validate().map_err(|e| fail(e.to_string()))?;
        records.push(r);
    }
    if records.is_empty() {
        return Err(Error::Empty(format!("{} contains no predictions", path.display())));
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VoteMode {
    /// One vote per model for its argmax class.
    #[default]
    Hard,
    /// Argmax of the mean probability vector.
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub id: String,
    pub label: usize,
    /// Votes per class; sums to the number of models.
    pub tally: Vec<usize>,
    /// Whether several classes shared the top vote count.
    pub tie: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<usize>,
}

/// Order-independent sum: values are added in ascending order.
fn stable_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.into_iter().sum()
}

/// Combines per-model record lists covering the same utterance ids. Results
/// are ordered by id. Hard-vote ties go to the tied class with the highest
/// summed probability, then to the lowest class index.
pub fn majority_vote(models: &[Vec<PredictionRecord>], mode: VoteMode) -> Result<Vec<EnsembleResult>> {
    let first = models.first().ok_or_else(|| Error::Empty("no models to ensemble".into()))?;
    let c = first
        .first()
        .ok_or_else(|| Error::Empty("model has no predictions".into()))?
        .probs
        .len();
    let mut by_id: BTreeMap<&str, Vec<&PredictionRecord>> = BTreeMap::new();
    let mut id_sets: Vec<BTreeSet<&str>> = Vec::with_capacity(models.len());
    for records in models {
        let mut ids = BTreeSet::new();
        for r in records {
            if r.probs.len() != c {
                return Err(Error::shape(
                    "majority_vote",
                    format!("record {}/{} has {} classes, expected {c}", r.model, r.id, r.probs.len()),
                ));
            }
            if !ids.insert(r.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate id {} in model {}", r.id, r.model)));
            }
            by_id.entry(&r.id).or_default().push(r);
        }
        id_sets.push(ids);
    }
    let union: BTreeSet<&str> = by_id.keys().copied().collect();
    let common: BTreeSet<&str> = union
        .iter()
        .copied()
        .filter(|id| id_sets.iter().all(|s| s.contains(id)))
        .collect();
    if common.len() != union.len() {
        return Err(Error::IdMismatch(
            union.difference(&common).map(|s| s.to_string()).collect(),
        ));
    }

    let mut results = Vec::with_capacity(by_id.len());
    for (id, recs) in by_id {
        let mut tally = vec![0usize; c];
        for r in &recs {
            tally[r.label] += 1;
        }
        let summed = |j: usize| stable_sum(recs.iter().map(|r| r.probs[j] as f64).collect());
        let top = *tally.iter().max().unwrap();
        let tied: Vec<usize> = (0..c).filter(|&j| tally[j] == top).collect();
        let tie = tied.len() > 1;
        let label = match mode {
            VoteMode::Hard if tie => {
                let sums: Vec<f64> = tied.iter().map(|&j| summed(j)).collect();
                let label = tied[argmax(&sums)];
                log::debug!("vote tie on {id} among {tied:?}; summed probabilities {sums:?}; chose {label}");
                label
            }
            VoteMode::Hard => tied[0],
            VoteMode::Soft => argmax(&(0..c).map(summed).collect::<Vec<_>>()),
        };
        let truth = recs.iter().find_map(|r| r.truth);
        results.push(EnsembleResult {
            id: id.to_string(),
            label,
            tally,
            tie,
            truth,
        });
    }
    Ok(results)
}

/// Number of utterances whose hard vote needed the tie-break rule.
pub fn tie_break_count(results: &[EnsembleResult]) -> usize {
    results.iter().filter(|r| r.tie).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub name: String,
    pub macro_f1: f64,
    pub wa: f64,
    pub ua: f64,
}

/// Per-model and ensemble metrics on labelled predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    /// One row per model, then the ensemble row.
    pub rows: Vec<GainRow>,
    pub ties: usize,
    pub mode: VoteMode,
}

impl GainReport {
    pub fn ensemble(&self) -> &GainRow {
        self.rows.last().unwrap()
    }

    pub fn models(&self) -> &[GainRow] {
        &self.rows[..self.rows.len() - 1]
    }

    /// Best single-model value of each metric (Macro-F1, WA, UA).
    pub fn best_single(&self) -> (f64, f64, f64) {
        let best = |f: fn(&GainRow) -> f64| self.models().iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        (best(|r| r.macro_f1), best(|r| r.wa), best(|r| r.ua))
    }
}

fn bundle_for<'a>(pairs: impl Iterator<Item = (Option<usize>, usize, &'a str)>, c: usize) -> Result<MetricBundle> {
    let mut y_true = Vec::new();
    let mut y_pred = Vec::new();
    for (truth, pred, id) in pairs {
        y_true.push(truth.ok_or_else(|| Error::InvalidArgument(format!("utterance {id} has no reference label")))?);
        y_pred.push(pred);
    }
    MetricBundle::from_labels(&y_true, &y_pred, c)
}

/// Votes, then scores every model and the ensemble against the reference
/// labels carried by the records.
pub fn ensemble_gain_report(models: &[Vec<PredictionRecord>], mode: VoteMode) -> Result<(GainReport, Vec<EnsembleResult>)> {
    let results = majority_vote(models, mode)?;
    let c = results[0].tally.len();
    let mut rows = Vec::with_capacity(models.len() + 1);
    for (i, records) in models.iter().enumerate() {
        let m = bundle_for(records.iter().map(|r| (r.truth, r.label, r.id.as_str())), c)?;
        let name = records.first().map(|r| r.model.clone()).unwrap_or_else(|| format!("model{i}"));
        rows.push(GainRow {
            name,
            macro_f1: m.macro_f1,
            wa: m.wa,
            ua: m.ua,
        });
    }
    let m = bundle_for(results.iter().map(|r| (r.truth, r.label, r.id.as_str())), c)?;
    rows.push(GainRow {
        name: "Ensemble".into(),
        macro_f1: m.macro_f1,
        wa: m.wa,
        ua: m.ua,
    });
    Ok((
        GainReport {
            rows,
            ties: tie_break_count(&results),
            mode,
        },
        results,
    ))
}

impl fmt::Display for GainReport {
    /// Percentages with two decimals; the last column is the Macro-F1 change
    /// relative to the best single model.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (best_f1, _, _) = self.best_single();
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(8);
        writeln!(f, "{:<width$} | {:>8} | {:>6} | {:>6} | {:>9}", "Model", "Macro-F1", "WA", "UA", "dMacroF1")?;
        writeln!(f, "{}", "-".repeat(width + 45))?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<width$} | {:>8.2} | {:>6.2} | {:>6.2} | {:>+9.2}",
                r.name,
                100.0 * r.macro_f1,
                100.0 * r.wa,
                100.0 * r.ua,
                100.0 * (r.macro_f1 - best_f1)
            )?;
        }
        writeln!(f, "# vote mode {:?}; {} tie(s) resolved by summed probability", self.mode, self.ties)
    }
}
