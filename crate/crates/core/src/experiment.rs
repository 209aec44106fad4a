//! Config-driven experiment runner: data loading, per-model training,
//! evaluation and ensembling, with a fixed output layout.
//!
//! ```text
//! <out>/<model-tag>/checkpoint.imbf
//! <out>/<model-tag>/report.jsonl
//! <out>/<model-tag>/summary.json
//! <out>/<model-tag>/predictions.jsonl
//! <out>/ensemble/final_labels.jsonl
//! <out>/ensemble/report.txt
//! ```
//!
//! Every random stream of an experiment is derived from its single `seed`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{default_class_names, derive_seed, load_manifest, GeneratedCorpus, SyntheticSpec, Utterance};
use crate::ensemble::{ensemble_gain_report, read_predictions, write_predictions, EnsembleResult, GainReport, PredictionRecord, VoteMode};
use crate::error::{Error, Result};
use crate::losses::{LossSpec, WeightScheme};
use crate::metrics::MetricBundle;
use crate::model::{Model, ModelConfig};
use crate::training::{evaluate, train, SchedulerConfig, TrainConfig, TrainReport, CHECKPOINT_FILE};

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const ENSEMBLE_DIR: &str = "ensemble";
pub const FINAL_LABELS_FILE: &str = "final_labels.jsonl";
pub const ENSEMBLE_REPORT_FILE: &str = "report.txt";

/// Where an experiment's utterances come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated in memory; the spec's seed is replaced by the experiment seed.
    Synthetic(SyntheticSpec),
    /// A directory holding `<split>.<source>.tsv` manifests.
    Corpus {
        root: PathBuf,
        #[serde(default = "default_class_names")]
        class_names: Vec<String>,
    },
}

/// One ensemble member after merging the shared `[model]`/`[train]` tables
/// with its own overrides.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSpec {
    pub tag: String,
    pub audio_source: String,
    /// Members of one seed group share initialisation and shuffling streams,
    /// so comparisons between them differ only in their configs. Defaults to
    /// the audio source.
    pub seed_group: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ModelSpec {
    pub fn seed_group(&self) -> &str {
        self.seed_group.as_deref().unwrap_or(&self.audio_source)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub data: DataSource,
    pub models: Vec<ModelSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    #[serde(default)]
    out: Option<PathBuf>,
    #[serde(default)]
    seed: u64,
    data: DataSource,
    #[serde(default)]
    model: toml::Table,
    #[serde(default)]
    train: toml::Table,
    models: Vec<RawModel>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    tag: String,
    audio_source: String,
    #[serde(default)]
    seed_group: Option<String>,
    #[serde(default)]
    model: toml::Table,
    #[serde(default)]
    train: toml::Table,
}

/// Overlays `over` on `base`; nested tables merge key by key.
fn merge(base: &toml::Table, over: &toml::Table) -> toml::Table {
    let mut out = base.clone();
    for (k, v) in over {
        let merged = match (out.get(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => toml::Value::Table(merge(b, o)),
            _ => v.clone(),
        };
        out.insert(k.clone(), merged);
    }
    out
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawExperiment = toml::from_str(text)?;
        let models = raw
            .models
            .into_iter()
            .map(|m| {
                let model: ModelConfig = toml::Value::Table(merge(&raw.model, &m.model)).try_into()?;
                let train: TrainConfig = toml::Value::Table(merge(&raw.train, &m.train)).try_into()?;
                Ok(ModelSpec {
                    tag: m.tag,
                    audio_source: m.audio_source,
                    seed_group: m.seed_group,
                    model,
                    train,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = Self {
            out: raw.out,
            seed: raw.seed,
            data: raw.data,
            models,
        }
        .with_seed(raw.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Re-derives every seed from `seed`: the synthetic generator uses it
    /// directly, each seed group its own named streams.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let DataSource::Synthetic(spec) = &mut self.data {
            spec.seed = seed;
        }
        for m in &mut self.models {
            let group = m.seed_group().to_owned();
            m.model.seed = derive_seed(seed, &format!("model/{group}"));
            m.train.seed = derive_seed(seed, &format!("train/{group}"));
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("an experiment needs at least one model".into()));
        }
        let mut tags = BTreeSet::new();
        for m in &self.models {
            if m.tag.is_empty() || m.tag == ENSEMBLE_DIR || m.tag.contains(['/', '\\']) {
                return Err(Error::Config(format!("invalid model tag {:?}", m.tag)));
            }
            if !tags.insert(&m.tag) {
                return Err(Error::Config(format!("duplicate model tag {:?}", m.tag)));
            }
            m.train.validate()?;
        }
        match &self.data {
            DataSource::Synthetic(spec) => {
                spec.validate()?;
                for m in &self.models {
                    if spec.source(&m.audio_source).is_none() {
                        return Err(Error::Config(format!(
                            "model {:?} uses audio source {:?}, which the synthetic spec does not define",
                            m.tag, m.audio_source
                        )));
                    }
                }
            }
            DataSource::Corpus { root, .. } => {
                for m in &self.models {
                    for split in ["train", "dev"] {
                        let p = GeneratedCorpus::manifest_path(root, split, &m.audio_source);
                        if !p.exists() {
                            return Err(Error::MissingFile(p));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn model(&self, tag: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.tag == tag)
    }

    pub fn class_names(&self) -> &[String] {
        match &self.data {
            DataSource::Synthetic(s) => &s.class_names,
            DataSource::Corpus { class_names, .. } => class_names,
        }
    }

    /// The seven-member ensemble at desk scale; identical to
    /// `configs/ensemble.toml` in the crate root.
    pub fn default_ensemble() -> Self {
        use WeightScheme::{Prior, Uniform};
        let rows: [(&str, LossSpec, &str); 7] = [
            ("m1-focal2-prior-whisper", LossSpec::focal(2.0, Prior), "whisper"),
            ("m2-focal2.5-prior-whisper", LossSpec::focal(2.5, Prior), "whisper"),
            ("m3-ce-prior-whisper", LossSpec::ce(Prior), "whisper"),
            ("m4-focal2-uniform-whisper", LossSpec::focal(2.0, Uniform), "whisper"),
            ("m5-ce-uniform-whisper", LossSpec::ce(Uniform), "whisper"),
            ("m6-focal2-prior-wavlm", LossSpec::focal(2.0, Prior), "wavlm"),
            ("m7-focal3-prior-hubert", LossSpec::focal(3.0, Prior), "hubert"),
        ];
        let models = rows
            .into_iter()
            .map(|(tag, loss, src)| ModelSpec {
                tag: tag.into(),
                audio_source: src.into(),
                seed_group: None,
                model: desk_model(),
                train: TrainConfig {
                    loss,
                    ..desk_train()
                },
            })
            .collect();
        Self {
            out: None,
            seed: 0,
            data: DataSource::Synthetic(SyntheticSpec::default()),
            models,
        }
        .with_seed(0)
    }
}

/// Architecture used by the shipped desk-scale experiments.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        n_transformer_layers: 1,
        ..ModelConfig::new(0, 0)
    }
}

/// Optimisation recipe used by the shipped desk-scale experiments.
pub fn desk_train() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        initial_lr: 3e-3,
        max_epochs: 20,
        scheduler: SchedulerConfig::default(),
        ..TrainConfig::default()
    }
}

/// Train and dev utterances per audio source.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub class_names: Vec<String>,
    pub train: BTreeMap<String, Vec<Utterance>>,
    pub dev: BTreeMap<String, Vec<Utterance>>,
}

impl ExperimentData {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let sources: BTreeSet<&str> = cfg.models.iter().map(|m| m.audio_source.as_str()).collect();
        match &cfg.data {
            DataSource::Synthetic(spec) => {
                let corpus = spec.generate()?;
                let pick = |m: &BTreeMap<String, Vec<Utterance>>| {
                    m.iter()
                        .filter(|(k, _)| sources.contains(k.as_str()))
                        .map(|(k, v)| (k.clone(), v.clone()))
                        .collect()
                };
                Ok(Self {
                    class_names: spec.class_names.clone(),
                    train: pick(&corpus.train.by_source),
                    dev: pick(&corpus.dev.by_source),
                })
            }
            DataSource::Corpus { root, class_names } => {
                let mut out = Self {
                    class_names: class_names.clone(),
                    train: BTreeMap::new(),
                    dev: BTreeMap::new(),
                };
                for src in sources {
                    for (split, map) in [("train", &mut out.train), ("dev", &mut out.dev)] {
                        let path = GeneratedCorpus::manifest_path(root, split, src);
                        map.insert(src.to_string(), load_manifest(&path, class_names)?.load_all()?);
                    }
                }
                Ok(out)
            }
        }
    }

    fn split(&self, dev: bool, source: &str) -> Result<&[Utterance]> {
        let map = if dev { &self.dev } else { &self.train };
        map.get(source)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("no data loaded for audio source {source:?}")))
    }
}

/// Outcome of one trained ensemble member.
#[derive(Debug, Clone)]
pub struct ModelRun {
    pub tag: String,
    pub report: TrainReport,
    pub predictions: Vec<PredictionRecord>,
}

/// Builds the model for `spec` with feature dims and class count taken from
/// the data.
pub fn build_model(spec: &ModelSpec, data: &ExperimentData) -> Result<Model<f32>> {
    let utt = data
        .split(false, &spec.audio_source)?
        .first()
        .ok_or_else(|| Error::Empty(format!("training split for {:?}", spec.audio_source)))?;
    let mut cfg = spec.model.clone();
    for (field, want, got) in [("audio_dim", &mut cfg.audio_dim, utt.audio_dim()), ("text_dim", &mut cfg.text_dim, utt.text_dim())] {
        if *want == 0 {
            *want = got;
        } else if *want != got {
            return Err(Error::Config(format!("model {:?} sets {field} = {want}, data has {got}", spec.tag)));
        }
    }
    cfg.n_classes = data.class_names.len();
    Model::new(cfg)
}

/// Trains one member; with `out`, writes `<out>/<tag>/` artifacts including dev
/// predictions.
pub fn train_member(spec: &ModelSpec, data: &ExperimentData, out: Option<&Path>) -> Result<ModelRun> {
    let mut model = build_model(spec, data)?;
    let dir = out.map(|o| o.join(&spec.tag));
    if let Some(d) = &dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let dev = data.split(true, &spec.audio_source)?;
    log::info!("training {} ({}, {})", spec.tag, spec.train.loss, spec.audio_source);
    let report = train(&mut model, data.split(false, &spec.audio_source)?, dev, &spec.train, dir.as_deref())?;
    let (predictions, _) = evaluate(&model, dev, spec.train.eval_batch_size, &spec.tag)?;
    if let Some(d) = &dir {
        write_predictions(&d.join(PREDICTIONS_FILE), &predictions)?;
    }
    Ok(ModelRun {
        tag: spec.tag.clone(),
        report,
        predictions,
    })
}

/// Re-evaluates a saved member on its dev split and rewrites its predictions.
pub fn eval_member(spec: &ModelSpec, data: &ExperimentData, out: &Path) -> Result<(Vec<PredictionRecord>, Option<MetricBundle>)> {
    let dir = out.join(&spec.tag);
    let model = Model::<f32>::load(&dir.join(CHECKPOINT_FILE))?;
    let dev = data.split(true, &spec.audio_source)?;
    let (records, metrics) = evaluate(&model, dev, spec.train.eval_batch_size, &spec.tag)?;
    write_predictions(&dir.join(PREDICTIONS_FILE), &records)?;
    Ok((records, metrics))
}

/// Votes over prediction files and, with `out`, writes `<out>/ensemble/`.
pub fn ensemble_files(files: &[PathBuf], mode: VoteMode, out: Option<&Path>) -> Result<(GainReport, Vec<EnsembleResult>)> {
    if files.is_empty() {
        return Err(Error::InvalidArgument("at least one prediction file is required".into()));
    }
    let models = files.iter().map(|f| read_predictions(f)).collect::<Result<Vec<_>>>()?;
    let (report, results) = ensemble_gain_report(&models, mode)?;
    if let Some(o) = out {
        write_ensemble(o, &report, &results)?;
    }
    Ok((report, results))
}

pub fn write_ensemble(out: &Path, report: &GainReport, results: &[EnsembleResult]) -> Result<()> {
    let dir = out.join(ENSEMBLE_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut lines = String::new();
    for r in results {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    crate::data::write_atomic(&dir.join(FINAL_LABELS_FILE), lines.as_bytes())?;
    crate::data::write_atomic(&dir.join(ENSEMBLE_REPORT_FILE), report.to_string().as_bytes())
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub runs: Vec<ModelRun>,
    pub ensemble: GainReport,
    pub results: Vec<EnsembleResult>,
}

/// Trains every member in config order, then majority-votes their dev
/// predictions.
pub fn run_experiment(cfg: &ExperimentConfig, data: &ExperimentData, out: Option<&Path>, mode: VoteMode) -> Result<ExperimentOutcome> {
    let runs = cfg.models.iter().map(|m| train_member(m, data, out)).collect::<Result<Vec<_>>>()?;
    let preds: Vec<Vec<PredictionRecord>> = runs.iter().map(|r| r.predictions.clone()).collect();
    let (ensemble, results) = ensemble_gain_report(&preds, mode)?;
    if let Some(o) = out {
        write_ensemble(o, &ensemble, &results)?;
    }
    Ok(ExperimentOutcome { runs, ensemble, results })
}
