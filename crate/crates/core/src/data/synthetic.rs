//! Class-conditional Gaussian stand-in for a real multimodal corpus.
//!
//! Every frame of an utterance with class `c` is drawn as `s * μ[m][c] + ε`,
//! `ε ~ N(0, I)`, independently per modality `m`. The separability knob `s`
//! scales all class means, so `s = 0` makes the classes indistinguishable.
//!
//! Modalities are complementary: audio means are informative for even class
//! indices and text means for odd ones. With `complementarity = κ`, the mean of
//! a class outside a modality's informative subset is pulled towards a mean
//! shared by all such classes, `(1 - κ) μ_c + κ μ_shared`; at `κ = 1` that
//! modality cannot tell those classes apart at all.
//!
//! Several audio "sources" can be generated for the same utterances (same ids,
//! labels, lengths and text features), each with its own dimension, means and
//! noise, standing in for different pretrained audio feature extractors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    default_class_names, manifest::write_manifest, write_features, DatasetSpec, ManifestEntry,
    SplitCounts, Utterance, DEV_CLASS_COUNTS, TRAIN_CLASS_COUNTS,
};
use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioSource {
    pub tag: String,
    pub dim: usize,
    /// Multiplies the global separability for this source.
    #[serde(default = "one")]
    pub separability_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub class_names: Vec<String>,
    pub train_proportions: Vec<f64>,
    pub dev_proportions: Vec<f64>,
    pub n_train: usize,
    pub n_dev: usize,
    pub separability: f64,
    pub complementarity: f64,
    pub text_dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub audio_sources: Vec<AudioSource>,
    pub seed: u64,
}

fn normalise(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            class_names: default_class_names(),
            train_proportions: normalise(&TRAIN_CLASS_COUNTS),
            dev_proportions: normalise(&DEV_CLASS_COUNTS),
            n_train: 5330,
            n_dev: 1530,
            separability: 0.12,
            complementarity: 0.5,
            text_dim: 24,
            min_len: 5,
            max_len: 40,
            audio_sources: vec![
                AudioSource {
                    tag: "whisper".into(),
                    dim: 32,
                    separability_scale: 1.0,
                },
                AudioSource {
                    tag: "wavlm".into(),
                    dim: 24,
                    separability_scale: 0.9,
                },
                AudioSource {
                    tag: "hubert".into(),
                    dim: 40,
                    separability_scale: 0.9,
                },
            ],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn source(&self, tag: &str) -> Option<&AudioSource> {
        self.audio_sources.iter().find(|s| s.tag == tag)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.n_classes();
        if c < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        for (name, p) in [("train", &self.train_proportions), ("dev", &self.dev_proportions)] {
            if p.len() != c {
                return Err(Error::Config(format!("{name} proportions have {} entries for {c} classes", p.len())));
            }
            if p.iter().any(|&x| !(x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("{name} proportions must be nonnegative and sum to 1")));
            }
        }
        if self.n_train < c || self.n_dev < c {
            return Err(Error::Config(format!("each split needs at least {c} utterances")));
        }
        if !(self.separability >= 0.0) || !(0.0..=1.0).contains(&self.complementarity) {
            return Err(Error::Config("separability must be >= 0 and complementarity in [0, 1]".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("bad length range [{}, {}]", self.min_len, self.max_len)));
        }
        if self.text_dim == 0 || self.audio_sources.is_empty() || self.audio_sources.iter().any(|s| s.dim == 0) {
            return Err(Error::Config("feature dims must be positive and at least one audio source is needed".into()));
        }
        let mut tags: Vec<&str> = self.audio_sources.iter().map(|s| s.tag.as_str()).collect();
        tags.sort_unstable();
        if tags.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("audio source tags must be unique".into()));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` samples, then every class is given at
/// least one sample (taken from the largest class).
pub fn class_counts_for(n: usize, proportions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..counts.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &j in by_remainder.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[j] += 1;
        left -= 1;
    }
    while let Some(j) = counts.iter().position(|&c| c == 0) {
        let big = (0..counts.len()).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).unwrap();
        counts[big] -= 1;
        counts[j] += 1;
    }
    counts
}

/// Seed for the named random stream `stream` under base seed `seed`.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    // FNV-1a over the stream name, mixed with the base seed.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed.wrapping_mul(0x9E3779B97F4A7C15)
}

fn class_means(rng: &mut ChaCha8Rng, n_classes: usize, dim: usize, informative_parity: usize, kappa: f64, scale: f64) -> Vec<Vec<f32>> {
    let mut draw = || -> Vec<f64> { (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
    let own: Vec<Vec<f64>> = (0..n_classes).map(|_| draw()).collect();
    let shared = draw();
    own.into_iter()
        .enumerate()
        .map(|(c, mu)| {
            let informative = c % 2 == informative_parity;
            mu.iter()
                .zip(&shared)
                .map(|(&m, &s)| {
                    let v = if informative { m } else { (1.0 - kappa) * m + kappa * s };
                    (scale * v) as f32
                })
                .collect()
        })
        .collect()
}

fn frames(rng: &mut ChaCha8Rng, t: usize, mean: &[f32]) -> Tensor<f32> {
    let d = mean.len();
    let data = (0..t * d)
        .map(|i| mean[i % d] + rng.sample::<f32, _>(StandardNormal))
        .collect();
    Tensor::new(vec![t, d], data).expect("positive extents")
}

/// One split of an in-memory corpus: shared metadata plus one utterance list
/// per audio source.
#[derive(Debug, Clone)]
pub struct SyntheticSplit {
    pub name: String,
    pub counts: Vec<usize>,
    pub by_source: BTreeMap<String, Vec<Utterance>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub train: SyntheticSplit,
    pub dev: SyntheticSplit,
}

impl SyntheticCorpus {
    pub fn dataset_spec(&self, class_names: &[String]) -> DatasetSpec {
        DatasetSpec {
            class_names: class_names.to_vec(),
            splits: [&self.train, &self.dev]
                .iter()
                .map(|s| SplitCounts {
                    split: s.name.clone(),
                    counts: s.counts.clone(),
                })
                .collect(),
        }
    }
}

impl SyntheticSpec {
    /// Generates the whole corpus in memory.
    pub fn generate(&self) -> Result<SyntheticCorpus> {
        self.validate()?;
        let c = self.n_classes();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "means/text"));
        let text_means = class_means(&mut rng, c, self.text_dim, 1, self.complementarity, self.separability);
        let audio_means: Vec<Vec<Vec<f32>>> = self
            .audio_sources
            .iter()
            .map(|src| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("means/audio/{}", src.tag)));
                class_means(&mut rng, c, src.dim, 0, self.complementarity, self.separability * src.separability_scale)
            })
            .collect();

        let split = |name: &str, n: usize, proportions: &[f64]| -> SyntheticSplit {
            let counts = class_counts_for(n, proportions);
            let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(j, &k)| std::iter::repeat_n(j, k)).collect();
            let mut meta = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("{name}/meta")));
            labels.shuffle(&mut meta);
            let lengths: Vec<(usize, usize)> = labels
                .iter()
                .map(|_| {
                    (
                        meta.random_range(self.min_len..=self.max_len),
                        meta.random_range(self.min_len..=self.max_len),
                    )
                })
                .collect();
            let mut text_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("{name}/noise/text")));
            let texts: Vec<Tensor<f32>> = labels
                .iter()
                .zip(&lengths)
                .map(|(&y, &(_, tt))| frames(&mut text_rng, tt, &text_means[y]))
                .collect();
            let by_source = self
                .audio_sources
                .iter()
                .zip(&audio_means)
                .map(|(src, means)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("{name}/noise/audio/{}", src.tag)));
                    let utts = labels
                        .iter()
                        .zip(&lengths)
                        .zip(&texts)
                        .enumerate()
                        .map(|(i, ((&y, &(ta, _)), text))| Utterance {
                            id: format!("{name}_{i:05}"),
                            audio: frames(&mut rng, ta, &means[y]),
                            text: text.clone(),
                            label: Some(y),
                        })
                        .collect();
                    (src.tag.clone(), utts)
                })
                .collect();
            SyntheticSplit {
                name: name.to_string(),
                counts,
                by_source,
            }
        };
        Ok(SyntheticCorpus {
            train: split("train", self.n_train, &self.train_proportions),
            dev: split("dev", self.n_dev, &self.dev_proportions),
        })
    }
}

/// Paths of a corpus written by [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCorpus {
    pub root: PathBuf,
    /// `(split, source tag) → manifest path`
    pub manifests: BTreeMap<(String, String), PathBuf>,
    pub dataset: DatasetSpec,
}

impl GeneratedCorpus {
    pub fn manifest_path(root: &Path, split: &str, source: &str) -> PathBuf {
        root.join(format!("{split}.{source}.tsv"))
    }

    pub fn manifest(&self, split: &str, source: &str) -> Option<&Path> {
        self.manifests
            .get(&(split.to_string(), source.to_string()))
            .map(PathBuf::as_path)
    }
}

/// Generates the corpus and writes it under `out`: text features to
/// `text/<id>.imbf`, audio features to `audio/<source>/<id>.imbf`, and one
/// manifest per split and source, `<split>.<source>.tsv`.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<GeneratedCorpus> {
    let corpus = spec.generate()?;
    let mut manifests = BTreeMap::new();
    for split in [&corpus.train, &corpus.dev] {
        let mut text_written = false;
        for src in &spec.audio_sources {
            let utts = &split.by_source[&src.tag];
            let mut entries = Vec::with_capacity(utts.len());
            for u in utts {
                let audio_path = out.join("audio").join(&src.tag).join(format!("{}.imbf", u.id));
                let text_path = out.join("text").join(format!("{}.imbf", u.id));
                write_features(&audio_path, &u.audio)?;
                if !text_written {
                    write_features(&text_path, &u.text)?;
                }
                entries.push(ManifestEntry {
                    id: u.id.clone(),
                    label: u.label,
                    audio_path,
                    text_path,
                    line: 0,
                });
            }
            text_written = true;
            let path = GeneratedCorpus::manifest_path(out, &split.name, &src.tag);
            write_manifest(&path, &entries, &spec.class_names, Some((src.dim, spec.text_dim)))?;
            manifests.insert((split.name.clone(), src.tag.clone()), path);
        }
    }
    Ok(GeneratedCorpus {
        root: out.to_path_buf(),
        manifests,
        dataset: corpus.dataset_spec(&spec.class_names),
    })
}
