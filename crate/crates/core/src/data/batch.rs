use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Utterance;
use crate::error::{Error, Result};
use crate::nn::{Scalar, Segment, Tensor};

/// Utterances padded to the longest sequence of the batch, per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub labels: Vec<Option<usize>>,
    /// `[B, T_a, audio_dim]`, zero padded.
    pub audio: Tensor<f32>,
    /// Row-major `[B, T_a]`; `true` marks a real frame.
    pub audio_mask: Vec<bool>,
    /// `[B, T_t, text_dim]`, zero padded.
    pub text: Tensor<f32>,
    pub text_mask: Vec<bool>,
}

/// Valid rows of one modality gathered into `[Σ lengths, d]`.
#[derive(Debug, Clone)]
pub struct PackedModality<F: Scalar> {
    pub rows: Tensor<F>,
    pub segments: Vec<Segment>,
}

fn pad(seqs: &[&Tensor<f32>]) -> Result<(Tensor<f32>, Vec<bool>)> {
    let d = seqs[0].shape()[1];
    if let Some(bad) = seqs.iter().find(|s| s.shape()[1] != d) {
        return Err(Error::shape(
            "make_batches",
            format!("feature dim {} vs {d}", bad.shape()[1]),
        ));
    }
    let t_max = seqs.iter().map(|s| s.shape()[0]).max().unwrap();
    let mut data = vec![0.0f32; seqs.len() * t_max * d];
    let mut mask = vec![false; seqs.len() * t_max];
    for (b, s) in seqs.iter().enumerate() {
        let t = s.shape()[0];
        data[b * t_max * d..(b * t_max + t) * d].copy_from_slice(s.data());
        mask[b * t_max..b * t_max + t].iter_mut().for_each(|m| *m = true);
    }
    Ok((Tensor::new(vec![seqs.len(), t_max, d], data)?, mask))
}

fn pack<F: Scalar>(padded: &Tensor<f32>, mask: &[bool]) -> Result<PackedModality<F>> {
    let (b, t, d) = (padded.shape()[0], padded.shape()[1], padded.shape()[2]);
    let mut rows = Vec::new();
    let mut segments = Vec::with_capacity(b);
    let mut start = 0;
    for i in 0..b {
        let mut len = 0;
        for p in 0..t {
            if mask[i * t + p] {
                let off = (i * t + p) * d;
                rows.extend(padded.data()[off..off + d].iter().map(|&v| v.cast::<F>()));
                len += 1;
            }
        }
        if len == 0 {
            return Err(Error::EmptySequence(format!("batch row {i} has no valid positions")));
        }
        segments.push(Segment { start, len });
        start += len;
    }
    Ok(PackedModality {
        rows: Tensor::new(vec![start, d], rows)?,
        segments,
    })
}

impl Batch {
    pub fn from_utterances(utts: &[&Utterance]) -> Result<Self> {
        if utts.is_empty() {
            return Err(Error::Empty("batch with no utterances".into()));
        }
        let audio: Vec<&Tensor<f32>> = utts.iter().map(|u| &u.audio).collect();
        let text: Vec<&Tensor<f32>> = utts.iter().map(|u| &u.text).collect();
        let (audio, audio_mask) = pad(&audio)?;
        let (text, text_mask) = pad(&text)?;
        Ok(Self {
            ids: utts.iter().map(|u| u.id.clone()).collect(),
            labels: utts.iter().map(|u| u.label).collect(),
            audio,
            audio_mask,
            text,
            text_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn audio_dim(&self) -> usize {
        self.audio.shape()[2]
    }

    pub fn text_dim(&self) -> usize {
        self.text.shape()[2]
    }

    /// Labels of every row; fails if any row is unlabelled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .zip(&self.ids)
            .map(|(l, id)| l.ok_or_else(|| Error::InvalidArgument(format!("utterance {id} has no label"))))
            .collect()
    }

    /// Number of valid positions per row, audio then text.
    pub fn lengths(&self) -> (Vec<usize>, Vec<usize>) {
        let count = |mask: &[bool], t: usize| -> Vec<usize> {
            mask.chunks(t).map(|c| c.iter().filter(|&&m| m).count()).collect()
        };
        (
            count(&self.audio_mask, self.audio.shape()[1]),
            count(&self.text_mask, self.text.shape()[1]),
        )
    }

    pub fn pack_audio<F: Scalar>(&self) -> Result<PackedModality<F>> {
        pack(&self.audio, &self.audio_mask)
    }

    pub fn pack_text<F: Scalar>(&self) -> Result<PackedModality<F>> {
        pack(&self.text, &self.text_mask)
    }

    /// Appends `extra` masked zero frames to every audio sequence.
    pub fn with_audio_padding(&self, extra: usize) -> Result<Self> {
        let (b, t, d) = (self.audio.shape()[0], self.audio.shape()[1], self.audio.shape()[2]);
        let nt = t + extra;
        let mut data = vec![0.0f32; b * nt * d];
        let mut mask = vec![false; b * nt];
        for i in 0..b {
            data[i * nt * d..(i * nt + t) * d].copy_from_slice(&self.audio.data()[i * t * d..(i + 1) * t * d]);
            mask[i * nt..i * nt + t].copy_from_slice(&self.audio_mask[i * t..(i + 1) * t]);
        }
        Ok(Self {
            audio: Tensor::new(vec![b, nt, d], data)?,
            audio_mask: mask,
            ..self.clone()
        })
    }
}

/// Splits `utts` into padded batches of at most `batch_size`. With a shuffle
/// seed the order is a seeded permutation; callers vary the seed per epoch.
pub fn make_batches(utts: &[Utterance], batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    if utts.is_empty() {
        return Err(Error::Empty("cannot batch an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..utts.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&Utterance> = chunk.iter().map(|&i| &utts[i]).collect();
            Batch::from_utterances(&refs)
        })
        .collect()
}
