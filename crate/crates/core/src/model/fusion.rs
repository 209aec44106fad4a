//! Ways of combining the pooled audio and text representations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamBuilder, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Concatenate pooled embeddings (audio first) and classify jointly.
    Early,
    /// Classify each modality separately and average the probabilities.
    Late,
    /// Average the joint classifier with both unimodal classifiers.
    EarlyPlusLate,
    /// Outer product of the 1-augmented embeddings.
    Tensor,
    /// Rank-constrained factorisation of the tensor fusion.
    LowRankTensor,
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionKind::Early => "early",
            FusionKind::Late => "late",
            FusionKind::EarlyPlusLate => "early_plus_late",
            FusionKind::Tensor => "tensor",
            FusionKind::LowRankTensor => "low_rank_tensor",
        })
    }
}

/// `[B, d] ‖ [B, d'] → [B, d + d']`.
pub fn fuse_early<F: Scalar>(g: &mut Graph<F>, h_audio: Var, h_text: Var) -> Result<Var> {
    g.concat_cols(h_audio, h_text)
}

/// `[B, d_a], [B, d_t] → [B, (d_a + 1)(d_t + 1)]`, the flattened outer product
/// of `[h_a; 1]` and `[h_t; 1]`.
pub fn fuse_tensor<F: Scalar>(g: &mut Graph<F>, h_audio: Var, h_text: Var) -> Result<Var> {
    let a = g.append_ones(h_audio)?;
    let t = g.append_ones(h_text)?;
    g.outer(a, t)
}

/// Arithmetic mean of class-probability nodes of equal shape.
pub fn fuse_decisions<F: Scalar>(g: &mut Graph<F>, probs: &[Var]) -> Result<Var> {
    let (&first, rest) = probs
        .split_first()
        .ok_or_else(|| Error::Empty("no decisions to fuse".into()))?;
    let mut acc = first;
    for &p in rest {
        acc = g.add(acc, p)?;
    }
    if probs.len() == 1 {
        return Ok(acc);
    }
    g.scale(acc, F::one() / F::from_usize(probs.len()).unwrap())
}

/// Decision-level fusion of two probability vectors: elementwise mean,
/// renormalised to sum to one.
pub fn fuse_late(p_audio: &[f64], p_text: &[f64]) -> Result<Vec<f64>> {
    if p_audio.len() != p_text.len() {
        return Err(Error::shape(
            "fuse_late",
            format!("{} vs {} classes", p_audio.len(), p_text.len()),
        ));
    }
    let mean: Vec<f64> = p_audio.iter().zip(p_text).map(|(a, b)| 0.5 * (a + b)).collect();
    let z: f64 = mean.iter().sum();
    Ok(mean.into_iter().map(|p| p / z).collect())
}

/// `Σ_r (W_a^(r) [h_a; 1]) ⊙ (W_t^(r) [h_t; 1]) + b`.
///
/// The `R` factor matrices of each modality are stored side by side as one
/// `[d + 1, R * k]` parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LowRankFusion {
    pub audio_factors: usize,
    pub text_factors: usize,
    pub bias: usize,
    pub rank: usize,
    pub out_dim: usize,
}

impl LowRankFusion {
    pub fn new<F: Scalar>(
        pb: &mut ParamBuilder<F>,
        name: &str,
        audio_dim: usize,
        text_dim: usize,
        rank: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            audio_factors: pb.fan_in_uniform(
                format!("{name}.audio_factors"),
                &[audio_dim + 1, rank * out_dim],
                audio_dim + 1,
            ),
            text_factors: pb.fan_in_uniform(
                format!("{name}.text_factors"),
                &[text_dim + 1, rank * out_dim],
                text_dim + 1,
            ),
            bias: pb.constant(format!("{name}.bias"), &[out_dim], 0.0),
            rank,
            out_dim,
        }
    }

    /// Number of learned scalars; linear in the rank.
    pub fn param_count(audio_dim: usize, text_dim: usize, rank: usize, out_dim: usize) -> usize {
        (audio_dim + 1 + text_dim + 1) * rank * out_dim + out_dim
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &[Var], h_audio: Var, h_text: Var) -> Result<Var> {
        fuse_low_rank(g, h_audio, h_text, p[self.audio_factors], p[self.text_factors], p[self.bias], self.rank)
    }
}

/// Low-rank fusion with explicit factor nodes; see [`LowRankFusion`].
pub fn fuse_low_rank<F: Scalar>(
    g: &mut Graph<F>,
    h_audio: Var,
    h_text: Var,
    audio_factors: Var,
    text_factors: Var,
    bias: Var,
    rank: usize,
) -> Result<Var> {
    if rank == 0 {
        return Err(Error::InvalidArgument("low-rank fusion needs rank >= 1".into()));
    }
    let a = g.append_ones(h_audio)?;
    let t = g.append_ones(h_text)?;
    let fa = g.matmul(a, audio_factors)?;
    let ft = g.matmul(t, text_factors)?;
    let prod = g.mul(fa, ft)?;
    let summed = g.sum_groups(prod, rank)?;
    g.add_bias(summed, bias)
}
