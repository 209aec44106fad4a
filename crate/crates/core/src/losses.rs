//! Class weighting schemes and the (focal) cross-entropy objectives.
//!
//! Four optimisation configurations are available by combining a [`LossKind`]
//! with a [`WeightScheme`]:
//!
//! | kind  | weights | per-sample term                       |
//! |-------|---------|---------------------------------------|
//! | CE    | uniform | `-ln p`                               |
//! | CE    | prior   | `-(N / N_y) ln p`                     |
//! | focal | uniform | `-(1 - p)^γ ln p`                     |
//! | focal | prior   | `-(N / N_y) (1 - p)^γ ln p`           |
//!
//! where `p` is the predicted probability of the reference class `y`. The batch
//! loss is the plain mean of the per-sample terms: weights multiply each term
//! and are not renormalised.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Scalar, Var};

/// Lower clamp applied to probabilities before taking the logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    Uniform,
    Prior,
}

/// Per-class multipliers `w_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    scheme: WeightScheme,
    weights: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(n_classes: usize) -> Self {
        Self {
            scheme: WeightScheme::Uniform,
            weights: vec![1.0; n_classes],
        }
    }

    /// `w_j = N / N_j` with `N = Σ N_j`.
    pub fn prior(class_counts: &[usize]) -> Result<Self> {
        if class_counts.is_empty() {
            return Err(Error::Empty("no class counts".into()));
        }
        if let Some(j) = class_counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidArgument(format!(
                "class {j} has no samples; its prior weight is undefined"
            )));
        }
        let total: usize = class_counts.iter().sum();
        let weights = class_counts
            .iter()
            .map(|&c| total as f64 / c as f64)
            .collect();
        Ok(Self {
            scheme: WeightScheme::Prior,
            weights,
        })
    }

    pub fn from_scheme(scheme: WeightScheme, class_counts: &[usize]) -> Result<Self> {
        match scheme {
            WeightScheme::Uniform => Ok(Self::uniform(class_counts.len())),
            WeightScheme::Prior => Self::prior(class_counts),
        }
    }

    pub fn scheme(&self) -> WeightScheme {
        self.scheme
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn n_classes(&self) -> usize {
        self.weights.len()
    }

    /// Multiplies every weight by `factor`; the scheme tag is kept.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            scheme: self.scheme,
            weights: self.weights.iter().map(|w| w * factor).collect(),
        }
    }

    /// `w_{y_i}` for each label.
    pub fn per_sample<F: Scalar>(&self, labels: &[usize]) -> Result<Vec<F>> {
        labels
            .iter()
            .map(|&y| {
                self.weights.get(y).map(|&w| F::lit(w)).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "label {y} out of range for {} class weights",
                        self.weights.len()
                    ))
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[serde(alias = "cross_entropy")]
    Ce,
    Focal,
}

/// Serializable description of an objective; class weights are resolved
/// against training-split counts with [`LossSpec::resolve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default)]
    pub gamma: f64,
    pub weights: WeightScheme,
}

impl LossSpec {
    pub fn ce(weights: WeightScheme) -> Self {
        Self {
            kind: LossKind::Ce,
            gamma: 0.0,
            weights,
        }
    }

    pub fn focal(gamma: f64, weights: WeightScheme) -> Self {
        Self {
            kind: LossKind::Focal,
            gamma,
            weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }

    pub fn resolve(&self, train_class_counts: &[usize]) -> Result<LossConfig> {
        self.validate()?;
        Ok(LossConfig {
            kind: self.kind,
            gamma: self.gamma,
            class_weights: ClassWeights::from_scheme(self.weights, train_class_counts)?,
        })
    }
}

impl std::fmt::Display for LossSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let w = match self.weights {
            WeightScheme::Uniform => "uniform",
            WeightScheme::Prior => "prior",
        };
        match self.kind {
            LossKind::Ce => write!(f, "CE/{w}"),
            LossKind::Focal => write!(f, "focal(γ={})/{w}", self.gamma),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Focusing parameter; ignored for cross-entropy.
    pub gamma: f64,
    pub class_weights: ClassWeights,
}

impl LossConfig {
    fn effective_gamma(&self) -> Option<f64> {
        match self.kind {
            LossKind::Ce => None,
            LossKind::Focal => Some(self.gamma),
        }
    }

    /// Loss of a batch given the probability assigned to each reference class.
    pub fn evaluate<F: Scalar>(&self, p_true: &[F], labels: &[usize]) -> Result<F> {
        match self.effective_gamma() {
            None => ce_loss(p_true, labels, &self.class_weights),
            Some(g) => focal_loss(p_true, labels, g, &self.class_weights),
        }
    }

    /// Adds the loss over a `[batch, C]` probability node to `graph`.
    pub fn graph_loss<F: Scalar>(
        &self,
        graph: &mut Graph<F>,
        probs: Var,
        labels: &[usize],
    ) -> Result<Var> {
        let w = self.class_weights.per_sample::<F>(labels)?;
        let gamma = F::lit(self.effective_gamma().unwrap_or(0.0));
        graph.class_loss(probs, labels, &w, gamma, F::lit(PROB_EPS))
    }
}

/// Weighted cross-entropy: mean over the batch of `-w_{y_i} ln p_i`.
pub fn ce_loss<F: Scalar>(p_true: &[F], labels: &[usize], weights: &ClassWeights) -> Result<F> {
    let w = weights.per_sample::<F>(labels)?;
    check_lengths(p_true, labels)?;
    weighted_focal_mean(p_true, &w, None, F::lit(PROB_EPS))
}

/// Class-weighted focal loss: mean over the batch of `-w_{y_i} (1 - p_i)^γ ln p_i`.
pub fn focal_loss<F: Scalar>(
    p_true: &[F],
    labels: &[usize],
    gamma: f64,
    weights: &ClassWeights,
) -> Result<F> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {gamma}")));
    }
    let w = weights.per_sample::<F>(labels)?;
    check_lengths(p_true, labels)?;
    weighted_focal_mean(p_true, &w, Some(F::lit(gamma)), F::lit(PROB_EPS))
}

fn check_lengths<F>(p_true: &[F], labels: &[usize]) -> Result<()> {
    if p_true.len() != labels.len() {
        return Err(Error::shape(
            "loss",
            format!("{} probabilities for {} labels", p_true.len(), labels.len()),
        ));
    }
    Ok(())
}

/// Shared kernel of both losses. `gamma = None` skips the modulating factor.
pub(crate) fn weighted_focal_mean<F: Scalar>(
    p_true: &[F],
    sample_weights: &[F],
    gamma: Option<F>,
    eps: F,
) -> Result<F> {
    if p_true.is_empty() {
        return Err(Error::Empty("loss over an empty batch".into()));
    }
    let mut total = F::zero();
    for (&p, &w) in p_true.iter().zip(sample_weights) {
        let p = p.max(eps);
        let term = match gamma {
            None => -w * p.ln(),
            Some(g) => -w * (F::one() - p).powf(g) * p.ln(),
        };
        total = total + term;
    }
    Ok(total / F::from_usize(p_true.len()).unwrap())
}
