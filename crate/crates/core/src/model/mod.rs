//! The per-utterance classifier: modality encoders, transformer stacks, masked
//! mean pooling, a fusion stage and a two-MLP classification head.

mod checkpoint;
mod fusion;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, CHECKPOINT_VERSION};
pub use fusion::{
    fuse_decisions, fuse_early, fuse_late, fuse_low_rank, fuse_tensor, FusionKind, LowRankFusion,
};

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_positions, Graph, Linear, Mlp, ParamBuilder, ParamSet, Scalar, Tensor,
    TransformerLayer, Var,
};

fn default_hidden() -> usize {
    512
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    1
}
fn default_classes() -> usize {
    8
}
fn default_rank() -> usize {
    4
}
fn default_ff() -> usize {
    2
}
fn default_true() -> bool {
    true
}
fn default_fusion() -> FusionKind {
    FusionKind::Early
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Zero in a config file means "take it from the data".
    #[serde(default)]
    pub audio_dim: usize,
    #[serde(default)]
    pub text_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub n_transformer_layers: usize,
    /// Must be 1.
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    #[serde(default = "default_fusion")]
    pub fusion: FusionKind,
    /// Rank of the low-rank tensor fusion; ignored by other kinds.
    #[serde(default = "default_rank")]
    pub lmf_rank: usize,
    /// Transformer feed-forward width as a multiple of `hidden`.
    #[serde(default = "default_ff")]
    pub ff_multiplier: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub positional_encoding: bool,
    /// Early+late fusion only: with `false` the unimodal branches are dropped
    /// and the model reduces to early fusion.
    #[serde(default = "default_true")]
    pub unimodal_heads: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(audio_dim: usize, text_dim: usize) -> Self {
        Self {
            audio_dim,
            text_dim,
            hidden: default_hidden(),
            n_transformer_layers: default_layers(),
            n_heads: default_heads(),
            n_classes: default_classes(),
            fusion: default_fusion(),
            lmf_rank: default_rank(),
            ff_multiplier: default_ff(),
            dropout: 0.0,
            positional_encoding: false,
            unimodal_heads: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_heads != 1 {
            return bad(format!("n_heads must be 1, got {}", self.n_heads));
        }
        if self.hidden == 0 || self.audio_dim == 0 || self.text_dim == 0 || self.ff_multiplier == 0 {
            return bad("hidden, audio_dim, text_dim and ff_multiplier must be positive".into());
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.fusion == FusionKind::LowRankTensor && self.lmf_rank == 0 {
            return bad("lmf_rank must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Linear → ReLU → Linear projection followed by a stack of transformer layers.
#[derive(Debug, Clone, PartialEq)]
struct Encoder {
    input: Mlp,
    layers: Vec<TransformerLayer>,
}

impl Encoder {
    fn new<F: Scalar>(pb: &mut ParamBuilder<F>, name: &str, in_dim: usize, cfg: &ModelConfig) -> Self {
        let h = cfg.hidden;
        Self {
            input: Mlp::new(pb, &format!("{name}.mlp"), in_dim, h, h),
            layers: (0..cfg.n_transformer_layers)
                .map(|l| TransformerLayer::new(pb, &format!("{name}.layer{l}"), h, h * cfg.ff_multiplier, cfg.dropout))
                .collect(),
        }
    }

    /// Packed rows `[n, in]` → pooled `[segments, hidden]`.
    fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &[Var],
        rows: Tensor<F>,
        segments: &[crate::nn::Segment],
        positional: bool,
    ) -> Result<Var> {
        let x = g.constant(rows)?;
        let mut h = self.input.forward(g, p, x)?;
        if positional {
            let dim = g.value(h).dims2()?.1;
            let pe = g.constant(sinusoidal_positions(segments, dim)?)?;
            h = g.add(h, pe)?;
        }
        for layer in &self.layers {
            h = layer.forward(g, p, h, segments, None)?.output;
        }
        g.segment_mean(h, segments)
    }
}

/// Two MLP modules with a ReLU between them, ending in a softmax.
#[derive(Debug, Clone, PartialEq)]
struct Head {
    first: Mlp,
    second: Mlp,
}

impl Head {
    fn new<F: Scalar>(pb: &mut ParamBuilder<F>, name: &str, in_dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            first: Mlp::new(pb, &format!("{name}.mlp1"), in_dim, hidden, hidden),
            second: Mlp::new(pb, &format!("{name}.mlp2"), hidden, hidden, classes),
        }
    }

    fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &[Var], x: Var) -> Result<Var> {
        let h = self.first.forward(g, p, x)?;
        let h = g.relu(h)?;
        let logits = self.second.forward(g, p, h)?;
        g.softmax(logits, 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Fusion {
    Early { head: Head },
    Late { audio: Head, text: Head },
    EarlyPlusLate { joint: Head, unimodal: Option<(Head, Head)> },
    Tensor { proj: Linear, head: Head },
    LowRank { lmf: LowRankFusion, head: Head },
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    audio: Encoder,
    text: Encoder,
    fusion: Fusion,
}

impl Layout {
    fn build<F: Scalar>(cfg: &ModelConfig) -> (Self, ParamSet<F>) {
        let mut pb = ParamBuilder::<F>::new(cfg.seed);
        let (h, c) = (cfg.hidden, cfg.n_classes);
        let audio = Encoder::new(&mut pb, "audio", cfg.audio_dim, cfg);
        let text = Encoder::new(&mut pb, "text", cfg.text_dim, cfg);
        let fusion = match cfg.fusion {
            FusionKind::Early => Fusion::Early {
                head: Head::new(&mut pb, "head", 2 * h, h, c),
            },
            FusionKind::Late => Fusion::Late {
                audio: Head::new(&mut pb, "audio_head", h, h, c),
                text: Head::new(&mut pb, "text_head", h, h, c),
            },
            FusionKind::EarlyPlusLate => {
                // Joint head first so the shared part matches an early-fusion model.
                let joint = Head::new(&mut pb, "head", 2 * h, h, c);
                let unimodal = cfg.unimodal_heads.then(|| {
                    (
                        Head::new(&mut pb, "audio_head", h, h, c),
                        Head::new(&mut pb, "text_head", h, h, c),
                    )
                });
                Fusion::EarlyPlusLate { joint, unimodal }
            }
            FusionKind::Tensor => Fusion::Tensor {
                proj: Linear::new(&mut pb, "tensor_fusion", (h + 1) * (h + 1), h),
                head: Head::new(&mut pb, "head", h, h, c),
            },
            FusionKind::LowRankTensor => Fusion::LowRank {
                lmf: LowRankFusion::new(&mut pb, "lmf", h, h, cfg.lmf_rank, h),
                head: Head::new(&mut pb, "head", h, h, c),
            },
        };
        (Self { audio, text, fusion }, pb.finish())
    }
}

/// Parameters plus the structure that indexes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Scalar = f32> {
    config: ModelConfig,
    layout: Layout,
    params: ParamSet<F>,
}

impl<F: Scalar> Model<F> {
    /// Deterministic in `config` (including its seed).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, params) = Layout::build::<F>(&config);
        Ok(Self { config, layout, params })
    }

    /// Rebuilds the layout of `config` and installs `params`, which must
    /// match it by name and shape.
    pub fn from_params(config: ModelConfig, params: ParamSet<F>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if model.params.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            let want = model.params.name(i);
            let want_shape = model.params.get(i).shape();
            if name != want || t.shape() != want_shape {
                return Err(Error::Config(format!(
                    "parameter {i}: expected {want} {want_shape:?}, got {name} {:?}",
                    t.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    fn check_dims(&self, batch: &Batch) -> Result<()> {
        if batch.audio_dim() != self.config.audio_dim || batch.text_dim() != self.config.text_dim {
            return Err(Error::shape(
                "model_forward",
                format!(
                    "batch dims audio {} text {}, model expects audio {} text {}",
                    batch.audio_dim(),
                    batch.text_dim(),
                    self.config.audio_dim,
                    self.config.text_dim
                ),
            ));
        }
        Ok(())
    }

    /// Builds the forward pass on `g` with parameter nodes `p` (from
    /// [`ParamSet::bind`]); returns the `[batch, n_classes]` probability node.
    pub fn forward_graph(&self, g: &mut Graph<F>, p: &[Var], batch: &Batch) -> Result<Var> {
        self.check_dims(batch)?;
        let audio = batch.pack_audio::<F>()?;
        let text = batch.pack_text::<F>()?;
        self.forward_packed(g, p, audio.rows, &audio.segments, text.rows, &text.segments)
    }

    /// Forward pass over already packed modalities.
    pub fn forward_packed(
        &self,
        g: &mut Graph<F>,
        p: &[Var],
        audio_rows: Tensor<F>,
        audio_segments: &[crate::nn::Segment],
        text_rows: Tensor<F>,
        text_segments: &[crate::nn::Segment],
    ) -> Result<Var> {
        if audio_segments.len() != text_segments.len() {
            return Err(Error::shape(
                "model_forward",
                format!("{} audio vs {} text sequences", audio_segments.len(), text_segments.len()),
            ));
        }
        let pe = self.config.positional_encoding;
        let ha = self.layout.audio.forward(g, p, audio_rows, audio_segments, pe)?;
        let ht = self.layout.text.forward(g, p, text_rows, text_segments, pe)?;
        match &self.layout.fusion {
            Fusion::Early { head } => {
                let x = fuse_early(g, ha, ht)?;
                head.forward(g, p, x)
            }
            Fusion::Late { audio, text } => {
                let pa = audio.forward(g, p, ha)?;
                let pt = text.forward(g, p, ht)?;
                fuse_decisions(g, &[pa, pt])
            }
            Fusion::EarlyPlusLate { joint, unimodal } => {
                let x = fuse_early(g, ha, ht)?;
                let pj = joint.forward(g, p, x)?;
                match unimodal {
                    None => Ok(pj),
                    Some((audio, text)) => {
                        let pa = audio.forward(g, p, ha)?;
                        let pt = text.forward(g, p, ht)?;
                        fuse_decisions(g, &[pj, pa, pt])
                    }
                }
            }
            Fusion::Tensor { proj, head } => {
                let z = fuse_tensor(g, ha, ht)?;
                let x = proj.forward(g, p, z)?;
                head.forward(g, p, x)
            }
            Fusion::LowRank { lmf, head } => {
                let x = lmf.forward(g, p, ha, ht)?;
                head.forward(g, p, x)
            }
        }
    }

    /// Eval-mode class probabilities, `[batch, n_classes]`.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor<F>> {
        let mut g = Graph::<F>::new();
        let p = self.params.bind(&mut g)?;
        let out = self.forward_graph(&mut g, &p, batch)?;
        Ok(g.value(out).clone())
    }
}
