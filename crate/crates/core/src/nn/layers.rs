//! Parameter storage and the layers the classifier is assembled from.
//!
//! Layers only hold indices into a [`ParamSet`]; a forward pass binds the set to
//! graph leaves once and passes the resulting `&[Var]` down.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Segment, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F: Scalar = f32> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<F>) -> usize {
        self.entries.push((name.into(), t));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn get(&self, i: usize) -> &Tensor<F> {
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<F> {
        &mut self.entries[i].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<F>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<F>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Adds every tensor as a gradient-receiving leaf of `g`.
    pub fn bind(&self, g: &mut Graph<F>) -> Result<Vec<Var>> {
        self.entries.iter().map(|(_, t)| g.param(t.clone())).collect()
    }
}

/// Seeded parameter initialisation.
pub struct ParamBuilder<F: Scalar> {
    params: ParamSet<F>,
    rng: ChaCha8Rng,
}

impl<F: Scalar> ParamBuilder<F> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: ParamSet::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Kaiming uniform for ReLU layers: `±sqrt(6 / fan_in)`.
    pub fn fan_in_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::lit(self.rng.random_range(-bound..bound)))
            .collect();
        self.params
            .push(name, Tensor::new(shape.to_vec(), data).expect("valid shape"))
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> usize {
        self.params.push(name, Tensor::full(shape, F::lit(value)))
    }

    pub fn finish(self) -> ParamSet<F> {
        self.params
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar>(pb: &mut ParamBuilder<F>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = pb.fan_in_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim);
        let bias = pb.constant(format!("{name}.bias"), &[out_dim], 0.0);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &[Var], x: Var) -> Result<Var> {
        let h = g.matmul(x, p[self.weight])?;
        g.add_bias(h, p[self.bias])
    }
}

/// Linear → ReLU → Linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new<F: Scalar>(
        pb: &mut ParamBuilder<F>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            hidden: Linear::new(pb, &format!("{name}.fc1"), in_dim, hidden),
            output: Linear::new(pb, &format!("{name}.fc2"), hidden, out_dim),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &[Var], x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.relu(h)?;
        self.output.forward(g, p, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<F: Scalar>(pb: &mut ParamBuilder<F>, name: &str, dim: usize) -> Self {
        Self {
            gamma: pb.constant(format!("{name}.gamma"), &[dim], 1.0),
            beta: pb.constant(format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &[Var], x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta], LAYER_NORM_EPS)
    }
}

/// Post-norm encoder layer with one attention head:
/// `h = LN(x + Attn(x))`, `out = LN(h + FFN(h))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerLayer {
    pub dim: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub norm1: LayerNorm,
    pub ff: Mlp,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

/// Output of a transformer layer plus the attention node for inspection.
pub struct LayerOutput {
    pub output: Var,
    pub attention: Var,
}

impl TransformerLayer {
    pub fn new<F: Scalar>(
        pb: &mut ParamBuilder<F>,
        name: &str,
        dim: usize,
        ff_dim: usize,
        dropout: f64,
    ) -> Self {
        Self {
            dim,
            query: Linear::new(pb, &format!("{name}.attn.q"), dim, dim),
            key: Linear::new(pb, &format!("{name}.attn.k"), dim, dim),
            value: Linear::new(pb, &format!("{name}.attn.v"), dim, dim),
            proj: Linear::new(pb, &format!("{name}.attn.out"), dim, dim),
            norm1: LayerNorm::new(pb, &format!("{name}.norm1"), dim),
            ff: Mlp::new(pb, &format!("{name}.ff"), dim, ff_dim, dim),
            norm2: LayerNorm::new(pb, &format!("{name}.norm2"), dim),
            dropout,
        }
    }

    /// Runs over packed rows; attention never crosses segment boundaries.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &[Var],
        x: Var,
        segments: &[Segment],
        key_mask: Option<&[bool]>,
    ) -> Result<LayerOutput> {
        let d = g.value(x).dims2()?.1;
        if d != self.dim {
            return Err(Error::shape(
                "transformer_layer",
                format!("input width {d}, layer width {}", self.dim),
            ));
        }
        let q = self.query.forward(g, p, x)?;
        let k = self.key.forward(g, p, x)?;
        let v = self.value.forward(g, p, x)?;
        let attention = g.attention(q, k, v, segments, key_mask)?;
        let a = self.proj.forward(g, p, attention)?;
        let a = g.dropout(a, self.dropout)?;
        let h = g.add(x, a)?;
        let h = self.norm1.forward(g, p, h)?;
        let f = self.ff.forward(g, p, h)?;
        let f = g.dropout(f, self.dropout)?;
        let out = g.add(h, f)?;
        let output = self.norm2.forward(g, p, out)?;
        Ok(LayerOutput { output, attention })
    }

    /// Single padded sequence `[T, d]` with a validity mask over its positions.
    pub fn forward_masked<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &[Var],
        x: Var,
        mask: &[bool],
    ) -> Result<LayerOutput> {
        let t = g.value(x).dims2()?.0;
        if mask.len() != t {
            return Err(Error::shape(
                "transformer_layer",
                format!("mask length {} vs sequence length {t}", mask.len()),
            ));
        }
        self.forward(g, p, x, &[Segment { start: 0, len: t }], Some(mask))
    }
}

/// Sinusoidal position table for packed rows; positions restart at every segment.
pub fn sinusoidal_positions<F: Scalar>(segments: &[Segment], dim: usize) -> Result<Tensor<F>> {
    let rows: usize = segments.iter().map(|s| s.start + s.len).max().unwrap_or(0);
    let mut data = vec![F::zero(); rows * dim];
    for seg in segments {
        for pos in 0..seg.len {
            let row = &mut data[(seg.start + pos) * dim..(seg.start + pos + 1) * dim];
            for (i, v) in row.iter_mut().enumerate() {
                let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
                let angle = pos as f64 * freq;
                *v = F::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
    }
    Tensor::new(vec![rows, dim], data)
}
