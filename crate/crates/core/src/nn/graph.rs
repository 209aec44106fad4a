//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards visits
//! every node after all of its consumers. Each op checks its output for
//! non-finite values and fails instead of propagating them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows `[start, start + len)` belonging to one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Backward rule of a user-defined op: maps the output gradient and the input
/// values to one gradient per input.
pub type CustomBackward<F> = Box<dyn Fn(&Tensor<F>, &[&Tensor<F>]) -> Vec<Tensor<F>>>;

enum Op<F: Scalar> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    ConcatCols(Var, Var),
    AppendOnes(Var),
    Outer(Var, Var),
    SumGroups {
        x: Var,
        groups: usize,
    },
    MaskedMean {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    SegmentMean {
        x: Var,
        segments: Vec<Segment>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        probs: Vec<Vec<F>>,
        scale: F,
    },
    Mean(Var),
    ClassLoss {
        probs: Var,
        labels: Vec<usize>,
        weights: Vec<F>,
        gamma: F,
        eps: F,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<F>,
    },
}

struct Node<F: Scalar> {
    op: Op<F>,
    value: Tensor<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the output.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor<F> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

pub struct Graph<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    training: bool,
    rng: Option<ChaCha8Rng>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<F: Scalar>(op: &'static str, t: &Tensor<F>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn same_shape<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
            rng: None,
        }
    }

    /// Graph in training mode; `seed` drives dropout masks.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training: true,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, name: &'static str) -> Result<Var> {
        check_finite(name, &value)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_of(&op).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<F>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::ConcatCols(a, b)
            | Op::Outer(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Softmax { x, .. }
            | Op::AppendOnes(x)
            | Op::SumGroups { x, .. }
            | Op::MaskedMean { x, .. }
            | Op::SegmentMean { x, .. }
            | Op::Mean(x) => vec![*x],
            Op::ClassLoss { probs, .. } => vec![*probs],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<F>) -> Result<Var> {
        check_finite("param", &t)?;
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push(Op::Leaf, t, "constant")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), out, "matmul")
    }

    /// Adds a `[d]` bias to every row of a `[n, d]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (n, d) = xv.dims2()?;
        if bv.shape() != [d] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.data().to_vec();
        for r in 0..n {
            for (o, &b) in out[r * d..(r + 1) * d].iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        self.push(Op::AddBias(x, bias), out, "add_bias")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), out, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(Op::Mul(a, b), out, "mul")
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(Op::Scale(x, c), out, "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(F::zero()));
        self.push(Op::Relu(x), out, "relu")
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::InvalidArgument(format!("dropout rate {p} must be < 1")));
        }
        let keep = F::lit(1.0 / (1.0 - p));
        let shape = self.value(x).shape().to_vec();
        let rng = self.rng.as_mut().expect("training graphs own an rng");
        let mask: Vec<F> = (0..self.nodes[x.0].value.numel())
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let mask = self.constant(Tensor::new(shape, mask)?)?;
        self.mul(x, mask)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let out = softmax_along(xv, axis);
        self.push(Op::Softmax { x, axis }, out, "softmax")
    }

    /// Row-wise layer normalization of a `[n, d]` matrix with affine `[d]` parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = xv.dims2()?;
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    xv.shape(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let eps = F::lit(eps);
        let dn = F::from_usize(d).unwrap();
        let mut xhat = vec![F::zero(); n * d];
        let mut inv_std = vec![F::zero(); n];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * is;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out: Vec<F> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % d] + b[i % d])
            .collect();
        let out = Tensor::new(vec![n, d], out)?;
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
            "layer_norm",
        )
    }

    /// `[n, p] ‖ [n, q] → [n, p + q]`, left block first.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, p) = av.dims2()?;
        let (n2, q) = bv.dims2()?;
        if n != n2 {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let out = Tensor::new(vec![n, p + q], out)?;
        self.push(Op::ConcatCols(a, b), out, "concat_cols")
    }

    /// Appends a constant 1 column: `[n, d] → [n, d + 1]`.
    pub fn append_ones(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = xv.dims2()?;
        let mut out = Vec::with_capacity(n * (d + 1));
        for r in 0..n {
            out.extend_from_slice(xv.row(r));
            out.push(F::one());
        }
        let out = Tensor::new(vec![n, d + 1], out)?;
        self.push(Op::AppendOnes(x), out, "append_ones")
    }

    /// Row-wise flattened outer product: `out[r, i*q + j] = a[r, i] * b[r, j]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, p) = av.dims2()?;
        let (n2, q) = bv.dims2()?;
        if n != n2 {
            return Err(Error::shape(
                "outer",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(n * p * q);
        for r in 0..n {
            for &x in av.row(r) {
                out.extend(bv.row(r).iter().map(|&y| x * y));
            }
        }
        let out = Tensor::new(vec![n, p * q], out)?;
        self.push(Op::Outer(a, b), out, "outer")
    }

    /// Sums `groups` consecutive column blocks: `[n, groups * k] → [n, k]`.
    pub fn sum_groups(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, w) = xv.dims2()?;
        if groups == 0 || w % groups != 0 {
            return Err(Error::shape(
                "sum_groups",
                format!("{w} columns do not split into {groups} groups"),
            ));
        }
        let k = w / groups;
        let mut out = vec![F::zero(); n * k];
        for r in 0..n {
            let row = xv.row(r);
            for g in 0..groups {
                for j in 0..k {
                    out[r * k + j] = out[r * k + j] + row[g * k + j];
                }
            }
        }
        let out = Tensor::new(vec![n, k], out)?;
        self.push(Op::SumGroups { x, groups }, out, "sum_groups")
    }

    /// Mean of the rows of `[t, d]` whose mask entry is set; returns `[d]`.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let (t, d) = xv.dims2()?;
        if mask.len() != t {
            return Err(Error::shape(
                "masked_mean_pool",
                format!("mask length {} vs sequence length {t}", mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptySequence("mask has no valid positions".into()));
        }
        let mut out = vec![F::zero(); d];
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (o, &v) in out.iter_mut().zip(xv.row(r)) {
                *o = *o + v;
            }
        }
        let cn = F::from_usize(count).unwrap();
        out.iter_mut().for_each(|o| *o = *o / cn);
        let out = Tensor::new(vec![d], out)?;
        self.push(
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                count,
            },
            out,
            "masked_mean_pool",
        )
    }

    /// Mean of each segment of a packed `[n, d]` matrix: returns `[segments, d]`.
    pub fn segment_mean(&mut self, x: Var, segments: &[Segment]) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = xv.dims2()?;
        check_segments("segment_mean", segments, n)?;
        let mut out = vec![F::zero(); segments.len() * d];
        for (s, seg) in segments.iter().enumerate() {
            let acc = &mut out[s * d..(s + 1) * d];
            for r in seg.start..seg.start + seg.len {
                for (o, &v) in acc.iter_mut().zip(xv.row(r)) {
                    *o = *o + v;
                }
            }
            let ln = F::from_usize(seg.len).unwrap();
            acc.iter_mut().for_each(|o| *o = *o / ln);
        }
        let out = Tensor::new(vec![segments.len(), d], out)?;
        self.push(
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            out,
            "segment_mean",
        )
    }

    /// Single-head scaled dot-product attention, computed independently for each
    /// segment of the packed `[n, d]` query/key/value matrices. Keys whose
    /// `key_mask` entry is false receive zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        same_shape("attention", qv, kv)?;
        same_shape("attention", qv, vv)?;
        let (n, d) = qv.dims2()?;
        check_segments("attention", segments, n)?;
        if let Some(m) = key_mask {
            if m.len() != n {
                return Err(Error::shape(
                    "attention",
                    format!("mask length {} vs sequence length {n}", m.len()),
                ));
            }
        }
        let scale = F::one() / F::from_usize(d).unwrap().sqrt();
        let mut out = vec![F::zero(); n * d];
        let mut all_probs = Vec::with_capacity(segments.len());
        for seg in segments {
            let (s, t) = (seg.start, seg.len);
            let qs = &qv.data()[s * d..(s + t) * d];
            let ks = &kv.data()[s * d..(s + t) * d];
            let vs = &vv.data()[s * d..(s + t) * d];
            let mut scores = vec![F::zero(); t * t];
            F::gemm(t, d, t, qs, false, ks, true, F::zero(), &mut scores);
            let valid: Vec<bool> = match key_mask {
                Some(m) => m[s..s + t].to_vec(),
                None => vec![true; t],
            };
            if !valid.iter().any(|&b| b) {
                return Err(Error::EmptySequence(format!(
                    "attention segment at row {s} has no unmasked keys"
                )));
            }
            for i in 0..t {
                let row = &mut scores[i * t..(i + 1) * t];
                let mut mx = F::neg_infinity();
                for j in 0..t {
                    if valid[j] {
                        row[j] = row[j] * scale;
                        mx = mx.max(row[j]);
                    }
                }
                let mut z = F::zero();
                for j in 0..t {
                    row[j] = if valid[j] { (row[j] - mx).exp() } else { F::zero() };
                    z = z + row[j];
                }
                row.iter_mut().for_each(|p| *p = *p / z);
            }
            F::gemm(
                t,
                t,
                d,
                &scores,
                false,
                vs,
                false,
                F::zero(),
                &mut out[s * d..(s + t) * d],
            );
            all_probs.push(scores);
        }
        let out = Tensor::new(vec![n, d], out)?;
        self.push(
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                probs: all_probs,
                scale,
            },
            out,
            "attention",
        )
    }

    /// Attention weights `[t, t]` of the `i`-th segment of an attention node.
    pub fn attention_weights(&self, node: Var, segment: usize) -> Option<Tensor<F>> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, segments, .. } => {
                let t = segments.get(segment)?.len;
                Tensor::new(vec![t, t], probs[segment].clone()).ok()
            }
            _ => None,
        }
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let m = xv.sum() / F::from_usize(xv.numel()).unwrap();
        self.push(Op::Mean(x), Tensor::scalar(m), "mean")
    }

    /// Batch mean of `-w_i (1 - p_i)^gamma ln p_i` where `p_i = probs[i, labels[i]]`
    /// is clamped below at `eps`. `gamma = 0` gives weighted cross-entropy.
    pub fn class_loss(
        &mut self,
        probs: Var,
        labels: &[usize],
        sample_weights: &[F],
        gamma: F,
        eps: F,
    ) -> Result<Var> {
        let pv = self.value(probs);
        let (n, c) = pv.dims2()?;
        if labels.len() != n || sample_weights.len() != n {
            return Err(Error::shape(
                "class_loss",
                format!(
                    "{n} rows, {} labels, {} weights",
                    labels.len(),
                    sample_weights.len()
                ),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::shape(
                "class_loss",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let p_true: Vec<F> = labels.iter().enumerate().map(|(i, &y)| pv.at2(i, y)).collect();
        let value = crate::losses::weighted_focal_mean(&p_true, sample_weights, Some(gamma), eps)?;
        self.push(
            Op::ClassLoss {
                probs,
                labels: labels.to_vec(),
                weights: sample_weights.to_vec(),
                gamma,
                eps,
            },
            Tensor::scalar(value),
            "class_loss",
        )
    }

    /// Op with a caller-supplied value and backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<F>,
        backward: CustomBackward<F>,
    ) -> Result<Var> {
        self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            value,
            "custom",
        )
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<F>> {
        if self.value(output).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), F::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            check_finite("backward", &g)?;
            let contributions = self.node_backward(node, &g)?;
            grads[idx] = Some(g);
            for (input, contrib) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if contrib.shape() != self.value(input).shape() {
                    return Err(Error::shape(
                        "backward",
                        format!(
                            "gradient {:?} for input of shape {:?}",
                            contrib.shape(),
                            self.value(input).shape()
                        ),
                    ));
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for g in grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node<F>, g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2()?;
                let (_, n) = bv.dims2()?;
                let mut da = vec![F::zero(); m * k];
                F::gemm(m, n, k, g.data(), false, bv.data(), true, F::zero(), &mut da);
                let mut db = vec![F::zero(); k * n];
                F::gemm(k, m, n, av.data(), true, g.data(), false, F::zero(), &mut db);
                vec![
                    (*a, Tensor::new(vec![m, k], da)?),
                    (*b, Tensor::new(vec![k, n], db)?),
                ]
            }
            Op::AddBias(x, b) => {
                let (n, d) = g.dims2()?;
                let mut db = vec![F::zero(); d];
                for r in 0..n {
                    for (acc, &v) in db.iter_mut().zip(g.row(r)) {
                        *acc = *acc + v;
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::new(vec![d], db)?)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = zip_map(g, bv, |x, y| x * y);
                let db = zip_map(g, av, |x, y| x * y);
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * *c))],
            Op::Relu(x) => {
                let xv = self.value(*x);
                vec![(*x, zip_map(g, xv, |gv, xv| if xv > F::zero() { gv } else { F::zero() }))]
            }
            Op::Softmax { x, axis } => vec![(*x, softmax_backward(out, g, *axis))],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = g.dims2()?;
                let gm = self.value(*gamma).data();
                let dn = F::from_usize(d).unwrap();
                let mut dx = vec![F::zero(); n * d];
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                for r in 0..n {
                    let gr = g.row(r);
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = F::zero();
                    let mut sum_dh_h = F::zero();
                    for j in 0..d {
                        let dh = gr[j] * gm[j];
                        sum_dh = sum_dh + dh;
                        sum_dh_h = sum_dh_h + dh * hr[j];
                        dgamma[j] = dgamma[j] + gr[j] * hr[j];
                        dbeta[j] = dbeta[j] + gr[j];
                    }
                    for j in 0..d {
                        let dh = gr[j] * gm[j];
                        dx[r * d + j] =
                            inv_std[r] * (dh - sum_dh / dn - hr[j] * sum_dh_h / dn);
                    }
                }
                vec![
                    (*x, Tensor::new(vec![n, d], dx)?),
                    (*gamma, Tensor::new(vec![d], dgamma)?),
                    (*beta, Tensor::new(vec![d], dbeta)?),
                ]
            }
            Op::ConcatCols(a, b) => {
                let (n, p) = self.value(*a).dims2()?;
                let q = self.value(*b).dims2()?.1;
                let mut da = Vec::with_capacity(n * p);
                let mut db = Vec::with_capacity(n * q);
                for r in 0..n {
                    let row = g.row(r);
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                vec![
                    (*a, Tensor::new(vec![n, p], da)?),
                    (*b, Tensor::new(vec![n, q], db)?),
                ]
            }
            Op::AppendOnes(x) => {
                let (n, d) = self.value(*x).dims2()?;
                let mut dx = Vec::with_capacity(n * d);
                for r in 0..n {
                    dx.extend_from_slice(&g.row(r)[..d]);
                }
                vec![(*x, Tensor::new(vec![n, d], dx)?)]
            }
            Op::Outer(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, p) = av.dims2()?;
                let q = bv.dims2()?.1;
                let mut da = vec![F::zero(); n * p];
                let mut db = vec![F::zero(); n * q];
                for r in 0..n {
                    let gr = g.row(r);
                    let (ar, br) = (av.row(r), bv.row(r));
                    for i in 0..p {
                        for j in 0..q {
                            let gv = gr[i * q + j];
                            da[r * p + i] = da[r * p + i] + gv * br[j];
                            db[r * q + j] = db[r * q + j] + gv * ar[i];
                        }
                    }
                }
                vec![
                    (*a, Tensor::new(vec![n, p], da)?),
                    (*b, Tensor::new(vec![n, q], db)?),
                ]
            }
            Op::SumGroups { x, groups } => {
                let (n, k) = g.dims2()?;
                let mut dx = Vec::with_capacity(n * k * groups);
                for r in 0..n {
                    for _ in 0..*groups {
                        dx.extend_from_slice(g.row(r));
                    }
                }
                vec![(*x, Tensor::new(vec![n, k * groups], dx)?)]
            }
            Op::MaskedMean { x, mask, count } => {
                let (t, d) = self.value(*x).dims2()?;
                let cn = F::from_usize(*count).unwrap();
                let mut dx = vec![F::zero(); t * d];
                for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for j in 0..d {
                        dx[r * d + j] = g.data()[j] / cn;
                    }
                }
                vec![(*x, Tensor::new(vec![t, d], dx)?)]
            }
            Op::SegmentMean { x, segments } => {
                let (n, d) = self.value(*x).dims2()?;
                let mut dx = vec![F::zero(); n * d];
                for (s, seg) in segments.iter().enumerate() {
                    let ln = F::from_usize(seg.len).unwrap();
                    let gs = g.row(s);
                    for r in seg.start..seg.start + seg.len {
                        for j in 0..d {
                            dx[r * d + j] = gs[j] / ln;
                        }
                    }
                }
                vec![(*x, Tensor::new(vec![n, d], dx)?)]
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                probs,
                scale,
                ..
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = qv.dims2()?;
                let mut dq = vec![F::zero(); n * d];
                let mut dk = vec![F::zero(); n * d];
                let mut dv = vec![F::zero(); n * d];
                for (seg, p) in segments.iter().zip(probs) {
                    let (s, t) = (seg.start, seg.len);
                    let rows = s * d..(s + t) * d;
                    let gs = &g.data()[rows.clone()];
                    // dV = Pᵀ dO
                    F::gemm(t, t, d, p, true, gs, false, F::zero(), &mut dv[rows.clone()]);
                    // dP = dO Vᵀ
                    let mut dp = vec![F::zero(); t * t];
                    F::gemm(t, d, t, gs, false, &vv.data()[rows.clone()], true, F::zero(), &mut dp);
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
                    for i in 0..t {
                        let pr = &p[i * t..(i + 1) * t];
                        let dr = &mut dp[i * t..(i + 1) * t];
                        let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                        for j in 0..t {
                            dr[j] = pr[j] * (dr[j] - dot) * *scale;
                        }
                    }
                    F::gemm(t, t, d, &dp, false, &kv.data()[rows.clone()], false, F::zero(), &mut dq[rows.clone()]);
                    F::gemm(t, t, d, &dp, true, &qv.data()[rows.clone()], false, F::zero(), &mut dk[rows.clone()]);
                }
                vec![
                    (*q, Tensor::new(vec![n, d], dq)?),
                    (*k, Tensor::new(vec![n, d], dk)?),
                    (*v, Tensor::new(vec![n, d], dv)?),
                ]
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let c = g.data()[0] / F::from_usize(xv.numel()).unwrap();
                vec![(*x, Tensor::full(xv.shape(), c))]
            }
            Op::ClassLoss {
                probs,
                labels,
                weights,
                gamma,
                eps,
            } => {
                let pv = self.value(*probs);
                let (n, c) = pv.dims2()?;
                let nn = F::from_usize(n).unwrap();
                let mut dp = vec![F::zero(); n * c];
                for (i, &y) in labels.iter().enumerate() {
                    let p = pv.at2(i, y);
                    if p < *eps {
                        continue;
                    }
                    let d = focal_term_derivative(p, *gamma);
                    dp[i * c + y] = g.data()[0] * weights[i] * d / nn;
                }
                vec![(*probs, Tensor::new(vec![n, c], dp)?)]
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<F>> = inputs.iter().map(|i| self.value(*i)).collect();
                let gs = backward(g, &vals);
                if gs.len() != inputs.len() {
                    return Err(Error::shape(
                        "custom",
                        format!("{} gradients for {} inputs", gs.len(), inputs.len()),
                    ));
                }
                inputs.iter().copied().zip(gs).collect()
            }
        })
    }
}

/// d/dp of `-(1 - p)^gamma ln p`.
fn focal_term_derivative<F: Scalar>(p: F, gamma: F) -> F {
    let one = F::one();
    let base = -(one / p);
    if gamma == F::zero() {
        return base;
    }
    let q = one - p;
    let modulating = q.powf(gamma);
    let slope = if p >= one {
        F::zero()
    } else {
        gamma * q.powf(gamma - one) * p.ln()
    };
    modulating * base + slope
}

fn check_segments(op: &'static str, segments: &[Segment], rows: usize) -> Result<()> {
    if segments.is_empty() {
        return Err(Error::Empty(format!("{op}: no segments")));
    }
    for s in segments {
        if s.len == 0 {
            return Err(Error::EmptySequence(format!("{op}: zero-length segment at row {}", s.start)));
        }
        if s.start + s.len > rows {
            return Err(Error::shape(
                op,
                format!("segment {}..{} exceeds {rows} rows", s.start, s.start + s.len),
            ));
        }
    }
    Ok(())
}

fn zip_map<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes already match")
}

/// Iterates over the 1-D lanes along `axis`, yielding flat index lists.
fn lanes(shape: &[usize], axis: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    (0..outer).flat_map(move |o| {
        (0..inner).map(move |i| (0..len).map(|a| (o * len + a) * inner + i).collect())
    })
}

pub(crate) fn softmax_along<F: Scalar>(x: &Tensor<F>, axis: usize) -> Tensor<F> {
    let mut out = x.data().to_vec();
    for lane in lanes(x.shape(), axis) {
        let mx = lane.iter().map(|&i| out[i]).fold(F::neg_infinity(), F::max);
        let mut z = F::zero();
        for &i in &lane {
            out[i] = (out[i] - mx).exp();
            z = z + out[i];
        }
        for &i in &lane {
            out[i] = out[i] / z;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn softmax_backward<F: Scalar>(y: &Tensor<F>, g: &Tensor<F>, axis: usize) -> Tensor<F> {
    let mut dx = vec![F::zero(); y.numel()];
    let (yd, gd) = (y.data(), g.data());
    for lane in lanes(y.shape(), axis) {
        let dot: F = lane.iter().map(|&i| yd[i] * gd[i]).sum();
        for &i in &lane {
            dx[i] = yd[i] * (gd[i] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), dx).expect("same shape")
}
