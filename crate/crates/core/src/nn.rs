//! Feed-forward text classifiers: embedding lookup followed by a stack of
//! conv / relu / avgpool / linear layers.
//!
//! The per-element kernels (`conv1d_cell`, `linear_cell`, pooling sums) are
//! the single source of truth for summation order. Interval propagation
//! reuses them for center terms, so a zero-radius interval reproduces the
//! forward pass bit for bit.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type TokenId = usize;

/// Token-to-vector table. `trainable` decides whether the optimizer updates
/// it; the table is always saved in checkpoints either way.
#[derive(Clone, Debug)]
pub struct Embedding<F> {
    pub table: Tensor<F>,
    pub trainable: bool,
}

impl<F: Scalar> Embedding<F> {
    pub fn new(table: Tensor<F>, trainable: bool) -> Result<Self> {
        if table.rank() != 2 {
            return Err(Error::shape("Embedding::new", "table must be rank 2"));
        }
        Ok(Embedding { table, trainable })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn row(&self, token: TokenId) -> &[F] {
        self.table.row(token)
    }

    /// Stacks token rows into an (L, d) matrix.
    pub fn embed(&self, tokens: &[TokenId]) -> Result<Tensor<F>> {
        let d = self.dim();
        let v = self.vocab_size();
        let mut out = Tensor::zeros(vec![tokens.len(), d]);
        for (i, &t) in tokens.iter().enumerate() {
            if t >= v {
                return Err(Error::shape(
                    "Embedding::embed",
                    format!("token id {t} out of range for vocab {v}"),
                ));
            }
            out.row_mut(i).copy_from_slice(self.table.row(t));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub enum Layer<F> {
    /// Valid (no padding) 1-D convolution over the sequence axis.
    /// weight: (channels, width, in_dim), bias: (channels).
    Conv1d { weight: Tensor<F>, bias: Tensor<F> },
    Relu,
    /// Mean over the sequence axis: (T, C) -> (C).
    AvgPool,
    /// weight: (out, in), bias: (out).
    Linear { weight: Tensor<F>, bias: Tensor<F> },
}

impl<F: Scalar> Layer<F> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv1d { .. } => "conv",
            Layer::Relu => "relu",
            Layer::AvgPool => "avgpool",
            Layer::Linear { .. } => "linear",
        }
    }

    pub fn conv_width(&self) -> Option<usize> {
        match self {
            Layer::Conv1d { weight, .. } => Some(weight.shape()[1]),
            _ => None,
        }
    }

    /// Output shape for a given input shape, validating dimensions.
    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv1d { weight, .. } => {
                let (c, w, d) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
                match input {
                    [l, din] if *din == d && *l >= w => Ok(vec![l - w + 1, c]),
                    [l, din] if *din == d => Err(Error::SequenceTooShort { len: *l, min: w }),
                    other => Err(Error::shape(
                        "conv",
                        format!("input {:?} incompatible with weight {:?}", other, weight.shape()),
                    )),
                }
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::AvgPool => match input {
                [t, c] if *t >= 1 => Ok(vec![*c]),
                other => Err(Error::shape("avgpool", format!("needs rank 2, got {:?}", other))),
            },
            Layer::Linear { weight, .. } => {
                let (o, i) = (weight.shape()[0], weight.shape()[1]);
                match input {
                    [n] if *n == i => Ok(vec![o]),
                    other => Err(Error::shape(
                        "linear",
                        format!("input {:?} incompatible with weight ({o}, {i})", other),
                    )),
                }
            }
        }
    }
}

/// One inner-product cell of a valid 1-D convolution: output element (t, c).
/// `row_at(i)` must return input row i of length `dim`. All call sites share
/// this accumulation order.
#[inline]
pub(crate) fn conv1d_cell<'a, F: Scalar>(
    weight: &Tensor<F>,
    bias_c: F,
    c: usize,
    t: usize,
    width: usize,
    dim: usize,
    row_at: &impl Fn(usize) -> &'a [F],
) -> F {
    let wdata = weight.data();
    let wbase = c * width * dim;
    let mut acc = bias_c;
    for j in 0..width {
        let wrow = &wdata[wbase + j * dim..wbase + (j + 1) * dim];
        let xrow = row_at(t + j);
        for k in 0..dim {
            acc = acc + wrow[k] * xrow[k];
        }
    }
    acc
}

/// Same cell with |w| weights, zero bias. Used for interval radii.
#[inline]
pub(crate) fn conv1d_cell_abs<'a, F: Scalar>(
    weight: &Tensor<F>,
    c: usize,
    t: usize,
    width: usize,
    dim: usize,
    row_at: &impl Fn(usize) -> &'a [F],
) -> F {
    let wdata = weight.data();
    let wbase = c * width * dim;
    let mut acc = F::zero();
    for j in 0..width {
        let wrow = &wdata[wbase + j * dim..wbase + (j + 1) * dim];
        let xrow = row_at(t + j);
        for k in 0..dim {
            acc = acc + wrow[k].abs() * xrow[k];
        }
    }
    acc
}

pub(crate) fn conv1d_apply<F: Scalar>(weight: &Tensor<F>, bias: &Tensor<F>, x: &Tensor<F>) -> Tensor<F> {
    let (c_out, width, dim) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    let t_out = x.rows() + 1 - width;
    let mut out = Tensor::zeros(vec![t_out, c_out]);
    let row_at = |i: usize| x.row(i);
    for t in 0..t_out {
        for c in 0..c_out {
            out.set2(t, c, conv1d_cell(weight, bias.at1(c), c, t, width, dim, &row_at));
        }
    }
    out
}

pub(crate) fn conv1d_apply_abs<F: Scalar>(weight: &Tensor<F>, r: &Tensor<F>) -> Tensor<F> {
    let (c_out, width, dim) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    let t_out = r.rows() + 1 - width;
    let mut out = Tensor::zeros(vec![t_out, c_out]);
    let row_at = |i: usize| r.row(i);
    for t in 0..t_out {
        for c in 0..c_out {
            out.set2(t, c, conv1d_cell_abs(weight, c, t, width, dim, &row_at));
        }
    }
    out
}

#[inline]
pub(crate) fn linear_cell<F: Scalar>(weight: &Tensor<F>, bias_o: F, o: usize, x: &[F]) -> F {
    let n = weight.cols();
    let wrow = &weight.data()[o * n..(o + 1) * n];
    let mut acc = bias_o;
    for i in 0..n {
        acc = acc + wrow[i] * x[i];
    }
    acc
}

#[inline]
pub(crate) fn linear_cell_abs<F: Scalar>(weight: &Tensor<F>, o: usize, x: &[F]) -> F {
    let n = weight.cols();
    let wrow = &weight.data()[o * n..(o + 1) * n];
    let mut acc = F::zero();
    for i in 0..n {
        acc = acc + wrow[i].abs() * x[i];
    }
    acc
}

pub(crate) fn linear_apply<F: Scalar>(weight: &Tensor<F>, bias: &Tensor<F>, x: &Tensor<F>) -> Tensor<F> {
    let o_out = weight.rows();
    let mut out = Tensor::zeros(vec![o_out]);
    for o in 0..o_out {
        out.data_mut()[o] = linear_cell(weight, bias.at1(o), o, x.data());
    }
    out
}

pub(crate) fn linear_apply_abs<F: Scalar>(weight: &Tensor<F>, r: &Tensor<F>) -> Tensor<F> {
    let o_out = weight.rows();
    let mut out = Tensor::zeros(vec![o_out]);
    for o in 0..o_out {
        out.data_mut()[o] = linear_cell_abs(weight, o, r.data());
    }
    out
}

pub(crate) fn avgpool_apply<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (t_len, c_len) = (x.rows(), x.cols());
    let inv = F::one() / F::from_f64(t_len as f64);
    let mut out = Tensor::zeros(vec![c_len]);
    for c in 0..c_len {
        let mut acc = F::zero();
        for t in 0..t_len {
            acc = acc + x.at2(t, c);
        }
        out.data_mut()[c] = acc * inv;
    }
    out
}

pub(crate) fn relu_apply<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v.max(F::zero()))
}

pub(crate) fn apply_layer<F: Scalar>(layer: &Layer<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    layer.out_shape(x.shape())?;
    Ok(match layer {
        Layer::Conv1d { weight, bias } => conv1d_apply(weight, bias, x),
        Layer::Relu => relu_apply(x),
        Layer::AvgPool => avgpool_apply(x),
        Layer::Linear { weight, bias } => linear_apply(weight, bias, x),
    })
}

/// Embedding plus layer stack. Bounds start after the embedding, which is
/// why the embedding is not just another layer.
#[derive(Clone, Debug)]
pub struct Network<F> {
    pub embedding: Embedding<F>,
    pub layers: Vec<Layer<F>>,
    pub class_count: usize,
}

/// All intermediate activations of one forward pass:
/// `activations[0]` is the embedded input, `activations[i + 1]` the output
/// of layer i.
#[derive(Clone, Debug)]
pub struct ForwardTrace<F> {
    pub activations: Vec<Tensor<F>>,
}

impl<F: Scalar> ForwardTrace<F> {
    pub fn logits(&self) -> &Tensor<F> {
        self.activations.last().expect("trace is never empty")
    }
}

impl<F: Scalar> Network<F> {
    pub fn new(embedding: Embedding<F>, layers: Vec<Layer<F>>, class_count: usize) -> Result<Self> {
        let net = Network {
            embedding,
            layers,
            class_count,
        };
        net.validate()?;
        Ok(net)
    }

    /// Checks that shapes chain at the minimum sequence length and that the
    /// stack ends in `class_count` logits.
    pub fn validate(&self) -> Result<()> {
        let mut shape = vec![self.min_seq_len(), self.embedding.dim()];
        for layer in &self.layers {
            shape = layer.out_shape(&shape)?;
        }
        if shape != [self.class_count] {
            return Err(Error::shape(
                "Network::validate",
                format!("stack produces {:?}, wanted [{}] logits", shape, self.class_count),
            ));
        }
        Ok(())
    }

    /// Shortest sequence the network accepts (first conv width, else 1).
    pub fn min_seq_len(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| l.conv_width())
            .unwrap_or(1)
    }

    pub fn embed(&self, tokens: &[TokenId]) -> Result<Tensor<F>> {
        self.embedding.embed(tokens)
    }

    pub fn forward_embedded(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = apply_layer(layer, &cur)?;
        }
        Ok(cur)
    }

    pub fn forward_tokens(&self, tokens: &[TokenId]) -> Result<Tensor<F>> {
        self.forward_embedded(&self.embed(tokens)?)
    }

    /// Forward pass that keeps every activation for backprop.
    pub fn forward_trace(&self, x: &Tensor<F>) -> Result<ForwardTrace<F>> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for layer in &self.layers {
            let next = apply_layer(layer, activations.last().unwrap())?;
            activations.push(next);
        }
        Ok(ForwardTrace { activations })
    }

    /// Parameter tensors in checkpoint order. Includes the embedding table
    /// whether or not it is trainable.
    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding.table)];
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv1d { weight, bias } | Layer::Linear { weight, bias } => {
                    out.push((format!("layer{i}.weight"), weight));
                    out.push((format!("layer{i}.bias"), bias));
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Lossy precision cast of every parameter.
    pub fn cast<G: Scalar>(&self) -> Network<G> {
        Network {
            embedding: Embedding {
                table: self.embedding.table.cast(),
                trainable: self.embedding.trainable,
            },
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv1d { weight, bias } => Layer::Conv1d {
                        weight: weight.cast(),
                        bias: bias.cast(),
                    },
                    Layer::Relu => Layer::Relu,
                    Layer::AvgPool => Layer::AvgPool,
                    Layer::Linear { weight, bias } => Layer::Linear {
                        weight: weight.cast(),
                        bias: bias.cast(),
                    },
                })
                .collect(),
            class_count: self.class_count,
        }
    }
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax<F: Scalar>(logits: &Tensor<F>) -> usize {
    let mut best = 0;
    for i in 1..logits.len() {
        if logits.at1(i) > logits.at1(best) {
            best = i;
        }
    }
    best
}

/// Numerically stable log(sum(exp(z))).
pub fn log_sum_exp<F: Scalar>(z: &[F]) -> F {
    let m = z.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let mut s = F::zero();
    for &v in z {
        s = s + (v - m).exp();
    }
    m + s.ln()
}

/// Cross-entropy of a single logit vector against an integer label.
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, label: usize) -> Result<F> {
    if label >= logits.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("label {label} vs {} logits", logits.len()),
        ));
    }
    Ok(log_sum_exp(logits.data()) - logits.at1(label))
}

/// Cross-entropy and its gradient w.r.t. the logits (softmax minus one-hot).
pub fn cross_entropy_with_grad<F: Scalar>(logits: &Tensor<F>, label: usize) -> Result<(F, Tensor<F>)> {
    let loss = cross_entropy(logits, label)?;
    let m = logits.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let mut grad = logits.map(|v| (v - m).exp());
    let z: F = grad.iter().fold(F::zero(), |a, &b| a + b);
    grad.scale(F::one() / z);
    grad.data_mut()[label] = grad.at1(label) - F::one();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn conv1d_matches_hand_computation() {
        // 1 channel, width 2, dim 1: sliding dot product plus bias.
        let weight = Tensor::new(vec![1, 2, 1], vec![2.0, -1.0]).unwrap();
        let bias = Tensor::from_vec(vec![0.5]);
        let x = t2(&[vec![1.0], vec![3.0], vec![-2.0]]);
        let out = conv1d_apply(&weight, &bias, &x);
        assert_eq!(out.shape(), &[2, 1]);
        // t=0: 2*1 - 1*3 + 0.5 = -0.5; t=1: 2*3 - 1*(-2) + 0.5 = 8.5
        assert_eq!(out.data(), &[-0.5, 8.5]);
    }

    #[test]
    fn conv1d_two_channels_dim_two() {
        // channels 2, width 1, dim 2: per-position linear map.
        let weight = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        let bias = Tensor::from_vec(vec![0.0, 1.0]);
        let x = t2(&[vec![3.0, 4.0], vec![-1.0, 2.0]]);
        let out = conv1d_apply(&weight, &bias, &x);
        assert_eq!(out.shape(), &[2, 2]);
        assert_eq!(out.data(), &[3.0, -3.0, -1.0, -1.0]);
    }

    #[test]
    fn avgpool_means_over_time() {
        let x = t2(&[vec![1.0, 10.0], vec![3.0, 20.0]]);
        let out = avgpool_apply(&x);
        assert_eq!(out.data(), &[2.0, 15.0]);
    }

    #[test]
    fn linear_matches_hand_computation() {
        let weight = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, -1.0, 1.0]).unwrap();
        let bias = Tensor::from_vec(vec![0.0, 5.0]);
        let x = Tensor::from_vec(vec![1.0, 1.0, 2.0]);
        let out = linear_apply(&weight, &bias, &x);
        assert_eq!(out.data(), &[9.0, 6.0]);
    }

    #[test]
    fn forward_chains_layers() {
        // embed(dim 1) -> conv(w1, c1, identity) -> relu -> avgpool -> linear
        let table = t2(&[vec![-1.0], vec![2.0], vec![0.5]]);
        let net = Network::new(
            Embedding::new(table, false).unwrap(),
            vec![
                Layer::Conv1d {
                    weight: Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(),
                    bias: Tensor::from_vec(vec![0.0]),
                },
                Layer::Relu,
                Layer::AvgPool,
                Layer::Linear {
                    weight: Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap(),
                    bias: Tensor::from_vec(vec![0.0, 0.0]),
                },
            ],
            2,
        )
        .unwrap();
        // tokens [0, 1, 2] -> embedded [-1, 2, 0.5] -> relu [0, 2, 0.5]
        // -> mean 2.5/3 -> logits [2.5/3, -2.5/3]
        let logits = net.forward_tokens(&[0, 1, 2]).unwrap();
        let want = 2.5 / 3.0;
        assert!((logits.at1(0) - want).abs() < 1e-12);
        assert!((logits.at1(1) + want).abs() < 1e-12);
        assert_eq!(argmax(&logits), 0);
    }

    #[test]
    fn validate_rejects_mismatched_stack() {
        let table = t2(&[vec![0.0, 0.0]]);
        let bad = Network::new(
            Embedding::new(table, false).unwrap(),
            vec![Layer::Linear {
                weight: Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap(),
                bias: Tensor::from_vec(vec![0.0, 0.0]),
            }],
            2,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn short_sequence_is_rejected() {
        let table = t2(&[vec![0.0], vec![1.0]]);
        let net = Network::new(
            Embedding::new(table, false).unwrap(),
            vec![
                Layer::Conv1d {
                    weight: Tensor::new(vec![1, 3, 1], vec![1.0, 1.0, 1.0]).unwrap(),
                    bias: Tensor::from_vec(vec![0.0]),
                },
                Layer::Relu,
                Layer::AvgPool,
                Layer::Linear {
                    weight: Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap(),
                    bias: Tensor::from_vec(vec![0.0, 0.0]),
                },
            ],
            2,
        )
        .unwrap();
        assert_eq!(net.min_seq_len(), 3);
        assert!(matches!(
            net.forward_tokens(&[0, 1]),
            Err(Error::SequenceTooShort { len: 2, min: 3 })
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        // Equal logits over K classes: loss = ln K regardless of label.
        let logits = Tensor::from_vec(vec![0.3f64, 0.3, 0.3]);
        let loss = cross_entropy(&logits, 1).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let logits = Tensor::from_vec(vec![1.0f64, -1.0]);
        let (_, g) = cross_entropy_with_grad(&logits, 0).unwrap();
        let p0 = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((g.at1(0) - (p0 - 1.0)).abs() < 1e-12);
        assert!((g.at1(1) - (1.0 - p0)).abs() < 1e-12);
        // Gradient entries sum to zero.
        assert!((g.at1(0) + g.at1(1)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let logits = Tensor::from_vec(vec![1000.0f64, 0.0]);
        let loss = cross_entropy(&logits, 0).unwrap();
        assert!(loss.is_finite());
        assert!(loss >= 0.0 && loss < 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let logits = Tensor::from_vec(vec![1.0f32, 1.0, 0.0]);
        assert_eq!(argmax(&logits), 0);
    }
}
