//! Reverse-mode gradients for `Network` forward passes.
//!
//! `backward` consumes a `ForwardTrace` and an upstream gradient on the
//! logits, accumulates parameter gradients, and returns the gradient with
//! respect to the embedded input (needed both for embedding updates and for
//! first-order attacks).

use crate::error::{Error, Result};
use crate::nn::{ForwardTrace, Layer, Network, TokenId};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub enum LayerGrads<F> {
    Conv1d { weight: Tensor<F>, bias: Tensor<F> },
    Linear { weight: Tensor<F>, bias: Tensor<F> },
    None,
}

/// Gradient accumulator shaped like a network's parameters. The embedding
/// slot exists only when the embedding is trainable.
#[derive(Clone, Debug)]
pub struct ParamGrads<F> {
    pub embedding: Option<Tensor<F>>,
    pub layers: Vec<LayerGrads<F>>,
}

impl<F: Scalar> ParamGrads<F> {
    pub fn zeros_like(net: &Network<F>) -> Self {
        let embedding = net
            .embedding
            .trainable
            .then(|| Tensor::zeros(net.embedding.table.shape().to_vec()));
        let layers = net
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv1d { weight, bias } => LayerGrads::Conv1d {
                    weight: Tensor::zeros(weight.shape().to_vec()),
                    bias: Tensor::zeros(bias.shape().to_vec()),
                },
                Layer::Linear { weight, bias } => LayerGrads::Linear {
                    weight: Tensor::zeros(weight.shape().to_vec()),
                    bias: Tensor::zeros(bias.shape().to_vec()),
                },
                _ => LayerGrads::None,
            })
            .collect();
        ParamGrads { embedding, layers }
    }

    pub fn zero(&mut self) {
        if let Some(e) = &mut self.embedding {
            e.fill(F::zero());
        }
        for lg in &mut self.layers {
            match lg {
                LayerGrads::Conv1d { weight, bias } | LayerGrads::Linear { weight, bias } => {
                    weight.fill(F::zero());
                    bias.fill(F::zero());
                }
                LayerGrads::None => {}
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        if let Some(e) = &mut self.embedding {
            e.scale(s);
        }
        for lg in &mut self.layers {
            match lg {
                LayerGrads::Conv1d { weight, bias } | LayerGrads::Linear { weight, bias } => {
                    weight.scale(s);
                    bias.scale(s);
                }
                LayerGrads::None => {}
            }
        }
    }

    /// Flattens gradients in the same order as the optimizer walks
    /// parameters. Used by tests and divergence checks.
    pub fn flat(&self) -> Vec<F> {
        let mut out = Vec::new();
        if let Some(e) = &self.embedding {
            out.extend_from_slice(e.data());
        }
        for lg in &self.layers {
            match lg {
                LayerGrads::Conv1d { weight, bias } | LayerGrads::Linear { weight, bias } => {
                    out.extend_from_slice(weight.data());
                    out.extend_from_slice(bias.data());
                }
                LayerGrads::None => {}
            }
        }
        out
    }
}

/// Propagates `logit_grad` back through the trace. Parameter gradients are
/// accumulated (not overwritten) into `grads`; the returned tensor is the
/// gradient w.r.t. the embedded input. Embedding rows are not touched here;
/// see `scatter_embedding_grad`.
pub fn backward<F: Scalar>(
    net: &Network<F>,
    trace: &ForwardTrace<F>,
    logit_grad: &Tensor<F>,
    grads: &mut ParamGrads<F>,
) -> Result<Tensor<F>> {
    if trace.activations.len() != net.layers.len() + 1 {
        return Err(Error::shape("backward", "trace does not match network depth"));
    }
    if grads.layers.len() != net.layers.len() {
        return Err(Error::shape("backward", "grads do not match network depth"));
    }
    let mut g = logit_grad.clone();
    for (i, layer) in net.layers.iter().enumerate().rev() {
        let x = &trace.activations[i];
        g = match (layer, &mut grads.layers[i]) {
            (Layer::Relu, _) => {
                // Subgradient 0 at exactly 0.
                x.zip_map(&g, |xi, gi| if xi > F::zero() { gi } else { F::zero() })?
            }
            (Layer::AvgPool, _) => {
                let (t_len, c_len) = (x.rows(), x.cols());
                if g.shape() != [c_len] {
                    return Err(Error::shape("backward", "avgpool upstream shape"));
                }
                let inv = F::one() / F::from_f64(t_len as f64);
                let mut gin = Tensor::zeros(vec![t_len, c_len]);
                for t in 0..t_len {
                    for c in 0..c_len {
                        gin.set2(t, c, g.at1(c) * inv);
                    }
                }
                gin
            }
            (Layer::Linear { weight, .. }, LayerGrads::Linear { weight: gw, bias: gb }) => {
                let (o_len, i_len) = (weight.rows(), weight.cols());
                if g.shape() != [o_len] || x.shape() != [i_len] {
                    return Err(Error::shape("backward", "linear shapes"));
                }
                let mut gin = Tensor::zeros(vec![i_len]);
                for o in 0..o_len {
                    let go = g.at1(o);
                    gb.data_mut()[o] = gb.at1(o) + go;
                    for ii in 0..i_len {
                        gw.data_mut()[o * i_len + ii] =
                            gw.at1(o * i_len + ii) + go * x.at1(ii);
                        gin.data_mut()[ii] = gin.at1(ii) + go * weight.at2(o, ii);
                    }
                }
                gin
            }
            (Layer::Conv1d { weight, .. }, LayerGrads::Conv1d { weight: gw, bias: gb }) => {
                let (c_out, width, dim) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
                let t_out = x.rows() + 1 - width;
                if g.shape() != [t_out, c_out] {
                    return Err(Error::shape("backward", "conv upstream shape"));
                }
                let mut gin = Tensor::zeros(vec![x.rows(), dim]);
                for t in 0..t_out {
                    for c in 0..c_out {
                        let go = g.at2(t, c);
                        if go == F::zero() {
                            continue;
                        }
                        gb.data_mut()[c] = gb.at1(c) + go;
                        let wbase = c * width * dim;
                        for j in 0..width {
                            let xrow = x.row(t + j);
                            let grow = gin.row_mut(t + j);
                            let wrow = &weight.data()[wbase + j * dim..wbase + (j + 1) * dim];
                            let gwrow = &mut gw.data_mut()[wbase + j * dim..wbase + (j + 1) * dim];
                            for k in 0..dim {
                                gwrow[k] = gwrow[k] + go * xrow[k];
                                grow[k] = grow[k] + go * wrow[k];
                            }
                        }
                    }
                }
                gin
            }
            _ => return Err(Error::shape("backward", "grads enum does not match layer kind")),
        };
    }
    Ok(g)
}

/// Routes an embedded-input gradient into embedding-table rows. No-op for
/// frozen embeddings.
pub fn scatter_embedding_grad<F: Scalar>(
    net: &Network<F>,
    tokens: &[TokenId],
    input_grad: &Tensor<F>,
    grads: &mut ParamGrads<F>,
) -> Result<()> {
    let Some(etab) = &mut grads.embedding else {
        return Ok(());
    };
    if input_grad.shape() != [tokens.len(), net.embedding.dim()] {
        return Err(Error::shape("scatter_embedding_grad", "input grad shape"));
    }
    for (pos, &tok) in tokens.iter().enumerate() {
        let src = input_grad.row(pos);
        let dst = etab.row_mut(tok);
        for k in 0..src.len() {
            dst[k] = dst[k] + src[k];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{cross_entropy_with_grad, Embedding};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn tiny_net(rng: &mut ChaCha8Rng) -> Network<f64> {
        Network::new(
            Embedding::new(rand_tensor(rng, vec![5, 3]), true).unwrap(),
            vec![
                Layer::Conv1d {
                    weight: rand_tensor(rng, vec![4, 2, 3]),
                    bias: rand_tensor(rng, vec![4]),
                },
                Layer::Relu,
                Layer::AvgPool,
                Layer::Linear {
                    weight: rand_tensor(rng, vec![3, 4]),
                    bias: rand_tensor(rng, vec![3]),
                },
            ],
            3,
        )
        .unwrap()
    }

    /// Mutable views over every trainable parameter, ordered like
    /// `ParamGrads::flat`.
    fn param_slices<'a>(net: &'a mut Network<f64>) -> Vec<&'a mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        if net.embedding.trainable {
            out.push(net.embedding.table.data_mut());
        }
        for layer in &mut net.layers {
            match layer {
                Layer::Conv1d { weight, bias } | Layer::Linear { weight, bias } => {
                    out.push(weight.data_mut());
                    out.push(bias.data_mut());
                }
                _ => {}
            }
        }
        out
    }

    fn loss_of(net: &Network<f64>, tokens: &[usize], label: usize) -> f64 {
        let logits = net.forward_tokens(tokens).unwrap();
        crate::nn::cross_entropy(&logits, label).unwrap()
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = tiny_net(&mut rng);
        let tokens = vec![0usize, 3, 1, 4];
        let label = 2usize;

        let x = net.embed(&tokens).unwrap();
        let trace = net.forward_trace(&x).unwrap();
        let (_, lg) = cross_entropy_with_grad(trace.logits(), label).unwrap();
        let mut grads = ParamGrads::zeros_like(&net);
        let gin = backward(&net, &trace, &lg, &mut grads).unwrap();
        scatter_embedding_grad(&net, &tokens, &gin, &mut grads).unwrap();
        let analytic = grads.flat();

        let eps = 1e-6;
        let mut idx = 0;
        let n_slices = param_slices(&mut net).len();
        for s in 0..n_slices {
            let len = param_slices(&mut net)[s].len();
            for i in 0..len {
                let orig = param_slices(&mut net)[s][i];
                param_slices(&mut net)[s][i] = orig + eps;
                let lp = loss_of(&net, &tokens, label);
                param_slices(&mut net)[s][i] = orig - eps;
                let lm = loss_of(&net, &tokens, label);
                param_slices(&mut net)[s][i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let a = analytic[idx];
                let denom = fd.abs().max(a.abs()).max(1e-8);
                assert!(
                    (fd - a).abs() / denom < 1e-5,
                    "param slice {s} elem {i}: fd {fd} vs analytic {a}"
                );
                idx += 1;
            }
        }
        assert_eq!(idx, analytic.len());
    }

    #[test]
    fn frozen_embedding_gets_no_grad_slot() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = tiny_net(&mut rng);
        net.embedding.trainable = false;
        let grads = ParamGrads::zeros_like(&net);
        assert!(grads.embedding.is_none());
    }

    #[test]
    fn repeated_tokens_accumulate_embedding_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = tiny_net(&mut rng);
        let tokens = vec![1usize, 1, 1, 1];
        let x = net.embed(&tokens).unwrap();
        let trace = net.forward_trace(&x).unwrap();
        let (_, lg) = cross_entropy_with_grad(trace.logits(), 0).unwrap();
        let mut grads = ParamGrads::zeros_like(&net);
        let gin = backward(&net, &trace, &lg, &mut grads).unwrap();
        scatter_embedding_grad(&net, &tokens, &gin, &mut grads).unwrap();
        let etab = grads.embedding.as_ref().unwrap();
        // Row 1 collects all four position gradients; other rows stay zero.
        let mut row_sum = vec![0.0; 3];
        for pos in 0..4 {
            for k in 0..3 {
                row_sum[k] += gin.at2(pos, k);
            }
        }
        for k in 0..3 {
            assert!((etab.at2(1, k) - row_sum[k]).abs() < 1e-12);
            assert_eq!(etab.at2(0, k), 0.0);
        }
    }
}
