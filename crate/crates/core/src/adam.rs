//! Adam optimizer with bias correction.
//!
//! Moment slots are allocated in the same order the update walks the
//! network: embedding table first (when trainable), then each conv/linear
//! weight and bias.

use crate::backprop::{LayerGrads, ParamGrads};
use crate::error::{Error, Result};
use crate::nn::{Layer, Network};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<F> {
    cfg: AdamConfig,
    step: u64,
    /// (first moment, second moment) per trainable tensor.
    slots: Vec<(Tensor<F>, Tensor<F>)>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(net: &Network<F>, cfg: AdamConfig) -> Self {
        let mut slots = Vec::new();
        if net.embedding.trainable {
            let s = net.embedding.table.shape().to_vec();
            slots.push((Tensor::zeros(s.clone()), Tensor::zeros(s)));
        }
        for layer in &net.layers {
            if let Layer::Conv1d { weight, bias } | Layer::Linear { weight, bias } = layer {
                let ws = weight.shape().to_vec();
                let bs = bias.shape().to_vec();
                slots.push((Tensor::zeros(ws.clone()), Tensor::zeros(ws)));
                slots.push((Tensor::zeros(bs.clone()), Tensor::zeros(bs)));
            }
        }
        AdamState { cfg, step: 0, slots }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn update_tensor(
        cfg: &AdamConfig,
        bc1: f64,
        bc2: f64,
        param: &mut Tensor<F>,
        grad: &Tensor<F>,
        m: &mut Tensor<F>,
        v: &mut Tensor<F>,
    ) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape("AdamState::step", "grad shape mismatch"));
        }
        let b1 = F::from_f64(cfg.beta1);
        let b2 = F::from_f64(cfg.beta2);
        let one = F::one();
        let lr = F::from_f64(cfg.lr);
        let eps = F::from_f64(cfg.eps);
        let inv_bc1 = F::from_f64(1.0 / bc1);
        let inv_bc2 = F::from_f64(1.0 / bc2);
        let (pd, gd, md, vd) = (param.data_mut(), grad.data(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let g = gd[i];
            md[i] = b1 * md[i] + (one - b1) * g;
            vd[i] = b2 * vd[i] + (one - b2) * g * g;
            let mhat = md[i] * inv_bc1;
            let vhat = vd[i] * inv_bc2;
            pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }

    /// One optimizer step over every trainable tensor.
    pub fn step(&mut self, net: &mut Network<F>, grads: &ParamGrads<F>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        let cfg = self.cfg;

        let mut slot = 0;
        if net.embedding.trainable {
            let g = grads
                .embedding
                .as_ref()
                .ok_or_else(|| Error::shape("AdamState::step", "missing embedding grad"))?;
            let (m, v) = &mut self.slots[slot];
            Self::update_tensor(&cfg, bc1, bc2, &mut net.embedding.table, g, m, v)?;
            slot += 1;
        }
        for (layer, lg) in net.layers.iter_mut().zip(&grads.layers) {
            match (layer, lg) {
                (Layer::Conv1d { weight, bias }, LayerGrads::Conv1d { weight: gw, bias: gb })
                | (Layer::Linear { weight, bias }, LayerGrads::Linear { weight: gw, bias: gb }) => {
                    {
                        let (m, v) = &mut self.slots[slot];
                        Self::update_tensor(&cfg, bc1, bc2, weight, gw, m, v)?;
                    }
                    {
                        let (m, v) = &mut self.slots[slot + 1];
                        Self::update_tensor(&cfg, bc1, bc2, bias, gb, m, v)?;
                    }
                    slot += 2;
                }
                (Layer::Relu, LayerGrads::None) | (Layer::AvgPool, LayerGrads::None) => {}
                _ => return Err(Error::shape("AdamState::step", "grads do not match layers")),
            }
        }
        Ok(())
    }
}
