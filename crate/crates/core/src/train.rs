//! The four training objectives, the kappa curriculum, and the
//! optimization loop with early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::attack::hotflip;
use crate::backprop::{backward, scatter_embedding_grad, ParamGrads};
use crate::bounds::{
    first_layer_backward, ibp_forward, propagate_backward, worst_case_grad_split,
    worst_case_logits,
};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::nn::{cross_entropy_with_grad, Network, TokenId};
use crate::perturb::{
    build_simplex, elementary_perturbations, sample_perturbation, SubstitutionTable,
};
use crate::tensor::Scalar;
use crate::verify::{adversarial_accuracy, ibp_accuracy, nominal_accuracy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Normal,
    Augmentation,
    Adversarial,
    Verifiable,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Normal => "normal",
            Regime::Augmentation => "augmentation",
            Regime::Adversarial => "adversarial",
            Regime::Verifiable => "verifiable",
        })
    }
}

/// Linear warmup of the robust-loss weight: `start` at step 0 down to
/// `end` at `warmup_frac` of the horizon, constant afterwards.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct KappaSchedule {
    pub start: f64,
    pub end: f64,
    pub warmup_frac: f64,
}

impl Default for KappaSchedule {
    fn default() -> Self {
        KappaSchedule {
            start: 1.0,
            end: 0.25,
            warmup_frac: 0.5,
        }
    }
}

pub fn kappa_at(s: &KappaSchedule, step: usize, total_steps: usize) -> f64 {
    let warmup = s.warmup_frac * total_steps as f64;
    if (step as f64) >= warmup || warmup == 0.0 {
        s.end
    } else {
        s.start + (s.end - s.start) * step as f64 / warmup
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub delta_train: usize,
    pub kappa: KappaSchedule,
    /// Weight of the perturbed/attacked term in the mixed objectives.
    pub mix: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::Normal,
            delta_train: 3,
            kappa: KappaSchedule::default(),
            mix: 0.5,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 30,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.mix) {
            return Err(Error::Config(format!("mix {} outside [0, 1]", self.mix)));
        }
        if !unit(self.kappa.start) || !unit(self.kappa.end) || !unit(self.kappa.warmup_frac) {
            return Err(Error::Config("kappa schedule outside [0, 1]".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Cross-entropy of one sequence; accumulates `weight`-scaled gradients.
fn ce_backward<F: Scalar>(
    net: &Network<F>,
    tokens: &[TokenId],
    label: usize,
    weight: F,
    grads: &mut ParamGrads<F>,
) -> Result<F> {
    let x = net.embed(tokens)?;
    let trace = net.forward_trace(&x)?;
    let (loss, mut gz) = cross_entropy_with_grad(trace.logits(), label)?;
    gz.scale(weight);
    let gin = backward(net, &trace, &gz, grads)?;
    scatter_embedding_grad(net, tokens, &gin, grads)?;
    Ok(loss)
}

/// Mean cross-entropy over the batch.
pub fn loss_normal<F: Scalar>(
    net: &Network<F>,
    batch: &[Example],
    grads: &mut ParamGrads<F>,
) -> Result<F> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let inv = F::from_f64(1.0 / batch.len() as f64);
    let mut total = F::zero();
    for ex in batch {
        total = total + ce_backward(net, &ex.tokens, ex.label, inv, grads)?;
    }
    Ok(total * inv)
}

/// (1-mix) clean + mix sampled-perturbation cross-entropy, averaged.
pub fn loss_augmentation<F: Scalar, R: rand::Rng>(
    net: &Network<F>,
    batch: &[Example],
    table: &SubstitutionTable,
    delta: usize,
    mix: f64,
    rng: &mut R,
    grads: &mut ParamGrads<F>,
) -> Result<F> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let inv = 1.0 / batch.len() as f64;
    let (wc, wp) = (F::from_f64((1.0 - mix) * inv), F::from_f64(mix * inv));
    let mut total = F::zero();
    for ex in batch {
        let pset = elementary_perturbations(&ex.tokens, table, delta);
        let sampled = sample_perturbation(&pset, rng);
        let lc = ce_backward(net, &ex.tokens, ex.label, wc, grads)?;
        let lp = ce_backward(net, &sampled.tokens, ex.label, wp, grads)?;
        total = total + F::from_f64(1.0 - mix) * lc + F::from_f64(mix) * lp;
    }
    Ok(total * F::from_f64(inv))
}

/// (1-mix) clean + mix attacked cross-entropy, averaged. The attack is a
/// fixed selection: gradients flow only through the two outer losses.
pub fn loss_adversarial<F: Scalar>(
    net: &Network<F>,
    batch: &[Example],
    table: &SubstitutionTable,
    delta: usize,
    mix: f64,
    grads: &mut ParamGrads<F>,
) -> Result<F> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let inv = 1.0 / batch.len() as f64;
    let (wc, wp) = (F::from_f64((1.0 - mix) * inv), F::from_f64(mix * inv));
    let mut total = F::zero();
    for ex in batch {
        let pset = elementary_perturbations(&ex.tokens, table, delta);
        let attacked = hotflip(net, &pset, ex.label)?;
        let lc = ce_backward(net, &ex.tokens, ex.label, wc, grads)?;
        let lp = ce_backward(net, &attacked.tokens, ex.label, wp, grads)?;
        total = total + F::from_f64(1.0 - mix) * lc + F::from_f64(mix) * lp;
    }
    Ok(total * F::from_f64(inv))
}

/// kappa * clean + (1-kappa) * worst-case-bound cross-entropy, averaged.
/// kappa=1 and delta=0 collapse to the normal loss exactly: with no
/// perturbation the bound equals the forward pass, so the shortcut is the
/// identity, not an approximation.
pub fn loss_verifiable<F: Scalar>(
    net: &Network<F>,
    batch: &[Example],
    table: &SubstitutionTable,
    delta: usize,
    kappa: f64,
    grads: &mut ParamGrads<F>,
) -> Result<F> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::Config(format!("kappa {kappa} outside [0, 1]")));
    }
    if kappa == 1.0 || delta == 0 {
        return loss_normal(net, batch, grads);
    }
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let inv = 1.0 / batch.len() as f64;
    let (k, k1) = (F::from_f64(kappa), F::from_f64(1.0 - kappa));
    let mut total = F::zero();
    for ex in batch {
        let clean = if kappa > 0.0 {
            ce_backward(net, &ex.tokens, ex.label, k * F::from_f64(inv), grads)?
        } else {
            F::zero()
        };

        let pset = elementary_perturbations(&ex.tokens, table, delta);
        let sv = build_simplex(&pset, &net.embedding)?;
        let run = ibp_forward(net, &sv, true)?;
        let z = worst_case_logits(run.logit_bounds(), ex.label)?;
        let (spec_loss, mut gz) = cross_entropy_with_grad(&z, ex.label)?;
        gz.scale(k1 * F::from_f64(inv));
        let g_post = propagate_backward(net, &run.trace, worst_case_grad_split(&gz, ex.label), grads)?;
        first_layer_backward(net, &pset, &sv, &run.first, &g_post, grads)?;

        total = total + k * clean + k1 * spec_loss;
    }
    Ok(total * F::from_f64(inv))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub kappa: f64,
    pub train_loss: f64,
    /// Regime-matched selection metric on the validation split.
    pub val_metric: f64,
    pub val_nominal: f64,
    pub wall_secs: f64,
}

/// One JSON object per epoch.
pub fn training_log_jsonl(log: &[EpochLog]) -> Result<String> {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    /// Parameters from the best-validation epoch, not the last one.
    pub net: Network<F>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub stopped_early: bool,
}

fn validation_metric<F: Scalar>(
    regime: Regime,
    net: &Network<F>,
    valid: &[Example],
    table: &SubstitutionTable,
    delta: usize,
) -> Result<f64> {
    match regime {
        Regime::Normal | Regime::Augmentation => nominal_accuracy(net, valid),
        Regime::Adversarial => adversarial_accuracy(net, valid, table, delta),
        Regime::Verifiable => ibp_accuracy(net, valid, table, delta),
    }
}

/// Adam over seeded-shuffled batches; stops after `patience` epochs
/// without validation improvement and returns the best epoch's weights.
pub fn train<F: Scalar>(
    cfg: &TrainConfig,
    mut net: Network<F>,
    train_set: &[Example],
    valid_set: &[Example],
    table: &SubstitutionTable,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Config("train and validation splits must be nonempty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(
        &net,
        AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut grads = ParamGrads::zeros_like(&net);
    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_epochs * batches_per_epoch;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, usize, Network<F>)> = None;
    let mut stale = 0usize;
    let mut stopped_early = false;
    let mut log = Vec::new();
    let mut step = 0usize;

    for epoch in 0..cfg.max_epochs {
        let clock = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut kappa = kappa_at(&cfg.kappa, step, total_steps);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            grads.zero();
            kappa = kappa_at(&cfg.kappa, step, total_steps);
            let loss = match cfg.regime {
                Regime::Normal => loss_normal(&net, &batch, &mut grads)?,
                Regime::Augmentation => loss_augmentation(
                    &net,
                    &batch,
                    table,
                    cfg.delta_train,
                    cfg.mix,
                    &mut rng,
                    &mut grads,
                )?,
                Regime::Adversarial => {
                    loss_adversarial(&net, &batch, table, cfg.delta_train, cfg.mix, &mut grads)?
                }
                Regime::Verifiable => {
                    loss_verifiable(&net, &batch, table, cfg.delta_train, kappa, &mut grads)?
                }
            };
            if !loss.as_f64().is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += loss.as_f64() * batch.len() as f64;
            adam.step(&mut net, &grads)?;
            step += 1;
        }

        let val_metric = validation_metric(cfg.regime, &net, valid_set, table, cfg.delta_train)?;
        let val_nominal = nominal_accuracy(&net, valid_set)?;
        log.push(EpochLog {
            epoch,
            kappa,
            train_loss: loss_sum / train_set.len() as f64,
            val_metric,
            val_nominal,
            wall_secs: clock.elapsed().as_secs_f64(),
        });

        if best.as_ref().is_none_or(|(m, _, _)| val_metric > *m) {
            best = Some((val_metric, epoch, net.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_metric, best_epoch, best_net) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        net: best_net,
        log,
        best_epoch,
        best_metric,
        stopped_early,
    })
}
