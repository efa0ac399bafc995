//! Greedy first-order substitution attack.
//!
//! Each round scores every candidate substitution by the inner product of
//! the input-embedding gradient with the embedding change, applies the best
//! strictly positive candidate, and keeps it only if the re-evaluated loss
//! actually increased. One flip per position; at most `budget` rounds.

use crate::backprop::{backward, ParamGrads};
use crate::error::Result;
use crate::nn::{argmax, cross_entropy, cross_entropy_with_grad, Network, TokenId};
use crate::perturb::PerturbationSet;
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct AttackResult<F> {
    pub tokens: Vec<TokenId>,
    /// Accepted flips in application order: (position, replacement).
    pub flips: Vec<(usize, TokenId)>,
    pub loss: F,
    pub clean_loss: F,
    pub prediction: usize,
    /// Final prediction differs from the clean prediction.
    pub prediction_changed: bool,
    /// Forward passes spent (gradient passes count once each).
    pub forward_passes: u64,
}

/// Runs the attack against `pset.tokens` with budget `pset.budget`.
/// Deterministic given model, example, and table. Never errors on an empty
/// candidate set; the original sequence comes back unchanged.
pub fn hotflip<F: Scalar>(
    net: &Network<F>,
    pset: &PerturbationSet,
    label: usize,
) -> Result<AttackResult<F>> {
    let mut tokens = pset.tokens.clone();
    let mut grads = ParamGrads::zeros_like(net);
    let mut flipped_positions: Vec<usize> = Vec::new();
    let mut flips: Vec<(usize, TokenId)> = Vec::new();
    let mut passes = 0u64;

    let x = net.embed(&tokens)?;
    let trace = net.forward_trace(&x)?;
    passes += 1;
    let clean_prediction = argmax(trace.logits());
    let clean_loss = cross_entropy(trace.logits(), label)?;
    let mut loss = clean_loss;
    let mut prediction = clean_prediction;

    for _round in 0..pset.budget {
        if prediction != label {
            break;
        }
        // Gradient w.r.t. the current embedded sequence.
        let x = net.embed(&tokens)?;
        let trace = net.forward_trace(&x)?;
        passes += 1;
        let (cur_loss, lg) = cross_entropy_with_grad(trace.logits(), label)?;
        grads.zero();
        let gin = backward(net, &trace, &lg, &mut grads)?;

        // Best first-order score over not-yet-flipped positions, first
        // elementary index on ties.
        let mut best: Option<(usize, F)> = None;
        for (ei, e) in pset.elems.iter().enumerate() {
            if flipped_positions.contains(&e.position) {
                continue;
            }
            let grow = gin.row(e.position);
            let cur_row = x.row(e.position);
            let repl_row = net.embedding.row(e.replacement);
            let mut score = F::zero();
            for k in 0..grow.len() {
                score = score + grow[k] * (repl_row[k] - cur_row[k]);
            }
            let better = match best {
                None => score > F::zero(),
                Some((_, s)) => score > s,
            };
            if better {
                best = Some((ei, score));
            }
        }
        let Some((ei, _)) = best else {
            break;
        };
        let e = pset.elems[ei];
        let prev_token = tokens[e.position];
        tokens[e.position] = e.replacement;

        let logits = net.forward_tokens(&tokens)?;
        passes += 1;
        let new_loss = cross_entropy(&logits, label)?;
        if new_loss <= cur_loss {
            // First-order score misled; undo and stop searching.
            tokens[e.position] = prev_token;
            break;
        }
        flipped_positions.push(e.position);
        flips.push((e.position, e.replacement));
        loss = new_loss;
        prediction = argmax(&logits);
    }

    Ok(AttackResult {
        tokens,
        flips,
        loss,
        clean_loss,
        prediction,
        prediction_changed: prediction != clean_prediction,
        forward_passes: passes,
    })
}
