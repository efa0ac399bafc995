//! The two verifiers (interval bounds and exhaustive enumeration), the
//! four-metric evaluation, and pass-budget accounting.

use serde::{Deserialize, Serialize};

use crate::attack::hotflip;
use crate::bounds::{ibp_forward, verified_margin};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::nn::{argmax, Network, TokenId};
use crate::perturb::{
    build_simplex, count_space, elementary_perturbations, enumerate_space, PerturbationSet,
    SubstitutionTable,
};
use crate::tensor::Scalar;

/// Enumeration cap per example; beyond it the oracle reports NotAttempted.
pub const DEFAULT_ORACLE_BUDGET: u64 = 2_000_000;

#[derive(Clone, Debug)]
pub struct IbpVerdict<F> {
    /// Robust iff the certification margin is strictly negative.
    pub verified: bool,
    /// max over competitors of upper(y) - lower(true); 0 is not verified.
    pub margin: F,
    /// First-layer vertex evaluations: M + 1.
    pub vertex_evals: usize,
    /// Bound applications through the remaining layers: always exactly 2
    /// (one lower, one upper, fused as center/radius).
    pub bound_passes: u64,
}

/// Certifies one example against every sequence within the edit budget.
/// A budget of 0 degenerates to a point check of the clean sequence.
pub fn ibp_verify<F: Scalar>(
    net: &Network<F>,
    pset: &PerturbationSet,
    label: usize,
) -> Result<IbpVerdict<F>> {
    let point;
    let pset = if pset.budget == 0 {
        point = PerturbationSet {
            tokens: pset.tokens.clone(),
            elems: Vec::new(),
            budget: 1,
        };
        &point
    } else {
        pset
    };
    let sv = build_simplex(pset, &net.embedding)?;
    let run = ibp_forward(net, &sv, true)?;
    let (margin, verified) = verified_margin(run.logit_bounds(), label)?;
    Ok(IbpVerdict {
        verified,
        margin,
        vertex_evals: run.first.vertex_evals,
        bound_passes: 2,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "tokens", rename_all = "snake_case")]
pub enum OracleOutcome {
    /// Every sequence in the space keeps the true label.
    Robust,
    /// First misclassified sequence in enumeration order.
    Counterexample(Vec<TokenId>),
    /// Space larger than the enumeration budget; no passes spent.
    NotAttempted,
}

impl OracleOutcome {
    pub fn attempted(&self) -> bool {
        !matches!(self, OracleOutcome::NotAttempted)
    }

    pub fn robust(&self) -> bool {
        matches!(self, OracleOutcome::Robust)
    }
}

#[derive(Clone, Debug)]
pub struct OracleVerdict {
    pub outcome: OracleOutcome,
    /// count_space + 1 when attempted (the +1 is the original), else 0.
    pub passes: u64,
}

/// Ground-truth robustness by forwarding the entire space. Never exits
/// early, so the pass count is exactly count_space + 1. The original
/// sequence is part of the space: a clean misclassification is itself the
/// first counterexample.
pub fn exhaustive_verify<F: Scalar>(
    net: &Network<F>,
    pset: &PerturbationSet,
    label: usize,
    budget: u64,
) -> Result<OracleVerdict> {
    let not_attempted = OracleVerdict {
        outcome: OracleOutcome::NotAttempted,
        passes: 0,
    };
    let total = match count_space(pset) {
        Ok(t) => t,
        Err(Error::CountOverflow { .. }) => return Ok(not_attempted),
        Err(e) => return Err(e),
    };
    let Some(passes) = total.checked_add(1) else {
        return Ok(not_attempted);
    };
    if passes > budget {
        return Ok(not_attempted);
    }
    let mut counterexample = None;
    let mut seen = 0u64;
    for seq in enumerate_space(pset) {
        seen += 1;
        let logits = net.forward_tokens(&seq)?;
        if argmax(&logits) != label && counterexample.is_none() {
            counterexample = Some(seq);
        }
    }
    debug_assert_eq!(seen, passes);
    Ok(OracleVerdict {
        outcome: match counterexample {
            None => OracleOutcome::Robust,
            Some(seq) => OracleOutcome::Counterexample(seq),
        },
        passes,
    })
}

/// One evaluated example. `forward_passes` is the oracle's enumeration
/// cost; the interval verifier always costs 2 bound passes on top of its
/// M+1 first-layer vertex evaluations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerificationReport {
    pub index: usize,
    pub label: usize,
    pub prediction: usize,
    pub nominal_correct: bool,
    pub adv_correct: bool,
    pub ibp_verified: bool,
    pub ibp_margin: f64,
    #[serde(flatten)]
    pub oracle: OracleOutcome,
    pub forward_passes: u64,
}

/// Counts over one evaluation set at a fixed budget. Accuracy accessors
/// divide by `total`, except the oracle ratio whose denominator excludes
/// examples the oracle did not attempt.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub delta: usize,
    pub total: usize,
    pub nominal: usize,
    pub adversarial: usize,
    pub ibp_verified: usize,
    pub oracle_robust: usize,
    pub oracle_attempted: usize,
    /// Total oracle enumeration passes across attempted examples.
    pub forward_passes: u64,
}

impl MetricsSummary {
    pub fn nominal_accuracy(&self) -> f64 {
        self.nominal as f64 / self.total as f64
    }

    pub fn adversarial_accuracy(&self) -> f64 {
        self.adversarial as f64 / self.total as f64
    }

    pub fn ibp_verified_accuracy(&self) -> f64 {
        self.ibp_verified as f64 / self.total as f64
    }

    pub fn oracle_accuracy(&self) -> Option<f64> {
        (self.oracle_attempted > 0)
            .then(|| self.oracle_robust as f64 / self.oracle_attempted as f64)
    }
}

/// Runs all four metrics over a dataset at one budget. An oracle budget
/// of 0 skips enumeration entirely (every example NotAttempted).
pub fn evaluate<F: Scalar>(
    net: &Network<F>,
    examples: &[Example],
    table: &SubstitutionTable,
    delta: usize,
    oracle_budget: u64,
) -> Result<(MetricsSummary, Vec<VerificationReport>)> {
    if examples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut summary = MetricsSummary {
        delta,
        total: examples.len(),
        nominal: 0,
        adversarial: 0,
        ibp_verified: 0,
        oracle_robust: 0,
        oracle_attempted: 0,
        forward_passes: 0,
    };
    let mut reports = Vec::with_capacity(examples.len());
    for (index, ex) in examples.iter().enumerate() {
        let logits = net.forward_tokens(&ex.tokens)?;
        let prediction = argmax(&logits);
        let nominal_correct = prediction == ex.label;

        let pset = elementary_perturbations(&ex.tokens, table, delta);
        let attacked = hotflip(net, &pset, ex.label)?;
        let adv_correct = nominal_correct && attacked.prediction == ex.label;

        let ibp = ibp_verify(net, &pset, ex.label)?;
        let oracle = exhaustive_verify(net, &pset, ex.label, oracle_budget)?;

        summary.nominal += nominal_correct as usize;
        summary.adversarial += adv_correct as usize;
        summary.ibp_verified += ibp.verified as usize;
        if oracle.outcome.attempted() {
            summary.oracle_attempted += 1;
            summary.oracle_robust += oracle.outcome.robust() as usize;
        }
        summary.forward_passes += oracle.passes;

        reports.push(VerificationReport {
            index,
            label: ex.label,
            prediction,
            nominal_correct,
            adv_correct,
            ibp_verified: ibp.verified,
            ibp_margin: ibp.margin.as_f64(),
            oracle: oracle.outcome,
            forward_passes: oracle.passes,
        });
    }
    Ok((summary, reports))
}

/// One summary row per budget; `deltas` must be sorted ascending.
pub fn sweep<F: Scalar>(
    net: &Network<F>,
    examples: &[Example],
    table: &SubstitutionTable,
    deltas: &[usize],
    oracle_budget: u64,
) -> Result<Vec<MetricsSummary>> {
    if deltas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "sweep budgets must be strictly ascending".into(),
        ));
    }
    deltas
        .iter()
        .map(|&d| evaluate(net, examples, table, d, oracle_budget).map(|(s, _)| s))
        .collect()
}

/// Oracle cost/coverage trade-off: examples sorted by enumeration cost,
/// grouped by equal cost, reporting cumulative passes against the
/// fraction of attempted examples proven robust so far. The interval
/// verifier's flat cost (2 passes per example) and its verified fraction
/// over the same examples come alongside.
#[derive(Clone, Debug, Serialize)]
pub struct PassBudgetCurve {
    pub points: Vec<(u64, f64)>,
    pub ibp_passes: u64,
    pub ibp_fraction: f64,
}

pub fn pass_budget_curve(reports: &[VerificationReport]) -> PassBudgetCurve {
    let mut attempted: Vec<&VerificationReport> = reports
        .iter()
        .filter(|r| r.oracle.attempted())
        .collect();
    attempted.sort_by_key(|r| r.forward_passes);
    let total = attempted.len();
    let mut points = Vec::new();
    let mut cum_passes = 0u64;
    let mut robust = 0usize;
    let mut ibp_verified = 0usize;
    let mut i = 0;
    while i < total {
        let cost = attempted[i].forward_passes;
        while i < total && attempted[i].forward_passes == cost {
            cum_passes += attempted[i].forward_passes;
            robust += attempted[i].oracle.robust() as usize;
            ibp_verified += attempted[i].ibp_verified as usize;
            i += 1;
        }
        points.push((cum_passes, robust as f64 / total as f64));
    }
    PassBudgetCurve {
        points,
        ibp_passes: 2 * total as u64,
        ibp_fraction: if total == 0 {
            0.0
        } else {
            ibp_verified as f64 / total as f64
        },
    }
}

fn push_ratio(out: &mut String, v: Option<f64>) {
    match v {
        Some(v) => out.push_str(&format!("{v}")),
        None => {}
    }
}

/// CSV with one row per summary. Accuracy columns are ratios; the oracle
/// column is empty when no example was attempted.
pub fn metrics_csv(rows: &[MetricsSummary]) -> String {
    let mut out =
        String::from("delta,nominal,adversarial,ibp_verified,oracle,oracle_attempted,forward_passes\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},",
            r.delta,
            r.nominal_accuracy(),
            r.adversarial_accuracy(),
            r.ibp_verified_accuracy()
        ));
        push_ratio(&mut out, r.oracle_accuracy());
        out.push_str(&format!(",{},{}\n", r.oracle_attempted, r.forward_passes));
    }
    out
}

/// One JSON object per line, one example per line.
pub fn reports_jsonl(reports: &[VerificationReport]) -> Result<String> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Fraction of examples whose clean prediction is correct.
pub fn nominal_accuracy<F: Scalar>(net: &Network<F>, examples: &[Example]) -> Result<f64> {
    let mut correct = 0usize;
    for ex in examples {
        correct += (argmax(&net.forward_tokens(&ex.tokens)?) == ex.label) as usize;
    }
    Ok(correct as f64 / examples.len().max(1) as f64)
}

/// Fraction correct both clean and under attack at the given budget.
pub fn adversarial_accuracy<F: Scalar>(
    net: &Network<F>,
    examples: &[Example],
    table: &SubstitutionTable,
    delta: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    for ex in examples {
        let clean_ok = argmax(&net.forward_tokens(&ex.tokens)?) == ex.label;
        if !clean_ok {
            continue;
        }
        let pset = elementary_perturbations(&ex.tokens, table, delta);
        let attacked = hotflip(net, &pset, ex.label)?;
        correct += (attacked.prediction == ex.label) as usize;
    }
    Ok(correct as f64 / examples.len().max(1) as f64)
}

/// Fraction of examples the interval verifier certifies at the budget.
pub fn ibp_accuracy<F: Scalar>(
    net: &Network<F>,
    examples: &[Example],
    table: &SubstitutionTable,
    delta: usize,
) -> Result<f64> {
    let mut verified = 0usize;
    for ex in examples {
        let pset = elementary_perturbations(&ex.tokens, table, delta);
        verified += ibp_verify(net, &pset, ex.label)?.verified as usize;
    }
    Ok(verified as f64 / examples.len().max(1) as f64)
}
