//! Acceptance gate: eleven numbered checks covering exact counting, bound
//! soundness, cost accounting, gradient correctness, oracle agreement, and
//! the headline certified-training result. Each check prints one PASS or
//! FAIL line (visible with --nocapture; tests run single-threaded here in
//! name order, and the trained fixture is built once on first use).

use std::panic::AssertUnwindSafe;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use certitext_core::attack::hotflip;
use certitext_core::backprop::ParamGrads;
use certitext_core::bounds::{ibp_forward, worst_case_logits};
use certitext_core::data::Example;
use certitext_core::model::build_network;
use certitext_core::nn::{argmax, cross_entropy, Layer, Network, TokenId};
use certitext_core::perturb::{
    build_simplex, count_space, elementary_perturbations, enumerate_space, sample_perturbation,
    PerturbationSet, SubstitutionTable,
};
use certitext_core::train::{
    loss_normal, loss_verifiable, train, Regime, TrainConfig,
};
use certitext_core::verify::{
    evaluate, exhaustive_verify, ibp_accuracy, ibp_verify, OracleOutcome, DEFAULT_ORACLE_BUDGET,
};

fn criterion(number: u32, name: &str, body: impl FnOnce()) {
    match std::panic::catch_unwind(AssertUnwindSafe(body)) {
        Ok(()) => println!("criterion {number:>2} PASS  {name}"),
        Err(cause) => {
            println!("criterion {number:>2} FAIL  {name}");
            std::panic::resume_unwind(cause);
        }
    }
}

fn net_f32(descriptor: &str, classes: usize, seed: u64) -> Network<f32> {
    build_network(descriptor, classes, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn net_f64(descriptor: &str, classes: usize, seed: u64) -> Network<f64> {
    build_network(descriptor, classes, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn rand_tokens(vocab: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

/// Random table: each token gets up to `max_options` distinct replacements.
fn rand_table(vocab: usize, max_options: usize, rng: &mut ChaCha8Rng) -> SubstitutionTable {
    let mut table = SubstitutionTable::new(vocab);
    for tok in 0..vocab {
        let n = rng.gen_range(0..=max_options);
        for _ in 0..n {
            let repl = (tok + rng.gen_range(1..vocab)) % vocab;
            table.add(tok, &[repl]).unwrap();
        }
    }
    table
}

// ---------------------------------------------------------------------------
// Trained fixture shared by the metric-ordering, training-gain, and
// attack-witness checks.
//
// Two-class character task: class 0 sentences are rich in token A, class 1
// in token B. Each class also carries the OTHER class's typo token at an
// elevated rate (Q with class 1, P with class 0), so a model fit only on
// clean data learns Q and P as contrary evidence. The substitution table
// allows exactly one alternative per signal letter (A->Q, B->P); swapping
// three signals into typos is then a strong attack on the clean-trained
// model, while robust training has to neutralise it.
// ---------------------------------------------------------------------------

const A: TokenId = 0;
const B: TokenId = 1;
const Q: TokenId = 2; // typo form of A, co-occurs with class 1
const P: TokenId = 3; // typo form of B, co-occurs with class 0
const FIX_VOCAB: usize = 6;
const FIX_ARCH: &str = "embed:6:8|conv:16:4|relu|avgpool|linear:2";
const FIX_DELTA: usize = 3;

struct Fixture {
    normal: Network<f32>,
    verifiable: Network<f32>,
    test: Vec<Example>,
    table: SubstitutionTable,
}

fn fixture_sentence(class: usize, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    let len = rng.gen_range(10..=16);
    (0..len)
        .map(|_| {
            let r: f64 = rng.gen();
            if r < 0.40 {
                if class == 0 { A } else { B }
            } else if r < 0.52 {
                // The other class's typo token: contrary evidence by co-occurrence.
                if class == 0 { P } else { Q }
            } else if r < 0.58 {
                if class == 0 { Q } else { P }
            } else {
                4 + rng.gen_range(0..2)
            }
        })
        .collect()
}

fn fixture_split(pairs: usize, rng: &mut ChaCha8Rng) -> Vec<Example> {
    let mut out = Vec::with_capacity(2 * pairs);
    for _ in 0..pairs {
        for class in 0..2 {
            out.push(Example {
                tokens: fixture_sentence(class, rng),
                label: class,
            });
        }
    }
    out
}

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let train_set = fixture_split(120, &mut rng);
        let valid_set = fixture_split(30, &mut rng);
        let test = fixture_split(50, &mut rng);
        let table =
            SubstitutionTable::from_pairs(FIX_VOCAB, &[(A, vec![Q]), (B, vec![P])]).unwrap();

        let base = TrainConfig {
            regime: Regime::Normal,
            delta_train: FIX_DELTA,
            learning_rate: 0.01,
            batch_size: 16,
            max_epochs: 30,
            patience: 30,
            seed: 11,
            ..TrainConfig::default()
        };
        let init = net_f32(FIX_ARCH, 2, base.seed);

        let normal = train(&base, init.clone(), &train_set, &valid_set, &table)
            .unwrap()
            .net;
        let verifiable_cfg = TrainConfig {
            regime: Regime::Verifiable,
            ..base
        };
        let verifiable = train(&verifiable_cfg, init, &train_set, &valid_set, &table)
            .unwrap()
            .net;
        Fixture {
            normal,
            verifiable,
            test,
            table,
        }
    })
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_counting_anchor() {
    criterion(1, "26 single-option positions at budget 3 count to 2951", || {
        // Library-level: one replacement per position.
        let tokens: Vec<TokenId> = (0..26).collect();
        let table = SubstitutionTable::from_pairs(
            27,
            &(0..26).map(|t| (t, vec![(t + 1) % 26])).collect::<Vec<_>>(),
        )
        .unwrap();
        let pset = elementary_perturbations(&tokens, &table, 3);
        assert_eq!(count_space(&pset).unwrap(), 2951);

        // Binary-level: the count-space subcommand on the same space.
        let tmp = tempfile::TempDir::new().unwrap();
        let dir = tmp.path();
        std::fs::write(dir.join("data.tsv"), "0\tabcdefghijklmnopqrstuvwxyz\n").unwrap();
        let table_text: String = (0..26)
            .map(|i| {
                let src = (b'a' + i) as char;
                let dst = (b'a' + (i + 1) % 26) as char;
                format!("{src}\t{dst}\n")
            })
            .collect();
        std::fs::write(dir.join("table.tsv"), table_text).unwrap();
        std::fs::write(
            dir.join("config.json"),
            r#"{
  "architecture": "embed:27:2|conv:2:1|relu|avgpool|linear:2",
  "level": "char",
  "class_count": 2,
  "train_path": "data.tsv",
  "test_path": "data.tsv",
  "table_path": "table.tsv",
  "delta": 3
}"#,
        )
        .unwrap();
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_certitext"))
            .current_dir(dir)
            .args(["count-space", "--config", "config.json"])
            .output()
            .unwrap();
        assert!(out.status.success());
        assert_eq!(String::from_utf8_lossy(&out.stdout), "2951\n");
    });
}

#[test]
fn criterion_02_two_pass_cost() {
    criterion(2, "certification costs 2 bound passes; the oracle costs count+1", || {
        let net = net_f32("embed:9:5|conv:7:3|relu|avgpool|linear:4|relu|linear:3", 3, 4);
        let deep_layers = net.layers.len();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (case, delta) in [(0usize, 1usize), (1, 2), (2, 3), (3, 1), (4, 3)] {
            let tokens = rand_tokens(9, 8 + case, &mut rng);
            let table = rand_table(9, 1 + case % 3, &mut rng);
            let pset = elementary_perturbations(&tokens, &table, delta);
            if pset.elems.is_empty() {
                continue;
            }
            let sv = build_simplex(&pset, &net.embedding).unwrap();
            let run = ibp_forward(&net, &sv, true).unwrap();
            // Layers past the first block are each applied once per side,
            // regardless of budget or elementary-perturbation count.
            assert_eq!(run.stats.layers, deep_layers - run.first.block_len);
            assert_eq!(run.stats.applications, 2 * run.stats.layers as u64);
            assert_eq!(run.first.vertex_evals, sv.count());

            let verdict = ibp_verify(&net, &pset, 0).unwrap();
            assert_eq!(verdict.bound_passes, 2);
            assert_eq!(verdict.vertex_evals, pset.elems.len() + 1);

            let oracle = exhaustive_verify(&net, &pset, 0, DEFAULT_ORACLE_BUDGET).unwrap();
            assert!(oracle.outcome.attempted());
            assert_eq!(oracle.passes, count_space(&pset).unwrap() + 1);
        }
    });
}

#[test]
fn criterion_03_soundness() {
    criterion(3, "sampled logits stay inside bounds; no certified counterexample", || {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for case in 0..100u64 {
            let net = net_f32("embed:8:4|conv:6:3|relu|avgpool|linear:2", 2, 100 + case / 10);
            let tokens = rand_tokens(8, rng.gen_range(6..=10), &mut rng);
            let table = rand_table(8, 2, &mut rng);
            let delta = 1 + (case as usize) % 3;
            let pset = elementary_perturbations(&tokens, &table, delta);
            if pset.elems.is_empty() {
                continue;
            }
            let sv = build_simplex(&pset, &net.embedding).unwrap();
            let bounds = ibp_forward(&net, &sv, case % 2 == 0)
                .unwrap()
                .logit_bounds()
                .clone();
            for _ in 0..1000 {
                let sample = sample_perturbation(&pset, &mut rng);
                let logits = net.forward_tokens(&sample.tokens).unwrap();
                for k in 0..logits.len() {
                    let z = logits.at1(k);
                    assert!(
                        z >= bounds.lower.at1(k) - 1e-5 && z <= bounds.upper.at1(k) + 1e-5,
                        "case {case}: logit {k} = {z} outside [{}, {}]",
                        bounds.lower.at1(k),
                        bounds.upper.at1(k)
                    );
                }
            }
            let label = (case as usize) % 2;
            let certified = ibp_verify(&net, &pset, label).unwrap().verified;
            let oracle = exhaustive_verify(&net, &pset, label, DEFAULT_ORACLE_BUDGET).unwrap();
            assert!(oracle.outcome.attempted());
            assert!(
                !certified || oracle.outcome.robust(),
                "case {case}: certified with a concrete counterexample"
            );
        }
    });
}

#[test]
fn criterion_04_metric_ordering() {
    criterion(4, "verified <= oracle <= adversarial <= nominal on trained models", || {
        let fix = fixture();
        for (name, net) in [("normal", &fix.normal), ("verifiable", &fix.verifiable)] {
            for delta in 1..=3 {
                let (summary, _) =
                    evaluate(net, &fix.test, &fix.table, delta, DEFAULT_ORACLE_BUDGET).unwrap();
                assert_eq!(
                    summary.oracle_attempted, summary.total,
                    "{name} delta {delta}: oracle must attempt every example"
                );
                assert!(
                    summary.ibp_verified <= summary.oracle_robust
                        && summary.oracle_robust <= summary.adversarial
                        && summary.adversarial <= summary.nominal,
                    "{name} delta {delta}: {} <= {} <= {} <= {} violated",
                    summary.ibp_verified,
                    summary.oracle_robust,
                    summary.adversarial,
                    summary.nominal
                );
            }
        }
    });
}

#[test]
fn criterion_05_budget_nesting() {
    criterion(5, "budget-1 bounds nest in budget-3; verified accuracy shrinks with budget", || {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for case in 0..100u64 {
            let net = net_f32("embed:8:4|conv:6:3|relu|avgpool|linear:3", 3, 500 + case / 10);
            let tokens = rand_tokens(8, rng.gen_range(6..=10), &mut rng);
            let table = rand_table(8, 2, &mut rng);
            let narrow = elementary_perturbations(&tokens, &table, 1);
            if narrow.elems.is_empty() {
                continue;
            }
            let wide = elementary_perturbations(&tokens, &table, 3);
            let b1 = ibp_forward(&net, &build_simplex(&narrow, &net.embedding).unwrap(), true)
                .unwrap()
                .logit_bounds()
                .clone();
            let b3 = ibp_forward(&net, &build_simplex(&wide, &net.embedding).unwrap(), true)
                .unwrap()
                .logit_bounds()
                .clone();
            for k in 0..b1.lower.len() {
                assert!(
                    b3.lower.at1(k) <= b1.lower.at1(k) + 1e-6
                        && b1.upper.at1(k) <= b3.upper.at1(k) + 1e-6,
                    "case {case}: logit {k} bounds not nested"
                );
            }
        }

        let fix = fixture();
        let mut last = f64::INFINITY;
        for delta in 1..=6 {
            let acc = ibp_accuracy(&fix.verifiable, &fix.test, &fix.table, delta).unwrap();
            assert!(
                acc <= last + 1e-12,
                "verified accuracy rose from {last} to {acc} at budget {delta}"
            );
            last = acc;
        }
    });
}

#[test]
fn criterion_06_gradient_checks() {
    criterion(6, "analytic gradients match central differences on all shapes", || {
        let archs: [(&str, usize); 3] = [
            ("embed:9:5:frozen|conv:7:3|relu|avgpool|linear:2", 2),
            ("embed:9:5|conv:7:3|relu|avgpool|linear:2", 2),
            (
                "embed:9:5|conv:7:3|relu|avgpool|linear:6|relu|linear:6|relu|linear:3",
                3,
            ),
        ];
        let table = SubstitutionTable::from_pairs(
            9,
            &[(0, vec![5, 6]), (1, vec![7]), (3, vec![2, 8])],
        )
        .unwrap();
        let batch: Vec<Example> = [(vec![0, 1, 2, 3, 4, 5], 0), (vec![3, 0, 1, 8, 7, 2], 1)]
            .into_iter()
            .map(|(tokens, label)| Example { tokens, label })
            .collect();

        fn slices(net: &mut Network<f64>) -> Vec<&mut [f64]> {
            let mut out = Vec::new();
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

        for (arch_idx, (arch, classes)) in archs.into_iter().enumerate() {
            let mut net = net_f64(arch, classes, 60 + arch_idx as u64);
            for verifiable in [false, true] {
                let loss = |net: &Network<f64>, grads: &mut ParamGrads<f64>| -> f64 {
                    if verifiable {
                        loss_verifiable(net, &batch, &table, 2, 0.6, grads).unwrap()
                    } else {
                        loss_normal(net, &batch, grads).unwrap()
                    }
                };
                let mut grads = ParamGrads::zeros_like(&net);
                let _ = loss(&net, &mut grads);
                let flat = grads.flat();
                let total: usize = slices(&mut net).iter().map(|s| s.len()).sum();
                assert_eq!(total, flat.len());

                let eps = 1e-6;
                let mut base = 0usize;
                let lens: Vec<usize> = slices(&mut net).iter().map(|s| s.len()).collect();
                for (si, len) in lens.into_iter().enumerate() {
                    for k in (0..len).step_by(5) {
                        let orig = slices(&mut net)[si][k];
                        slices(&mut net)[si][k] = orig + eps;
                        let up = loss(&net, &mut ParamGrads::zeros_like(&net));
                        slices(&mut net)[si][k] = orig - eps;
                        let dn = loss(&net, &mut ParamGrads::zeros_like(&net));
                        slices(&mut net)[si][k] = orig;
                        let fd = (up - dn) / (2.0 * eps);
                        let an = flat[base + k];
                        let denom = fd.abs().max(an.abs()).max(1e-6);
                        assert!(
                            ((fd - an) / denom).abs() < 1e-4,
                            "arch {arch_idx} verifiable={verifiable} param {si}/{k}: \
                             fd {fd} vs analytic {an}"
                        );
                    }
                    base += len;
                }
            }
        }
    });
}

#[test]
fn criterion_07_oracle_equivalence() {
    criterion(7, "exhaustive verdicts match an independent nested-loop search", || {
        /// Independent re-implementation: walk positions left to right,
        /// at each either leave the token or try every option, spending at
        /// most `left` edits; every visited state is a legal variant.
        fn brute<F: certitext_core::Scalar>(
            net: &Network<F>,
            opts: &[(usize, Vec<TokenId>)],
            tokens: &mut Vec<TokenId>,
            next: usize,
            left: usize,
            label: usize,
        ) -> Option<Vec<TokenId>> {
            if next == 0 && argmax(&net.forward_tokens(tokens).unwrap()) != label {
                return Some(tokens.clone());
            }
            if next == opts.len() {
                return None;
            }
            if let Some(hit) = brute(net, opts, tokens, next + 1, left, label) {
                return Some(hit);
            }
            if left > 0 {
                let (pos, ref repls) = opts[next];
                let orig = tokens[pos];
                for &r in repls {
                    tokens[pos] = r;
                    if argmax(&net.forward_tokens(tokens).unwrap()) != label {
                        let hit = tokens.clone();
                        tokens[pos] = orig;
                        return Some(hit);
                    }
                    if let Some(hit) = brute(net, opts, tokens, next + 1, left - 1, label) {
                        tokens[pos] = orig;
                        return Some(hit);
                    }
                }
                tokens[pos] = orig;
            }
            None
        }

        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let net = net_f32("embed:8:4|conv:6:3|relu|avgpool|linear:2", 2, 70);
        for case in 0..30usize {
            let tokens = rand_tokens(8, 8, &mut rng);
            let table = rand_table(8, 3, &mut rng);
            let delta = 1 + case % 3;
            let pset = elementary_perturbations(&tokens, &table, delta);

            let enumerated = enumerate_space(&pset).count() as u64;
            assert_eq!(count_space(&pset).unwrap(), enumerated - 1);

            let label = case % 2;
            let verdict = exhaustive_verify(&net, &pset, label, DEFAULT_ORACLE_BUDGET).unwrap();
            let opts: Vec<(usize, Vec<TokenId>)> = pset
                .tokens
                .iter()
                .enumerate()
                .map(|(pos, &t)| (pos, table.replacements(t).to_vec()))
                .filter(|(_, r)| !r.is_empty())
                .collect();
            let mut work = pset.tokens.clone();
            let hit = brute(&net, &opts, &mut work, 0, delta, label);
            match (&verdict.outcome, &hit) {
                (OracleOutcome::Robust, None) => {}
                (OracleOutcome::Counterexample(seq), Some(_)) => {
                    assert_ne!(argmax(&net.forward_tokens(seq).unwrap()), label);
                }
                other => panic!("case {case}: verdicts disagree: {other:?}"),
            }
        }
    });
}

#[test]
fn criterion_08_certified_training_gain() {
    criterion(8, "robust training lifts oracle accuracy >= 20 points, bounds tight", || {
        let fix = fixture();
        let (sn, _) =
            evaluate(&fix.normal, &fix.test, &fix.table, FIX_DELTA, DEFAULT_ORACLE_BUDGET)
                .unwrap();
        let (sv, _) = evaluate(
            &fix.verifiable,
            &fix.test,
            &fix.table,
            FIX_DELTA,
            DEFAULT_ORACLE_BUDGET,
        )
        .unwrap();
        assert_eq!(sn.oracle_attempted, sn.total);
        assert_eq!(sv.oracle_attempted, sv.total);
        let oracle_normal = sn.oracle_accuracy().unwrap();
        let oracle_verifiable = sv.oracle_accuracy().unwrap();
        let verified = sv.ibp_verified_accuracy();
        println!(
            "  normal: nominal {:.3} oracle {:.3} | verifiable: nominal {:.3} \
             oracle {:.3} ibp-verified {:.3}",
            sn.nominal_accuracy(),
            oracle_normal,
            sv.nominal_accuracy(),
            oracle_verifiable,
            verified
        );
        assert!(
            oracle_verifiable - oracle_normal >= 0.20,
            "oracle gain {:.3} -> {:.3} smaller than 20 points",
            oracle_normal,
            oracle_verifiable
        );
        assert!(
            oracle_verifiable - verified <= 0.05,
            "certified fraction {verified:.3} more than 5 points below its \
             own oracle {oracle_verifiable:.3}"
        );
    });
}

#[test]
fn criterion_09_loss_reductions() {
    criterion(9, "kappa=1 equals the plain loss bitwise; budget 0 collapses bounds", || {
        let net = net_f64("embed:8:4|conv:6:3|relu|avgpool|linear:2", 2, 90);
        let table = SubstitutionTable::from_pairs(8, &[(0, vec![5]), (2, vec![6, 7])]).unwrap();
        let batch: Vec<Example> = [(vec![0, 1, 2, 3], 0), (vec![2, 0, 1, 7], 1)]
            .into_iter()
            .map(|(tokens, label)| Example { tokens, label })
            .collect();

        let mut g_plain = ParamGrads::zeros_like(&net);
        let plain = loss_normal(&net, &batch, &mut g_plain).unwrap();
        let mut g_v = ParamGrads::zeros_like(&net);
        let v = loss_verifiable(&net, &batch, &table, 3, 1.0, &mut g_v).unwrap();
        assert_eq!(plain, v);
        assert_eq!(g_plain.flat(), g_v.flat());

        // Budget 0: the simplex is the clean point, so the worst-case logits
        // ARE the forward logits and the bound term equals the plain term.
        for ex in &batch {
            let point = PerturbationSet {
                tokens: ex.tokens.clone(),
                elems: vec![],
                budget: 1,
            };
            let sv = build_simplex(&point, &net.embedding).unwrap();
            let run = ibp_forward(&net, &sv, true).unwrap();
            let worst = worst_case_logits(run.logit_bounds(), ex.label).unwrap();
            let logits = net.forward_tokens(&ex.tokens).unwrap();
            assert_eq!(worst, logits);
            assert_eq!(
                cross_entropy(&worst, ex.label).unwrap(),
                cross_entropy(&logits, ex.label).unwrap()
            );
        }
    });
}

#[test]
fn criterion_10_incremental_bounds() {
    criterion(10, "incremental first-layer bounds agree and cost >= 5x less", || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for case in 0..1000u64 {
            let net = net_f32("embed:10:4|conv:5:3|relu|avgpool|linear:2", 2, 1000 + case / 20);
            let tokens = rand_tokens(10, rng.gen_range(6..=12), &mut rng);
            let table = rand_table(10, 2, &mut rng);
            let pset = elementary_perturbations(&tokens, &table, 1 + (case as usize) % 3);
            if pset.elems.is_empty() {
                continue;
            }
            let sv = build_simplex(&pset, &net.embedding).unwrap();
            let fast = ibp_forward(&net, &sv, true).unwrap();
            let slow = ibp_forward(&net, &sv, false).unwrap();
            assert!(
                fast.first.post.lower.max_abs_diff(&slow.first.post.lower) <= 1e-6
                    && fast.first.post.upper.max_abs_diff(&slow.first.post.upper) <= 1e-6,
                "case {case}: first-layer bounds disagree"
            );
            assert!(
                fast.logit_bounds().lower.max_abs_diff(&slow.logit_bounds().lower) <= 1e-6
                    && fast.logit_bounds().upper.max_abs_diff(&slow.logit_bounds().upper)
                        <= 1e-6,
                "case {case}: logit bounds disagree"
            );
        }

        // Cost case: 100 positions, width-5 kernel, 200 single substitutions.
        let net = net_f32("embed:50:8|conv:16:5|relu|avgpool|linear:2", 2, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tokens = rand_tokens(50, 100, &mut rng);
        let mut table = SubstitutionTable::new(50);
        for t in 0..50 {
            table.add(t, &[(t + 1) % 50, (t + 2) % 50]).unwrap();
        }
        let pset = elementary_perturbations(&tokens, &table, 3);
        assert_eq!(pset.elems.len(), 200);
        let sv = build_simplex(&pset, &net.embedding).unwrap();
        let fast = ibp_forward(&net, &sv, true).unwrap().first;
        let slow = ibp_forward(&net, &sv, false).unwrap().first;
        let ratio = slow.madds as f64 / fast.madds as f64;
        println!(
            "  multiply-adds: naive {} vs incremental {} ({ratio:.1}x)",
            slow.madds, fast.madds
        );
        assert!(ratio >= 5.0, "incremental path only {ratio:.1}x cheaper");
    });
}

#[test]
fn criterion_11_attack_suboptimality_witness() {
    criterion(11, "some example defeats the greedy attack but not the oracle", || {
        // Fixed recipe: a small model fit to a noisy task has a wiggly
        // decision surface, so the greedy attack's best single flip often
        // starts a path that never reaches the flipping combination.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut table = SubstitutionTable::new(6);
        for t in 0..6 {
            let r = (t + rng.gen_range(1..6)) % 6;
            table.add(t, &[r]).unwrap();
        }
        let split = |rng: &mut ChaCha8Rng| -> Vec<Example> {
            (0..24)
                .map(|_| Example {
                    tokens: (0..6).map(|_| rng.gen_range(0..6)).collect(),
                    label: rng.gen_range(0..2),
                })
                .collect()
        };
        let train_set = split(&mut rng);
        let valid_set = split(&mut rng);
        let cfg = TrainConfig {
            regime: Regime::Normal,
            learning_rate: 0.02,
            batch_size: 8,
            max_epochs: 10,
            patience: 10,
            seed: 0,
            ..TrainConfig::default()
        };
        let init = net_f32("embed:6:4|conv:8:3|relu|avgpool|linear:2", 2, 0);
        let net = train(&cfg, init, &train_set, &valid_set, &table).unwrap().net;

        let mut witnesses = 0usize;
        let mut first: Option<(usize, usize)> = None;
        for case in 0..60usize {
            let tokens = rand_tokens(6, 6, &mut rng);
            let label = argmax(&net.forward_tokens(&tokens).unwrap());
            for delta in [2usize, 3] {
                let pset = elementary_perturbations(&tokens, &table, delta);
                let greedy = hotflip(&net, &pset, label).unwrap();
                if greedy.prediction != label {
                    continue;
                }
                let oracle =
                    exhaustive_verify(&net, &pset, label, DEFAULT_ORACLE_BUDGET).unwrap();
                if let OracleOutcome::Counterexample(seq) = &oracle.outcome {
                    assert_ne!(argmax(&net.forward_tokens(seq).unwrap()), label);
                    witnesses += 1;
                    first.get_or_insert((case, delta));
                }
            }
        }
        let (case, delta) = first.expect("no greedy-miss witness found");
        println!("  {witnesses} witnesses; first at input {case}, budget {delta}");
        assert!(witnesses > 0);
    });
}
