//! Command-line front end: train, evaluate, attack, verify, sweep, and
//! count-space over one JSON run configuration.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use certitext_core::attack::hotflip;
use certitext_core::checkpoint::{load_checkpoint, save_checkpoint};
use certitext_core::config::{write_atomic, RunConfig};
use certitext_core::data::{
    char_vocab, encode_dataset, load_embedding_file, load_raw_dataset, load_table_file, Example,
    Level, Vocab,
};
use certitext_core::model::{
    build_network, build_network_with_table, parse_descriptor, resolve_arch,
};
use certitext_core::nn::{argmax, Network};
use certitext_core::perturb::{count_space, elementary_perturbations, SubstitutionTable};
use certitext_core::train::{train, training_log_jsonl};
use certitext_core::verify::{
    evaluate, exhaustive_verify, ibp_verify, metrics_csv, pass_budget_curve, reports_jsonl, sweep,
};
use certitext_core::Tensor;

#[derive(Parser)]
#[command(
    name = "certitext",
    version,
    about = "Train and certify small text classifiers against symbol substitutions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (JSON).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override the evaluation budget.
    #[arg(long)]
    delta: Option<usize>,
    /// Override the rng seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Ibp,
    Exhaustive,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model under the configured regime.
    Train(Common),
    /// Score all four metrics on the evaluation split.
    Evaluate(Common),
    /// Run the gradient-guided attack per example.
    Attack(Common),
    /// Certify per example with one verifier.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Method,
    },
    /// Score metrics across several budgets.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated budgets; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<usize>>,
    },
    /// Print each example's perturbation-space size.
    CountSpace(Common),
}

/// Everything derivable from the config before a model exists.
struct Data {
    vocab: Vocab,
    table: SubstitutionTable,
    descriptor: String,
    pretrained: Option<Tensor<f32>>,
}

fn embedding_dim(architecture: &str) -> Result<usize> {
    Ok(match architecture {
        "sst-word" => 300,
        "sst-char" | "ag-char" => 150,
        custom => parse_descriptor(custom)?.dim,
    })
}

fn prepare(cfg: &RunConfig) -> Result<Data> {
    let (vocab, pretrained) = match cfg.level {
        Level::Word => {
            let path = cfg
                .embedding_path
                .as_ref()
                .context("word level needs embedding_path")?;
            let dim = embedding_dim(&cfg.architecture)?;
            let (vocab, table) = load_embedding_file::<f32>(path, dim)?;
            (vocab, Some(table))
        }
        Level::Char => {
            let path = cfg
                .train_path
                .as_ref()
                .context("char level needs train_path to build the character vocabulary")?;
            let raw = load_raw_dataset(path)?;
            (char_vocab(&raw, cfg.char_limit)?, None)
        }
    };
    let descriptor = resolve_arch(&cfg.architecture, vocab.len(), cfg.class_count)?;
    let spec = parse_descriptor(&descriptor)?;
    if spec.vocab != vocab.len() {
        bail!(
            "descriptor wants a vocabulary of {}, the data provides {} tokens",
            spec.vocab,
            vocab.len()
        );
    }
    let table = match &cfg.table_path {
        Some(p) => load_table_file(p, &vocab)?,
        None => SubstitutionTable::new(vocab.len()),
    };
    Ok(Data {
        vocab,
        table,
        descriptor,
        pretrained,
    })
}

fn init_network(cfg: &RunConfig, data: &Data) -> Result<Network<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = match &data.pretrained {
        Some(t) => {
            build_network_with_table(&data.descriptor, cfg.class_count, t.clone(), &mut rng)?
        }
        None => build_network(&data.descriptor, cfg.class_count, &mut rng)?,
    };
    Ok(net)
}

fn load_split(
    cfg: &RunConfig,
    data: &Data,
    path: &PathBuf,
    split: &str,
    min_len: usize,
) -> Result<Vec<Example>> {
    let raw = load_raw_dataset(path)?;
    let ds = encode_dataset(
        &raw,
        cfg.level,
        &data.vocab,
        cfg.class_count,
        cfg.char_limit,
        min_len,
        &path.display().to_string(),
        split,
    )?;
    Ok(ds.examples)
}

fn eval_split(cfg: &RunConfig) -> Result<(&PathBuf, &'static str)> {
    if let Some(p) = &cfg.test_path {
        return Ok((p, "test"));
    }
    if let Some(p) = &cfg.valid_path {
        return Ok((p, "validation"));
    }
    bail!("no test_path or valid_path to evaluate on")
}

fn load_model(cfg: &RunConfig, data: &Data) -> Result<Network<f32>> {
    let path = cfg.checkpoint_path();
    let ckpt = load_checkpoint::<f32>(&path, Some(&data.descriptor))
        .with_context(|| format!("loading {}", path.display()))?;
    Ok(ckpt.net)
}

/// Writes named outputs plus the resolved config into the out directory.
fn write_outputs(cfg: &RunConfig, files: &[(&str, &[u8])]) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    for (name, content) in files {
        write_atomic(&cfg.out_dir.join(name), content)?;
    }
    write_atomic(
        &cfg.out_dir.join("config.json"),
        cfg.to_json_pretty()?.as_bytes(),
    )?;
    Ok(())
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(&common.config)
        .with_context(|| format!("reading {}", common.config.display()))?;
    if let Some(d) = common.delta {
        cfg.delta = d;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data = prepare(cfg)?;
    let net = init_network(cfg, &data)?;
    let min_len = net.min_seq_len();
    let train_path = cfg.train_path.as_ref().context("train needs train_path")?;
    let valid_path = cfg.valid_path.as_ref().context("train needs valid_path")?;
    let train_set = load_split(cfg, &data, train_path, "train", min_len)?;
    let valid_set = load_split(cfg, &data, valid_path, "validation", min_len)?;

    let tc = cfg.train_config();
    println!(
        "training {} ({} regime) on {} examples, validating on {}",
        data.descriptor,
        tc.regime,
        train_set.len(),
        valid_set.len()
    );
    let out = train(&tc, net, &train_set, &valid_set, &data.table)?;
    println!(
        "best epoch {} with validation metric {:.4} ({} epochs run{})",
        out.best_epoch,
        out.best_metric,
        out.log.len(),
        if out.stopped_early { ", stopped early" } else { "" }
    );

    let ckpt_path = cfg.checkpoint_path();
    if let Some(parent) = ckpt_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(&ckpt_path, &out.net, &cfg.to_json_pretty()?, cfg.seed)?;
    write_outputs(
        cfg,
        &[("training_log.jsonl", training_log_jsonl(&out.log)?.as_bytes())],
    )?;
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let data = prepare(cfg)?;
    let net = load_model(cfg, &data)?;
    let (path, split) = eval_split(cfg)?;
    let examples = load_split(cfg, &data, path, split, net.min_seq_len())?;

    let (summary, reports) = evaluate(&net, &examples, &data.table, cfg.delta, cfg.oracle_budget)?;
    let curve = pass_budget_curve(&reports);
    write_outputs(
        cfg,
        &[
            ("metrics.csv", metrics_csv(std::slice::from_ref(&summary)).as_bytes()),
            ("reports.jsonl", reports_jsonl(&reports)?.as_bytes()),
            ("curve.json", serde_json::to_string_pretty(&curve)?.as_bytes()),
        ],
    )?;

    println!(
        "delta {}: nominal {:.4}, adversarial {:.4}, ibp-verified {:.4}",
        summary.delta,
        summary.nominal_accuracy(),
        summary.adversarial_accuracy(),
        summary.ibp_verified_accuracy()
    );
    match summary.oracle_accuracy() {
        Some(acc) => println!(
            "oracle {:.4} over {} attempted ({} forward passes)",
            acc, summary.oracle_attempted, summary.forward_passes
        ),
        None => println!("oracle attempted no example within the pass budget"),
    }
    Ok(())
}

fn cmd_attack(cfg: &RunConfig) -> Result<()> {
    let data = prepare(cfg)?;
    let net = load_model(cfg, &data)?;
    let (path, split) = eval_split(cfg)?;
    let examples = load_split(cfg, &data, path, split, net.min_seq_len())?;

    let mut rows = String::new();
    let mut clean_ok = 0usize;
    let mut both_ok = 0usize;
    for (index, ex) in examples.iter().enumerate() {
        let clean_prediction = argmax(&net.forward_tokens(&ex.tokens)?);
        let pset = elementary_perturbations(&ex.tokens, &data.table, cfg.delta);
        let hit = hotflip(&net, &pset, ex.label)?;
        if clean_prediction == ex.label {
            clean_ok += 1;
            if hit.prediction == ex.label {
                both_ok += 1;
            }
        }
        rows.push_str(&serde_json::to_string(&serde_json::json!({
            "index": index,
            "label": ex.label,
            "clean_prediction": clean_prediction,
            "prediction": hit.prediction,
            "prediction_changed": hit.prediction_changed,
            "flips": hit.flips,
            "clean_loss": hit.clean_loss,
            "loss": hit.loss,
            "forward_passes": hit.forward_passes,
            "text": data.vocab.render(&hit.tokens, cfg.level),
        }))?);
        rows.push('\n');
    }
    write_outputs(cfg, &[("attacks.jsonl", rows.as_bytes())])?;
    println!(
        "delta {}: adversarial accuracy {:.4} ({} of {}; {} clean-correct)",
        cfg.delta,
        both_ok as f64 / examples.len() as f64,
        both_ok,
        examples.len(),
        clean_ok
    );
    Ok(())
}

fn cmd_verify(cfg: &RunConfig, method: Method) -> Result<()> {
    let data = prepare(cfg)?;
    let net = load_model(cfg, &data)?;
    let (path, split) = eval_split(cfg)?;
    let examples = load_split(cfg, &data, path, split, net.min_seq_len())?;

    let mut rows = String::new();
    match method {
        Method::Ibp => {
            let mut verified = 0usize;
            for (index, ex) in examples.iter().enumerate() {
                let pset = elementary_perturbations(&ex.tokens, &data.table, cfg.delta);
                let v = ibp_verify(&net, &pset, ex.label)?;
                verified += v.verified as usize;
                rows.push_str(&serde_json::to_string(&serde_json::json!({
                    "index": index,
                    "label": ex.label,
                    "verified": v.verified,
                    "margin": v.margin,
                    "vertex_evals": v.vertex_evals,
                }))?);
                rows.push('\n');
            }
            println!(
                "delta {}: ibp verified {} of {} ({:.4})",
                cfg.delta,
                verified,
                examples.len(),
                verified as f64 / examples.len() as f64
            );
        }
        Method::Exhaustive => {
            let mut robust = 0usize;
            let mut attempted = 0usize;
            let mut passes = 0u64;
            for (index, ex) in examples.iter().enumerate() {
                let pset = elementary_perturbations(&ex.tokens, &data.table, cfg.delta);
                let v = exhaustive_verify(&net, &pset, ex.label, cfg.oracle_budget)?;
                attempted += v.outcome.attempted() as usize;
                robust += v.outcome.robust() as usize;
                passes += v.passes;
                rows.push_str(&serde_json::to_string(&serde_json::json!({
                    "index": index,
                    "label": ex.label,
                    "oracle": v.outcome,
                    "forward_passes": v.passes,
                }))?);
                rows.push('\n');
            }
            println!(
                "delta {}: oracle robust {} of {} attempted ({} of {} total, {} forward passes)",
                cfg.delta,
                robust,
                attempted,
                attempted,
                examples.len(),
                passes
            );
        }
    }
    write_outputs(cfg, &[("verify.jsonl", rows.as_bytes())])?;
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, deltas: Option<Vec<usize>>) -> Result<()> {
    let deltas = deltas.unwrap_or_else(|| cfg.deltas.clone());
    if deltas.is_empty() {
        bail!("no budgets: set `deltas` in the config or pass --deltas");
    }
    let data = prepare(cfg)?;
    let net = load_model(cfg, &data)?;
    let (path, split) = eval_split(cfg)?;
    let examples = load_split(cfg, &data, path, split, net.min_seq_len())?;

    let rows = sweep(&net, &examples, &data.table, &deltas, cfg.oracle_budget)?;
    let csv = metrics_csv(&rows);
    write_outputs(cfg, &[("metrics.csv", csv.as_bytes())])?;
    print!("{csv}");
    Ok(())
}

fn cmd_count_space(cfg: &RunConfig) -> Result<()> {
    let data = prepare(cfg)?;
    // Skeleton model, only to pad sequences exactly as evaluation would.
    let min_len = init_network(cfg, &data)?.min_seq_len();
    let (path, split) = eval_split(cfg)?;
    let examples = load_split(cfg, &data, path, split, min_len)?;
    for ex in &examples {
        let pset = elementary_perturbations(&ex.tokens, &data.table, cfg.delta);
        match count_space(&pset) {
            Ok(n) => println!("{n}"),
            Err(_) => println!("overflow"),
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Train(c) => cmd_train(&load_config(&c)?),
        Command::Evaluate(c) => cmd_evaluate(&load_config(&c)?),
        Command::Attack(c) => cmd_attack(&load_config(&c)?),
        Command::Verify { common, method } => cmd_verify(&load_config(&common)?, method),
        Command::Sweep { common, deltas } => cmd_sweep(&load_config(&common)?, deltas),
        Command::CountSpace(c) => cmd_count_space(&load_config(&c)?),
    }
}
