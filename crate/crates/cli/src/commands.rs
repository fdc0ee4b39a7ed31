use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use prdl::augment::Operator;
use prdl::dataset::{ids_in_split, read_dataset, read_split_index, write_dataset};
use prdl::mil::{
    add_feature_noise, classification_metrics, gen_synthetic, predict_split, read_mil_model, self_check,
    write_mil_model, AugMode, Metrics, Split,
};
use prdl::model::{mask_similarity, read_checkpoint, MaskMatrix};
use prdl::prs::{extract_distributions, read_store, write_store};
use prdl::trainer::{gradient_suite, pretrain as run_pretrain, write_pretrain_outputs, LOSS_LOG_HEADER};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{echo, RunConfig};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.prdl";
pub const LOSS_LOG_FILE: &str = "loss_log.txt";
pub const STORE_FILE: &str = "store.prsd";
pub const MIL_MODEL_FILE: &str = "mil_model.pmil";
pub const MIL_RUN_FILE: &str = "mil_run.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const HISTORY_FILE: &str = "mil_history.jsonl";
pub const MASK_SIM_FILE: &str = "mask_similarity.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.txt";

fn out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))
}

fn write_text(path: PathBuf, text: &str) -> Result<(), CliError> {
    fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn resolve(config: Option<&Path>, edit: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(config)?;
    edit(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

pub fn gen_data(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    bags_per_class: Option<usize>,
) -> Result<(), CliError> {
    let cfg = resolve(config, |c| {
        if let Some(s) = seed {
            c.data.seed = s;
        }
        if let Some(n) = bags_per_class {
            c.data.bags_per_class = n;
        }
    })?;
    out_dir(out)?;
    echo(&cfg, "gen-data", Some(cfg.data.seed), Some(out))?;
    let probe = self_check(&cfg.data)?;
    println!("linear-probe accuracy on raw pixels: {probe:.3}");
    let synth = gen_synthetic(&cfg.data)?;
    write_dataset(out, &synth.data)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{}: {} bags", split.name(), synth.data.ids_in(split).len());
    }
    Ok(())
}

pub fn pretrain(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    seed: u64,
    epochs: Option<usize>,
    max_steps: Option<usize>,
) -> Result<(), CliError> {
    let cfg = resolve(config, |c| {
        if let Some(e) = epochs {
            c.pretrain.epochs = e;
        }
        if max_steps.is_some() {
            c.pretrain.max_steps = max_steps;
        }
    })?;
    out_dir(out)?;
    echo(&cfg, "pretrain", Some(seed), Some(out))?;
    let dataset = read_dataset(data)?;
    let images = dataset.patches_in(Split::Train);
    if images.is_empty() {
        return Err(CliError::Validation(format!("{}: no training-split patches", data.display())));
    }
    println!("pretraining on {} patches", images.len());
    println!("{LOSS_LOG_HEADER}");
    let outcome = run_pretrain(&cfg.pretrain, &cfg.loss, &images, seed, |e| {
        let l = &e.loss;
        println!(
            "{} {:.5} {:.5} {:.5} {:.5} {:.5} {:.3e} {:.6} {:.4}",
            e.epoch, l.ce, l.kl, l.sparsity, l.variance, l.total, e.schedule.lr, e.schedule.momentum, e.schedule.teacher_temp
        );
    })?;
    println!("eval {}", outcome.eval);
    write_pretrain_outputs(&outcome, &out.join(CHECKPOINT_FILE), &out.join(LOSS_LOG_FILE))?;
    Ok(())
}

pub fn extract(config: Option<&Path>, data: &Path, checkpoint: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = resolve(config, |_| {})?;
    out_dir(out)?;
    echo(&cfg, "extract", None, Some(out))?;
    let model = read_checkpoint(checkpoint)?;
    let dataset = read_dataset(data)?;
    let store = extract_distributions(&model, &dataset.bags)?;
    write_store(&store, &out.join(STORE_FILE))?;
    let patches: usize = store.bags().iter().map(|b| b.patch_count(store.dim())).sum();
    println!("{} bags, {patches} patches, D = {}", store.bags().len(), store.dim());
    Ok(())
}

/// One line of the metrics JSON-lines output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub method: String,
    pub seed: u64,
    pub split: String,
    pub bags: usize,
    pub feature_noise: f64,
    pub auc: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub config_hash: String,
}

/// Provenance written next to a trained MIL model.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MilRun {
    method: String,
    seed: u64,
    config_hash: String,
    best_epoch: usize,
}

fn metrics_table(records: &[MetricRecord]) -> String {
    let mut s = format!(
        "{:<15} {:>6} {:<6} {:>5} {:>7} {:>8} {:>9}\n",
        "method", "seed", "split", "bags", "auc", "macro_f1", "accuracy"
    );
    for r in records {
        let _ = writeln!(
            s,
            "{:<15} {:>6} {:<6} {:>5} {:>7.4} {:>8.4} {:>9.4}",
            r.method, r.seed, r.split, r.bags, r.auc, r.macro_f1, r.accuracy
        );
    }
    s
}

fn json_lines<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|r| serde_json::to_string(r).expect("serialisable") + "\n")
        .collect()
}

fn record(method: &str, seed: u64, split: Split, bags: usize, noise: f64, m: Metrics, hash: &str) -> MetricRecord {
    MetricRecord {
        method: method.to_string(),
        seed,
        split: split.name().to_string(),
        bags,
        feature_noise: noise,
        auc: m.auc,
        macro_f1: m.macro_f1,
        accuracy: m.accuracy,
        config_hash: hash.to_string(),
    }
}

fn split_metrics(
    model: &prdl::mil::MilModel,
    store: &prdl::prs::PrsStore,
    ids: &[String],
) -> Result<Metrics, CliError> {
    if ids.is_empty() {
        return Err(CliError::Validation("cannot evaluate an empty split".into()));
    }
    let (labels, probs) = predict_split(model, store, ids)?;
    Ok(classification_metrics(&labels, &probs, model.classes())?)
}

#[allow(clippy::too_many_arguments)]
pub fn train_mil(
    config: Option<&Path>,
    data: &Path,
    store_path: &Path,
    out: &Path,
    aug: AugMode,
    seed: u64,
    epochs: Option<usize>,
) -> Result<(), CliError> {
    let cfg = resolve(config, |c| {
        if let Some(e) = epochs {
            c.mil.epochs = e;
        }
    })?;
    out_dir(out)?;
    let hash = echo(&cfg, "train-mil", Some(seed), Some(out))?;
    let store = read_store(store_path)?;
    let index = read_split_index(data)?;
    let train = ids_in_split(&index, Split::Train);
    let val = ids_in_split(&index, Split::Val);
    let outcome = prdl::mil::train_mil(&store, &train, &val, &cfg.mil, cfg.store.sigma_mode, aug, seed)?;
    write_mil_model(&outcome.model, &out.join(MIL_MODEL_FILE))?;
    let run = MilRun {
        method: aug.name().to_string(),
        seed,
        config_hash: hash.clone(),
        best_epoch: outcome.best_epoch,
    };
    write_text(out.join(MIL_RUN_FILE), &(serde_json::to_string_pretty(&run).expect("serialisable") + "\n"))?;
    write_text(out.join(HISTORY_FILE), &json_lines(&outcome.history))?;
    let mut records = Vec::new();
    for (split, ids) in [(Split::Train, &train), (Split::Val, &val)] {
        if ids.is_empty() {
            continue;
        }
        let m = split_metrics(&outcome.model, &store, ids)?;
        records.push(record(aug.name(), seed, split, ids.len(), 0.0, m, &hash));
    }
    write_text(out.join(METRICS_FILE), &json_lines(&records))?;
    println!("best epoch {}", outcome.best_epoch);
    print!("{}", metrics_table(&records));
    Ok(())
}

pub struct EvalArgs<'a> {
    pub data: &'a Path,
    pub store: &'a Path,
    pub model: &'a Path,
    pub out: &'a Path,
    pub split: Split,
    pub feature_noise: f64,
    pub noise_seed: u64,
}

pub fn eval(config: Option<&Path>, args: &EvalArgs<'_>) -> Result<(), CliError> {
    let cfg = resolve(config, |_| {})?;
    out_dir(args.out)?;
    let hash = echo(&cfg, "eval", None, Some(args.out))?;
    let run_path = args.model.join(MIL_RUN_FILE);
    let run_text =
        fs::read_to_string(&run_path).map_err(|e| CliError::Runtime(format!("{}: {e}", run_path.display())))?;
    let run: MilRun = serde_json::from_str(&run_text)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", run_path.display())))?;
    let model = read_mil_model(&args.model.join(MIL_MODEL_FILE))?;
    let mut store = read_store(args.store)?;
    let index = read_split_index(args.data)?;
    let ids = ids_in_split(&index, args.split);
    if args.feature_noise != 0.0 {
        let reference = ids_in_split(&index, Split::Train);
        store = add_feature_noise(&store, &ids, &reference, args.feature_noise, args.noise_seed)?;
    }
    let m = split_metrics(&model, &store, &ids)?;
    let rec = record(&run.method, run.seed, args.split, ids.len(), args.feature_noise, m, &hash);
    let records = [rec];
    write_text(args.out.join(format!("metrics_{}.jsonl", args.split.name())), &json_lines(&records))?;
    print!("{}", metrics_table(&records));
    Ok(())
}

pub fn gradcheck(seed: u64, seeds: u64, tolerance: f64, out: Option<&Path>) -> Result<(), CliError> {
    if !(tolerance > 0.0) || seeds == 0 {
        return Err(CliError::Validation("tolerance must be > 0 and seeds >= 1".into()));
    }
    let mut report = String::new();
    let mut failures = 0;
    for s in seed..seed + seeds {
        for check in gradient_suite(s, 1e-3, tolerance)? {
            let status = if check.report.passed { "ok" } else { "FAIL" };
            if !check.report.passed {
                failures += 1;
            }
            let _ = writeln!(
                report,
                "seed {s} {:<6} max_rel_err {:.3e} {status}",
                check.term.name(),
                check.report.max_relative_error()
            );
        }
    }
    print!("{report}");
    if let Some(dir) = out {
        out_dir(dir)?;
        write_text(dir.join(GRADCHECK_FILE), &report)?;
    }
    if failures > 0 {
        return Err(CliError::Runtime(format!("{failures} gradient checks failed at tolerance {tolerance}")));
    }
    println!("all gradient checks passed at tolerance {tolerance}");
    Ok(())
}

pub fn mask_sim(checkpoint: Option<&Path>, random_seed: Option<u64>, dim: usize, out: Option<&Path>) -> Result<(), CliError> {
    let mask = match (checkpoint, random_seed) {
        (Some(path), _) => read_checkpoint(path)?.student.mask,
        (None, Some(seed)) => {
            if dim == 0 {
                return Err(CliError::Validation("--dim must be positive".into()));
            }
            MaskMatrix::random(dim, &mut ChaCha8Rng::seed_from_u64(seed))
        }
        (None, None) => return Err(CliError::Validation("pass --checkpoint or --random-seed".into())),
    };
    let sim = mask_similarity(&mask);
    let mut csv = String::from("operator");
    for op in Operator::ALL {
        let _ = write!(csv, ",{}", op.name());
    }
    csv.push('\n');
    for (i, op) in Operator::ALL.iter().enumerate() {
        csv.push_str(op.name());
        for v in sim.row_slice(i) {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    print!("{csv}");
    if let Some(dir) = out {
        out_dir(dir)?;
        write_text(dir.join(MASK_SIM_FILE), &csv)?;
    }
    Ok(())
}
