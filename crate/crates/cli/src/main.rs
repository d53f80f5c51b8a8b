mod config;
mod error;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use ragfuse::autodiff::checkpoint;
use ragfuse::data::{self, RawDump, SyntheticConfig};
use ragfuse::graph::stratified_split;
use ragfuse::metrics::{best_threshold, DEFAULT_THRESHOLD};
use ragfuse::model::{Model, Scheme};
use ragfuse::train::{self, Prepared, RunManifest, SweepAxis, ThresholdMode, TrainConfig};

use crate::error::CliError;
use crate::run::{guarded, RUN_MANIFEST};

#[derive(Parser)]
#[command(name = "ragfuse", version, about = "Fraud detection on multi-relation graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON config file; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (or file, for eval and params).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Checkpoint file.
    #[arg(long, global = true)]
    ckpt: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted config override, e.g. `--set relations.0.homophily=0.8`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Continue an interrupted run; a completed run is left untouched.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth,
    /// Build a dataset directory from raw CSV dumps.
    Convert,
    /// Train one model and write checkpoints, epoch CSV and manifest.
    Train {
        /// Fill the wall-clock column of epochs.csv (breaks byte-identical reruns).
        #[arg(long)]
        timing: bool,
    },
    /// Score a checkpoint on the validation and test splits.
    Eval,
    /// Train several schemes on one split.
    Ablate {
        /// Comma-separated schemes; defaults to the five fusion schemes.
        #[arg(long, value_delimiter = ',')]
        schemes: Vec<Scheme>,
    },
    /// One training per value of a hyperparameter.
    Sweep {
        /// train_ratio, transformer_layers, gcn_layers, d or max_hop.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Train and write the per-epoch similarity between the two encoders.
    Similarity,
    /// Parameter counts per component.
    Params {
        /// Used when --data is absent.
        #[arg(long, default_value_t = 32)]
        feature_dim: usize,
        #[arg(long, default_value_t = 3)]
        num_relations: usize,
    },
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationFile {
    name: String,
    edges: PathBuf,
}

/// Raw dump description read by `convert`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvertConfig {
    features_csv: PathBuf,
    labels_csv: PathBuf,
    relations: Vec<RelationFile>,
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    v.as_deref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn pretty(v: &impl Serialize) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(ragfuse::Error::from)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn to_value(v: &impl Serialize) -> Result<Value, CliError> {
    Ok(serde_json::to_value(v).map_err(ragfuse::Error::from)?)
}

/// Writes `bytes` to `out`, or stdout when no path is given.
fn write_or_print(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, bytes)?,
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes)?;
        }
    }
    Ok(())
}

fn dataset_guard(out: &Path, resume: bool) -> Result<bool, CliError> {
    if out.join(data::io::MANIFEST_FILE).exists() {
        if resume {
            eprintln!("{} already holds a dataset; nothing to do", out.display());
            return Ok(true);
        }
        return Err(CliError::Exists(format!("{} already holds a dataset", out.display())));
    }
    Ok(false)
}

fn synth(c: &Common) -> Result<(), CliError> {
    let out = required(&c.out, "out")?;
    let cfg: SyntheticConfig = config::load(c.config.as_deref(), &c.overrides, c.seed)?;
    cfg.validate()?;
    if dataset_guard(out, c.resume)? {
        return Ok(());
    }
    let graph = data::generate_synthetic(&cfg)?;
    data::save_dataset(&graph, out, None)?;
    std::fs::write(out.join("generator.json"), pretty(&cfg)?)?;
    Ok(())
}

fn convert(c: &Common) -> Result<(), CliError> {
    let out = required(&c.out, "out")?;
    let cfg: ConvertConfig = config::load(c.config.as_deref(), &c.overrides, None)?;
    if dataset_guard(out, c.resume)? {
        return Ok(());
    }
    let raw = RawDump {
        features_csv: cfg.features_csv,
        labels_csv: cfg.labels_csv,
        relations: cfg.relations.into_iter().map(|r| (r.name, r.edges)).collect(),
    };
    data::convert(&raw, out)?;
    Ok(())
}

fn train_config(c: &Common) -> Result<TrainConfig, CliError> {
    let cfg: TrainConfig = config::load(c.config.as_deref(), &c.overrides, c.seed)?;
    cfg.validate()?;
    Ok(cfg)
}

fn manifest_for(
    command: &str,
    cfg: &TrainConfig,
    data_dir: &Path,
    dataset: &data::Dataset,
) -> Result<RunManifest, CliError> {
    let mut m = RunManifest::new(command, cfg.seed, to_value(cfg)?);
    m.dataset = Some(data_dir.display().to_string());
    m.dataset_checksums = dataset.checksums.clone();
    m.notes = train::harness_notes(cfg);
    Ok(m)
}

fn train_cmd(c: &Common, timing: bool) -> Result<(), CliError> {
    let data_dir = required(&c.data, "data")?;
    let out = required(&c.out, "out")?;
    let cfg = train_config(c)?;
    let dataset = data::load_dataset(data_dir)?;
    let manifest = manifest_for("train", &cfg, data_dir, &dataset)?;
    guarded(out, c.resume, manifest, |run| {
        let outcome = train::train(&dataset.graph, &cfg)?;
        run.emit("epochs.csv", train::epoch_csv(&outcome.reports, timing).as_bytes())?;
        checkpoint::save(&outcome.store, &run.path("best.ckpt"))?;
        run.record("best.ckpt");
        let metrics = json!({
            "best_epoch": outcome.best_epoch,
            "epochs_run": outcome.reports.len(),
            "threshold": outcome.threshold,
            "test": outcome.final_test,
        });
        run.emit("metrics.json", &pretty(&metrics)?)?;
        Ok(metrics)
    })
}

/// Config for `eval`: `--config` if given, else the manifest next to the checkpoint.
fn eval_config(c: &Common, ckpt: &Path) -> Result<TrainConfig, CliError> {
    if c.config.is_some() {
        return train_config(c);
    }
    let manifest = ckpt.parent().unwrap_or(Path::new(".")).join(RUN_MANIFEST);
    let text = std::fs::read_to_string(&manifest)
        .map_err(|_| CliError::Usage(format!("no --config and no readable {}", manifest.display())))?;
    let m: RunManifest = serde_json::from_str(&text).map_err(ragfuse::Error::from)?;
    let cfg: TrainConfig = config::load_value(m.config, &c.overrides, c.seed)?;
    cfg.validate()?;
    Ok(cfg)
}

fn eval(c: &Common) -> Result<(), CliError> {
    let data_dir = required(&c.data, "data")?;
    let ckpt = required(&c.ckpt, "ckpt")?;
    let cfg = eval_config(c, ckpt)?;
    let dataset = data::load_dataset(data_dir)?;
    let graph = &dataset.graph;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (model, mut store) = Model::new(&cfg.model(), graph.feature_dim(), graph.num_relations(), &mut rng)?;
    store.load_named(checkpoint::load(ckpt)?)?;
    let split = stratified_split(graph.labels(), cfg.train_ratio, cfg.val_ratio, cfg.seed)?;
    let prep = Prepared::new(graph, split, &cfg)?;
    let threshold = match cfg.threshold {
        ThresholdMode::Fixed => DEFAULT_THRESHOLD,
        ThresholdMode::BestOnValidation => {
            let scores = prep.predict(&model, &store, &prep.split.validation, cfg.eval_batch_size)?;
            best_threshold(&scores, &prep.labels_of(&prep.split.validation))?
        }
    };
    let report = json!({
        "checksums": dataset.checksums,
        "threshold": threshold,
        "validation": train::evaluate(&prep, &model, &store, &prep.split.validation, &cfg, threshold)?,
        "test": train::evaluate(&prep, &model, &store, &prep.split.test, &cfg, threshold)?,
    });
    write_or_print(c.out.as_deref(), &pretty(&report)?)
}

fn ablate(c: &Common, schemes: &[Scheme]) -> Result<(), CliError> {
    let data_dir = required(&c.data, "data")?;
    let out = required(&c.out, "out")?;
    let cfg = train_config(c)?;
    let schemes: Vec<Scheme> = if schemes.is_empty() {
        vec![
            Scheme::AttentionRes,
            Scheme::AttentionNoRes,
            Scheme::Concat,
            Scheme::Add,
            Scheme::Gated,
        ]
    } else {
        schemes.to_vec()
    };
    let dataset = data::load_dataset(data_dir)?;
    let mut manifest = manifest_for("ablate", &cfg, data_dir, &dataset)?;
    manifest.notes.insert(
        "schemes".into(),
        schemes.iter().map(|s| s.name()).collect::<Vec<_>>().join(","),
    );
    guarded(out, c.resume, manifest, |run| {
        let rows = train::ablate(&dataset.graph, &cfg, &schemes)?;
        run.emit("ablation.csv", train::result_csv(&rows).as_bytes())?;
        to_value(&rows)
    })
}

fn sweep(c: &Common, axis: &str, values: &[f64]) -> Result<(), CliError> {
    let data_dir = required(&c.data, "data")?;
    let out = required(&c.out, "out")?;
    let cfg = train_config(c)?;
    let axis = SweepAxis::parse(axis)?;
    // fail on a bad value before any training starts
    for &v in values {
        axis.apply(&cfg, v)?;
    }
    let dataset = data::load_dataset(data_dir)?;
    let mut manifest = manifest_for("sweep", &cfg, data_dir, &dataset)?;
    manifest
        .notes
        .insert("axis".into(), to_value(&axis)?.as_str().unwrap_or_default().to_string());
    guarded(out, c.resume, manifest, |run| {
        let rows = train::sweep(&dataset.graph, &cfg, axis, values)?;
        run.emit("sweep.csv", train::result_csv(&rows).as_bytes())?;
        let mut results = json!({ "rows": rows, "auc_spread": train::auc_spread(&rows) });
        if axis == SweepAxis::D {
            let auc = |d: &str| rows.iter().find(|r| r.label == d).map(|r| r.test.auc);
            if let (Some(small), Some(base)) = (auc("16"), auc("64")) {
                results["d16_drop_over_0.01"] = json!(base - small > 0.01);
            }
        }
        Ok(results)
    })
}

fn similarity(c: &Common) -> Result<(), CliError> {
    let data_dir = required(&c.data, "data")?;
    let out = required(&c.out, "out")?;
    let cfg = train_config(c)?;
    if !(cfg.scheme.uses_semantic() && cfg.scheme.uses_topology()) {
        return Err(CliError::Usage(format!("scheme {} has a single encoder", cfg.scheme)));
    }
    let dataset = data::load_dataset(data_dir)?;
    let manifest = manifest_for("similarity", &cfg, data_dir, &dataset)?;
    guarded(out, c.resume, manifest, |run| {
        let outcome = train::train(&dataset.graph, &cfg)?;
        let mut csv = String::from("epoch,cos_sim,cka,degenerate\n");
        let rows = std::iter::once((0, outcome.initial_similarity))
            .chain(outcome.reports.iter().map(|r| (r.epoch, r.similarity)));
        for (epoch, s) in rows {
            let s = s.ok_or_else(|| CliError::Usage("similarity unavailable".into()))?;
            let cka = s.cka.map_or_else(String::new, |v| v.to_string());
            csv.push_str(&format!("{epoch},{},{cka},{}\n", s.cosine, s.cka.is_none()));
        }
        run.emit("similarity.csv", csv.as_bytes())?;
        Ok(json!({ "initial": outcome.initial_similarity, "final": outcome.reports.last().and_then(|r| r.similarity) }))
    })
}

fn params(c: &Common, feature_dim: usize, num_relations: usize) -> Result<(), CliError> {
    let cfg = train_config(c)?;
    let (k, r) = match &c.data {
        Some(d) => {
            let m = data::io::read_manifest(d)?;
            (m.feature_dim, m.num_relations)
        }
        None => (feature_dim, num_relations),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (_, store) = Model::new(&cfg.model(), k, r, &mut rng)?;
    let counts: serde_json::Map<String, Value> = Model::parameter_counts(&store)
        .into_iter()
        .map(|(name, n)| (name.to_string(), Value::from(n)))
        .collect();
    let report = json!({ "scheme": cfg.scheme, "feature_dim": k, "num_relations": r, "counts": counts });
    write_or_print(c.out.as_deref(), &pretty(&report)?)
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("RAGFUSE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("RAGFUSE_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let c = &cli.common;
    match &cli.command {
        Command::Synth => synth(c),
        Command::Convert => convert(c),
        Command::Train { timing } => train_cmd(c, *timing),
        Command::Eval => eval(c),
        Command::Ablate { schemes } => ablate(c, schemes),
        Command::Sweep { axis, values } => sweep(c, axis, values),
        Command::Similarity => similarity(c),
        Command::Params {
            feature_dim,
            num_relations,
        } => params(c, *feature_dim, *num_relations),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
