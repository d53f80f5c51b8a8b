//! Mini-batch training, evaluation, similarity traces, ablations and sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{stratified_split, MultiRelationGraph, NodeSplit};
use crate::metrics::{best_threshold, linear_cka, mean_cosine_similarity, MetricReport, DEFAULT_THRESHOLD};
use crate::model::semantic::{SequenceCache, TrainMask};
use crate::model::topology::{PropagationMode, TopologyInputs};
use crate::model::{BatchInputs, Model, ModelConfig, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// F1 at a score of 0.5.
    #[default]
    Fixed,
    /// F1 at the threshold that maximizes validation F1.
    BestOnValidation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_hop: usize,
    pub d: usize,
    pub heads: usize,
    pub transformer_layers: usize,
    pub gcn_layers: usize,
    pub dropout: f64,
    pub propagation: PropagationMode,
    pub seed: u64,
    /// Epochs without a validation AUC improvement before stopping; 0 disables.
    pub patience: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    /// Test nodes used for the per-epoch similarity trace.
    pub probe_size: usize,
    /// Also score the test split after every epoch (otherwise only at the end).
    pub eval_test_each_epoch: bool,
    pub threshold: ThresholdMode,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            scheme: m.scheme,
            epochs: 200,
            batch_size: 256,
            lr: 1e-3,
            weight_decay: 1e-4,
            max_hop: m.max_hop,
            d: m.d,
            heads: m.heads,
            transformer_layers: m.transformer_layers,
            gcn_layers: m.gcn_layers,
            dropout: m.dropout,
            propagation: m.propagation,
            seed: 0,
            patience: 20,
            train_ratio: 0.4,
            val_ratio: 0.1,
            probe_size: 512,
            eval_test_each_epoch: true,
            threshold: ThresholdMode::Fixed,
            eval_batch_size: 512,
        }
    }
}

impl TrainConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            scheme: self.scheme,
            d: self.d,
            heads: self.heads,
            transformer_layers: self.transformer_layers,
            gcn_layers: self.gcn_layers,
            max_hop: self.max_hop,
            dropout: self.dropout,
            propagation: self.propagation,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::InvalidArgument("batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(
                "lr must be positive, weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub cosine: f64,
    /// `None` when either side has zero variance over the probe.
    pub cka: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub validation: MetricReport,
    pub test: Option<MetricReport>,
    pub similarity: Option<Similarity>,
    pub seconds: f64,
}

/// Graph-derived inputs that stay fixed for one split.
pub struct Prepared<'g> {
    pub graph: &'g MultiRelationGraph,
    pub split: NodeSplit,
    pub sequences: Option<SequenceCache>,
    pub topology: Option<TopologyInputs>,
}

impl<'g> Prepared<'g> {
    pub fn new(graph: &'g MultiRelationGraph, split: NodeSplit, config: &TrainConfig) -> Result<Self> {
        let scheme = config.scheme;
        let sequences = if scheme.uses_semantic() {
            let mask = TrainMask::new(graph.num_nodes(), &split.train)?;
            Some(SequenceCache::new(graph, &mask, config.max_hop)?)
        } else {
            None
        };
        let topology = if scheme.uses_topology() {
            Some(TopologyInputs::new(graph)?)
        } else {
            None
        };
        Ok(Self {
            graph,
            split,
            sequences,
            topology,
        })
    }

    fn run_forward<T>(
        &self,
        model: &Model,
        store: &ParamStore,
        nodes: &[usize],
        f: impl FnOnce(&mut Tape, crate::model::ForwardOutput) -> Result<T>,
    ) -> Result<T> {
        let seqs = match &self.sequences {
            Some(c) if model.semantic.is_some() => Some(c.batch(nodes)?),
            _ => None,
        };
        let inputs = BatchInputs {
            nodes,
            sequences: seqs.as_ref(),
            topology: self.topology.as_ref(),
        };
        let mut tape = Tape::new();
        // evaluation never draws from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward(&mut tape, store, &inputs, false, &mut rng)?;
        f(&mut tape, out)
    }

    /// Fraud probabilities for `nodes`, dropout off.
    pub fn predict(&self, model: &Model, store: &ParamStore, nodes: &[usize], chunk: usize) -> Result<Vec<f64>> {
        let mut scores = Vec::with_capacity(nodes.len());
        for part in nodes.chunks(chunk.max(1)) {
            self.run_forward(model, store, part, |tape, out| {
                scores.extend(
                    tape.value(out.logits)
                        .data()
                        .iter()
                        .map(|&z| crate::autodiff::sigmoid(z)),
                );
                Ok(())
            })?;
        }
        Ok(scores)
    }

    /// Flattened `[P, R·d]` encoder outputs for `nodes`.
    pub fn encoder_features(
        &self,
        model: &Model,
        store: &ParamStore,
        nodes: &[usize],
    ) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
        self.run_forward(model, store, nodes, |tape, out| {
            let take = |v: Option<crate::autodiff::Var>| v.map(|v| tape.value(v).data().to_vec());
            Ok((take(out.x_sem), take(out.x_gcn)))
        })
    }

    pub fn labels_of(&self, nodes: &[usize]) -> Vec<u8> {
        nodes.iter().map(|&i| self.graph.labels()[i]).collect()
    }
}

pub fn evaluate(
    prep: &Prepared,
    model: &Model,
    store: &ParamStore,
    nodes: &[usize],
    config: &TrainConfig,
    threshold: f64,
) -> Result<MetricReport> {
    let scores = prep.predict(model, store, nodes, config.eval_batch_size)?;
    MetricReport::compute(&scores, &prep.labels_of(nodes), threshold)
}

fn similarity_of(sem: &[f64], gcn: &[f64], rows: usize) -> Result<Similarity> {
    let cosine = mean_cosine_similarity(sem, gcn, rows)?;
    let cka = match linear_cka(sem, gcn, rows) {
        Ok(v) => Some(v),
        Err(Error::ZeroVariance) => None,
        Err(e) => return Err(e),
    };
    Ok(Similarity { cosine, cka })
}

/// Similarity between the two encoders' outputs on `probe`; `None` for
/// encoder-only models.
pub fn similarity(prep: &Prepared, model: &Model, store: &ParamStore, probe: &[usize]) -> Result<Option<Similarity>> {
    match prep.encoder_features(model, store, probe)? {
        (Some(sem), Some(gcn)) => Ok(Some(similarity_of(&sem, &gcn, probe.len())?)),
        _ => Ok(None),
    }
}

/// Per-snapshot similarity between the encoders on `probe`.
pub fn similarity_trace(
    prep: &Prepared,
    model: &Model,
    snapshots: &[Vec<Tensor>],
    probe: &[usize],
) -> Result<Vec<Option<Similarity>>> {
    let mut store = model_store_template(model, snapshots)?;
    snapshots
        .iter()
        .map(|snap| {
            store.restore(snap)?;
            similarity(prep, model, &store, probe)
        })
        .collect()
}

fn model_store_template(model: &Model, snapshots: &[Vec<Tensor>]) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, store) = Model::new(&model.config, model.feature_dim, model.num_relations, &mut rng)?;
    if let Some(first) = snapshots.first() {
        if first.len() != store.len() {
            return Err(Error::Mismatch("snapshot does not match model".into()));
        }
    }
    Ok(store)
}

/// Seeded sample of up to `size` test nodes, ascending.
pub fn probe_nodes(split: &NodeSplit, size: usize, seed: u64) -> Vec<usize> {
    let mut nodes = split.test.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    nodes.shuffle(&mut rng);
    nodes.truncate(size);
    nodes.sort_unstable();
    nodes
}

pub struct TrainOutcome {
    pub model: Model,
    /// Parameters restored to the best validation epoch.
    pub store: ParamStore,
    pub split: NodeSplit,
    pub reports: Vec<EpochReport>,
    pub best_epoch: usize,
    /// Similarity of the untrained model on the probe.
    pub initial_similarity: Option<Similarity>,
    pub threshold: f64,
    pub final_test: MetricReport,
}

/// Called after every epoch; returning an error aborts training.
pub type EpochHook<'a> = dyn FnMut(&EpochReport, &ParamStore) -> Result<()> + 'a;

pub fn train(graph: &MultiRelationGraph, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_hook(graph, config, &mut |_, _| Ok(()))
}

pub fn train_with_hook(graph: &MultiRelationGraph, config: &TrainConfig, hook: &mut EpochHook) -> Result<TrainOutcome> {
    config.validate()?;
    let split = stratified_split(graph.labels(), config.train_ratio, config.val_ratio, config.seed)?;
    let prep = Prepared::new(graph, split, config)?;
    train_prepared(&prep, config, hook)
}

pub fn train_prepared(prep: &Prepared, config: &TrainConfig, hook: &mut EpochHook) -> Result<TrainOutcome> {
    config.validate()?;
    let split = &prep.split;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_rng.set_stream(1);
    let (model, mut store) = Model::new(
        &config.model(),
        prep.graph.feature_dim(),
        prep.graph.num_relations(),
        &mut init_rng,
    )?;
    let mut adam = Adam::new(config.adam(), &store);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(2);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(3);

    let probe = probe_nodes(split, config.probe_size, config.seed);
    let initial_similarity = similarity(prep, &model, &store, &probe)?;

    let mut reports = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut order = split.train.clone();
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let seqs = match &prep.sequences {
                Some(c) => Some(c.batch(batch)?),
                None => None,
            };
            let inputs = BatchInputs {
                nodes: batch,
                sequences: seqs.as_ref(),
                topology: prep.topology.as_ref(),
            };
            let labels: Vec<f64> = batch.iter().map(|&i| prep.graph.labels()[i] as f64).collect();
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &store, &inputs, true, &mut dropout_rng)?;
            let loss = tape.bce_with_logits(out.logits, &labels)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss {value} at epoch {epoch}")));
            }
            loss_sum += value * batch.len() as f64;
            store.zero_grad();
            tape.backward(loss, &mut store)?;
            adam.step(&mut store)?;
        }
        let loss = loss_sum / order.len().max(1) as f64;
        let validation = evaluate(prep, &model, &store, &split.validation, config, DEFAULT_THRESHOLD)?;
        let test = if config.eval_test_each_epoch {
            Some(evaluate(prep, &model, &store, &split.test, config, DEFAULT_THRESHOLD)?)
        } else {
            None
        };
        let sim = similarity(prep, &model, &store, &probe)?;
        let report = EpochReport {
            epoch,
            loss,
            validation,
            test,
            similarity: sim,
            seconds: start.elapsed().as_secs_f64(),
        };
        hook(&report, &store)?;
        let improved = best.as_ref().is_none_or(|b| validation.auc > b.0);
        if improved {
            best = Some((validation.auc, epoch, store.snapshot()));
        }
        reports.push(report);
        let best_epoch = best.as_ref().map_or(0, |b| b.1);
        if config.patience > 0 && epoch - best_epoch >= config.patience {
            break;
        }
    }
    let best_epoch = match best {
        Some((_, e, snap)) => {
            store.restore(&snap)?;
            e
        }
        None => 0,
    };
    let threshold = match config.threshold {
        ThresholdMode::Fixed => DEFAULT_THRESHOLD,
        ThresholdMode::BestOnValidation => {
            let scores = prep.predict(&model, &store, &split.validation, config.eval_batch_size)?;
            best_threshold(&scores, &prep.labels_of(&split.validation))?
        }
    };
    let final_test = evaluate(prep, &model, &store, &split.test, config, threshold)?;
    Ok(TrainOutcome {
        model,
        store,
        split: split.clone(),
        reports,
        best_epoch,
        initial_similarity,
        threshold,
        final_test,
    })
}

pub const EPOCH_CSV_HEADER: &str = "epoch,loss,val_auc,val_ap,val_f1,test_auc,test_ap,test_f1,cos_sim,cka,seconds";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// One line per epoch. Empty cells mark values that were not computed.
/// `with_time = false` blanks the wall-clock column for byte-stable output.
pub fn epoch_csv(reports: &[EpochReport], with_time: bool) -> String {
    let mut out = String::from(EPOCH_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let t = r.test.as_ref();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.loss,
            r.validation.auc,
            r.validation.ap,
            r.validation.f1_macro,
            opt(t.map(|m| m.auc)),
            opt(t.map(|m| m.ap)),
            opt(t.map(|m| m.f1_macro)),
            opt(r.similarity.map(|s| s.cosine)),
            opt(r.similarity.and_then(|s| s.cka)),
            if with_time {
                r.seconds.to_string()
            } else {
                String::new()
            },
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    pub best_epoch: usize,
    pub test: MetricReport,
    pub validation_auc: f64,
}

pub const RESULT_CSV_HEADER: &str = "label,auc,ap,f1_macro,best_epoch,val_auc";

pub fn result_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULT_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.label, r.test.auc, r.test.ap, r.test.f1_macro, r.best_epoch, r.validation_auc
        );
    }
    out
}

fn row(label: String, outcome: &TrainOutcome) -> ResultRow {
    let validation_auc = outcome
        .reports
        .iter()
        .find(|r| r.epoch == outcome.best_epoch)
        .map_or(f64::NAN, |r| r.validation.auc);
    ResultRow {
        label,
        best_epoch: outcome.best_epoch,
        test: outcome.final_test,
        validation_auc,
    }
}

/// Trains each scheme on the same split and seed.
pub fn ablate(graph: &MultiRelationGraph, base: &TrainConfig, schemes: &[Scheme]) -> Result<Vec<ResultRow>> {
    let split = stratified_split(graph.labels(), base.train_ratio, base.val_ratio, base.seed)?;
    let mut rows = Vec::with_capacity(schemes.len());
    for &scheme in schemes {
        let config = TrainConfig { scheme, ..base.clone() };
        let prep = Prepared::new(graph, split.clone(), &config)?;
        let outcome = train_prepared(&prep, &config, &mut |_, _| Ok(()))?;
        rows.push(row(scheme.name().to_string(), &outcome));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TrainRatio,
    TransformerLayers,
    GcnLayers,
    D,
    MaxHop,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidArgument(format!("unknown sweep axis {s}")))
    }

    pub fn apply(self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let int = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::InvalidArgument(format!(
                    "{self:?} needs a positive integer, got {value}"
                )))
            }
        };
        let mut c = base.clone();
        match self {
            SweepAxis::TrainRatio => c.train_ratio = value,
            SweepAxis::TransformerLayers => c.transformer_layers = int()?,
            SweepAxis::GcnLayers => c.gcn_layers = int()?,
            SweepAxis::D => c.d = int()?,
            SweepAxis::MaxHop => c.max_hop = int()?,
        }
        c.validate()?;
        Ok(c)
    }
}

/// One full training per value, fixed seed.
pub fn sweep(
    graph: &MultiRelationGraph,
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<ResultRow>> {
    values
        .iter()
        .map(|&v| {
            let config = axis.apply(base, v)?;
            let outcome = train(graph, &config)?;
            Ok(row(v.to_string(), &outcome))
        })
        .collect()
}

/// Largest minus smallest test AUC across rows.
pub fn auc_spread(rows: &[ResultRow]) -> f64 {
    let aucs = rows.iter().map(|r| r.test.auc);
    let max = aucs.clone().fold(f64::NEG_INFINITY, f64::max);
    let min = aucs.fold(f64::INFINITY, f64::min);
    max - min
}

/// Everything needed to replay or audit a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: String,
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub dataset: Option<String>,
    pub dataset_checksums: BTreeMap<String, String>,
    pub notes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub results: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            status: "running".into(),
            command: command.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config,
            dataset: None,
            dataset_checksums: BTreeMap::new(),
            notes: BTreeMap::new(),
            outputs: Vec::new(),
            results: serde_json::Value::Null,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// Harness choices that the run manifest records alongside the config.
pub fn harness_notes(config: &TrainConfig) -> BTreeMap<String, String> {
    let mut notes = BTreeMap::new();
    notes.insert(
        "early_stopping".into(),
        format!("validation AUC, patience {}", config.patience),
    );
    notes.insert("weight_decay".into(), "L2 added to gradients".into());
    notes.insert(
        "init".into(),
        "weights uniform(+-1/sqrt(fan_in)), biases 0, embeddings normal(0, 0.02)".into(),
    );
    notes.insert(
        "propagation".into(),
        match config.propagation {
            PropagationMode::FullGraph => "full graph".into(),
            PropagationMode::InducedSubgraph => "induced subgraph around each batch".into(),
        },
    );
    notes.insert(
        "f1_threshold".into(),
        match config.threshold {
            ThresholdMode::Fixed => "fixed 0.5".into(),
            ThresholdMode::BestOnValidation => "best on validation".into(),
        },
    );
    notes
}
