//! The full detector: semantic encoder, topology encoder, fusion and classifier.

pub mod fusion;
pub mod nn;
pub mod semantic;
pub mod topology;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use fusion::{Classifier, Fusion};
use semantic::{SemanticEncoder, SequenceBatch};
use topology::{PropagationMode, TopologyEncoder, TopologyInputs};

/// Fusion variant, or one encoder feeding the classifier alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[serde(alias = "full")]
    AttentionRes,
    AttentionNoRes,
    Concat,
    Add,
    Gated,
    SemanticOnly,
    TopologyOnly,
}

impl Scheme {
    pub const ALL: [Scheme; 7] = [
        Scheme::AttentionRes,
        Scheme::AttentionNoRes,
        Scheme::Concat,
        Scheme::Add,
        Scheme::Gated,
        Scheme::SemanticOnly,
        Scheme::TopologyOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::AttentionRes => "attention_res",
            Scheme::AttentionNoRes => "attention_no_res",
            Scheme::Concat => "concat",
            Scheme::Add => "add",
            Scheme::Gated => "gated",
            Scheme::SemanticOnly => "semantic_only",
            Scheme::TopologyOnly => "topology_only",
        }
    }

    pub fn uses_semantic(self) -> bool {
        self != Scheme::TopologyOnly
    }

    pub fn uses_topology(self) -> bool {
        self != Scheme::SemanticOnly
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Scheme::AttentionRes);
        }
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scheme {s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub scheme: Scheme,
    pub d: usize,
    pub heads: usize,
    pub transformer_layers: usize,
    pub gcn_layers: usize,
    pub max_hop: usize,
    pub dropout: f64,
    pub propagation: PropagationMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::AttentionRes,
            d: 64,
            heads: 4,
            transformer_layers: 2,
            gcn_layers: 2,
            max_hop: 2,
            dropout: 0.1,
            propagation: PropagationMode::FullGraph,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!(
                "d = {} must be a positive multiple of heads = {}",
                self.d, self.heads
            ));
        }
        if self.transformer_layers == 0 || self.gcn_layers == 0 || self.max_hop == 0 {
            return bad("transformer_layers, gcn_layers and max_hop must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        Ok(())
    }
}

/// Everything a forward pass needs besides parameters.
pub struct BatchInputs<'a> {
    pub nodes: &'a [usize],
    /// Required unless the scheme is topology-only.
    pub sequences: Option<&'a SequenceBatch>,
    /// Required unless the scheme is semantic-only.
    pub topology: Option<&'a TopologyInputs>,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// `[B, R, d]` encoder outputs, present when the encoder is in use.
    pub x_sem: Option<Var>,
    pub x_gcn: Option<Var>,
    pub fused: Var,
}

/// Architecture plus parameter handles; the values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub feature_dim: usize,
    pub num_relations: usize,
    pub semantic: Option<SemanticEncoder>,
    pub topology: Option<TopologyEncoder>,
    pub fusion: Option<Fusion>,
    pub classifier: Classifier,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(
        config: &ModelConfig,
        feature_dim: usize,
        num_relations: usize,
        rng: &mut R,
    ) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c = config;
        let semantic = if c.scheme.uses_semantic() {
            Some(SemanticEncoder::new(
                &mut store,
                rng,
                feature_dim,
                num_relations,
                c.max_hop,
                c.d,
                c.heads,
                c.transformer_layers,
                c.dropout,
            )?)
        } else {
            None
        };
        let topology = if c.scheme.uses_topology() {
            Some(TopologyEncoder::new(
                &mut store,
                rng,
                feature_dim,
                num_relations,
                c.d,
                c.gcn_layers,
                c.propagation,
            )?)
        } else {
            None
        };
        let fusion = if semantic.is_some() && topology.is_some() {
            Some(Fusion::new(&mut store, rng, c.scheme, num_relations, c.d, c.heads)?)
        } else {
            None
        };
        let width = fusion
            .as_ref()
            .map_or(num_relations * c.d, |f| f.output_width(num_relations, c.d));
        let classifier = Classifier::new(&mut store, rng, width, c.d);
        Ok((
            Self {
                config: config.clone(),
                feature_dim,
                num_relations,
                semantic,
                topology,
                fusion,
                classifier,
            },
            store,
        ))
    }

    /// Encoder outputs only, without fusion or classification.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &BatchInputs,
        train: bool,
        rng: &mut R,
    ) -> Result<(Option<Var>, Option<Var>)> {
        let x_sem = match &self.semantic {
            Some(enc) => {
                let seqs = inputs
                    .sequences
                    .ok_or_else(|| Error::InvalidArgument("semantic encoder needs sequences".into()))?;
                if seqs.batch_size != inputs.nodes.len() {
                    return Err(Error::Shape(format!(
                        "{} sequences for {} nodes",
                        seqs.batch_size,
                        inputs.nodes.len()
                    )));
                }
                Some(enc.forward(tape, store, seqs, train, rng)?)
            }
            None => None,
        };
        let x_gcn = match &self.topology {
            Some(enc) => {
                let topo = inputs
                    .topology
                    .ok_or_else(|| Error::InvalidArgument("topology encoder needs graph inputs".into()))?;
                Some(enc.forward(tape, store, topo, inputs.nodes)?)
            }
            None => None,
        };
        Ok((x_sem, x_gcn))
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &BatchInputs,
        train: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let (x_sem, x_gcn) = self.encode(tape, store, inputs, train, rng)?;
        let b = inputs.nodes.len();
        let width = self.num_relations * self.config.d;
        let fused = match (&self.fusion, x_sem, x_gcn) {
            (Some(f), Some(s), Some(g)) => f.forward(tape, store, s, g)?.fused,
            (None, Some(x), None) | (None, None, Some(x)) => tape.reshape(x, vec![b, width])?,
            _ => unreachable!("encoder presence follows the scheme"),
        };
        let logits = self.classifier.forward(tape, store, fused)?;
        Ok(ForwardOutput {
            logits,
            x_sem,
            x_gcn,
            fused,
        })
    }

    /// Scalar parameter counts by component, keyed `semantic`, `topology`,
    /// `fusion`, `classifier`, `total`.
    pub fn parameter_counts(store: &ParamStore) -> Vec<(&'static str, usize)> {
        let mut out: Vec<(&'static str, usize)> = ["semantic", "topology", "fusion", "classifier"]
            .into_iter()
            .map(|c| (c, store.num_elements_with_prefix(&format!("{c}."))))
            .collect();
        out.push(("total", store.num_elements()));
        out
    }
}
