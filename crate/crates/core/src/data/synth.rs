//! Seeded synthetic multi-relation fraud graphs with separately tunable
//! feature signal and per-relation homophily.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::MultiRelationGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationConfig {
    /// Expected number of candidate edges per node (before deduplication).
    pub mean_degree: f64,
    /// Probability that an edge stays within the source node's class; `None`
    /// picks partners uniformly at random.
    #[serde(default)]
    pub homophily: Option<f64>,
    /// Multiplies the number of edges drawn by fraud nodes that wire as fraud.
    #[serde(default = "one")]
    pub fraud_degree_factor: f64,
}

fn one() -> f64 {
    1.0
}

impl RelationConfig {
    pub fn new(mean_degree: f64, homophily: Option<f64>) -> Self {
        Self {
            mean_degree,
            homophily,
            fraud_degree_factor: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_nodes: usize,
    pub fraud_fraction: f64,
    pub feature_dim: usize,
    /// Distance between the class means on each informative dimension.
    pub feature_separation: f64,
    /// Share of feature dimensions that carry no label information.
    #[serde(default)]
    pub noise_fraction: f64,
    pub relations: Vec<RelationConfig>,
    #[serde(default)]
    pub seed: u64,
    /// Share of fraud nodes whose features follow the benign distribution.
    #[serde(default)]
    pub feature_camouflage: f64,
    /// Share of the remaining (feature-visible) fraud nodes that wire their
    /// edges as if they were benign.
    #[serde(default)]
    pub structure_camouflage: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_nodes: 2000,
            fraud_fraction: 0.1,
            feature_dim: 16,
            feature_separation: 1.0,
            noise_fraction: 0.5,
            relations: vec![RelationConfig::new(10.0, Some(0.9)), RelationConfig::new(10.0, None)],
            seed: 0,
            feature_camouflage: 0.0,
            structure_camouflage: 0.0,
        }
    }
}

fn unit(name: &str, v: f64, open: bool) -> Result<()> {
    let ok = if open {
        v > 0.0 && v < 1.0
    } else {
        (0.0..=1.0).contains(&v)
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} = {v} out of range")))
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_nodes < 2 {
            return Err(Error::InvalidArgument("num_nodes must be at least 2".into()));
        }
        unit("fraud_fraction", self.fraud_fraction, true)?;
        unit("noise_fraction", self.noise_fraction, false)?;
        unit("feature_camouflage", self.feature_camouflage, false)?;
        unit("structure_camouflage", self.structure_camouflage, false)?;
        if !(self.feature_separation >= 0.0 && self.feature_separation.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "feature_separation = {} must be finite and non-negative",
                self.feature_separation
            )));
        }
        if self.relations.is_empty() {
            return Err(Error::InvalidArgument("at least one relation".into()));
        }
        for (r, rel) in self.relations.iter().enumerate() {
            if !(rel.mean_degree >= 0.0 && rel.mean_degree < self.num_nodes as f64) {
                return Err(Error::InvalidArgument(format!(
                    "relation {r}: mean_degree {} must be in [0, num_nodes)",
                    rel.mean_degree
                )));
            }
            if !(rel.fraud_degree_factor >= 0.0 && rel.fraud_degree_factor * rel.mean_degree < self.num_nodes as f64) {
                return Err(Error::InvalidArgument(format!(
                    "relation {r}: fraud_degree_factor {} out of range",
                    rel.fraud_degree_factor
                )));
            }
            if let Some(h) = rel.homophily {
                unit(&format!("relation {r} homophily"), h, false)?;
            }
        }
        Ok(())
    }

    /// Two fraud populations that each encoder sees only one of. About a
    /// third of the fraud nodes look benign in their features but draw three
    /// times as many relation-0 edges, to random partners. The rest carry a
    /// feature shift and wire exactly like benign nodes. Neither population
    /// clusters, so neighbor labels say little about a node's own label.
    pub fn complementary(seed: u64) -> Self {
        Self {
            num_nodes: 4000,
            fraud_fraction: 0.1,
            feature_dim: 16,
            feature_separation: 1.4,
            noise_fraction: 0.5,
            relations: vec![
                RelationConfig {
                    fraud_degree_factor: 3.0,
                    ..RelationConfig::new(10.0, None)
                },
                RelationConfig::new(10.0, None),
            ],
            seed,
            feature_camouflage: 0.35,
            structure_camouflage: 1.0,
        }
    }

    pub fn noise_dims(&self) -> usize {
        (self.noise_fraction * self.feature_dim as f64).round() as usize
    }
}

const STREAM_LABELS: u64 = 0;
const STREAM_TYPES: u64 = 1;
const STREAM_FEATURES: u64 = 2;
const STREAM_RELATIONS: u64 = 16;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

/// Labels plus which fraud nodes look benign in features or in wiring.
struct Roles {
    labels: Vec<u8>,
    feature_visible: Vec<bool>,
    wiring_class: Vec<usize>,
}

fn draw_roles(c: &SyntheticConfig) -> Roles {
    let mut rng = stream(c.seed, STREAM_LABELS);
    let labels: Vec<u8> = (0..c.num_nodes)
        .map(|_| rng.random_bool(c.fraud_fraction) as u8)
        .collect();
    let mut rng = stream(c.seed, STREAM_TYPES);
    let mut feature_visible = vec![false; c.num_nodes];
    let mut wiring_class = vec![0usize; c.num_nodes];
    for i in 0..c.num_nodes {
        // draw both coins for every node so that the streams stay aligned
        let fc = rng.random_bool(c.feature_camouflage);
        let sc = rng.random_bool(c.structure_camouflage);
        if labels[i] == 1 {
            feature_visible[i] = !fc;
            wiring_class[i] = if !fc && sc { 0 } else { 1 };
        }
    }
    Roles {
        labels,
        feature_visible,
        wiring_class,
    }
}

fn draw_features(c: &SyntheticConfig, roles: &Roles) -> Vec<f64> {
    let mut rng = stream(c.seed, STREAM_FEATURES);
    let k = c.feature_dim;
    let informative = k - c.noise_dims();
    let half = c.feature_separation / 2.0;
    let mut out = Vec::with_capacity(c.num_nodes * k);
    for i in 0..c.num_nodes {
        let mean = if roles.feature_visible[i] { half } else { -half };
        for j in 0..k {
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = if j < informative { mean + z } else { z };
            // stored as f32 on disk; rounding here keeps save/load exact
            out.push(v as f32 as f64);
        }
    }
    out
}

fn draw_edges(c: &SyntheticConfig, r: usize, roles: &Roles) -> Vec<(usize, usize)> {
    let rel = &c.relations[r];
    let mut rng = stream(c.seed, STREAM_RELATIONS + r as u64);
    let n = c.num_nodes;
    let mut pools: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for i in 0..n {
        pools[roles.wiring_class[i]].push(i);
    }
    // each edge touches two nodes, so half the target degree is drawn per node
    let per_node = rel.mean_degree / 2.0;
    let mut edges = Vec::with_capacity(n * (per_node as usize + 1));
    for u in 0..n {
        let want = if roles.wiring_class[u] == 1 {
            per_node * rel.fraud_degree_factor
        } else {
            per_node
        };
        let count = want.floor() as usize + rng.random_bool(want.fract()) as usize;
        for _ in 0..count {
            let pool: &[usize] = match rel.homophily {
                None => &[],
                Some(h) => {
                    let own = roles.wiring_class[u];
                    if rng.random_bool(h) {
                        &pools[own]
                    } else {
                        &pools[1 - own]
                    }
                }
            };
            let v = if rel.homophily.is_none() {
                let v = rng.random_range(0..n - 1);
                if v >= u {
                    v + 1
                } else {
                    v
                }
            } else {
                if pool.is_empty() || (pool.len() == 1 && pool[0] == u) {
                    continue;
                }
                loop {
                    let v = pool[rng.random_range(0..pool.len())];
                    if v != u {
                        break v;
                    }
                }
            };
            edges.push((u, v));
        }
    }
    edges
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<MultiRelationGraph> {
    config.validate()?;
    let roles = draw_roles(config);
    let features = draw_features(config, &roles);
    let edges: Vec<Vec<(usize, usize)>> = (0..config.relations.len())
        .map(|r| draw_edges(config, r, &roles))
        .collect();
    MultiRelationGraph::build(&edges, features, config.feature_dim, roles.labels)
}

/// Share of undirected edges in relation `r` whose endpoints share a label.
pub fn within_class_fraction(graph: &MultiRelationGraph, r: usize) -> Result<f64> {
    let labels = graph.labels();
    let adj = graph.relation(r)?;
    let (mut same, mut total) = (0usize, 0usize);
    for (a, b) in adj.edges() {
        total += 1;
        same += (labels[a] == labels[b]) as usize;
    }
    Ok(if total == 0 { 0.0 } else { same as f64 / total as f64 })
}
