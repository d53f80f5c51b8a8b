//! Multi-relation graph storage, per-relation normalized adjacency and
//! k-hop neighborhoods.

use std::collections::BTreeSet;
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Sorted, deduplicated, symmetric neighbor lists for one relation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    indptr: Vec<usize>,
    indices: Vec<usize>,
}

impl Adjacency {
    fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n {
                return Err(Error::out_of_range("edge endpoint", a, n));
            }
            if b >= n {
                return Err(Error::out_of_range("edge endpoint", b, n));
            }
            if a == b {
                continue;
            }
            lists[a].push(b);
            lists[b].push(a);
        }
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            indices.extend_from_slice(&l);
            indptr.push(indices.len());
        }
        Ok(Self { indptr, indices })
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.indices[self.indptr[node]..self.indptr[node + 1]]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.indptr[node + 1] - self.indptr[node]
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.indices.len() / 2
    }

    /// Each undirected edge once, as `(low, high)`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.indptr.len() - 1)
            .flat_map(move |i| self.neighbors(i).iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` for one relation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub relation: usize,
    pub matrix: CsrMatrix,
}

/// Node features, binary labels and `R` undirected relations over the same node set.
#[derive(Debug)]
pub struct MultiRelationGraph {
    num_nodes: usize,
    feature_dim: usize,
    features: Vec<f64>,
    labels: Vec<u8>,
    relations: Vec<Adjacency>,
    normalized: Vec<OnceLock<Arc<NormalizedAdjacency>>>,
}

impl Clone for MultiRelationGraph {
    fn clone(&self) -> Self {
        Self {
            num_nodes: self.num_nodes,
            feature_dim: self.feature_dim,
            features: self.features.clone(),
            labels: self.labels.clone(),
            relations: self.relations.clone(),
            normalized: (0..self.relations.len()).map(|_| OnceLock::new()).collect(),
        }
    }
}

impl PartialEq for MultiRelationGraph {
    fn eq(&self, other: &Self) -> bool {
        self.num_nodes == other.num_nodes
            && self.feature_dim == other.feature_dim
            && self.features == other.features
            && self.labels == other.labels
            && self.relations == other.relations
    }
}

impl MultiRelationGraph {
    /// Builds a graph from per-relation edge lists. Edges are symmetrized and
    /// deduplicated; self-edges are dropped. `features` is row-major `n × k`
    /// with `n = labels.len()`.
    pub fn build(
        edges_per_relation: &[Vec<(usize, usize)>],
        features: Vec<f64>,
        feature_dim: usize,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if edges_per_relation.is_empty() {
            return Err(Error::InvalidArgument("empty relation list".into()));
        }
        let n = labels.len();
        if features.len() != n * feature_dim {
            return Err(Error::Mismatch(format!(
                "feature row count mismatch: {} values for {} nodes of dimension {}",
                features.len(),
                n,
                feature_dim
            )));
        }
        if let Some(i) = labels.iter().position(|&y| y > 1) {
            return Err(Error::InvalidArgument(format!(
                "label {} at node {} is not 0 or 1",
                labels[i], i
            )));
        }
        let relations = edges_per_relation
            .iter()
            .map(|e| Adjacency::from_edges(n, e))
            .collect::<Result<Vec<_>>>()?;
        let normalized = (0..relations.len()).map(|_| OnceLock::new()).collect();
        Ok(Self {
            num_nodes: n,
            feature_dim,
            features,
            labels,
            relations,
            normalized,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_row(&self, node: usize) -> &[f64] {
        &self.features[node * self.feature_dim..(node + 1) * self.feature_dim]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn relation(&self, r: usize) -> Result<&Adjacency> {
        self.relations
            .get(r)
            .ok_or_else(|| Error::out_of_range("relation", r, self.relations.len()))
    }

    pub fn check_node(&self, node: usize) -> Result<()> {
        if node >= self.num_nodes {
            return Err(Error::out_of_range("node", node, self.num_nodes));
        }
        Ok(())
    }

    /// Self-loop augmented symmetric normalization of relation `r`, computed once
    /// and shared afterwards.
    pub fn normalized_adjacency(&self, r: usize) -> Result<Arc<NormalizedAdjacency>> {
        let adj = self.relation(r)?;
        Ok(self.normalized[r]
            .get_or_init(|| Arc::new(normalize(r, adj, self.num_nodes)))
            .clone())
    }

    /// Nodes at exact shortest-path distance `1..=max_hop` from `node` under
    /// relation `r`, one sorted list per hop. The target itself is never listed.
    pub fn khop_neighbors(&self, node: usize, r: usize, max_hop: usize) -> Result<Vec<Vec<usize>>> {
        if max_hop == 0 {
            return Err(Error::InvalidArgument("max_hop must be at least 1".into()));
        }
        self.check_node(node)?;
        let adj = self.relation(r)?;
        let mut bfs = HopScratch::new(self.num_nodes);
        let mut out = bfs.run(adj, node, max_hop).to_vec();
        for hop in &mut out {
            hop.sort_unstable();
        }
        Ok(out)
    }
}

fn normalize(relation: usize, adj: &Adjacency, n: usize) -> NormalizedAdjacency {
    let deg: Vec<f64> = (0..n).map(|i| (adj.degree(i) + 1) as f64).collect();
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(adj.indices.len() + n);
    let mut values = Vec::with_capacity(adj.indices.len() + n);
    indptr.push(0);
    for i in 0..n {
        let neigh = adj.neighbors(i);
        let split = neigh.partition_point(|&j| j < i);
        let mut push = |j: usize| {
            indices.push(j);
            values.push(1.0 / (deg[i] * deg[j]).sqrt());
        };
        neigh[..split].iter().for_each(|&j| push(j));
        push(i);
        neigh[split..].iter().for_each(|&j| push(j));
        indptr.push(indices.len());
    }
    let matrix = CsrMatrix::from_raw(n, n, indptr, indices, values)
        .expect("normalized adjacency is well formed by construction");
    NormalizedAdjacency { relation, matrix }
}

/// Reusable BFS buffers for repeated bounded-depth searches.
pub(crate) struct HopScratch {
    stamp: Vec<u32>,
    epoch: u32,
    hops: Vec<Vec<usize>>,
}

impl HopScratch {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            stamp: vec![0; n],
            epoch: 0,
            hops: Vec::new(),
        }
    }

    /// Per-hop frontiers (unsorted). Valid until the next call.
    pub(crate) fn run(&mut self, adj: &Adjacency, node: usize, max_hop: usize) -> &[Vec<usize>] {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.epoch = 1;
        }
        let epoch = self.epoch;
        self.hops.resize_with(max_hop, Vec::new);
        self.hops.truncate(max_hop);
        self.hops.iter_mut().for_each(Vec::clear);
        self.stamp[node] = epoch;
        for h in 0..max_hop {
            let (prev, rest) = self.hops.split_at_mut(h);
            let frontier: &[usize] = if h == 0 {
                std::slice::from_ref(&node)
            } else {
                &prev[h - 1]
            };
            let next = &mut rest[0];
            for &u in frontier {
                for &v in adj.neighbors(u) {
                    if self.stamp[v] != epoch {
                        self.stamp[v] = epoch;
                        next.push(v);
                    }
                }
            }
        }
        &self.hops
    }
}

/// Disjoint train / validation / test node sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl NodeSplit {
    pub fn train_set(&self) -> BTreeSet<usize> {
        self.train.iter().copied().collect()
    }
}

/// Per-class proportional split with a seeded shuffle; whatever is not drawn
/// for train or validation is test. Within each set node ids are ascending.
pub fn stratified_split(labels: &[u8], train_ratio: f64, val_ratio: f64, seed: u64) -> Result<NodeSplit> {
    for (name, r) in [("train_ratio", train_ratio), ("val_ratio", val_ratio)] {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::InvalidArgument(format!("{name} {r} outside (0,1)")));
        }
    }
    if train_ratio + val_ratio >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "train_ratio + val_ratio = {} leaves no test nodes",
            train_ratio + val_ratio
        )));
    }
    let mut classes: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        match y {
            0 | 1 => classes[y as usize].push(i),
            _ => return Err(Error::InvalidArgument(format!("label {y} at node {i}"))),
        }
    }
    if let Some(c) = classes.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("class {c} has zero members")));
    }
    let sizes = [classes[0].len(), classes[1].len()];
    let n_train = largest_remainder(&sizes, train_ratio);
    let remaining = [sizes[0] - n_train[0], sizes[1] - n_train[1]];
    let mut n_val = largest_remainder(&sizes, val_ratio);
    for c in 0..2 {
        n_val[c] = n_val[c].min(remaining[c]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = NodeSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for c in 0..2 {
        let mut members = classes[c].clone();
        members.shuffle(&mut rng);
        split.train.extend_from_slice(&members[..n_train[c]]);
        split
            .validation
            .extend_from_slice(&members[n_train[c]..n_train[c] + n_val[c]]);
        split.test.extend_from_slice(&members[n_train[c] + n_val[c]..]);
    }
    split.train.sort_unstable();
    split.validation.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Floors each class share, then hands the rounding leftover to the classes
/// with the largest fractional parts (ties to the larger class index).
fn largest_remainder(sizes: &[usize; 2], ratio: f64) -> [usize; 2] {
    let total: usize = sizes.iter().sum();
    let target = (ratio * total as f64).round() as usize;
    let exact = [ratio * sizes[0] as f64, ratio * sizes[1] as f64];
    let mut alloc = [exact[0].floor() as usize, exact[1].floor() as usize];
    let mut order = [0usize, 1];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(b.cmp(&a))
    });
    let mut leftover = target.saturating_sub(alloc[0] + alloc[1]);
    for &c in order.iter().cycle().take(4) {
        if leftover == 0 {
            break;
        }
        if alloc[c] < sizes[c] {
            alloc[c] += 1;
            leftover -= 1;
        }
    }
    alloc
}
