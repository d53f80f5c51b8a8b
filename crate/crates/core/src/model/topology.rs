//! Per-relation GCN stacks whose outputs stay separate until fusion.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{init_uniform, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{HopScratch, MultiRelationGraph};
use crate::sparse::CsrMatrix;

/// How much of the graph each forward pass propagates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMode {
    /// Every node, every step.
    #[default]
    FullGraph,
    /// Only the nodes within `gcn_layers` hops of the batch. Uses the
    /// full-graph normalization, so batch outputs match `FullGraph`.
    InducedSubgraph,
}

/// `σ(Â · H · W)`, with σ = ReLU when `relu` is set.
pub fn gcn_layer(tape: &mut Tape, a_hat: Arc<CsrMatrix>, h: Var, w: Var, relu: bool) -> Result<Var> {
    let ah = tape.spmm(a_hat, h)?;
    let out = tape.matmul(ah, w)?;
    Ok(if relu { tape.relu(out) } else { out })
}

/// Graph-side constants reused across batches: normalized adjacencies and
/// their product with the raw features.
#[derive(Debug, Clone)]
pub struct TopologyInputs {
    num_nodes: usize,
    feature_dim: usize,
    features: Arc<Tensor>,
    a_hat: Vec<Arc<CsrMatrix>>,
    /// `Â_r · X` per relation.
    propagated: Vec<Arc<Tensor>>,
    relations: Vec<crate::graph::Adjacency>,
}

impl TopologyInputs {
    pub fn new(graph: &MultiRelationGraph) -> Result<Self> {
        let (n, k) = (graph.num_nodes(), graph.feature_dim());
        let features = Arc::new(Tensor::new(vec![n, k], graph.features().to_vec())?);
        let mut a_hat = Vec::new();
        let mut propagated = Vec::new();
        let mut relations = Vec::new();
        for r in 0..graph.num_relations() {
            let a = Arc::new(graph.normalized_adjacency(r)?.matrix.clone());
            let ax = a.mul_dense(graph.features(), k)?;
            propagated.push(Arc::new(Tensor::new(vec![n, k], ax)?));
            a_hat.push(a);
            relations.push(graph.relation(r)?.clone());
        }
        Ok(Self {
            num_nodes: n,
            feature_dim: k,
            features,
            a_hat,
            propagated,
            relations,
        })
    }

    pub fn num_relations(&self) -> usize {
        self.a_hat.len()
    }

    pub fn a_hat(&self, r: usize) -> &Arc<CsrMatrix> {
        &self.a_hat[r]
    }
}

#[derive(Debug, Clone)]
pub struct TopologyEncoder {
    /// `weights[r][l]`: `k × d` for `l = 0`, `d × d` after.
    pub weights: Vec<Vec<ParamId>>,
    pub d: usize,
    pub mode: PropagationMode,
}

impl TopologyEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        feature_dim: usize,
        num_relations: usize,
        d: usize,
        num_layers: usize,
        mode: PropagationMode,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::InvalidArgument("at least one GCN layer".into()));
        }
        let weights = (0..num_relations)
            .map(|r| {
                (0..num_layers)
                    .map(|l| {
                        let din = if l == 0 { feature_dim } else { d };
                        store.add(
                            format!("topology.r{r}.w{}", l + 1),
                            init_uniform(rng, vec![din, d], din),
                        )
                    })
                    .collect()
            })
            .collect();
        Ok(Self { weights, d, mode })
    }

    pub fn num_layers(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    fn check(&self, inputs: &TopologyInputs, store: &ParamStore, batch: &[usize]) -> Result<()> {
        if inputs.num_relations() != self.weights.len() {
            return Err(Error::Mismatch(format!(
                "graph has {} relations, encoder {}",
                inputs.num_relations(),
                self.weights.len()
            )));
        }
        let din = store.value(self.weights[0][0]).shape()[0];
        if din != inputs.feature_dim {
            return Err(Error::Mismatch(format!(
                "width mismatch: graph has {} features, encoder expects {din}",
                inputs.feature_dim
            )));
        }
        if let Some(&b) = batch.iter().find(|&&b| b >= inputs.num_nodes) {
            return Err(Error::out_of_range("node", b, inputs.num_nodes));
        }
        Ok(())
    }

    /// Final-layer outputs for `batch`, `[B, R, d]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &TopologyInputs,
        batch: &[usize],
    ) -> Result<Var> {
        self.check(inputs, store, batch)?;
        let per_relation = (0..self.weights.len())
            .map(|r| match self.mode {
                PropagationMode::FullGraph => self.relation_full(tape, store, inputs, r, batch),
                PropagationMode::InducedSubgraph => self.relation_induced(tape, store, inputs, r, batch),
            })
            .collect::<Result<Vec<_>>>()?;
        let cat = tape.concat(&per_relation)?;
        tape.reshape(cat, vec![batch.len(), self.weights.len(), self.d])
    }

    /// Every layer but the last runs over the whole graph; the last one only
    /// needs the batch rows of `Â`.
    fn relation_full(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &TopologyInputs,
        r: usize,
        batch: &[usize],
    ) -> Result<Var> {
        let ws = &self.weights[r];
        let last = ws.len() - 1;
        let a = &inputs.a_hat[r];
        let rows = Arc::new(a.select_rows(batch)?);
        if last == 0 {
            let x = tape.constant((*inputs.features).clone());
            let w = tape.param(store, ws[0]);
            return gcn_layer(tape, rows, x, w, false);
        }
        let ax = tape.constant((*inputs.propagated[r]).clone());
        let w0 = tape.param(store, ws[0]);
        let h = tape.matmul(ax, w0)?;
        let mut h = tape.relu(h);
        for &wid in &ws[1..last] {
            let w = tape.param(store, wid);
            h = gcn_layer(tape, a.clone(), h, w, true)?;
        }
        let w = tape.param(store, ws[last]);
        gcn_layer(tape, rows, h, w, false)
    }

    fn relation_induced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &TopologyInputs,
        r: usize,
        batch: &[usize],
    ) -> Result<Var> {
        let ws = &self.weights[r];
        let nodes = closure(&inputs.relations[r], inputs.num_nodes, batch, ws.len());
        let local: HashMap<usize, usize> = nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let sub = Arc::new(induced(&inputs.a_hat[r], &nodes, &local)?);
        let k = inputs.feature_dim;
        let mut x = Vec::with_capacity(nodes.len() * k);
        for &v in &nodes {
            x.extend_from_slice(inputs.features.row(v));
        }
        let mut h = tape.constant(Tensor::new(vec![nodes.len(), k], x)?);
        for (l, &wid) in ws.iter().enumerate() {
            let w = tape.param(store, wid);
            h = gcn_layer(tape, sub.clone(), h, w, l + 1 < ws.len())?;
        }
        let index: Vec<usize> = batch.iter().map(|b| local[b]).collect();
        tape.gather_rows(h, &index)
    }
}

/// Nodes within `hops` of any batch node, ascending.
fn closure(adj: &crate::graph::Adjacency, n: usize, batch: &[usize], hops: usize) -> Vec<usize> {
    let mut keep = vec![false; n];
    let mut scratch = HopScratch::new(n);
    for &b in batch {
        keep[b] = true;
        for level in scratch.run(adj, b, hops) {
            for &v in level {
                keep[v] = true;
            }
        }
    }
    (0..n).filter(|&v| keep[v]).collect()
}

/// Rows and columns of `a` restricted to `nodes`, renumbered by `local`.
fn induced(a: &CsrMatrix, nodes: &[usize], local: &HashMap<usize, usize>) -> Result<CsrMatrix> {
    let mut indptr = vec![0];
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for &v in nodes {
        let (cols, vals) = a.row(v);
        let mut row: Vec<(usize, f64)> = cols
            .iter()
            .zip(vals)
            .filter_map(|(c, &x)| local.get(c).map(|&lc| (lc, x)))
            .collect();
        row.sort_unstable_by_key(|e| e.0);
        for (c, x) in row {
            indices.push(c);
            values.push(x);
        }
        indptr.push(indices.len());
    }
    CsrMatrix::from_raw(nodes.len(), nodes.len(), indptr, indices, values)
}
