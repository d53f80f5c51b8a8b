//! Hop/group/relation token sequences and the Transformer encoder over them.
//!
//! Each node gets one sequence of fixed length `R·(1 + 3·max_hop)`. Per
//! relation there is a target token (the node's own features) followed by one
//! token per (hop, group) bucket holding the mean features of that bucket's
//! neighbors. Groups are benign-train, fraud-train, and unknown.

use rand::Rng;
use rayon::prelude::*;

use super::nn::{Linear, TransformerLayer};
use crate::autodiff::{init_normal, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{HopScratch, MultiRelationGraph};

pub const GROUP_BENIGN: usize = 0;
pub const GROUP_FRAUD: usize = 1;
pub const GROUP_UNKNOWN: usize = 2;
pub const NUM_GROUPS: usize = 3;

/// Token positions and their hop/group/relation ids. The layout depends only on
/// `(R, max_hop)`, so it is shared by every row of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLayout {
    pub num_relations: usize,
    pub max_hop: usize,
    pub hop_ids: Vec<usize>,
    pub group_ids: Vec<usize>,
    pub relation_ids: Vec<usize>,
}

impl SequenceLayout {
    pub fn new(num_relations: usize, max_hop: usize) -> Result<Self> {
        if max_hop == 0 || num_relations == 0 {
            return Err(Error::InvalidArgument(format!(
                "sequence layout needs max_hop >= 1 and R >= 1, got {max_hop} and {num_relations}"
            )));
        }
        let mut layout = Self {
            num_relations,
            max_hop,
            hop_ids: Vec::new(),
            group_ids: Vec::new(),
            relation_ids: Vec::new(),
        };
        for r in 0..num_relations {
            layout.hop_ids.push(0);
            layout.group_ids.push(GROUP_UNKNOWN);
            layout.relation_ids.push(r);
            for h in 1..=max_hop {
                for g in 0..NUM_GROUPS {
                    layout.hop_ids.push(h);
                    layout.group_ids.push(g);
                    layout.relation_ids.push(r);
                }
            }
        }
        Ok(layout)
    }

    pub fn per_relation(&self) -> usize {
        1 + NUM_GROUPS * self.max_hop
    }

    pub fn len(&self) -> usize {
        self.num_relations * self.per_relation()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn target_position(&self, r: usize) -> usize {
        r * self.per_relation()
    }

    pub fn bucket_position(&self, r: usize, hop: usize, group: usize) -> usize {
        self.target_position(r) + 1 + (hop - 1) * NUM_GROUPS + group
    }

    pub fn target_positions(&self) -> Vec<usize> {
        (0..self.num_relations).map(|r| self.target_position(r)).collect()
    }
}

/// Raw-feature tokens for a batch of target nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub layout: SequenceLayout,
    pub batch_size: usize,
    pub feature_dim: usize,
    /// `B × L × k`, row-major.
    pub tokens: Vec<f64>,
    /// `B × L`; false where the bucket had no neighbors.
    pub presence: Vec<bool>,
}

impl SequenceBatch {
    pub fn token(&self, b: usize, pos: usize) -> &[f64] {
        let l = self.layout.len();
        let k = self.feature_dim;
        let start = (b * l + pos) * k;
        &self.tokens[start..start + k]
    }

    pub fn present(&self, b: usize, pos: usize) -> bool {
        self.presence[b * self.layout.len() + pos]
    }
}

/// Which nodes count as labeled when assigning neighbor groups.
#[derive(Debug, Clone)]
pub struct TrainMask(Vec<bool>);

impl TrainMask {
    pub fn new(num_nodes: usize, train: &[usize]) -> Result<Self> {
        let mut mask = vec![false; num_nodes];
        for &i in train {
            if i >= num_nodes {
                return Err(Error::out_of_range("train node", i, num_nodes));
            }
            mask[i] = true;
        }
        Ok(Self(mask))
    }

    pub fn contains(&self, node: usize) -> bool {
        self.0[node]
    }
}

fn group_of(graph: &MultiRelationGraph, train: &TrainMask, node: usize) -> usize {
    if train.contains(node) {
        graph.labels()[node] as usize
    } else {
        GROUP_UNKNOWN
    }
}

/// Fills one node's `L × k` tokens and `L` presence flags.
fn fill_sequence(
    graph: &MultiRelationGraph,
    train: &TrainMask,
    layout: &SequenceLayout,
    scratch: &mut HopScratch,
    node: usize,
    tokens: &mut [f64],
    presence: &mut [bool],
) -> Result<()> {
    let k = graph.feature_dim();
    let own = graph.feature_row(node);
    let mut counts = vec![0usize; layout.len()];
    for r in 0..layout.num_relations {
        let t = layout.target_position(r);
        tokens[t * k..(t + 1) * k].copy_from_slice(own);
        presence[t] = true;
        let hops = scratch.run(graph.relation(r)?, node, layout.max_hop);
        for (h, members) in hops.iter().enumerate() {
            for &m in members {
                // BFS never reports the start node, so the target stays out of its buckets
                let pos = layout.bucket_position(r, h + 1, group_of(graph, train, m));
                counts[pos] += 1;
                for (dst, src) in tokens[pos * k..(pos + 1) * k].iter_mut().zip(graph.feature_row(m)) {
                    *dst += src;
                }
            }
        }
    }
    for (pos, &c) in counts.iter().enumerate() {
        if c > 0 {
            presence[pos] = true;
            let inv = 1.0 / c as f64;
            tokens[pos * k..(pos + 1) * k].iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(())
}

/// Builds token sequences for `targets`. A neighbor's group is its label when
/// it is in `train`, otherwise unknown; the target's own label is never read.
pub fn build_sequences(
    graph: &MultiRelationGraph,
    targets: &[usize],
    train: &TrainMask,
    max_hop: usize,
) -> Result<SequenceBatch> {
    let layout = SequenceLayout::new(graph.num_relations(), max_hop)?;
    for &t in targets {
        graph.check_node(t)?;
    }
    let (l, k) = (layout.len(), graph.feature_dim());
    let mut tokens = vec![0.0; targets.len() * l * k];
    let mut presence = vec![false; targets.len() * l];
    tokens
        .par_chunks_mut((l * k).max(1))
        .zip(presence.par_chunks_mut(l))
        .zip(targets.par_iter())
        .try_for_each_init(
            || HopScratch::new(graph.num_nodes()),
            |scratch, ((tok, pres), &node)| fill_sequence(graph, train, &layout, scratch, node, tok, pres),
        )?;
    Ok(SequenceBatch {
        layout,
        batch_size: targets.len(),
        feature_dim: k,
        tokens,
        presence,
    })
}

/// Sequences for every node under one train set, sliced into batches on demand.
#[derive(Debug, Clone)]
pub struct SequenceCache {
    all: SequenceBatch,
}

impl SequenceCache {
    pub fn new(graph: &MultiRelationGraph, train: &TrainMask, max_hop: usize) -> Result<Self> {
        let nodes: Vec<usize> = (0..graph.num_nodes()).collect();
        Ok(Self {
            all: build_sequences(graph, &nodes, train, max_hop)?,
        })
    }

    pub fn layout(&self) -> &SequenceLayout {
        &self.all.layout
    }

    pub fn batch(&self, nodes: &[usize]) -> Result<SequenceBatch> {
        let (l, k) = (self.all.layout.len(), self.all.feature_dim);
        let n = self.all.batch_size;
        let mut tokens = Vec::with_capacity(nodes.len() * l * k);
        let mut presence = Vec::with_capacity(nodes.len() * l);
        for &i in nodes {
            if i >= n {
                return Err(Error::out_of_range("node", i, n));
            }
            tokens.extend_from_slice(&self.all.tokens[i * l * k..(i + 1) * l * k]);
            presence.extend_from_slice(&self.all.presence[i * l..(i + 1) * l]);
        }
        Ok(SequenceBatch {
            layout: self.all.layout.clone(),
            batch_size: nodes.len(),
            feature_dim: k,
            tokens,
            presence,
        })
    }
}

/// Transformer stack over token sequences, with a cross-relation aggregator
/// between consecutive layers.
#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    pub layout: SequenceLayout,
    pub d: usize,
    pub projection: Linear,
    pub hop_embedding: ParamId,
    pub group_embedding: ParamId,
    pub relation_embedding: ParamId,
    pub layers: Vec<TransformerLayer>,
    /// `(R·d) × d` maps, one per layer boundary.
    pub aggregators: Vec<ParamId>,
}

pub const EMBEDDING_STD: f64 = 0.02;

impl SemanticEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        feature_dim: usize,
        num_relations: usize,
        max_hop: usize,
        d: usize,
        heads: usize,
        num_layers: usize,
        dropout: f64,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::InvalidArgument("at least one transformer layer".into()));
        }
        let layout = SequenceLayout::new(num_relations, max_hop)?;
        let projection = Linear::new(store, rng, "semantic.proj", feature_dim, d, true);
        let hop_embedding = store.add(
            "semantic.hop_emb",
            init_normal(rng, vec![max_hop + 1, d], EMBEDDING_STD),
        );
        let group_embedding = store.add(
            "semantic.group_emb",
            init_normal(rng, vec![NUM_GROUPS, d], EMBEDDING_STD),
        );
        let relation_embedding = store.add(
            "semantic.relation_emb",
            init_normal(rng, vec![num_relations, d], EMBEDDING_STD),
        );
        let mut layers = Vec::with_capacity(num_layers);
        let mut aggregators = Vec::with_capacity(num_layers - 1);
        for i in 0..num_layers {
            layers.push(TransformerLayer::new(
                store,
                rng,
                &format!("semantic.layer{i}"),
                d,
                heads,
                dropout,
            )?);
            if i + 1 < num_layers {
                let fan_in = num_relations * d;
                aggregators.push(store.add(
                    format!("semantic.agg{i}.w"),
                    crate::autodiff::init_uniform(rng, vec![fan_in, d], fan_in),
                ));
            }
        }
        Ok(Self {
            layout,
            d,
            projection,
            hop_embedding,
            group_embedding,
            relation_embedding,
            layers,
            aggregators,
        })
    }

    fn check_batch(&self, batch: &SequenceBatch) -> Result<()> {
        if batch.layout != self.layout {
            return Err(Error::Mismatch(format!(
                "sequence layout (R={}, max_hop={}) does not match encoder (R={}, max_hop={})",
                batch.layout.num_relations, batch.layout.max_hop, self.layout.num_relations, self.layout.max_hop
            )));
        }
        if batch.feature_dim != self.projection.din {
            return Err(Error::Mismatch(format!(
                "width mismatch: tokens have {} features, projection expects {}",
                batch.feature_dim, self.projection.din
            )));
        }
        Ok(())
    }

    /// `proj(X_n) + E_g + E_h + E_r`, shape `[B, L, d]`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, batch: &SequenceBatch) -> Result<Var> {
        self.check_batch(batch)?;
        let (b, l, d) = (batch.batch_size, self.layout.len(), self.d);
        let raw = tape.constant(Tensor::new(vec![b, l, batch.feature_dim], batch.tokens.clone())?);
        let x = self.projection.forward(tape, store, raw)?;
        let eh = tape.param(store, self.hop_embedding);
        let eg = tape.param(store, self.group_embedding);
        let er = tape.param(store, self.relation_embedding);
        let eh = tape.embedding(eh, &self.layout.hop_ids)?;
        let eg = tape.embedding(eg, &self.layout.group_ids)?;
        let er = tape.embedding(er, &self.layout.relation_ids)?;
        let ids = tape.add(eg, eh)?;
        let ids = tape.add(ids, er)?;
        let flat = tape.reshape(x, vec![b, l * d])?;
        let flat = tape.add_row(flat, ids)?;
        tape.reshape(flat, vec![b, l, d])
    }

    /// Replaces every relation's target token with `concat(targets) · W`.
    pub fn aggregate(&self, tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let r = self.layout.num_relations;
        let targets = self.layout.target_positions();
        let rows = tape.reshape(x, vec![b * l, d])?;
        let index: Vec<usize> = (0..b).flat_map(|i| targets.iter().map(move |&p| i * l + p)).collect();
        let gathered = tape.gather_rows(rows, &index)?;
        let stacked = tape.reshape(gathered, vec![b, r * d])?;
        let fused = tape.matmul(stacked, w)?;
        let src: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, r)).collect();
        let out = tape.scatter_rows(rows, fused, &index, &src)?;
        tape.reshape(out, vec![b, l, d])
    }

    /// Target-position outputs of the final layer, `[B, R, d]`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &SequenceBatch,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let mut x = self.embed(tape, store, batch)?;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, store, x, train, rng)?;
            if let Some(&w) = self.aggregators.get(i) {
                let w = tape.param(store, w);
                x = self.aggregate(tape, x, w)?;
            }
        }
        self.read_targets(tape, x)
    }

    fn read_targets(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let r = self.layout.num_relations;
        let targets = self.layout.target_positions();
        let rows = tape.reshape(x, vec![b * l, d])?;
        let index: Vec<usize> = (0..b).flat_map(|i| targets.iter().map(move |&p| i * l + p)).collect();
        let out = tape.gather_rows(rows, &index)?;
        tape.reshape(out, vec![b, r, d])
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check_params;

    fn path_graph() -> MultiRelationGraph {
        // relation 0: 0-1-2-3 plus 0-2 ; relation 1: 1-3
        let features: Vec<f64> = (0..4 * 3).map(|i| i as f64 * 0.5 - 1.0).collect();
        MultiRelationGraph::build(
            &[vec![(0, 1), (1, 2), (2, 3), (0, 2)], vec![(1, 3)]],
            features,
            3,
            vec![0, 1, 0, 1],
        )
        .unwrap()
    }

    #[test]
    fn layout_length_formula() {
        for r in 1..4 {
            for h in 1..5 {
                assert_eq!(SequenceLayout::new(r, h).unwrap().len(), r * (1 + 3 * h));
            }
        }
    }

    #[test]
    fn isolated_target_has_only_its_own_token() {
        let g = MultiRelationGraph::build(&[vec![], vec![]], vec![1.0, 2.0], 1, vec![0, 1]).unwrap();
        let train = TrainMask::new(2, &[0, 1]).unwrap();
        let s = build_sequences(&g, &[0], &train, 2).unwrap();
        assert_eq!(s.layout.len(), 14);
        for pos in 0..14 {
            let is_target = s.layout.target_positions().contains(&pos);
            assert_eq!(s.present(0, pos), is_target);
            if !is_target {
                assert_eq!(s.token(0, pos), &[0.0]);
            }
        }
    }

    #[test]
    fn singleton_fraud_bucket_is_neighbor_features() {
        let g = path_graph();
        let train = TrainMask::new(4, &[1]).unwrap();
        let s = build_sequences(&g, &[0], &train, 2).unwrap();
        let pos = s.layout.bucket_position(0, 1, GROUP_FRAUD);
        assert!(s.present(0, pos));
        assert_eq!(s.token(0, pos), g.feature_row(1));
        // node 2 is unlabeled at hop 1, node 3 unlabeled at hop 2
        assert_eq!(
            s.token(0, s.layout.bucket_position(0, 1, GROUP_UNKNOWN)),
            g.feature_row(2)
        );
        assert_eq!(
            s.token(0, s.layout.bucket_position(0, 2, GROUP_UNKNOWN)),
            g.feature_row(3)
        );
        assert_eq!(s.layout.hop_ids[pos], 1);
        assert_eq!(s.layout.group_ids[pos], GROUP_FRAUD);
        for p in s.layout.target_positions() {
            assert_eq!(s.layout.hop_ids[p], 0);
            assert_eq!(s.layout.group_ids[p], GROUP_UNKNOWN);
            assert_eq!(s.token(0, p), g.feature_row(0));
        }
    }

    #[test]
    fn target_excluded_from_own_buckets_on_cycle() {
        // triangle: node 0 is two steps from itself through 1 and 2
        let g =
            MultiRelationGraph::build(&[vec![(0, 1), (1, 2), (0, 2)]], vec![10.0, 1.0, 3.0], 1, vec![1, 0, 0]).unwrap();
        let train = TrainMask::new(3, &[0, 1, 2]).unwrap();
        let s = build_sequences(&g, &[0], &train, 2).unwrap();
        assert_eq!(s.token(0, s.layout.bucket_position(0, 1, GROUP_BENIGN)), &[2.0]);
        for g_id in 0..NUM_GROUPS {
            assert!(!s.present(0, s.layout.bucket_position(0, 2, g_id)));
            assert!(!s.present(0, s.layout.bucket_position(0, 1, GROUP_FRAUD)));
        }
    }

    #[test]
    fn own_label_never_changes_tokens() {
        let g = path_graph();
        let train = TrainMask::new(4, &[0, 1, 2, 3]).unwrap();
        for t in 0..4 {
            let mut labels = g.labels().to_vec();
            labels[t] ^= 1;
            let edges: Vec<Vec<(usize, usize)>> = (0..2).map(|r| g.relation(r).unwrap().edges().collect()).collect();
            let flipped = MultiRelationGraph::build(&edges, g.features().to_vec(), 3, labels).unwrap();
            assert_eq!(
                build_sequences(&g, &[t], &train, 2).unwrap(),
                build_sequences(&flipped, &[t], &train, 2).unwrap()
            );
        }
    }

    #[test]
    fn cache_matches_direct_build() {
        let g = path_graph();
        let train = TrainMask::new(4, &[1, 2]).unwrap();
        let cache = SequenceCache::new(&g, &train, 2).unwrap();
        assert_eq!(
            cache.batch(&[3, 0]).unwrap(),
            build_sequences(&g, &[3, 0], &train, 2).unwrap()
        );
        assert!(cache.batch(&[4]).is_err());
        assert!(build_sequences(&g, &[9], &train, 2).is_err());
    }

    fn encoder(store: &mut ParamStore, k: usize, r: usize, d: usize, layers: usize) -> SemanticEncoder {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        SemanticEncoder::new(store, &mut rng, k, r, 2, d, 2, layers, 0.0).unwrap()
    }

    fn zero(store: &mut ParamStore, id: ParamId) {
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    #[test]
    fn embed_shape_and_identity_projection() {
        let g = MultiRelationGraph::build(
            &[vec![(0, 1)], vec![(1, 2)]],
            (0..3 * 4).map(|i| i as f64).collect(),
            4,
            vec![0, 1, 0],
        )
        .unwrap();
        let train = TrainMask::new(3, &[1]).unwrap();
        let batch = build_sequences(&g, &[0, 1, 2], &train, 2).unwrap();
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, 4, 2, 4, 1);
        for id in [enc.hop_embedding, enc.group_embedding, enc.relation_embedding] {
            zero(&mut store, id);
        }
        let w = store.value_mut(enc.projection.weight).data_mut();
        w.iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = if i % 5 == 0 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let x = enc.embed(&mut tape, &store, &batch).unwrap();
        assert_eq!(tape.shape(x), &[3, 14, 4]);
        assert_eq!(tape.value(x).data(), batch.tokens.as_slice());
    }

    #[test]
    fn embed_shape_b3_d16() {
        let g = path_graph();
        let train = TrainMask::new(4, &[1]).unwrap();
        let batch = build_sequences(&g, &[0, 1, 2], &train, 2).unwrap();
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, 3, 2, 16, 1);
        let mut tape = Tape::new();
        let x = enc.embed(&mut tape, &store, &batch).unwrap();
        assert_eq!(tape.shape(x), &[3, 14, 16]);
    }

    #[test]
    fn group_change_shifts_by_embedding_difference() {
        let g = path_graph();
        let train = TrainMask::new(4, &[1]).unwrap();
        let batch = build_sequences(&g, &[0], &train, 2).unwrap();
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, 3, 2, 4, 1);
        let mut tape = Tape::new();
        let x = enc.embed(&mut tape, &store, &batch).unwrap();
        // positions (r0,h2,benign) and (r0,h2,fraud) are both empty: same features
        let p0 = batch.layout.bucket_position(0, 2, GROUP_BENIGN);
        let p1 = batch.layout.bucket_position(0, 2, GROUP_FRAUD);
        assert!(!batch.present(0, p0) && !batch.present(0, p1));
        let t = tape.value(x);
        let eg = store.value(enc.group_embedding);
        for c in 0..4 {
            let got = t.data()[p0 * 4 + c] - t.data()[p1 * 4 + c];
            let want = eg.data()[c] - eg.data()[4 + c];
            assert!((got - want).abs() < 1e-15);
        }
    }

    fn toy_sequence(tape: &mut Tape, b: usize, l: usize, d: usize) -> Var {
        let data = (0..b * l * d).map(|i| ((i * 13 % 11) as f64) - 5.0).collect();
        tape.constant(Tensor::new(vec![b, l, d], data).unwrap())
    }

    #[test]
    fn aggregate_with_identity_single_relation() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, 3, 1, 2, 2);
        let mut tape = Tape::new();
        let x = toy_sequence(&mut tape, 2, 7, 2);
        let w = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = enc.aggregate(&mut tape, x, w).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn aggregate_half_identity_blocks_averages_targets() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, 3, 2, 2, 2);
        let mut tape = Tape::new();
        let (l, d) = (14, 2);
        let x = toy_sequence(&mut tape, 2, l, d);
        let w = tape.constant(Tensor::matrix(4, 2, vec![0.5, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.5]).unwrap());
        let y = enc.aggregate(&mut tape, x, w).unwrap();
        let (xv, yv) = (tape.value(x).data(), tape.value(y).data());
        let targets = enc.layout.target_positions();
        for b in 0..2 {
            for pos in 0..l {
                for c in 0..d {
                    let got = yv[(b * l + pos) * d + c];
                    if targets.contains(&pos) {
                        let mean = targets.iter().map(|&p| xv[(b * l + p) * d + c]).sum::<f64>() / 2.0;
                        assert_eq!(got, mean);
                    } else {
                        assert_eq!(got, xv[(b * l + pos) * d + c]);
                    }
                }
            }
        }
        let zero_w = tape.constant(Tensor::zeros(vec![4, 2]));
        let z = enc.aggregate(&mut tape, x, zero_w).unwrap();
        for b in 0..2 {
            for &p in &targets {
                assert_eq!(&tape.value(z).data()[(b * l + p) * d..(b * l + p + 1) * d], &[0.0, 0.0]);
            }
        }
    }

    #[test]
    fn residual_only_path_gives_normed_embeddings() {
        let g = path_graph();
        let train = TrainMask::new(4, &[1, 3]).unwrap();
        let batch = build_sequences(&g, &[0, 2], &train, 2).unwrap();
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, 3, 2, 4, 1);
        let layer = &enc.layers[0];
        for id in [
            layer.attention.value.weight,
            layer.attention.value.bias.unwrap(),
            layer.attention.output.weight,
            layer.attention.output.bias.unwrap(),
            layer.ff2.weight,
            layer.ff2.bias.unwrap(),
        ] {
            zero(&mut store, id);
        }
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = enc.forward(&mut tape, &store, &batch, false, &mut rng).unwrap();
        let x = enc.embed(&mut tape, &store, &batch).unwrap();
        let ex = tape.value(x).clone();
        let got = tape.value(out);
        assert_eq!(got.shape(), &[2, 2, 4]);
        for b in 0..2 {
            for (r, &p) in enc.layout.target_positions().iter().enumerate() {
                let row = &ex.data()[(b * 14 + p) * 4..(b * 14 + p + 1) * 4];
                // layer norm applied twice with unit scale and zero shift
                let norm = |v: &[f64]| -> Vec<f64> {
                    let m = v.iter().sum::<f64>() / 4.0;
                    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
                    v.iter()
                        .map(|x| (x - m) / (var + crate::autodiff::LAYER_NORM_EPS).sqrt())
                        .collect()
                };
                let want = norm(&norm(row));
                for c in 0..4 {
                    assert!((got.data()[(b * 2 + r) * 4 + c] - want[c]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn permuting_non_target_tokens_keeps_output() {
        let g = path_graph();
        let train = TrainMask::new(4, &[1, 3]).unwrap();
        let batch = build_sequences(&g, &[0, 1, 2], &train, 2).unwrap();
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, 3, 2, 4, 2);
        // swap two non-target tokens of relation 1 together with their ids
        let (a, b) = (
            batch.layout.bucket_position(1, 1, 0),
            batch.layout.bucket_position(1, 2, 2),
        );
        let mut permuted = batch.clone();
        let (l, k) = (batch.layout.len(), batch.feature_dim);
        for row in 0..batch.batch_size {
            for c in 0..k {
                permuted.tokens.swap((row * l + a) * k + c, (row * l + b) * k + c);
            }
            permuted.presence.swap(row * l + a, row * l + b);
        }
        permuted.layout.hop_ids.swap(a, b);
        permuted.layout.group_ids.swap(a, b);
        let mut enc_p = enc.clone();
        enc_p.layout = permuted.layout.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let y0 = enc.forward(&mut tape, &store, &batch, false, &mut rng).unwrap();
        let y1 = enc_p.forward(&mut tape, &store, &permuted, false, &mut rng).unwrap();
        assert!(tape.value(y0).max_abs_diff(tape.value(y1)) < 1e-10);
    }

    #[test]
    fn every_parameter_gets_gradient_and_passes_check() {
        let g = path_graph();
        let train = TrainMask::new(4, &[1, 2]).unwrap();
        let batch = build_sequences(&g, &[0, 1, 2, 3], &train, 2).unwrap();
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, 3, 2, 4, 2);
        let f = |tape: &mut Tape, s: &ParamStore| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let y = enc.forward(tape, s, &batch, false, &mut rng)?;
            let n = tape.value(y).numel();
            let w = tape.constant(Tensor::new(
                tape.shape(y).to_vec(),
                (0..n).map(|i| ((i * 7 % 5) as f64) - 2.0).collect(),
            )?);
            let p = tape.mul(y, w)?;
            Ok(tape.sum(p))
        };
        let report = grad_check_params(&store, f, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "{:?}", report.failures().next());

        let mut tape = Tape::new();
        let loss = f(&mut tape, &store).unwrap();
        store.zero_grad();
        tape.backward(loss, &mut store).unwrap();
        for id in store.ids() {
            assert!(
                store.grad(id).data().iter().any(|&v| v != 0.0),
                "{} has no gradient",
                store.name(id)
            );
        }
    }
}
