#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ragfuse::autodiff::{ParamStore, Tape};
use ragfuse::graph::MultiRelationGraph;
use ragfuse::model::topology::{PropagationMode, TopologyEncoder, TopologyInputs};
use ragfuse::model::Scheme;
use ragfuse::train::TrainConfig;

/// Random multi-relation graph with edge probability `p` per pair and relation.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, relations: usize, k: usize, p: f64) -> MultiRelationGraph {
    let edges: Vec<Vec<(usize, usize)>> = (0..relations)
        .map(|_| {
            let mut e = Vec::new();
            for a in 0..n {
                for b in a + 1..n {
                    if rng.random_bool(p) {
                        e.push((a, b));
                    }
                }
            }
            e
        })
        .collect();
    let features = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|i| (i % 2) as u8).collect();
    MultiRelationGraph::build(&edges, features, k, labels).unwrap()
}

fn dense_matmul(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..m {
            let x = a[i * m + j];
            for c in 0..k {
                out[i * k + c] += x * b[j * k + c];
            }
        }
    }
    out
}

/// `D̃^{-1/2}(A + I)D̃^{-1/2}` built densely from the edge list.
pub fn dense_normalized(graph: &MultiRelationGraph, r: usize) -> Vec<f64> {
    let n = graph.num_nodes();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    for (u, v) in graph.relation(r).unwrap().edges() {
        a[u * n + v] = 1.0;
        a[v * n + u] = 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] /= deg[i].sqrt() * deg[j].sqrt();
        }
    }
    a
}

/// Dense reference for the topology encoder on every node: `[n, R, d]`.
pub fn dense_topology(graph: &MultiRelationGraph, enc: &TopologyEncoder, store: &ParamStore) -> Vec<f64> {
    let (n, k, d) = (graph.num_nodes(), graph.feature_dim(), enc.d);
    let rels = graph.num_relations();
    let mut out = vec![0.0; n * rels * d];
    for r in 0..rels {
        let a = dense_normalized(graph, r);
        let mut h = graph.features().to_vec();
        let mut width = k;
        let layers = enc.weights[r].len();
        for (l, &w) in enc.weights[r].iter().enumerate() {
            let ah = dense_matmul(&a, &h, n, n, width);
            h = dense_matmul(&ah, store.value(w).data(), n, width, d);
            width = d;
            if l + 1 < layers {
                h.iter_mut().for_each(|x| *x = x.max(0.0));
            }
        }
        for i in 0..n {
            out[(i * rels + r) * d..(i * rels + r + 1) * d].copy_from_slice(&h[i * d..(i + 1) * d]);
        }
    }
    out
}

/// Largest absolute difference between the sparse encoder (in `mode`) and
/// the dense reference, over all nodes.
pub fn topology_oracle_gap(
    graph: &MultiRelationGraph,
    d: usize,
    layers: usize,
    mode: PropagationMode,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc = TopologyEncoder::new(
        &mut store,
        &mut rng,
        graph.feature_dim(),
        graph.num_relations(),
        d,
        layers,
        mode,
    )
    .unwrap();
    let inputs = TopologyInputs::new(graph).unwrap();
    let nodes: Vec<usize> = (0..graph.num_nodes()).collect();
    let mut tape = Tape::new();
    let out = enc.forward(&mut tape, &store, &inputs, &nodes).unwrap();
    let want = dense_topology(graph, &enc, &store);
    let got = tape.value(out).data();
    assert_eq!(got.len(), want.len());
    got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Budget used for the synthetic-data criteria.
pub fn acceptance_config(scheme: Scheme, seed: u64) -> TrainConfig {
    TrainConfig {
        scheme,
        seed,
        epochs: 100,
        batch_size: 128,
        d: 32,
        heads: 4,
        lr: 3e-3,
        val_ratio: 0.2,
        eval_test_each_epoch: false,
        ..TrainConfig::default()
    }
}
