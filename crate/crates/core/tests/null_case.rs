use ragfuse::data::{generate_synthetic, RelationConfig, SyntheticConfig};
use ragfuse::model::Scheme;
use ragfuse::train::{train, TrainConfig};

fn balanced(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        num_nodes: 400,
        fraud_fraction: 0.5,
        feature_dim: 8,
        feature_separation: 1.0,
        relations: vec![RelationConfig::new(6.0, Some(0.8)), RelationConfig::new(6.0, None)],
        seed,
        ..SyntheticConfig::default()
    }
}

#[test]
fn untrained_model_is_near_chance() {
    for seed in 0..10 {
        let g = generate_synthetic(&balanced(seed)).unwrap();
        let config = TrainConfig {
            scheme: Scheme::AttentionRes,
            epochs: 0,
            d: 16,
            heads: 2,
            seed,
            ..TrainConfig::default()
        };
        let out = train(&g, &config).unwrap();
        let auc = out.final_test.auc;
        assert!((0.35..=0.65).contains(&auc), "seed {seed}: {auc}");
    }
}

#[test]
fn trained_model_on_signal_free_data_is_near_chance() {
    let mut c = balanced(3);
    c.feature_separation = 0.0;
    c.relations = vec![RelationConfig::new(6.0, None), RelationConfig::new(6.0, None)];
    let g = generate_synthetic(&c).unwrap();
    let config = TrainConfig {
        epochs: 15,
        batch_size: 64,
        d: 16,
        heads: 2,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let auc = train(&g, &config).unwrap().final_test.auc;
    assert!((0.35..=0.65).contains(&auc), "{auc}");
}

#[test]
fn complementary_preset_realizes_its_roles() {
    let g = generate_synthetic(&SyntheticConfig::complementary(0)).unwrap();
    let labels = g.labels();
    let fraud_rate = labels.iter().filter(|&&y| y == 1).count() as f64 / g.num_nodes() as f64;
    assert!((fraud_rate - 0.1).abs() < 0.015, "{fraud_rate}");
    let rel = g.relation(0).unwrap();
    let mean_deg = |pred: &dyn Fn(usize) -> bool| {
        let nodes: Vec<usize> = (0..g.num_nodes()).filter(|&i| pred(i)).collect();
        nodes.iter().map(|&i| rel.degree(i)).sum::<usize>() as f64 / nodes.len() as f64
    };
    // informative dims are the first half; camouflaged fraud sit near the benign mean
    let shifted = |i: usize| g.feature_row(i)[..8].iter().sum::<f64>() / 8.0 > 0.0;
    let benign = mean_deg(&|i| labels[i] == 0);
    let hubs = mean_deg(&|i| labels[i] == 1 && !shifted(i));
    let visible = mean_deg(&|i| labels[i] == 1 && shifted(i));
    assert!((benign - 10.0).abs() < 0.5, "{benign}");
    assert!(hubs > 1.6 * benign, "{hubs} vs {benign}");
    assert!((visible - benign).abs() < 2.0, "{visible} vs {benign}");
}
