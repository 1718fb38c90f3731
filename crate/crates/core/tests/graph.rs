use attnlipkit::entropy::entropy_and_efficiency;
use attnlipkit::graph::{neighbor_softmax_attention, train, GraphContext, Layer, MessageIndex, ParamStore, Preset};
use attnlipkit::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(seed: u64, n: usize, p: f64) -> SparseGraph {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u != v && r.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let x = Matrix::randn(n, 4, 1.0, &mut r);
    let labels = (0..n).map(|u| Some(u % 2)).collect();
    SparseGraph::from_edges(&edges, x, labels, vec![Mask::Train; n], 2).unwrap()
}

fn run_layer(cfg: LayerConfig, g: &SparseGraph, seed: u64) -> (Layer, ParamStore, Tape, attnlipkit::graph::LayerVars) {
    let mut store = ParamStore::new();
    let layer = Layer::new(cfg, g.feature_dim(), &mut store, "l", &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let h = t.leaf(g.features.clone());
    let vars = layer.forward::<ChaCha8Rng>(&mut t, &p, h, &GraphContext::new(g), None).unwrap();
    (layer, store, t, vars)
}

#[test]
fn gat_like_preset_matches_neighbor_softmax() {
    let g = random_graph(1, 9, 0.4);
    let (layer, store, t, vars) = run_layer(LayerConfig::gru_framework(5, Preset::GatLike), &g, 3);
    let standalone = neighbor_softmax_attention(&g.features, &g, &layer, &store).unwrap();
    assert_eq!(t.value(vars.attention[0]).as_slice(), standalone.as_slice());
}

#[test]
fn ggnn_like_self_weight_is_one() {
    let g = random_graph(2, 8, 0.3);
    let (_, _, t, vars) = run_layer(LayerConfig::gru_framework(5, Preset::GgnnLike), &g, 4);
    let e = t.value(vars.self_weight.unwrap());
    assert!(e.as_slice().iter().all(|&x| x == 1.0));
}

#[test]
fn entropy_normalization_hits_target_at_layer_output() {
    let g = random_graph(5, 12, 0.5);
    let target = 0.6;
    for cfg in [
        LayerConfig::gat(6, 2),
        LayerConfig::graph_transformer(6, 1),
        LayerConfig::gru_framework(6, Preset::Full),
    ] {
        let self_loops = cfg.uses_self_loops();
        let cfg = cfg.with_normalization(Normalization::NeighborEntropy { target });
        let (_, _, t, vars) = run_layer(cfg, &g, 6);
        let idx = MessageIndex::build(&g, self_loops);
        let seg = &idx.segments;
        for head in &vars.attention {
            let w = t.value(*head);
            for s in 0..seg.count() {
                let range = seg.range(s);
                if range.len() < 2 {
                    continue;
                }
                let p: Vec<f64> = range.map(|k| w[(k, 0)]).collect();
                let (_, eta) = entropy_and_efficiency(&p).unwrap();
                assert!((eta - target).abs() <= 1e-6, "efficiency {eta}");
            }
        }
    }
}

#[test]
fn attention_rows_are_stochastic_for_every_kind() {
    let g = random_graph(7, 10, 0.3);
    for cfg in [LayerConfig::gat(6, 3), LayerConfig::graph_transformer(4, 2)] {
        let self_loops = cfg.uses_self_loops();
        let (_, _, t, vars) = run_layer(cfg.with_normalization(Normalization::Lipschitz), &g, 8);
        let idx = MessageIndex::build(&g, self_loops);
        for head in &vars.attention {
            let w = t.value(*head);
            for s in 0..idx.segments.count() {
                let total: f64 = idx.segments.range(s).map(|k| w[(k, 0)]).sum();
                assert!(idx.segments.range(s).is_empty() || (total - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let g = gen_synthetic_citation(80, 3, 0.8, 8, 1).unwrap();
    let run = || {
        let cfg = ModelConfig::stack(8, 3, LayerConfig::gat(8, 2).with_normalization(Normalization::Lipschitz), 3);
        let mut m = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let log = train(&mut m, &g, &TrainConfig { epochs: 15, ..Default::default() }).unwrap();
        (log, m.params)
    };
    assert_eq!(run(), run());
}

#[test]
fn training_fits_homophilous_citation_graph() {
    let g = gen_synthetic_citation(150, 3, 0.9, 8, 2).unwrap();
    let cfg = ModelConfig::stack(8, 3, LayerConfig::gat(8, 2), 2);
    let mut m = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let log = train(&mut m, &g, &TrainConfig { epochs: 60, lr: 0.02, ..Default::default() }).unwrap();
    let last = log.final_record().unwrap();
    assert!(last.train_acc.unwrap() > 0.9, "{last:?}");
    assert!(last.test_acc.unwrap() > 0.8, "{last:?}");
}

#[test]
fn dropout_changes_training_but_not_evaluation() {
    let g = random_graph(11, 10, 0.4);
    let mut cfg = LayerConfig::gat(4, 1);
    cfg.attention_dropout = 0.5;
    let m = Model::new(ModelConfig::stack(4, 2, cfg, 2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(m.logits(&g).unwrap(), m.logits(&g).unwrap());
}
