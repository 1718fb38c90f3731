use attnlipkit::datasets::{parse_graph, tree_answer, write_graph};
use attnlipkit::*;
use proptest::prelude::*;

#[test]
fn generators_are_byte_deterministic() {
    let a = gen_synthetic_citation(120, 4, 0.7, 6, 3).unwrap();
    let b = gen_synthetic_citation(120, 4, 0.7, 6, 3).unwrap();
    assert_eq!(write_graph(&a), write_graph(&b));
    let c = gen_synthetic_citation(120, 4, 0.7, 6, 4).unwrap();
    assert_ne!(write_graph(&a), write_graph(&c));

    let spec = TreesSpec { depth: 3, num_trees: 10, seed: 1 };
    let t1: Vec<String> = gen_trees(&spec).unwrap().iter().map(write_graph).collect();
    let t2: Vec<String> = gen_trees(&spec).unwrap().iter().map(write_graph).collect();
    assert_eq!(t1, t2);
}

#[test]
fn trees_have_one_consistent_answer() {
    for depth in 2..=6 {
        let spec = TreesSpec { depth, num_trees: 40, seed: depth as u64 };
        for tree in gen_trees(&spec).unwrap() {
            assert_eq!(tree.num_nodes(), spec.nodes_per_tree());
            assert_eq!(tree.feature_dim(), spec.feature_dim());
            assert_eq!(tree.nodes_with(Mask::Train), vec![0]);
            assert_eq!(tree_answer(&tree, depth), tree.labels[0]);
        }
    }
}

#[test]
fn citation_split_and_symmetry() {
    let g = gen_synthetic_citation(300, 3, 0.9, 16, 0).unwrap();
    assert_eq!(g.nodes_with(Mask::Train).len(), 180);
    assert_eq!(g.nodes_with(Mask::Val).len(), 60);
    assert_eq!(g.nodes_with(Mask::Test).len(), 60);
    let edges: std::collections::HashSet<(usize, usize)> = g.edges().collect();
    assert!(edges.iter().all(|&(u, v)| u != v && edges.contains(&(v, u))));
    let same = edges.iter().filter(|&&(u, v)| g.labels[u] == g.labels[v]).count();
    assert!(same as f64 / edges.len() as f64 > 0.8);
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = gen_synthetic_citation(50, 2, 0.6, 5, 9).unwrap();
    let path = dir.path().join("g.graph.txt");
    save_graph(&g, &path).unwrap();
    assert_eq!(load_graph(&path).unwrap(), g);
}

#[test]
fn parse_errors_report_line() {
    let g = gen_synthetic_citation(5, 2, 0.5, 2, 0).unwrap();
    let text = write_graph(&g);
    let broken: String = text.lines().enumerate().map(|(i, l)| if i == 2 { "N bogus\n".to_string() } else { format!("{l}\n") }).collect();
    match parse_graph(&broken) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn missing_vector_keeps_topology_labels_masks(p in 0.0..=1.0f64, seed in 0..1000u64) {
        let g = gen_synthetic_citation(60, 3, 0.8, 4, seed).unwrap();
        let out = missing_vector_transform(&g, &MissingVectorSpec { p, seed }).unwrap();
        prop_assert_eq!(out.edges().collect::<Vec<_>>(), g.edges().collect::<Vec<_>>());
        prop_assert_eq!(&out.labels, &g.labels);
        prop_assert_eq!(&out.masks, &g.masks);
        for u in g.nodes_with(Mask::Train) {
            prop_assert_eq!(out.features.row(u), g.features.row(u));
        }
        let pool = 60 - g.nodes_with(Mask::Train).len();
        let zeroed = (0..60).filter(|&u| out.features.row(u) != g.features.row(u)).count();
        prop_assert_eq!(zeroed, (p * pool as f64).round() as usize);
    }

    #[test]
    fn text_format_round_trips(n in 4..30usize, classes in 2..4usize, seed in 0..500u64) {
        let g = gen_synthetic_citation(n, classes, 0.5, 3, seed).unwrap();
        prop_assert_eq!(parse_graph(&write_graph(&g)).unwrap(), g);
    }
}
