mod common;

use common::{all_pairs, brute_force_depth};
use proptest::prelude::*;
use turboconn::analysis::{count_params, dims_preset, max_depth, sequential_steps, DepGraph, Dims};
use turboconn::model::{ConnectionSpec, Model, ModelConfig, Target};

#[test]
fn longest_path_agrees_with_enumeration_on_small_instances() {
    for n_layers in 1..=4 {
        let pairs = all_pairs(n_layers);
        for mask in 0u32..(1 << pairs.len()) {
            let chosen: Vec<_> = pairs
                .iter()
                .enumerate()
                .filter(|(b, _)| mask >> b & 1 == 1)
                .map(|(_, p)| *p)
                .collect();
            for g in 1..=2 {
                let spec = ConnectionSpec::new(chosen.iter().copied(), 1.0, g, 1).unwrap();
                for k in 1..=8 {
                    assert_eq!(
                        max_depth(n_layers, k, &spec).unwrap(),
                        brute_force_depth(n_layers, k, &chosen, g),
                        "L={n_layers} k={k} g={g} pairs={chosen:?}"
                    );
                }
            }
        }
    }
}

#[test]
fn top_to_bottom_scaling() {
    let spec = |g| ConnectionSpec::new([(15, 0)], 1.0, g, 1).unwrap();
    for g in [1, 4, 16] {
        assert_eq!(max_depth(16, 64, &spec(g)).unwrap(), 16 * 64 / g);
    }
    assert_eq!(
        max_depth(4, 8, &ConnectionSpec::new([(3, 0)], 1.0, 2, 1).unwrap()).unwrap(),
        brute_force_depth(4, 8, &[(3, 0)], 2)
    );
}

#[test]
fn graph_edge_inventory() {
    // L=2, k=3, g=1, one connection 1 -> 0: intra + attention edges are
    // sum over i of (i + 1) per upper layer = 6, connection edges = 2.
    let spec = ConnectionSpec::new([(1, 0)], 1.0, 1, 1).unwrap();
    let g = DepGraph::new(2, 3, &spec).unwrap();
    assert_eq!(g.node_count(), 6);
    assert_eq!(g.edge_count(), 8);
    let succ: Vec<_> = g.successors((0, 1)).collect();
    assert_eq!(succ, vec![(1, 0)]);
}

const APPENDIX: [(&str, u64, u64, u64); 6] = [
    ("llama-1b", 140, 0, 98_631_680),
    ("llama-1b", 120, 15, 91_946_760),
    ("llama-8b", 140, 0, 367_001_600),
    ("llama-8b", 120, 45, 358_999_320),
    ("qwen-1.7b", 140, 0, 152_535_040),
    ("qwen-1.7b", 120, 21, 141_111_768),
];

#[test]
fn appendix_totals() {
    for (preset, r, n_conn, want) in APPENDIX {
        let c = count_params(&dims_preset(preset).unwrap(), r, n_conn, r).unwrap();
        let got = if n_conn == 0 {
            c.baseline_total
        } else {
            c.turboconn_total
        };
        assert_eq!(got, want, "{preset} r={r} n_conn={n_conn}");
    }
}

#[test]
fn connected_budget_never_exceeds_baseline() {
    for (preset, n_conn) in [("llama-1b", 15), ("llama-8b", 45), ("qwen-1.7b", 21)] {
        let d = dims_preset(preset).unwrap();
        let ours = count_params(&d, 120, n_conn, 120).unwrap().turboconn_total;
        let base = count_params(&d, 140, 0, 140).unwrap().baseline_total;
        assert!(ours <= base, "{preset}");
    }
}

#[test]
fn model_trainable_count_matches_accounting() {
    for (pairs, r, r_d) in [
        (vec![(3, 0), (3, 1), (2, 0)], 3, 5),
        (vec![], 2, 1),
        (vec![(1, 0)], 1, 7),
    ] {
        let cfg = ModelConfig {
            n_layers: 4,
            d_hidden: 12,
            n_heads: 3,
            d_kv: 12,
            d_inter: 20,
            vocab_size: 9,
            max_seq: 8,
        };
        let n_conn = pairs.len() as u64;
        let mut m = Model::new(cfg, ConnectionSpec::new(pairs, 1.0, 1, r_d).unwrap(), 0).unwrap();
        m.attach_lora(r, &Target::ALL).unwrap();
        let dims = Dims {
            d_hidden: 12,
            d_kv: 12,
            d_inter: 20,
            n_layers: 4,
        };
        let c = count_params(&dims, r as u64, n_conn, r_d as u64).unwrap();
        assert_eq!(m.trainable_params() as u64, c.turboconn_total);
    }
}

fn arb_spec(n_layers: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
    let pairs = all_pairs(n_layers);
    proptest::sample::subsequence(pairs.clone(), 0..=pairs.len())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn no_connections_means_depth_l(n_layers in 1usize..20, k in 1usize..=64) {
        prop_assert_eq!(max_depth(n_layers, k, &ConnectionSpec::none()).unwrap(), n_layers);
    }

    #[test]
    fn valid_specs_are_acyclic(pairs in arb_spec(6), k in 1usize..12, g in 1usize..5) {
        let spec = ConnectionSpec::new(pairs, 1.0, g, 1).unwrap();
        prop_assert!(DepGraph::new(6, k, &spec).unwrap().topological_order().is_ok());
    }

    #[test]
    fn depth_monotone_in_k_and_g(pairs in arb_spec(5), k in 1usize..12, g in 1usize..5) {
        let at = |k, g| max_depth(5, k, &ConnectionSpec::new(pairs.clone(), 1.0, g, 1).unwrap()).unwrap();
        prop_assert!(at(k, g) <= at(k + 1, g));
        prop_assert!(at(k, g + 1) <= at(k, g));
    }

    #[test]
    fn steps_is_ceiling(k in 1usize..10_000, g in 1usize..100) {
        let s = sequential_steps(k, g);
        prop_assert!(s * g >= k && (s - 1) * g < k);
    }
}
