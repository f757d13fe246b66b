use std::collections::HashSet;

mod common;

use common::{feature_oracle, Expect};
use debugcn_core::graph::{
    build_conv_2d, build_conv_flat, build_fc_bipartite, permute_nodes, random_pair_swaps,
    random_within_side_permutation, FeatureConfigName, GraphKind, LayerGraph,
};
use debugcn_core::tensor::Tensor;
use proptest::prelude::*;

/// Weights on a coarse grid so ties, constant nodes and exact boundary hits
/// all occur.
fn fc_weights() -> impl Strategy<Value = Tensor> {
    (1usize..=8, 1usize..=8).prop_flat_map(|(r, c)| {
        prop::collection::vec(prop_oneof![(-8i32..=8).prop_map(|q| q as f32 * 0.125), -2.0f32..2.0], r * c)
            .prop_map(move |data| Tensor::new(vec![r, c], data).unwrap())
    })
}

fn conv_shape() -> impl Strategy<Value = [usize; 4]> {
    [1usize..=8, 1usize..=8, 1usize..=8, 1usize..=8]
}

fn conv_tensor(shape: [usize; 4]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|v| (v as f32 * 0.7).sin()).collect()).unwrap()
}

fn degrees(g: &LayerGraph) -> Vec<usize> {
    let mut d = vec![0; g.num_nodes];
    for &(u, v) in &g.edges {
        d[u] += 1;
        d[v] += 1;
    }
    d
}

fn sorted_rows(g: &LayerGraph) -> Vec<Vec<u32>> {
    let mut rows: Vec<Vec<u32>> = (0..g.num_nodes)
        .map(|i| g.node_features.row(i).iter().map(|v| v.to_bits()).collect())
        .collect();
    rows.sort();
    rows
}

fn sorted_weights(g: &LayerGraph) -> Vec<u32> {
    let mut w: Vec<u32> = g.edge_weights.iter().map(|v| v.to_bits()).collect();
    w.sort();
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn census_matches_closed_forms(fc in fc_weights(), shape in conv_shape()) {
        let (r, c) = (fc.dims()[0], fc.dims()[1]);
        let g = build_fc_bipartite(&fc, &FeatureConfigName::Gcn18.into()).unwrap();
        g.validate().unwrap();
        prop_assert_eq!((g.num_nodes, g.num_edges()), (r + c, r * c));
        let d = degrees(&g);
        prop_assert!(d[..c].iter().all(|&x| x == r) && d[c..].iter().all(|&x| x == c));
        for (&(j, right), &w) in g.edges.iter().zip(&g.edge_weights) {
            prop_assert_eq!(w.to_bits(), fc.at(right - c, j).to_bits());
        }

        let [f_out, f_in, h, w] = shape;
        let conv = conv_tensor(shape);
        let flat = build_conv_flat(&conv).unwrap();
        flat.validate().unwrap();
        prop_assert_eq!((flat.num_nodes, flat.num_edges(), flat.feature_dim()), (f_out, f_out - 1, f_in * h * w));

        let grid = build_conv_2d(&conv).unwrap();
        grid.validate().unwrap();
        let slices = f_out * f_in;
        prop_assert_eq!(grid.num_nodes, slices * h * w);
        prop_assert_eq!(grid.num_edges(), slices * (h * (w - 1) + w * (h - 1)) + (slices - 1));
        prop_assert_eq!(grid.kind, GraphKind::Conv2d);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn features_match_brute_force(fc in fc_weights(), pick in any::<prop::sample::Index>(), cfg in 0usize..5) {
        let name = FeatureConfigName::ALL[cfg];
        let g = build_fc_bipartite(&fc, &name.into()).unwrap();
        let node = pick.index(g.num_nodes);
        let got = g.node_features.row(node);
        let want = feature_oracle(&g, node, name);
        prop_assert_eq!(got.len(), want.len());
        for (k, (&x, e)) in got.iter().zip(&want).enumerate() {
            match *e {
                Expect::Exact(v) => prop_assert_eq!(f64::from(x), v, "feature {}", k),
                Expect::Close(v) => prop_assert!(
                    (f64::from(x) - v).abs() <= 1e-6 * v.abs().max(1e-30),
                    "feature {}: {} vs {}", k, x, v
                ),
            }
        }
    }
}

proptest! {
    #[test]
    fn histogram_invariants(fc in fc_weights()) {
        let g = build_fc_bipartite(&fc, &FeatureConfigName::Gcn18.into()).unwrap();
        let d = degrees(&g);
        for node in 0..g.num_nodes {
            let row = g.node_features.row(node);
            // GCN_18: 1, side, mean, min, max, sum, 5 counts, 6 bounds, degree
            let counts: f32 = row[6..11].iter().sum();
            prop_assert_eq!(counts as usize, d[node]);
            let bounds = &row[11..17];
            prop_assert!(bounds.windows(2).all(|p| p[0] <= p[1]));
            prop_assert_eq!(bounds[0], row[3]);
            prop_assert_eq!(bounds[5], row[4]);
        }
    }

    #[test]
    fn permutations_preserve_multisets(fc in fc_weights(), seed in any::<u64>()) {
        let g = build_fc_bipartite(&fc, &FeatureConfigName::Gcn16b.into()).unwrap();
        let p = permute_nodes(&g, &random_within_side_permutation(&g, seed)).unwrap();
        p.validate().unwrap();
        prop_assert_eq!(sorted_rows(&p), sorted_rows(&g));
        prop_assert_eq!(sorted_weights(&p), sorted_weights(&g));
        let mut dg = degrees(&g);
        let mut dp = degrees(&p);
        dg.sort();
        dp.sort();
        prop_assert_eq!(dg, dp);
    }
}

#[test]
fn thousand_swaps_on_the_mnist_head_shape() {
    let data = (0..10 * 512).map(|v| ((v * 7919) % 1000) as f32 / 500.0 - 1.0).collect();
    let fc = Tensor::new(vec![10, 512], data).unwrap();
    let g = build_fc_bipartite(&fc, &FeatureConfigName::Gcn18.into()).unwrap();
    let s = random_pair_swaps(&g, 1000, 42);
    s.validate().unwrap();
    assert_eq!(s.num_nodes, 522);
    assert_ne!(s, g);
    assert_eq!(sorted_rows(&s), sorted_rows(&g));
    assert_eq!(sorted_weights(&s), sorted_weights(&g));
    // right-side nodes stay put
    for i in 512..522 {
        assert_eq!(s.node_features.row(i), g.node_features.row(i));
    }
    let pairs = |g: &LayerGraph| -> HashSet<(usize, u32)> {
        g.edges.iter().zip(&g.edge_weights).map(|(&(_, r), w)| (r, w.to_bits())).collect()
    };
    assert_eq!(pairs(&s), pairs(&g));
}
