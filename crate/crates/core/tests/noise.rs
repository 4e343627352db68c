use proptest::prelude::*;
use stochdyn::noise::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tower_property_on_random_leaf_values(depth in 1usize..9, vals in prop::collection::vec(-5.0f64..5.0, 256)) {
        let tree = build_tree(depth, 1.0, false).unwrap();
        let leaves: Vec<f64> = (0..tree.level_len(depth)).map(|k| vals[k % vals.len()]).collect();
        let total = tree.expectation(depth, &|k| leaves[k]);
        let mut v = leaves;
        for l in (0..depth).rev() {
            v = conditional_expectation(&tree, l, &v).unwrap();
            let e = tree.expectation(l, &|k| v[k]);
            prop_assert!((e - total).abs() <= 1e-13 * (1.0 + total.abs()));
        }
    }

    #[test]
    fn recombining_and_full_trees_agree_on_functions_of_w(depth in 1usize..10, horizon in 0.1f64..3.0) {
        let full = build_tree(depth, horizon, false).unwrap();
        let rec = build_tree(depth, horizon, true).unwrap();
        let f = |w: f64| (2.0 * w).cos() + w.powi(4);
        let a = full.expectation(depth, &|k| f(full.w(depth, k)));
        let b = rec.expectation(depth, &|k| f(rec.w(depth, k)));
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }
}

#[test]
fn brownian_moments_on_every_level() {
    for rec in [false, true] {
        let tree = build_tree(12, 2.0, rec).unwrap();
        for l in 0..=12 {
            let t = 2.0 * l as f64 / 12.0;
            assert!(tree.expectation(l, &|k| tree.w(l, k)).abs() < 1e-12);
            assert!((tree.expectation(l, &|k| tree.w(l, k).powi(2)) - t).abs() < 1e-12);
            let p: f64 = (0..tree.level_len(l)).map(|k| tree.prob(l, k)).sum();
            assert!((p - 1.0).abs() < 1e-14);
        }
    }
}

#[test]
fn paths_from_tree_nodes_are_consistent() {
    let tree = build_tree(5, 1.0, false).unwrap();
    for k in 0..tree.level_len(5) {
        let path = tree.path_to(5, k).unwrap();
        assert_eq!(path.w.len(), 6);
        assert_eq!(path.w[5], tree.w(5, k));
        assert_eq!(path.w[0], 0.0);
        for l in 0..5 {
            assert_eq!(path.w[l], tree.w(l, tree.ancestor(5, k, l)));
        }
    }
}

#[test]
fn ensemble_statistics_are_brownian() {
    let e = PathEnsemble::new(20_000, 8, 1.0, 11).unwrap();
    let m2 = e.expectation(8, &|k| e.w(8, k).powi(2));
    let m1 = e.expectation(8, &|k| e.w(8, k));
    assert!(m1.abs() < 0.03, "{m1}");
    assert!((m2 - 1.0).abs() < 0.05, "{m2}");
    let again = PathEnsemble::new(20_000, 8, 1.0, 11).unwrap();
    assert_eq!(again.w(8, 123), e.w(8, 123));
    let other = PathEnsemble::new(20_000, 8, 1.0, 12).unwrap();
    assert_ne!(other.w(8, 123), e.w(8, 123));
}
