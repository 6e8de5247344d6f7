use mfprice_core::equilibrium::{mz_distance, price_metric, DiscretePrice};
use mfprice_core::io::fmt_real;
use mfprice_core::noise_tree::{
    bucket_indexed, project_path, project_scalar, transition_matrix, GridSpec, KeyMode, Lattice,
};
use proptest::prelude::*;

fn grid() -> impl Strategy<Value = GridSpec> {
    (1u32..=3, 1u32..=3, 1usize..=4, 0.25f64..4.0).prop_map(|(n, l, m, h)| GridSpec::new(n, l, m, h).unwrap())
}

/// Random lattice-index node paths for a grid.
fn node_paths(spec: GridSpec, count: usize) -> impl Strategy<Value = Vec<Vec<u16>>> {
    let size = spec.lattice().len() as u16;
    // few distinct states so that keys repeat
    let states = (size / 2).saturating_sub(1)..=(size / 2 + 1).min(size - 1);
    prop::collection::vec(prop::collection::vec(states, spec.node_count()), 1..count)
}

fn price_on(spec: GridSpec, mode: KeyMode, paths: &[Vec<u16>], seed: u64) -> DiscretePrice {
    let buckets = bucket_indexed(paths, &spec, mode);
    DiscretePrice::from_fn(&buckets, |i, j| {
        // cheap deterministic hash of (seed, i, j) into [-1, 1]
        let h = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((i as u64) << 32 | j as u64);
        (h.wrapping_mul(0xBF58_476D_1CE4_E5B9) >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

proptest! {
    #[test]
    fn projection_is_idempotent_and_on_lattice(x in -20.0f64..20.0, l in 0u32..=6) {
        let p = project_scalar(x, l).unwrap();
        prop_assert_eq!(project_scalar(p, l).unwrap(), p);
        prop_assert!(Lattice::new(l).index_of(p).is_some());
    }

    #[test]
    fn projection_is_monotone(a in -20.0f64..20.0, b in -20.0f64..20.0, l in 0u32..=6) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(project_scalar(lo, l).unwrap() <= project_scalar(hi, l).unwrap());
    }

    #[test]
    fn projection_error_is_below_one_step(x in -20.0f64..20.0, l in 0u32..=6) {
        let bound = (l as f64).exp2();
        let p = project_scalar(x, l).unwrap();
        prop_assert!(p.abs() <= bound);
        if x.abs() <= bound {
            prop_assert!(p <= x && x - p < 1.0 / bound);
        }
    }

    #[test]
    fn projected_paths_stay_on_lattice(xs in prop::collection::vec(-5.0f64..5.0, 1..40), l in 0u32..=4) {
        let lat = Lattice::new(l);
        let path = project_path(&xs, l).unwrap();
        prop_assert_eq!(path.len(), xs.len());
        for v in path {
            prop_assert!(lat.index_of(v).is_some());
        }
    }

    #[test]
    fn kernel_rows_are_distributions(spec in grid()) {
        let k = transition_matrix(&spec);
        for a in 0..k.size {
            let row = k.row(a);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_interior_cells_mirror_under_reflection(spec in grid()) {
        // a floor cell [w, w + s) reflects to (-w - s, -w], the cell one index lower
        let k = transition_matrix(&spec);
        let n = k.size;
        for a in 0..n {
            for c in 1..n - 2 {
                let there = k.prob(a, c);
                let back = k.prob(n - 1 - a, n - 2 - c);
                prop_assert!((there - back).abs() < 1e-13, "a={} c={} {} vs {}", a, c, there, back);
            }
        }
    }

    #[test]
    fn buckets_partition_the_samples(
        (spec, paths) in grid().prop_flat_map(|g| (Just(g), node_paths(g, 60))),
        markov in any::<bool>(),
    ) {
        let mode = if markov { KeyMode::Markov } else { KeyMode::FullPrefix };
        let b = bucket_indexed(&paths, &spec, mode);
        prop_assert_eq!(b.intervals.len(), spec.intervals());
        for (i, level) in b.intervals.iter().enumerate() {
            let mut seen = vec![0usize; paths.len()];
            for (id, members) in level.members.iter().enumerate() {
                prop_assert!(!members.is_empty());
                for &s in members {
                    seen[s] += 1;
                    prop_assert_eq!(level.of_sample[s], id);
                    prop_assert_eq!(level.keys[id].clone(), mfprice_core::noise_tree::TreeKey::new(mode, i, &paths[s]));
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            prop_assert!(level.keys.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn price_metric_is_a_metric(
        (spec, paths) in grid().prop_flat_map(|g| (Just(g), node_paths(g, 30))),
        seeds in (any::<u64>(), any::<u64>(), any::<u64>()),
    ) {
        let mode = KeyMode::default_for(&spec);
        let a = price_on(spec, mode, &paths, seeds.0);
        let b = price_on(spec, mode, &paths, seeds.1);
        let c = price_on(spec, mode, &paths, seeds.2);
        let ab = price_metric(&a, &b).unwrap();
        prop_assert_eq!(price_metric(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(ab, price_metric(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert!(ab <= price_metric(&a, &c).unwrap() + price_metric(&c, &b).unwrap() + 1e-15);
    }

    #[test]
    fn blend_moves_along_the_segment(
        (spec, paths) in grid().prop_flat_map(|g| (Just(g), node_paths(g, 30))),
        rho in 0.0f64..=1.0,
    ) {
        let mode = KeyMode::default_for(&spec);
        let a = price_on(spec, mode, &paths, 1);
        let b = price_on(spec, mode, &paths, 2);
        let mid = a.blend(&b, rho).unwrap();
        let d = price_metric(&a, &b).unwrap();
        prop_assert!((price_metric(&a, &mid).unwrap() - rho * d).abs() <= 1e-12);
        prop_assert_eq!(a.blend(&b, 1.0).unwrap(), b);
    }

    #[test]
    fn path_distance_is_symmetric_and_capped(
        pair in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 2..30),
    ) {
        let grid: Vec<f64> = (0..pair.len()).map(|k| k as f64 / (pair.len() - 1) as f64).collect();
        let (x, y): (Vec<f64>, Vec<f64>) = pair.into_iter().unzip();
        let d = mz_distance(&x, &y, &grid);
        prop_assert_eq!(d, mz_distance(&y, &x, &grid));
        prop_assert!((0.0..=1.0 + 1e-15).contains(&d));
        prop_assert_eq!(mz_distance(&x, &x, &grid), 0.0);
    }

    #[test]
    fn reals_print_round_trip(x in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(fmt_real(x).parse::<f64>().unwrap(), if x == 0.0 { 0.0 } else { x });
    }
}
