mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tssrgcn::data::{chronological_split, NormStats, WindowLayout};
use tssrgcn::graph::{build_weighted_adjacency, TransitionMatrices};
use tssrgcn::spatial::{spatial_retrieval, spectral_retrieval};
use tssrgcn::temporal::cycle_dilated_deformable_conv;
use tssrgcn::train::Metrics;
use tssrgcn::{GraphOperators, Tape, Tensor};

fn distance_matrix(n: usize, vals: &[f64]) -> Tensor {
    let mut d = Tensor::full(&[n, n], f64::INFINITY);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                d.set2(i, j, vals[i * n + j]);
            }
        }
    }
    d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raising_epsilon_only_removes_edges(vals in prop::collection::vec(1.0f64..5000.0, 16), e1 in 0.0f64..0.99, e2 in 0.0f64..0.99) {
        let d = distance_matrix(4, &vals);
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let w_lo = build_weighted_adjacency(&d, 800.0, lo).unwrap();
        let w_hi = build_weighted_adjacency(&d, 800.0, hi).unwrap();
        for (a, b) in w_lo.data().iter().zip(w_hi.data()) {
            prop_assert!(*b == 0.0 || a == b);
            prop_assert!(*a >= 0.0 && *a <= 1.0);
        }
    }

    #[test]
    fn transition_rows_sum_to_zero_or_one(bits in prop::collection::vec(any::<bool>(), 36)) {
        let mut w0 = Tensor::zeros(&[6, 6]);
        for i in 0..6 {
            for j in 0..6 {
                if i != j && bits[i * 6 + j] {
                    w0.set2(i, j, 1.0);
                }
            }
        }
        let tm = TransitionMatrices::from_w0(&w0).unwrap();
        for m in [&tm.downstream, &tm.upstream] {
            for i in 0..6 {
                let s: f64 = m.row(i).iter().sum();
                prop_assert!(s.abs() < 1e-12 || (s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deformable_conv_is_linear_in_kernel(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = common::random_tensor(&mut r, &[3, 2, 20], 2.0);
        let k1 = common::random_tensor(&mut r, &[2, 4], 1.0);
        let k2 = common::random_tensor(&mut r, &[2, 4], 1.0);
        let o = common::random_tensor(&mut r, &[4], 2.9);
        let mix = k1.zip_map(&k2, |p, q| a * p + b * q).unwrap();
        let lhs = cycle_dilated_deformable_conv(&x, 3, &mix, &o).unwrap();
        let y1 = cycle_dilated_deformable_conv(&x, 3, &k1, &o).unwrap();
        let y2 = cycle_dilated_deformable_conv(&x, 3, &k2, &o).unwrap();
        for i in 0..lhs.numel() {
            prop_assert!((lhs.data()[i] - (a * y1.data()[i] + b * y2.data()[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn spectral_outputs_lie_in_unit_interval(seed in any::<u64>(), theta in -3.0f64..3.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (g, _) = common::random_graph(&mut r, 7, 0.3);
        let ops = GraphOperators::from_graph(&g, 3).unwrap();
        let h = common::random_tensor(&mut r, &[7, 4], 3.0);
        let mut t = Tape::new();
        let hv = t.constant(h);
        let th = t.constant(Tensor::scalar(theta));
        let (vu, vd) = spectral_retrieval(&mut t, &ops, hv, hv, th, th).unwrap();
        for v in t.value(vu).data().iter().chain(t.value(vd).data()) {
            prop_assert!(*v > 0.0 && *v < 1.0);
        }
        // edge representations: [global | difference | weight]
        let (eu, _) = spatial_retrieval(&mut t, &ops, vu, vd).unwrap().unwrap();
        let (e, w) = (t.value(eu).rows(), t.value(eu).cols());
        prop_assert_eq!(e, ops.edge_count());
        prop_assert_eq!(w, 9);
    }

    #[test]
    fn metrics_mae_never_exceeds_rmse(p in prop::collection::vec(-100.0f64..100.0, 1..40), shift in -5.0f64..5.0) {
        let t: Vec<f64> = p.iter().map(|v| v + shift * v.sin()).collect();
        let m = Metrics::compute(&p, &t).unwrap();
        prop_assert!(m.mae <= m.rmse + 1e-12);
        prop_assert!(m.mape_masked_fraction >= 0.0 && m.mape_masked_fraction <= 1.0);
    }

    #[test]
    fn normalization_round_trips(vals in prop::collection::vec(-1e4f64..1e4, 24)) {
        let x = Tensor::new(&[2, 1, 12], vals).unwrap();
        if let Ok(stats) = NormStats::fit(&x, 0..8) {
            let back = stats.denormalize(&stats.normalize(&x).unwrap()).unwrap();
            for (a, b) in back.data().iter().zip(x.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn splits_partition_the_series(len in 1usize..100_000) {
        let s = chronological_split(len);
        prop_assert_eq!(s.train.start, 0);
        prop_assert_eq!(s.train.end, s.val.start);
        prop_assert_eq!(s.val.end, s.test.start);
        prop_assert_eq!(s.test.end, len);
        prop_assert_eq!(s.train.len(), len * 6 / 10);
    }

    #[test]
    fn windows_never_read_their_targets(spd in 4usize..30, days in 1usize..4, slice in 1usize..4, recent in 1usize..6, horizon in 1usize..6) {
        let layout = WindowLayout { steps_per_day: spd, days, slice_len: slice.min(spd), recent_len: recent, horizon };
        let total = layout.warmup() + 4 * horizon + 20;
        let (anchors, _) = layout.anchors(0..total);
        for a in anchors {
            let idx = layout.input_indices(a);
            prop_assert_eq!(idx.len(), layout.window_len());
            prop_assert!(idx.iter().all(|&i| i < a));
            prop_assert!(layout.target_indices(a).end <= total);
        }
    }
}
