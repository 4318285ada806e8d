mod common;

use common::{assert_close, oracle, random_graph, random_tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tssrgcn::gradcheck::{fd_check, relative_error};
use tssrgcn::graph::{build_weighted_adjacency, distance_sigma, TransitionMatrices};
use tssrgcn::spatial::{aggregate, spatial_retrieval, spectral_retrieval};
use tssrgcn::temporal::{cycle_dilated_conv, cycle_dilated_deformable_conv, max_offset};
use tssrgcn::{GraphOperators, Model, ModelConfig, ParamStore, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for _ in 0..50 {
        let (m, k, n) = (r.gen_range(1..7), r.gen_range(1..7), r.gen_range(1..7));
        let a = random_tensor(&mut r, &[m, k], 2.0);
        let b = random_tensor(&mut r, &[k, n], 2.0);
        assert_close(&a.matmul(&b).unwrap(), &oracle::matmul(&a, &b), 1e-12, "matmul");
    }
}

#[test]
fn dilated_conv_matches_loop_oracle() {
    let mut r = rng(2);
    for _ in 0..100 {
        let t = r.gen_range(4..40);
        let rate = r.gen_range(1..t);
        let max_taps = (t - 1) / rate + 1;
        let ks = r.gen_range(1..=max_taps);
        let (n, f) = (r.gen_range(1..4), r.gen_range(1..3));
        let x = random_tensor(&mut r, &[n, f, t], 3.0);
        let k = random_tensor(&mut r, &[f, ks], 1.0);
        assert_close(
            &cycle_dilated_conv(&x, rate, &k).unwrap(),
            &oracle::dilated_conv(&x, rate, &k),
            1e-12,
            "conv",
        );
    }
}

#[test]
fn zero_offsets_reproduce_plain_conv_bitwise() {
    let mut r = rng(3);
    for _ in 0..100 {
        let t = r.gen_range(4..30);
        let rate = r.gen_range(1..t);
        let ks = r.gen_range(1..=(t - 1) / rate + 1);
        let x = random_tensor(&mut r, &[2, 1, t], 3.0);
        let k = random_tensor(&mut r, &[1, ks], 1.0);
        let plain = cycle_dilated_conv(&x, rate, &k).unwrap();
        let deform = cycle_dilated_deformable_conv(&x, rate, &k, &Tensor::zeros(&[ks])).unwrap();
        assert_eq!(plain.data(), deform.data());
    }
}

#[test]
fn fractional_offsets_match_interpolation_oracle() {
    let mut r = rng(4);
    for _ in 0..100 {
        let t = r.gen_range(4..30);
        let rate = r.gen_range(1..t);
        let ks = r.gen_range(1..=(t - 1) / rate + 1);
        let x = random_tensor(&mut r, &[1, 2, t], 3.0);
        let k = random_tensor(&mut r, &[2, ks], 1.0);
        let b = max_offset(rate);
        let offs: Vec<f64> = (0..ks).map(|_| r.gen_range(-b..b)).collect();
        let got = cycle_dilated_deformable_conv(&x, rate, &k, &Tensor::vector(offs.clone())).unwrap();
        assert_close(&got, &oracle::deformable_conv(&x, rate, &k, &offs), 1e-12, "deform");
    }
}

#[test]
fn offset_gradient_matches_finite_differences() {
    let mut r = rng(5);
    for _ in 0..20 {
        let t = 24;
        let rate = r.gen_range(1..6);
        let ks = r.gen_range(2..=(t - 1) / rate + 1).min(5);
        let x = random_tensor(&mut r, &[3, 1, t], 2.0);
        let mut store = ParamStore::new();
        let k = store.insert("k", random_tensor(&mut r, &[1, ks], 1.0)).unwrap();
        // keep fractional parts away from integer crossings
        let o: Vec<f64> = (0..ks)
            .map(|_| r.gen_range(0.15..0.85) * if r.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let o = store.insert("o", Tensor::vector(o)).unwrap();
        let err = fd_check(
            |tape, p| {
                let xv = tape.constant(x.clone());
                let (kv, ov) = (tape.param(p, k), tape.param(p, o));
                let y = tape.deform_conv(xv, kv, ov, rate)?;
                let sq = tape.square(y);
                Ok(tape.sum(sq))
            },
            &store,
        )
        .unwrap();
        assert!(err < 1e-6, "deform conv fd error {err}");
    }
}

fn check_primitive(name: &str, store: &ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> tssrgcn::Result<tssrgcn::Var>) {
    let err = fd_check(f, store).unwrap();
    assert!(err < 1e-6, "{name}: fd error {err}");
}

#[test]
fn every_primitive_passes_gradient_check() {
    let mut r = rng(6);
    let mut s = ParamStore::new();
    let a = s.insert("a", random_tensor(&mut r, &[3, 4], 1.0)).unwrap();
    let b = s.insert("b", random_tensor(&mut r, &[4, 2], 1.0)).unwrap();
    let c = s.insert("c", random_tensor(&mut r, &[3, 4], 1.0)).unwrap();
    let sc = s.insert("s", Tensor::scalar(0.7)).unwrap();
    let w = random_tensor(&mut r, &[3, 4], 1.0);
    // weighted sum keeps every output entry's gradient distinct
    let weighted = move |tape: &mut Tape, v: tssrgcn::Var| -> tssrgcn::Result<tssrgcn::Var> {
        let shape = tape.value(v).shape().to_vec();
        let wt = Tensor::new(
            &shape,
            (0..shape.iter().product::<usize>()).map(|i| 0.3 + 0.1 * (i % 7) as f64).collect(),
        )?;
        let wv = tape.constant(wt);
        let m = tape.mul(v, wv)?;
        Ok(tape.sum(m))
    };
    check_primitive("matmul", &s, |t, p| {
        let (x, y) = (t.param(p, a), t.param(p, b));
        let z = t.matmul(x, y)?;
        weighted(t, z)
    });
    check_primitive("add", &s, |t, p| {
        let (x, y) = (t.param(p, a), t.param(p, c));
        let z = t.add(x, y)?;
        let z = t.square(z);
        weighted(t, z)
    });
    check_primitive("sub", &s, |t, p| {
        let (x, y) = (t.param(p, a), t.param(p, c));
        let z = t.sub(x, y)?;
        let z = t.square(z);
        weighted(t, z)
    });
    check_primitive("mul", &s, |t, p| {
        let (x, y) = (t.param(p, a), t.param(p, c));
        let z = t.mul(x, y)?;
        weighted(t, z)
    });
    check_primitive("scalar mul", &s, |t, p| {
        let (x, y) = (t.param(p, sc), t.param(p, a));
        let z = t.mul(x, y)?;
        let z = t.square(z);
        weighted(t, z)
    });
    check_primitive("sigmoid", &s, |t, p| {
        let x = t.param(p, a);
        let z = t.sigmoid(x);
        weighted(t, z)
    });
    check_primitive("mean", &s, |t, p| {
        let x = t.param(p, a);
        let x = t.square(x);
        let m0 = t.mean(x, 0)?;
        let m1 = t.mean(x, 1)?;
        let (s0, s1) = (t.sum(m0), t.square(m1));
        let s1 = t.sum(s1);
        t.add(s0, s1)
    });
    check_primitive("concat", &s, |t, p| {
        let (x, y) = (t.param(p, a), t.param(p, c));
        let z = t.concat(&[x, y], 1)?;
        let z = t.square(z);
        let z = t.reshape(z, &[4, 6])?;
        let z = t.mean(z, 1)?;
        let z = t.square(z);
        Ok(t.sum(z))
    });
    check_primitive("constant weights", &s, |t, p| {
        let x = t.param(p, a);
        let wv = t.constant(w.clone());
        let z = t.mul(x, wv)?;
        let z = t.sigmoid(z);
        Ok(t.sum(z))
    });
}

#[test]
fn backward_is_deterministic() {
    let m = Model::new(&ModelConfig::toy(), 3).unwrap();
    let g = tssrgcn::gradcheck::toy_graph().unwrap();
    let ops = GraphOperators::from_graph(&g, 3).unwrap();
    let mut r = rng(7);
    let x = random_tensor(&mut r, &[4, 1, 12], 1.0);
    let y = random_tensor(&mut r, &[4, 3], 1.0);
    let (l1, g1) = m.loss_and_grad(&ops, &x, &y).unwrap();
    let (l2, g2) = m.loss_and_grad(&ops, &x, &y).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
}

#[test]
fn hand_three_node_weighted_adjacency() {
    // 1→2: 100 m, 2→3: 200 m, 1→3: 400 m
    let inf = f64::INFINITY;
    let d = Tensor::from_rows(&[vec![0.0, 100.0, 400.0], vec![inf, 0.0, 200.0], vec![inf, inf, 0.0]]).unwrap();
    let mean = (100.0 + 200.0 + 400.0) / 3.0;
    let sigma = (((100.0f64 - mean).powi(2) + (200.0f64 - mean).powi(2) + (400.0f64 - mean).powi(2)) / 3.0).sqrt();
    assert!((distance_sigma(&d) - sigma).abs() < 1e-12);
    let w = build_weighted_adjacency(&d, sigma, 0.5).unwrap();
    let kernel = |x: f64| (-(x * x) / (sigma * sigma)).exp();
    let expect = |x: f64| if kernel(x) >= 0.5 { kernel(x) } else { 0.0 };
    let want = Tensor::from_rows(&[vec![0.0, expect(100.0), expect(400.0)], vec![0.0, 0.0, expect(200.0)], vec![0.0; 3]]).unwrap();
    assert_close(&w, &want, 1e-12, "W1");
    // 400 m is beyond the threshold at ε = 0.5
    assert_eq!(w.get2(0, 2), 0.0);
    assert!(w.get2(0, 1) > 0.5);
}

#[test]
fn transition_matrices_match_oracle_and_are_stochastic() {
    let mut r = rng(8);
    for _ in 0..20 {
        let (g, _) = random_graph(&mut r, 10, 0.2);
        let tm = TransitionMatrices::from_w0(g.w0()).unwrap();
        let (down, up) = oracle::transitions(&g);
        assert_close(&tm.downstream, &down, 1e-12, "A_d");
        assert_close(&tm.upstream, &up, 1e-12, "A_u");
        for m in [&tm.downstream, &tm.upstream] {
            for i in 0..10 {
                let s: f64 = m.row(i).iter().sum();
                assert!(s.abs() < 1e-12 || (s - 1.0).abs() < 1e-12, "row sum {s}");
            }
        }
    }
}

#[test]
fn neighbor_table_matches_brute_force_scan() {
    let mut r = rng(9);
    for k in 1..5 {
        let (g, _) = random_graph(&mut r, 10, 0.35);
        let ops = GraphOperators::from_graph(&g, k).unwrap();
        let (up, down) = oracle::neighbors(&g, k);
        assert_eq!(ops.neighbors.upstream, up);
        assert_eq!(ops.neighbors.downstream, down);
    }
}

#[test]
fn block_matches_brute_force_on_random_graphs() {
    let mut r = rng(10);
    for trial in 0..20 {
        let (g, _) = random_graph(&mut r, 10, 0.25);
        let k = 1 + trial % 4;
        let ops = GraphOperators::from_graph(&g, k).unwrap();
        let f = 3;
        let h = random_tensor(&mut r, &[10, f], 2.0);
        let theta = (r.gen_range(-1.5..1.5), r.gen_range(-1.5..1.5));
        let psi = (r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
        let mut t = Tape::new();
        let hv = t.constant(h.clone());
        let (tu, td) = (t.constant(Tensor::scalar(theta.0)), t.constant(Tensor::scalar(theta.1)));
        let (pu, pd) = (t.constant(Tensor::scalar(psi.0)), t.constant(Tensor::scalar(psi.1)));
        let (vu, vd) = spectral_retrieval(&mut t, &ops, hv, hv, tu, td).unwrap();
        let reps = spatial_retrieval(&mut t, &ops, vu, vd).unwrap();
        let (au, ad) = aggregate(&mut t, &ops, reps, pu, pd, 2 * f + 1).unwrap();
        let (ou, od) = oracle::graph_block(&g, &h, theta, psi, k);
        assert_close(t.value(au), &ou, 1e-12, "upstream stream");
        assert_close(t.value(ad), &od, 1e-12, "downstream stream");
    }
}

#[test]
fn model_is_permutation_equivariant() {
    let mut r = rng(11);
    let cfg = ModelConfig::toy();
    let m = Model::new(&cfg, 4).unwrap();
    for _ in 0..5 {
        let (g, _) = random_graph(&mut r, 8, 0.3);
        let x = random_tensor(&mut r, &[8, 1, cfg.window], 1.5);
        let mut perm: Vec<usize> = (0..8).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let gp = g.permuted(&perm).unwrap();
        let mut xp = Tensor::zeros(x.shape());
        for (i, &p) in perm.iter().enumerate() {
            xp.data_mut()[i * cfg.window..(i + 1) * cfg.window].copy_from_slice(&x.data()[p * cfg.window..(p + 1) * cfg.window]);
        }
        let y = m.predict(&GraphOperators::from_graph(&g, cfg.k).unwrap(), &x).unwrap();
        let yp = m.predict(&GraphOperators::from_graph(&gp, cfg.k).unwrap(), &xp).unwrap();
        let k = cfg.horizon;
        for (i, &p) in perm.iter().enumerate() {
            for h in 0..k {
                let (a, b) = (yp.data()[i * k + h], y.data()[p * k + h]);
                assert!((a - b).abs() <= 1e-10, "node {i} step {h}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn temporal_block_is_projection_of_conv_outputs() {
    let m = Model::new(&ModelConfig::toy(), 9).unwrap();
    let mut r = rng(12);
    let x = random_tensor(&mut r, &[4, 1, 12], 1.0);
    let tb = &m.arch.temporal;
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let h0 = tb.forward(&mut t, &m.params, xv).unwrap();
    // compose from the free-standing conv and a loop matmul
    let mut cat = vec![Vec::new(); 4];
    for (i, &rate) in tb.rates.rates.iter().enumerate() {
        let y = oracle::dilated_conv(&x, rate, m.params.get(tb.kernels[i]));
        for (node, row) in cat.iter_mut().enumerate() {
            row.push(y.get2(node, 0));
        }
    }
    let cat = Tensor::from_rows(&cat).unwrap();
    let want = oracle::matmul(&cat, m.params.get(tb.omega));
    assert_close(t.value(h0), &want, 1e-12, "H0");
}

#[test]
fn relative_error_definition() {
    assert_eq!(relative_error(1.0, 1.0), 0.0);
    assert!((relative_error(1.0, 3.0) - 0.5).abs() < 1e-15);
    assert_eq!(relative_error(0.0, 1e-10), 1e-10 / 1e-8);
}
