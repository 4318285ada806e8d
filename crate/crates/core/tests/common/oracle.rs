//! Independent loop-based reference implementations.
#![allow(dead_code)]

use tssrgcn::graph::TrafficGraph;
use tssrgcn::Tensor;

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

/// `out[n][f] = Σ_p kernel[f][p] · x[n][f][T − M·p]` with 1-based time.
pub fn dilated_conv(x: &Tensor, rate: usize, kernel: &Tensor) -> Tensor {
    let (n, f, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ks = kernel.shape()[1];
    let mut out = Tensor::zeros(&[n, f]);
    for node in 0..n {
        for feat in 0..f {
            let mut s = 0.0;
            for p in 0..ks {
                let time_1based = t - rate * p;
                s += kernel.data()[feat * ks + p] * x.data()[(node * f + feat) * t + time_1based - 1];
            }
            out.set2(node, feat, s);
        }
    }
    out
}

/// Piecewise-linear interpolation of a 1-based series, held constant
/// outside `[1, T]`.
pub fn interpolate(series: &[f64], pos: f64) -> f64 {
    let t = series.len() as f64;
    if pos <= 1.0 {
        return series[0];
    }
    if pos >= t {
        return series[series.len() - 1];
    }
    let i = pos.floor();
    let a = pos - i;
    let i = i as usize;
    (1.0 - a) * series[i - 1] + a * series[i]
}

pub fn deformable_conv(x: &Tensor, rate: usize, kernel: &Tensor, offsets: &[f64]) -> Tensor {
    let (n, f, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ks = kernel.shape()[1];
    let mut out = Tensor::zeros(&[n, f]);
    for node in 0..n {
        for feat in 0..f {
            let s = &x.data()[(node * f + feat) * t..(node * f + feat + 1) * t];
            let mut acc = 0.0;
            for p in 0..ks {
                let pos = t as f64 - (rate * p) as f64 + offsets[p];
                acc += kernel.data()[feat * ks + p] * interpolate(s, pos);
            }
            out.set2(node, feat, acc);
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Neighbors by repeated best-candidate selection: weight descending, then
/// distance ascending, then index ascending.
pub fn neighbors(graph: &TrafficGraph, k: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let n = graph.n();
    let (w0, w1, d) = (graph.w0(), graph.w1(), graph.distances());
    let pick = |mut cands: Vec<(usize, f64, f64)>| {
        let mut chosen = Vec::new();
        while chosen.len() < k && !cands.is_empty() {
            let mut best = 0;
            for i in 1..cands.len() {
                let (c, b) = (cands[i], cands[best]);
                let better = c.1 > b.1 || (c.1 == b.1 && (c.2 < b.2 || (c.2 == b.2 && c.0 < b.0)));
                if better {
                    best = i;
                }
            }
            chosen.push(cands.remove(best).0);
        }
        chosen
    };
    let mut up = Vec::new();
    let mut down = Vec::new();
    for i in 0..n {
        let mut dc = Vec::new();
        let mut uc = Vec::new();
        for j in 0..n {
            if w0.get2(i, j) == 1.0 {
                dc.push((j, w1.get2(i, j), d.get2(i, j)));
            }
            if w0.get2(j, i) == 1.0 {
                uc.push((j, w1.get2(j, i), d.get2(j, i)));
            }
        }
        down.push(pick(dc));
        up.push(pick(uc));
    }
    (up, down)
}

/// Row-normalized `W0` (downstream) and `W0ᵀ` (upstream).
pub fn transitions(graph: &TrafficGraph) -> (Tensor, Tensor) {
    let n = graph.n();
    let w0 = graph.w0();
    let mut down = Tensor::zeros(&[n, n]);
    let mut up = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let out_deg: f64 = (0..n).map(|j| w0.get2(i, j)).sum();
        let in_deg: f64 = (0..n).map(|j| w0.get2(j, i)).sum();
        for j in 0..n {
            if out_deg > 0.0 {
                down.set2(i, j, w0.get2(i, j) / out_deg);
            }
            if in_deg > 0.0 {
                up.set2(i, j, w0.get2(j, i) / in_deg);
            }
        }
    }
    (down, up)
}

/// One graph block (retrieval plus aggregation) evaluated node by node.
/// Returns the upstream- and downstream-stream node embeddings.
pub fn graph_block(graph: &TrafficGraph, h: &Tensor, theta: (f64, f64), psi: (f64, f64), k: usize) -> (Tensor, Tensor) {
    let n = graph.n();
    let f = h.cols();
    let (down_t, up_t) = transitions(graph);
    let propagate = |a: &Tensor, theta: f64| {
        let mut v = Tensor::zeros(&[n, f]);
        for i in 0..n {
            for c in 0..f {
                let mut s = h.get2(i, c);
                for j in 0..n {
                    s += a.get2(i, j) * h.get2(j, c);
                }
                v.set2(i, c, sigmoid(theta * s));
            }
        }
        v
    };
    let v_u = propagate(&up_t, theta.0);
    let v_d = propagate(&down_t, theta.1);
    let w1 = graph.w1();
    // representation of edge a→b for each stream
    let rep_u = |a: usize, b: usize| -> Vec<f64> {
        let mut r: Vec<f64> = (0..f).map(|c| v_u.get2(a, c)).collect();
        r.extend((0..f).map(|c| v_u.get2(b, c) - v_u.get2(a, c)));
        r.push(w1.get2(a, b));
        r
    };
    let rep_d = |a: usize, b: usize| -> Vec<f64> {
        let mut r: Vec<f64> = (0..f).map(|c| v_d.get2(b, c)).collect();
        r.extend((0..f).map(|c| v_d.get2(a, c) - v_d.get2(b, c)));
        r.push(w1.get2(b, a));
        r
    };
    let (up_n, down_n) = neighbors(graph, k);
    let width = 2 * f + 1;
    let mut out_u = Tensor::zeros(&[n, width]);
    let mut out_d = Tensor::zeros(&[n, width]);
    for s1 in 0..n {
        for (out, rep) in [(&mut out_u, &rep_u as &dyn Fn(usize, usize) -> Vec<f64>), (&mut out_d, &rep_d)] {
            let mut acc = vec![0.0; width];
            if !down_n[s1].is_empty() {
                for &s2 in &down_n[s1] {
                    for (c, v) in rep(s1, s2).into_iter().enumerate() {
                        acc[c] += psi.1 * v / down_n[s1].len() as f64;
                    }
                }
            }
            if !up_n[s1].is_empty() {
                for &s3 in &up_n[s1] {
                    for (c, v) in rep(s3, s1).into_iter().enumerate() {
                        acc[c] += psi.0 * v / up_n[s1].len() as f64;
                    }
                }
            }
            for (c, v) in acc.into_iter().enumerate() {
                out.set2(s1, c, v);
            }
        }
    }
    (out_u, out_d)
}

/// Linear interpolation over gaps with nearest-value fill at the edges.
pub fn fill_gaps(values: &[Option<f64>]) -> Vec<f64> {
    let known: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_some()).collect();
    (0..values.len())
        .map(|i| {
            if let Some(v) = values[i] {
                return v;
            }
            let before = known.iter().rev().find(|&&j| j < i);
            let after = known.iter().find(|&&j| j > i);
            match (before, after) {
                (Some(&a), Some(&b)) => {
                    let (va, vb) = (values[a].unwrap(), values[b].unwrap());
                    va + (vb - va) * (i - a) as f64 / (b - a) as f64
                }
                (Some(&a), None) => values[a].unwrap(),
                (None, Some(&b)) => values[b].unwrap(),
                (None, None) => f64::NAN,
            }
        })
        .collect()
}
