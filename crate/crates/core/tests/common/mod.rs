#![allow(dead_code)]
pub mod oracle;

use rand::seq::SliceRandom;
use rand::Rng;
use tssrgcn::graph::{EdgeRecord, GraphOptions, TrafficGraph};
use tssrgcn::Tensor;

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Random directed graph with distinct edge distances, so neighbor
/// rankings never tie.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize, edge_prob: f64) -> (TrafficGraph, Vec<EdgeRecord>) {
    let ids: Vec<String> = (0..n).map(|i| (1000 + i).to_string()).collect();
    let mut distances: Vec<f64> = (0..n * n).map(|i| 300.0 + 7.0 * i as f64).collect();
    distances.shuffle(rng);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a != b && rng.gen_bool(edge_prob) {
                edges.push(EdgeRecord {
                    from_id: ids[a].clone(),
                    to_id: ids[b].clone(),
                    distance: distances[a * n + b],
                });
            }
        }
    }
    if edges.is_empty() {
        edges.push(EdgeRecord {
            from_id: ids[0].clone(),
            to_id: ids[1].clone(),
            distance: 500.0,
        });
    }
    let g = TrafficGraph::from_edges(&ids, &edges, None, &GraphOptions::default()).unwrap();
    (g, edges)
}

pub fn assert_close(a: &Tensor, b: &Tensor, tol: f64, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shapes differ");
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!((x - y).abs() <= tol, "{what}: entry {i} differs: {x} vs {y}");
    }
}
