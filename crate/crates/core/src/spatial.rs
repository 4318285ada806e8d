//! Spectral/spatial retrieval graph convolution blocks.
//!
//! One block runs three steps for both traffic directions:
//!
//! 1. spectral retrieval, `V = σ(θ·(A + I)·H)` with the upstream or
//!    downstream transition matrix;
//! 2. spatial retrieval, one representation per directed edge
//!    `[global (F_T) | locality difference (F_T) | static weight (1)]`;
//! 3. aggregation, `ψ_d · mean(reps toward k nearest downstream neighbors)
//!    + ψ_u · mean(reps from k nearest upstream neighbors)`.
//!
//! Edge gathers and neighbor means are expressed as products with constant
//! selection matrices so the tape only needs dense primitives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{NeighborTable, TrafficGraph, TransitionMatrices};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Constant operators derived once from a graph and its neighbor table.
#[derive(Clone, Debug)]
pub struct GraphOperators {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub upstream_prop: Tensor,
    pub downstream_prop: Tensor,
    src_sel: Option<Tensor>,
    dst_sel: Option<Tensor>,
    fwd_diff: Option<Tensor>,
    rev_diff: Option<Tensor>,
    w_fwd: Option<Tensor>,
    w_rev: Option<Tensor>,
    mean_down: Option<Tensor>,
    mean_up: Option<Tensor>,
    pub neighbors: NeighborTable,
}

impl GraphOperators {
    pub fn new(graph: &TrafficGraph, neighbors: NeighborTable) -> Result<Self> {
        let n = graph.n();
        if neighbors.upstream.len() != n || neighbors.downstream.len() != n {
            return Err(Error::dim("graph operators", "neighbor table does not match graph size"));
        }
        let tm = TransitionMatrices::from_w0(graph.w0())?;
        let eye = Tensor::identity(n);
        let mut upstream_prop = tm.upstream.clone();
        upstream_prop.add_assign(&eye)?;
        let mut downstream_prop = tm.downstream.clone();
        downstream_prop.add_assign(&eye)?;

        let edges = graph.edges();
        let e = edges.len();
        let mut ops = Self {
            n,
            edges: edges.clone(),
            upstream_prop,
            downstream_prop,
            src_sel: None,
            dst_sel: None,
            fwd_diff: None,
            rev_diff: None,
            w_fwd: None,
            w_rev: None,
            mean_down: None,
            mean_up: None,
            neighbors,
        };
        if e == 0 {
            return Ok(ops);
        }
        let mut src = Tensor::zeros(&[e, n]);
        let mut dst = Tensor::zeros(&[e, n]);
        let mut w_fwd = Tensor::zeros(&[e, 1]);
        let mut w_rev = Tensor::zeros(&[e, 1]);
        for (k, &(a, b)) in edges.iter().enumerate() {
            src.set2(k, a, 1.0);
            dst.set2(k, b, 1.0);
            let wf = graph.w1().get2(a, b);
            let wr = graph.w1().get2(b, a);
            if wf == 0.0 {
                log::debug!("edge {a}->{b} has no W1 weight; using 0");
            }
            w_fwd.set2(k, 0, wf);
            w_rev.set2(k, 0, wr);
        }
        let fwd_diff = dst.zip_map(&src, |d, s| d - s)?;
        let rev_diff = src.zip_map(&dst, |s, d| s - d)?;

        let edge_index = |a: usize, b: usize| edges.iter().position(|&x| x == (a, b));
        let mut mean_down = Tensor::zeros(&[n, e]);
        let mut mean_up = Tensor::zeros(&[n, e]);
        for s1 in 0..n {
            let down = &ops.neighbors.downstream[s1];
            for &s2 in down {
                let k = edge_index(s1, s2).ok_or_else(|| Error::Contract(format!("{s2} is not downstream of {s1}")))?;
                mean_down.set2(s1, k, 1.0 / down.len() as f64);
            }
            let up = &ops.neighbors.upstream[s1];
            for &s3 in up {
                let k = edge_index(s3, s1).ok_or_else(|| Error::Contract(format!("{s3} is not upstream of {s1}")))?;
                mean_up.set2(s1, k, 1.0 / up.len() as f64);
            }
        }
        ops.src_sel = Some(src);
        ops.dst_sel = Some(dst);
        ops.fwd_diff = Some(fwd_diff);
        ops.rev_diff = Some(rev_diff);
        ops.w_fwd = Some(w_fwd);
        ops.w_rev = Some(w_rev);
        ops.mean_down = Some(mean_down);
        ops.mean_up = Some(mean_up);
        Ok(ops)
    }

    pub fn from_graph(graph: &TrafficGraph, k: usize) -> Result<Self> {
        Self::new(graph, NeighborTable::build(graph, k)?)
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }
}

fn check_rows(tape: &Tape, v: Var, n: usize, what: &'static str) -> Result<()> {
    let s = tape.value(v).shape();
    if s.len() != 2 || s[0] != n {
        return Err(Error::dim(what, format!("expected {n} rows, got {s:?}")));
    }
    Ok(())
}

/// `V_u = σ(θ_u·(A_u+I)·H_u)`, `V_d = σ(θ_d·(A_d+I)·H_d)`.
pub fn spectral_retrieval(tape: &mut Tape, ops: &GraphOperators, h_u: Var, h_d: Var, theta_u: Var, theta_d: Var) -> Result<(Var, Var)> {
    check_rows(tape, h_u, ops.n, "spectral_retrieval")?;
    check_rows(tape, h_d, ops.n, "spectral_retrieval")?;
    let au = tape.constant(ops.upstream_prop.clone());
    let ad = tape.constant(ops.downstream_prop.clone());
    let pu = tape.matmul(au, h_u)?;
    let pu = tape.mul(theta_u, pu)?;
    let pd = tape.matmul(ad, h_d)?;
    let pd = tape.mul(theta_d, pd)?;
    Ok((tape.sigmoid(pu), tape.sigmoid(pd)))
}

/// Edge representations, one row per directed edge `s1→s2` of the graph:
/// `e_u = [V_u[s1], V_u[s2]−V_u[s1], W1[s1][s2]]` and
/// `e_d = [V_d[s2], V_d[s1]−V_d[s2], W1[s2][s1]]`.
///
/// Returns `None` for an edgeless graph.
pub fn spatial_retrieval(tape: &mut Tape, ops: &GraphOperators, v_u: Var, v_d: Var) -> Result<Option<(Var, Var)>> {
    check_rows(tape, v_u, ops.n, "spatial_retrieval")?;
    check_rows(tape, v_d, ops.n, "spatial_retrieval")?;
    let (Some(src), Some(dst), Some(fd), Some(rd), Some(wf), Some(wr)) =
        (&ops.src_sel, &ops.dst_sel, &ops.fwd_diff, &ops.rev_diff, &ops.w_fwd, &ops.w_rev)
    else {
        return Ok(None);
    };
    let src = tape.constant(src.clone());
    let dst = tape.constant(dst.clone());
    let fd = tape.constant(fd.clone());
    let rd = tape.constant(rd.clone());
    let wf = tape.constant(wf.clone());
    let wr = tape.constant(wr.clone());

    let g_u = tape.matmul(src, v_u)?;
    let l_u = tape.matmul(fd, v_u)?;
    let e_u = tape.concat(&[g_u, l_u, wf], 1)?;

    let g_d = tape.matmul(dst, v_d)?;
    let l_d = tape.matmul(rd, v_d)?;
    let e_d = tape.concat(&[g_d, l_d, wr], 1)?;
    Ok(Some((e_u, e_d)))
}

/// Mean-aggregates edge representations back onto nodes for both streams.
/// `edge_reps` is `None` for an edgeless graph, which yields zeros.
pub fn aggregate(
    tape: &mut Tape,
    ops: &GraphOperators,
    edge_reps: Option<(Var, Var)>,
    psi_u: Var,
    psi_d: Var,
    rep_dim: usize,
) -> Result<(Var, Var)> {
    let (Some((e_u, e_d)), Some(md), Some(mu)) = (edge_reps, &ops.mean_down, &ops.mean_up) else {
        let z = Tensor::zeros(&[ops.n, rep_dim]);
        return Ok((tape.constant(z.clone()), tape.constant(z)));
    };
    let md = tape.constant(md.clone());
    let mu = tape.constant(mu.clone());
    let stream = |tape: &mut Tape, e: Var| -> Result<Var> {
        let down = tape.matmul(md, e)?;
        let down = tape.mul(psi_d, down)?;
        let up = tape.matmul(mu, e)?;
        let up = tape.mul(psi_u, up)?;
        tape.add(down, up)
    };
    let h_u = stream(tape, e_u)?;
    let h_d = stream(tape, e_d)?;
    Ok((h_u, h_d))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub lambda: usize,
    pub out_dim: usize,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub theta_u: ParamId,
    pub theta_d: ParamId,
    pub psi_u: ParamId,
    pub psi_d: ParamId,
    /// Re-projection `(2·F_T+1) → F_T` per stream feeding the next block.
    pub reproj: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct SpatialStack {
    pub config: StackConfig,
    pub in_dim: usize,
    pub blocks: Vec<BlockParams>,
    pub reduce_weight: ParamId,
    pub reduce_bias: ParamId,
}

fn uniform_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Result<Tensor> {
    let b = 1.0 / (rows as f64).sqrt();
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.gen_range(-b..=b)).collect())
}

impl SpatialStack {
    pub fn init<R: Rng>(store: &mut ParamStore, config: StackConfig, in_dim: usize, rng: &mut R) -> Result<Self> {
        if config.lambda == 0 {
            return Err(Error::Config("lambda must be at least 1".into()));
        }
        if config.out_dim == 0 || in_dim == 0 {
            return Err(Error::Config("spatial dimensions must be positive".into()));
        }
        let rep = 2 * in_dim + 1;
        let mut blocks = Vec::with_capacity(config.lambda);
        for l in 1..=config.lambda {
            let theta_u = store.insert(format!("block{l}.theta_u"), Tensor::scalar(1.0))?;
            let theta_d = store.insert(format!("block{l}.theta_d"), Tensor::scalar(1.0))?;
            let psi_u = store.insert(format!("block{l}.psi_u"), Tensor::scalar(0.5))?;
            let psi_d = store.insert(format!("block{l}.psi_d"), Tensor::scalar(0.5))?;
            let reproj = if l < config.lambda {
                let u = store.insert(format!("block{l}.reproj_u"), uniform_matrix(rep, in_dim, rng)?)?;
                let d = store.insert(format!("block{l}.reproj_d"), uniform_matrix(rep, in_dim, rng)?)?;
                Some((u, d))
            } else {
                None
            };
            blocks.push(BlockParams {
                theta_u,
                theta_d,
                psi_u,
                psi_d,
                reproj,
            });
        }
        let cat = config.lambda * 2 * rep;
        let reduce_weight = store.insert("reduce.weight", uniform_matrix(cat, config.out_dim, rng)?)?;
        let reduce_bias = store.insert("reduce.bias", Tensor::zeros(&[1, config.out_dim]))?;
        Ok(Self {
            config,
            in_dim,
            blocks,
            reduce_weight,
            reduce_bias,
        })
    }

    pub fn param_count(config: StackConfig, in_dim: usize) -> usize {
        let rep = 2 * in_dim + 1;
        4 * config.lambda + (config.lambda - 1) * 2 * rep * in_dim + config.lambda * 2 * rep * config.out_dim + config.out_dim
    }

    /// Runs all blocks on `H0` (`N×F_T`) and returns the internal
    /// `N×(λ·2·(2F_T+1))` concatenation before the 1×1 reduction.
    pub fn block_outputs(&self, tape: &mut Tape, params: &ParamStore, ops: &GraphOperators, h0: Var) -> Result<Var> {
        let rep = 2 * self.in_dim + 1;
        let (mut h_u, mut h_d) = (h0, h0);
        let mut outs = Vec::with_capacity(2 * self.blocks.len());
        for b in &self.blocks {
            let tu = tape.param(params, b.theta_u);
            let td = tape.param(params, b.theta_d);
            let (v_u, v_d) = spectral_retrieval(tape, ops, h_u, h_d, tu, td)?;
            let reps = spatial_retrieval(tape, ops, v_u, v_d)?;
            let pu = tape.param(params, b.psi_u);
            let pd = tape.param(params, b.psi_d);
            let (a_u, a_d) = aggregate(tape, ops, reps, pu, pd, rep)?;
            outs.push(a_u);
            outs.push(a_d);
            if let Some((ru, rd)) = b.reproj {
                let ru = tape.param(params, ru);
                let rd = tape.param(params, rd);
                h_u = tape.matmul(a_u, ru)?;
                h_d = tape.matmul(a_d, rd)?;
            }
        }
        tape.concat(&outs, 1)
    }

    /// `H0` (`N×F_T`) → `H` (`N×F_S`).
    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, ops: &GraphOperators, h0: Var) -> Result<Var> {
        check_rows(tape, h0, ops.n, "ssrgc_stack")?;
        let cat = self.block_outputs(tape, params, ops, h0)?;
        let w = tape.param(params, self.reduce_weight);
        let b = tape.param(params, self.reduce_bias);
        let ones = tape.constant(Tensor::full(&[ops.n, 1], 1.0));
        let bias = tape.matmul(ones, b)?;
        let y = tape.matmul(cat, w)?;
        tape.add(y, bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EdgeRecord, GraphOptions};

    fn graph(n: usize, edges: &[(usize, usize, f64)]) -> TrafficGraph {
        let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let recs: Vec<EdgeRecord> = edges
            .iter()
            .map(|&(a, b, d)| EdgeRecord {
                from_id: a.to_string(),
                to_id: b.to_string(),
                distance: d,
            })
            .collect();
        TrafficGraph::from_edges(
            &ids,
            &recs,
            None,
            &GraphOptions {
                epsilon: 0.0,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_theta_gives_half() {
        let g = graph(3, &[(0, 1, 1.0), (1, 2, 2.0)]);
        let ops = GraphOperators::from_graph(&g, 3).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(&[3, 2], vec![1.0, -2.0, 3.0, 0.5, 7.0, 1.0]).unwrap());
        let z = tape.constant(Tensor::scalar(0.0));
        let (vu, vd) = spectral_retrieval(&mut tape, &ops, h, h, z, z).unwrap();
        assert!(tape.value(vu).data().iter().all(|&v| v == 0.5));
        assert!(tape.value(vd).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn edgeless_graph_is_plain_sigmoid() {
        let g = graph(2, &[]);
        let ops = GraphOperators::from_graph(&g, 3).unwrap();
        let mut tape = Tape::new();
        let hv = Tensor::new(&[2, 1], vec![0.3, -1.0]).unwrap();
        let h = tape.constant(hv.clone());
        let one = tape.constant(Tensor::scalar(1.0));
        let (vu, _) = spectral_retrieval(&mut tape, &ops, h, h, one, one).unwrap();
        assert_eq!(tape.value(vu), &hv.map(crate::autodiff::sigmoid));
        assert!(spatial_retrieval(&mut tape, &ops, vu, vu).unwrap().is_none());
    }

    #[test]
    fn edge_representation_layout() {
        let mut w1 = Tensor::zeros(&[2, 2]);
        w1.set2(0, 1, 0.7);
        let w0 = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let g = TrafficGraph::from_matrices(vec!["a".into(), "b".into()], w0, w1, Tensor::full(&[2, 2], 1.0)).unwrap();
        let ops = GraphOperators::from_graph(&g, 3).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0]]).unwrap());
        let (eu, ed) = spatial_retrieval(&mut tape, &ops, v, v).unwrap().unwrap();
        assert_eq!(tape.value(eu).data(), &[1.0, 2.0, 2.0, 3.0, 0.7]);
        assert_eq!(tape.value(ed).data(), &[3.0, 5.0, -2.0, -3.0, 0.0]);
    }

    #[test]
    fn singleton_neighbors_sum_with_unit_psi() {
        // 2 -> 0 -> 1
        let g = graph(3, &[(0, 1, 1.0), (2, 0, 3.0)]);
        let ops = GraphOperators::from_graph(&g, 3).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_rows(&[vec![1.0], vec![4.0], vec![-2.0]]).unwrap());
        let reps = spatial_retrieval(&mut tape, &ops, v, v).unwrap();
        let one = tape.constant(Tensor::scalar(1.0));
        let (hu, _) = aggregate(&mut tape, &ops, reps, one, one, 3).unwrap();
        let w = g.w1();
        // e_u(0→1) + e_u(2→0)
        let expect = [1.0 + -2.0, 3.0 + 3.0, w.get2(0, 1) + w.get2(2, 0)];
        assert_eq!(tape.value(hu).row(0), &expect);
    }

    #[test]
    fn isolated_node_aggregates_to_zero() {
        let g = graph(3, &[(0, 1, 1.0), (1, 0, 2.0)]);
        let ops = GraphOperators::from_graph(&g, 3).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::full(&[3, 2], 0.25));
        let reps = spatial_retrieval(&mut tape, &ops, v, v).unwrap();
        let one = tape.constant(Tensor::scalar(1.0));
        let (hu, hd) = aggregate(&mut tape, &ops, reps, one, one, 5).unwrap();
        assert!(tape.value(hu).row(2).iter().all(|&x| x == 0.0));
        assert!(tape.value(hd).row(2).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_psi_gives_zero_output() {
        let g = graph(4, &[(0, 1, 1.0), (1, 2, 2.0), (2, 3, 1.5), (3, 0, 0.5)]);
        let ops = GraphOperators::from_graph(&g, 2).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(&[4, 1], vec![0.1, 0.9, 0.4, 0.6]).unwrap());
        let reps = spatial_retrieval(&mut tape, &ops, v, v).unwrap();
        let z = tape.constant(Tensor::scalar(0.0));
        let (hu, hd) = aggregate(&mut tape, &ops, reps, z, z, 3).unwrap();
        assert!(tape.value(hu).data().iter().all(|&x| x == 0.0));
        assert!(tape.value(hd).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lambda_zero_rejected() {
        let mut store = ParamStore::new();
        let r = SpatialStack::init(&mut store, StackConfig { lambda: 0, out_dim: 4 }, 4, &mut rand::thread_rng());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn param_count_formula() {
        let mut store = ParamStore::new();
        let cfg = StackConfig { lambda: 3, out_dim: 5 };
        SpatialStack::init(&mut store, cfg, 4, &mut rand::thread_rng()).unwrap();
        assert_eq!(store.scalar_count(), SpatialStack::param_count(cfg, 4));
    }
}
