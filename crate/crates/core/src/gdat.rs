//! Graph dual attention: per-step topological attention over neighbors with
//! optional edge updates between rounds, then per-agent temporal attention
//! over the history and future step ranges.

use std::rc::Rc;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, Mlp, ParamId, ParamStore, Tape, Tensor, Var, LEAKY_SLOPE};

/// `softplus⁻¹(1)`, so attention temperatures start at one.
const UNIT_SOFTPLUS: f64 = 0.541_324_854_612_918_1;

/// Which step range a node belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Phase {
    History = 0,
    Future = 1,
}

/// Connectivity of a stacked set of graph steps. Nodes are rows of the
/// attribute matrix; edges point from `src` to `dst` and never cross steps.
#[derive(Clone, Debug)]
pub struct GraphIndex {
    pub n_nodes: usize,
    pub n_agents: usize,
    /// Number of edges between distinct nodes; self edges follow them.
    pub n_real: usize,
    pub dst: Rc<[usize]>,
    pub src: Rc<[usize]>,
    /// Agent of each node.
    pub agent: Vec<usize>,
    pub phase: Vec<Phase>,
    /// Step of each node within its phase, for attention dumps.
    pub step: Vec<usize>,
    /// `agent * 2 + phase`, the temporal softmax groups.
    pub segment: Rc<[usize]>,
}

impl GraphIndex {
    /// `edges` are `(dst, src)` node pairs between distinct nodes; self edges
    /// are appended when `include_self` is set.
    pub fn new(
        n_agents: usize,
        nodes: &[(usize, Phase, usize)],
        edges: &[(usize, usize)],
        include_self: bool,
    ) -> Result<Self> {
        let n_nodes = nodes.len();
        if let Some(&(a, _, _)) = nodes.iter().find(|n| n.0 >= n_agents) {
            return Err(Error::shape("graph_index", format!("agent {a} of {n_agents}")));
        }
        if let Some(&(d, s)) = edges.iter().find(|&&(d, s)| d >= n_nodes || s >= n_nodes || d == s) {
            return Err(Error::shape("graph_index", format!("edge ({d}, {s}) over {n_nodes} nodes")));
        }
        let mut dst: Vec<usize> = edges.iter().map(|e| e.0).collect();
        let mut src: Vec<usize> = edges.iter().map(|e| e.1).collect();
        if include_self {
            dst.extend(0..n_nodes);
            src.extend(0..n_nodes);
        }
        Ok(Self {
            n_nodes,
            n_agents,
            n_real: edges.len(),
            dst: dst.into(),
            src: src.into(),
            agent: nodes.iter().map(|n| n.0).collect(),
            phase: nodes.iter().map(|n| n.1).collect(),
            step: nodes.iter().map(|n| n.2).collect(),
            segment: nodes.iter().map(|n| n.0 * 2 + n.1 as usize).collect(),
        })
    }

    pub fn n_edges(&self) -> usize {
        self.dst.len()
    }

    fn uniform_coefficients(&self) -> Tensor {
        let mut deg = vec![0usize; self.n_nodes];
        for &d in self.dst.iter() {
            deg[d] += 1;
        }
        Tensor::column(self.dst.iter().map(|&d| 1.0 / deg[d] as f64).collect())
    }

    fn uniform_temporal(&self) -> Tensor {
        let mut count = vec![0usize; self.n_agents * 2];
        for &s in self.segment.iter() {
            count[s] += 1;
        }
        Tensor::column(self.segment.iter().map(|&s| 1.0 / count[s] as f64).collect())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GdatDims {
    pub node_dim: usize,
    pub edge_dim: usize,
    pub heads: usize,
    pub rounds: usize,
    pub edge_hidden: usize,
    /// Replace learned coefficients by `1/|N(i)|` and `1/T`.
    pub uniform_attention: bool,
}

#[derive(Clone, Debug)]
struct TopoRound {
    w_n: ParamId,
    lambda: ParamId,
    mu: ParamId,
    merge: Dense,
}

#[derive(Clone, Debug)]
pub struct Gdat {
    pub dims: GdatDims,
    rounds: Vec<TopoRound>,
    edge_updates: Vec<Mlp>,
    temporal_w: ParamId,
    temporal_p: ParamId,
}

/// Attention coefficients recorded during a pass, one column per head.
#[derive(Clone, Debug, Default)]
pub struct Attention {
    /// `[round][head]`, each `[n_edges, 1]`.
    pub topological: Vec<Vec<Var>>,
    /// `[head]`, each `[n_nodes, 1]`.
    pub temporal: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct GdatOutput {
    /// `[n_agents, node_dim]`.
    pub history: Var,
    /// Present when the index has future nodes.
    pub future: Option<Var>,
    /// Node attributes after the last topological round.
    pub nodes: Var,
    pub attention: Attention,
}

impl Gdat {
    pub fn new(store: &mut ParamStore, name: &str, dims: GdatDims, rng: &mut impl Rng) -> Result<Self> {
        let (d, h) = (dims.node_dim, dims.heads);
        if h == 0 || d % h != 0 {
            return Err(Error::Config(format!("{h} attention heads must divide node width {d}")));
        }
        if dims.rounds == 0 {
            return Err(Error::Config("message passing needs at least one round".into()));
        }
        let mut rounds = Vec::with_capacity(dims.rounds);
        for r in 0..dims.rounds {
            let w_n = store.add_weight(format!("{name}.round{r}.w_n"), d, d, rng)?;
            let lambda = store.add(format!("{name}.round{r}.lambda"), Tensor::filled(&[1, h], UNIT_SOFTPLUS))?;
            let mu = store.add(format!("{name}.round{r}.mu"), Tensor::filled(&[1, h], UNIT_SOFTPLUS))?;
            let merge = Dense::new(store, &format!("{name}.round{r}.merge"), h * d, d, Activation::None, rng)?;
            rounds.push(TopoRound { w_n, lambda, mu, merge });
        }
        let edge_updates = (1..dims.rounds)
            .map(|r| {
                Mlp::new(
                    store,
                    &format!("{name}.edge{r}"),
                    &[2 * d + dims.edge_dim, dims.edge_hidden, dims.edge_dim],
                    Activation::LeakyRelu,
                    Activation::LeakyRelu,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let temporal_w = store.add_weight(format!("{name}.temporal.w"), d, h, rng)?;
        let temporal_p = store.add_weight(format!("{name}.temporal.p"), d, d, rng)?;
        Ok(Self {
            dims,
            rounds,
            edge_updates,
            temporal_w,
            temporal_p,
        })
    }

    /// One round of multi-head topological attention. `edges` holds the
    /// attributes of every edge including the zero self edges.
    pub fn topological_round(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        round: usize,
        nodes: Var,
        edges: Var,
        index: &GraphIndex,
    ) -> Result<(Var, Vec<Var>)> {
        let p = &self.rounds[round];
        let n = index.n_nodes;
        let w_n = tape.param(store, p.w_n);
        let projected = tape.matmul(nodes, w_n)?;
        let messages = tape.gather_rows(projected, index.src.clone())?;
        let coefficients: Vec<Var> = if self.dims.uniform_attention {
            let c = tape.input(index.uniform_coefficients());
            vec![c; self.dims.heads]
        } else {
            let vd = tape.gather_rows(nodes, index.dst.clone())?;
            let vs = tape.gather_rows(nodes, index.src.clone())?;
            let diff = tape.sub(vd, vs)?;
            let diff = tape.square(diff);
            let node_sq = tape.sum_cols(diff);
            let edge_sq = tape.square(edges);
            let edge_sq = tape.sum_cols(edge_sq);
            let lambda = tape.param(store, p.lambda);
            let lambda = tape.softplus(lambda);
            let mu = tape.param(store, p.mu);
            let mu = tape.softplus(mu);
            let segments = index.dst.clone();
            (0..self.dims.heads)
                .map(|h| {
                    let l = tape.slice_cols(lambda, h, 1)?;
                    let m = tape.slice_cols(mu, h, 1)?;
                    let a = tape.mul_scalar(node_sq, l)?;
                    let b = tape.mul_scalar(edge_sq, m)?;
                    let s = tape.add(a, b)?;
                    let s = tape.scale(s, -1.0);
                    tape.segment_softmax(s, segments.clone())
                })
                .collect::<Result<_>>()?
        };
        let mut heads = Vec::with_capacity(self.dims.heads);
        for &alpha in &coefficients {
            let m = tape.mul_col(messages, alpha)?;
            let m = tape.leaky_relu(m, LEAKY_SLOPE);
            heads.push(tape.scatter_rows(m, index.dst.clone(), n)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        Ok((p.merge.forward(tape, store, joined)?, coefficients))
    }

    /// New attributes for the edges between distinct nodes from the updated
    /// node attributes at both ends.
    pub fn edge_update(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        round: usize,
        nodes: Var,
        real_edges: Var,
        index: &GraphIndex,
    ) -> Result<Var> {
        let dst: Rc<[usize]> = index.dst[..index.n_real].into();
        let src: Rc<[usize]> = index.src[..index.n_real].into();
        let vd = tape.gather_rows(nodes, dst)?;
        let vs = tape.gather_rows(nodes, src)?;
        let x = tape.concat_cols(&[vd, vs, real_edges])?;
        self.edge_updates[round - 1].forward(tape, store, x)
    }

    /// Per-agent summaries of history and future nodes, `[2·n_agents, d]`
    /// with row `agent·2 + phase`.
    pub fn temporal_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        nodes: Var,
        index: &GraphIndex,
    ) -> Result<(Var, Vec<Var>)> {
        let (d, h) = (self.dims.node_dim, self.dims.heads);
        let width = d / h;
        let coefficients: Vec<Var> = if self.dims.uniform_attention {
            let c = tape.input(index.uniform_temporal());
            vec![c; h]
        } else {
            let w = tape.param(store, self.temporal_w);
            let scores = tape.matmul(nodes, w)?;
            let scores = tape.leaky_relu(scores, LEAKY_SLOPE);
            (0..h)
                .map(|k| {
                    let s = tape.slice_cols(scores, k, 1)?;
                    tape.segment_softmax(s, index.segment.clone())
                })
                .collect::<Result<_>>()?
        };
        let p = tape.param(store, self.temporal_p);
        let mut heads = Vec::with_capacity(h);
        for (k, &beta) in coefficients.iter().enumerate() {
            let pk = tape.slice_cols(p, k * width, width)?;
            let x = tape.matmul(nodes, pk)?;
            let x = tape.mul_col(x, beta)?;
            let x = tape.leaky_relu(x, LEAKY_SLOPE);
            heads.push(tape.scatter_rows(x, index.segment.clone(), index.n_agents * 2)?);
        }
        let joined = if h == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        Ok((joined, coefficients))
    }

    /// Full pass. `real_edges` are `[n_real, edge_dim]` relation embeddings
    /// in the order of `index`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        nodes: Var,
        real_edges: Var,
        index: &GraphIndex,
    ) -> Result<GdatOutput> {
        let (rows, cols) = (tape.value(nodes).rows(), tape.value(nodes).cols());
        if rows != index.n_nodes || cols != self.dims.node_dim {
            return Err(Error::shape(
                "gdat",
                format!("nodes [{rows}x{cols}], expected [{}x{}]", index.n_nodes, self.dims.node_dim),
            ));
        }
        let (er, ec) = (tape.value(real_edges).rows(), tape.value(real_edges).cols());
        if er != index.n_real || ec != self.dims.edge_dim {
            return Err(Error::shape(
                "gdat",
                format!("edges [{er}x{ec}], expected [{}x{}]", index.n_real, self.dims.edge_dim),
            ));
        }
        let self_edges = index.n_edges() - index.n_real;
        let zeros = tape.constant(self_edges, self.dims.edge_dim, 0.0);
        let mut attention = Attention::default();
        let (mut v, mut e) = (nodes, real_edges);
        for r in 0..self.rounds.len() {
            if r > 0 {
                e = self.edge_update(tape, store, r, v, e, index)?;
            }
            let all_edges = if self_edges == 0 {
                e
            } else if index.n_real == 0 {
                zeros
            } else {
                tape.concat_rows(&[e, zeros])?
            };
            let (next, alpha) = self.topological_round(tape, store, r, v, all_edges, index)?;
            attention.topological.push(alpha);
            v = next;
        }
        let (summary, beta) = self.temporal_attention(tape, store, v, index)?;
        attention.temporal = beta;
        let hist: Rc<[usize]> = (0..index.n_agents).map(|a| a * 2).collect();
        let history = tape.gather_rows(summary, hist)?;
        let future = if index.phase.contains(&Phase::Future) {
            let fut: Rc<[usize]> = (0..index.n_agents).map(|a| a * 2 + 1).collect();
            Some(tape.gather_rows(summary, fut)?)
        } else {
            None
        };
        Ok(GdatOutput {
            history,
            future,
            nodes: v,
            attention,
        })
    }
}

/// One record of an attention dump.
#[derive(Clone, Debug, Serialize)]
pub struct AttentionRecord {
    pub agent: usize,
    pub phase: Phase,
    pub step: usize,
    pub head: usize,
    /// `(neighbor agent, coefficient)` for topological records, or a single
    /// `(agent, β)` entry for temporal ones.
    pub coefficients: Vec<(usize, f64)>,
    pub kind: &'static str,
}

/// Flatten recorded coefficients of the last round for external plotting.
pub fn attention_records(tape: &Tape, attention: &Attention, index: &GraphIndex) -> Vec<AttentionRecord> {
    let mut out = Vec::new();
    if let Some(last) = attention.topological.last() {
        for (head, &alpha) in last.iter().enumerate() {
            let a = tape.value(alpha).data();
            let mut per_node: Vec<Vec<(usize, f64)>> = vec![Vec::new(); index.n_nodes];
            for (e, (&d, &s)) in index.dst.iter().zip(index.src.iter()).enumerate() {
                per_node[d].push((index.agent[s], a[e]));
            }
            for (node, mut coefficients) in per_node.into_iter().enumerate() {
                coefficients.sort_by_key(|c| c.0);
                out.push(AttentionRecord {
                    agent: index.agent[node],
                    phase: index.phase[node],
                    step: index.step[node],
                    head,
                    coefficients,
                    kind: "topological",
                });
            }
        }
    }
    for (head, &beta) in attention.temporal.iter().enumerate() {
        let b = tape.value(beta).data();
        for node in 0..index.n_nodes {
            out.push(AttentionRecord {
                agent: index.agent[node],
                phase: index.phase[node],
                step: index.step[node],
                head,
                coefficients: vec![(index.agent[node], b[node])],
                kind: "temporal",
            });
        }
    }
    out
}
