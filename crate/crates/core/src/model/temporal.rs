use super::segment::{attend, attention_pool, gated_update, guidance, semantic_pool, PoolOutput, SegmentOutput};
use super::ModelConfig;
use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct TemporalOutput {
    /// Per-segment pooling under this query.
    pub pools: Vec<PoolOutput>,
    /// Temporal nodes, `M x d`, one per segment.
    pub t: Var,
    /// Temporal adjacency `M x M` and update gates, absent when disabled.
    pub adj: Option<Var>,
    pub gate: Option<Var>,
    pub t_tilde: Var,
    /// Pooling weights over segments, `M x 1`.
    pub u: Var,
    /// Global vector for this query, `1 x d`.
    pub o: Var,
}

/// Builds the temporal sub-graph for query `q`, refines it and pools it.
pub fn run(
    g: &mut Graph,
    store: &ParamStore,
    segments: &[SegmentOutput],
    q: Var,
    cfg: &ModelConfig,
) -> Result<TemporalOutput> {
    let w2v = g.param(store, "pool.w2v")?;
    let w2s = g.param(store, "pool.w2s")?;
    let qv = g.matmul(q, w2v)?;
    let qs = g.matmul(q, w2s)?;
    let mut pools = Vec::with_capacity(segments.len());
    for seg in segments {
        pools.push(semantic_pool(g, store, seg, q, qv, qs)?);
    }
    let rows: Vec<Var> = pools.iter().map(|p| p.t).collect();
    let t = g.concat(&rows, 0)?;

    let (t_tilde, adj, gate) = if cfg.disable_temporal {
        (t, None, None)
    } else {
        let (tt, adj, gate) = temporal_reason(g, store, t, cfg)?;
        (tt, Some(adj), Some(gate))
    };
    let (o, u) = temporal_pool(g, store, t_tilde, q)?;
    Ok(TemporalOutput {
        pools,
        t,
        adj,
        gate,
        t_tilde,
        u,
        o,
    })
}

/// Gated message passing among temporal nodes; returns the refined nodes,
/// the adjacency and the gates.
pub fn temporal_reason(g: &mut Graph, store: &ParamStore, t: Var, cfg: &ModelConfig) -> Result<(Var, Var, Var)> {
    let gt = guidance(g, t)?;
    let (adj, msg) = attend(g, t, t, cfg.adjacency_norm)?;
    let m = g.value(t).rows();
    let gb = g.broadcast_rows(gt, m)?;
    let input = g.concat(&[gb, t], 1)?;
    let w = g.param(store, "temporal.w")?;
    let b = g.param(store, "temporal.b")?;
    let (out, gate) = gated_update(g, t, msg, input, w, b)?;
    Ok((out, adj, gate))
}

/// Attention pooling of temporal nodes keyed by the query; returns `(o, U)`.
pub fn temporal_pool(g: &mut Graph, store: &ParamStore, t_tilde: Var, q: Var) -> Result<(Var, Var)> {
    let w4 = g.param(store, "temporal.w4")?;
    let key = g.matmul(q, w4)?;
    attention_pool(g, t_tilde, key)
}
