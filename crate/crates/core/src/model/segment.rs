use super::{AdjacencyNorm, ModelConfig};
use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Var};

/// Adjacencies and gates of one message-passing stage.
#[derive(Clone, Copy, Debug)]
pub struct GateTrace {
    /// Aggregation weights for visual receivers (`K x L` for GER, `K x K` for GRA).
    pub adj_v: Var,
    /// Aggregation weights for subtitle receivers (`L x K` for GER, `L x L` for GRA).
    pub adj_s: Var,
    pub gate_v: Var,
    pub gate_s: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct SegmentOutput {
    /// Projected visual nodes, `K x d`.
    pub v: Var,
    /// Projected subtitle nodes, `L x d`.
    pub s: Var,
    /// Visual nodes after GER and GRA.
    pub v_hat: Var,
    pub s_hat: Var,
    pub ger: Option<GateTrace>,
    pub gra: Option<GateTrace>,
}

/// Mean over rows, as a `1 x d` guidance vector.
pub(crate) fn guidance(g: &mut Graph, x: Var) -> Result<Var> {
    g.mean(x, Some(0))
}

/// Normalized adjacency `recv sendᵀ` and the aggregated messages.
pub(crate) fn attend(g: &mut Graph, recv: Var, send: Var, norm: AdjacencyNorm) -> Result<(Var, Var)> {
    let st = g.transpose(send)?;
    let a = g.matmul(recv, st)?;
    let a = match norm {
        AdjacencyNorm::Softmax => g.softmax(a, 1)?,
        AdjacencyNorm::None => a,
    };
    let msg = g.matmul(a, send)?;
    Ok((a, msg))
}

/// `c = sigmoid(input W + b)`, `out = (1 - c) * x + c * msg`.
pub(crate) fn gated_update(g: &mut Graph, x: Var, msg: Var, input: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let pre = g.affine(input, w, b)?;
    let c = g.sigmoid(pre)?;
    let keep = g.one_minus(c)?;
    let a = g.mul(keep, x)?;
    let m = g.mul(c, msg)?;
    Ok((g.add(a, m)?, c))
}

/// Rows `[ga; x_i; gb]` for every row `x_i` of `x`.
pub(crate) fn gate_input(g: &mut Graph, ga: Var, x: Var, gb: Var) -> Result<Var> {
    let n = g.value(x).rows();
    let a = g.broadcast_rows(ga, n)?;
    let b = g.broadcast_rows(gb, n)?;
    g.concat(&[a, x, b], 1)
}

fn stage(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    v: Var,
    s: Var,
    cross: bool,
    norm: AdjacencyNorm,
) -> Result<(Var, Var, GateTrace)> {
    let gv = guidance(g, v)?;
    let gs = guidance(g, s)?;
    let (adj_v, msg_v) = attend(g, v, if cross { s } else { v }, norm)?;
    let (adj_s, msg_s) = attend(g, s, if cross { v } else { s }, norm)?;

    let wv = g.param(store, &format!("{prefix}.v.w"))?;
    let bv = g.param(store, &format!("{prefix}.v.b"))?;
    let in_v = gate_input(g, gv, v, gs)?;
    let (v_new, gate_v) = gated_update(g, v, msg_v, in_v, wv, bv)?;

    let ws = g.param(store, &format!("{prefix}.s.w"))?;
    let bs = g.param(store, &format!("{prefix}.s.b"))?;
    let in_s = gate_input(g, gs, s, gv)?;
    let (s_new, gate_s) = gated_update(g, s, msg_s, in_s, ws, bs)?;

    Ok((
        v_new,
        s_new,
        GateTrace {
            adj_v,
            adj_s,
            gate_v,
            gate_s,
        },
    ))
}

/// Cross-modal gated passing: each visual node gathers subtitle messages and
/// each subtitle node gathers visual messages, both from the pre-update
/// nodes.
pub fn ger(g: &mut Graph, store: &ParamStore, v: Var, s: Var, norm: AdjacencyNorm) -> Result<(Var, Var, GateTrace)> {
    stage(g, store, "ger", v, s, true, norm)
}

/// Intra-modal gated passing with modality-specific weights.
pub fn gra(g: &mut Graph, store: &ParamStore, v: Var, s: Var, norm: AdjacencyNorm) -> Result<(Var, Var, GateTrace)> {
    stage(g, store, "gra", v, s, false, norm)
}

pub fn refine(g: &mut Graph, store: &ParamStore, v: Var, s: Var, cfg: &ModelConfig) -> Result<SegmentOutput> {
    let (mut vh, mut sh) = (v, s);
    let mut ger_trace = None;
    let mut gra_trace = None;
    if !cfg.disable_ger {
        let (a, b, t) = ger(g, store, vh, sh, cfg.adjacency_norm)?;
        (vh, sh, ger_trace) = (a, b, Some(t));
    }
    if !cfg.disable_gra {
        let (a, b, t) = gra(g, store, vh, sh, cfg.adjacency_norm)?;
        (vh, sh, gra_trace) = (a, b, Some(t));
    }
    Ok(SegmentOutput {
        v,
        s,
        v_hat: vh,
        s_hat: sh,
        ger: ger_trace,
        gra: gra_trace,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct PoolOutput {
    pub t: Var,
    /// Attention over visual nodes, `K x 1`.
    pub c_v: Var,
    /// Attention over subtitle nodes, `L x 1`.
    pub c_s: Var,
    /// Fusion gate, `1 x d`.
    pub gamma: Var,
}

/// Query-guided attention pooling of one refined segment into a temporal
/// node. `qv` and `qs` are the query already mapped through the per-modality
/// pooling matrices.
pub fn semantic_pool(
    g: &mut Graph,
    store: &ParamStore,
    seg: &SegmentOutput,
    q: Var,
    qv: Var,
    qs: Var,
) -> Result<PoolOutput> {
    let (v_q, c_v) = attention_pool(g, seg.v_hat, qv)?;
    let (s_q, c_s) = attention_pool(g, seg.s_hat, qs)?;
    let gv = guidance(g, seg.v_hat)?;
    let gs = guidance(g, seg.s_hat)?;
    let input = g.concat(&[gv, q, gs], 1)?;
    let w3 = g.param(store, "pool.w3")?;
    let b3 = g.param(store, "pool.b3")?;
    let (t, gamma) = gated_update(g, v_q, s_q, input, w3, b3)?;
    Ok(PoolOutput { t, c_v, c_s, gamma })
}

/// `softmax(x kᵀ)` over rows of `x`, and the weighted row sum.
pub(crate) fn attention_pool(g: &mut Graph, x: Var, key: Var) -> Result<(Var, Var)> {
    let kt = g.transpose(key)?;
    let logits = g.matmul(x, kt)?;
    let w = g.softmax(logits, 0)?;
    let wt = g.transpose(w)?;
    Ok((g.matmul(wt, x)?, w))
}
