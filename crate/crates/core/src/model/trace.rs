use serde::{Deserialize, Serialize};

use super::segment::GateTrace;
use super::ForwardOutput;
use crate::tensor::{Graph, Var};

type Matrix = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub adj_v: Matrix,
    pub adj_s: Matrix,
    pub gate_v: Matrix,
    pub gate_s: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentTrace {
    pub k: usize,
    pub l: usize,
    pub ger: Option<StageTrace>,
    pub gra: Option<StageTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryTrace {
    /// Attention over statement tokens.
    pub r: Vec<f64>,
    pub q: Vec<f64>,
    pub h: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolTrace {
    pub c_v: Vec<f64>,
    pub c_s: Vec<f64>,
    pub gamma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalTrace {
    pub pools: Vec<PoolTrace>,
    pub nodes: Matrix,
    pub adjacency: Option<Matrix>,
    pub gates: Option<Matrix>,
    pub u: Vec<f64>,
    pub o: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTrace {
    /// Transport plan, subtitle rows by visual columns.
    pub plan: Matrix,
    pub c_node: Matrix,
    pub distance: f64,
    pub row_residual: f64,
    pub col_residual: f64,
}

/// Every intermediate quantity of one forward pass, as plain data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceBundle {
    pub clip_id: String,
    pub probability: f64,
    pub logit: f64,
    pub n: usize,
    pub l_qe_surrogate: f64,
    pub l_qe_literal: f64,
    pub segments: Vec<SegmentTrace>,
    pub queries: Vec<QueryTrace>,
    pub temporal: Vec<TemporalTrace>,
    pub alignment: Option<Vec<AlignmentTrace>>,
}

fn rows(g: &Graph, v: Var) -> Matrix {
    g.value(v).to_rows()
}

fn flat(g: &Graph, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

fn stage(g: &Graph, t: &Option<GateTrace>) -> Option<StageTrace> {
    t.as_ref().map(|t| StageTrace {
        adj_v: rows(g, t.adj_v),
        adj_s: rows(g, t.adj_s),
        gate_v: rows(g, t.gate_v),
        gate_s: rows(g, t.gate_s),
    })
}

impl TraceBundle {
    pub fn from_forward(g: &Graph, clip_id: &str, out: &ForwardOutput) -> TraceBundle {
        let segments = out
            .segments
            .iter()
            .map(|s| SegmentTrace {
                k: g.value(s.v).rows(),
                l: g.value(s.s).rows(),
                ger: stage(g, &s.ger),
                gra: stage(g, &s.gra),
            })
            .collect();
        let queries = out
            .queries
            .steps
            .iter()
            .enumerate()
            .map(|(i, st)| QueryTrace {
                r: flat(g, st.r),
                q: flat(g, st.q),
                h: out.queries.h[i],
                p: out.queries.p[i],
            })
            .collect();
        let temporal = out
            .temporal
            .iter()
            .map(|t| TemporalTrace {
                pools: t
                    .pools
                    .iter()
                    .map(|p| PoolTrace {
                        c_v: flat(g, p.c_v),
                        c_s: flat(g, p.c_s),
                        gamma: flat(g, p.gamma),
                    })
                    .collect(),
                nodes: rows(g, t.t),
                adjacency: t.adj.map(|a| rows(g, a)),
                gates: t.gate.map(|a| rows(g, a)),
                u: flat(g, t.u),
                o: flat(g, t.o),
            })
            .collect();
        TraceBundle {
            clip_id: clip_id.to_string(),
            probability: out.prob,
            logit: g.item(out.logit),
            n: out.queries.n,
            l_qe_surrogate: g.item(out.queries.l_qe_surrogate),
            l_qe_literal: out.queries.l_qe_literal,
            segments,
            queries,
            temporal,
            alignment: None,
        }
    }
}
