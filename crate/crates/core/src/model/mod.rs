//! The three-level reasoning network.
//!
//! Segment level: cross-modal gated message passing ([`segment::ger`]), then
//! intra-modal passing ([`segment::gra`]), then query-guided pooling of each
//! segment into one temporal node. Query level: statement queries extracted
//! one at a time until the halting probability accumulates past `1 - eps`.
//! Temporal level: gated passing among the temporal nodes of each query and
//! attention pooling into one global vector per query; the prediction head
//! reads the mean of those.

pub mod query;
pub mod segment;
pub mod temporal;
pub mod trace;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Header;
use crate::error::{Error, Result};
use crate::graph_builder::ClipGraph;
use crate::tensor::{Graph, ParamStore, Var};

pub use query::{halting_count, QueryOutput};
pub use segment::{GateTrace, SegmentOutput};
pub use temporal::TemporalOutput;
pub use trace::TraceBundle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjacencyNorm {
    /// Row-softmax over the raw dot products.
    Softmax,
    /// Raw dot products used as aggregation weights.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    /// Halting threshold: stop once cumulative halting probability exceeds `1 - halt_eps`.
    pub halt_eps: f64,
    pub n_max: usize,
    pub tau: f64,
    pub adjacency_norm: AdjacencyNorm,
    pub disable_ger: bool,
    pub disable_gra: bool,
    pub disable_temporal: bool,
    /// Always extract exactly this many queries.
    pub fixed_n: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 512,
            halt_eps: 0.1,
            n_max: 5,
            tau: 0.05,
            adjacency_norm: AdjacencyNorm::Softmax,
            disable_ger: false,
            disable_gra: false,
            disable_temporal: false,
            fixed_n: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Validation("d must be positive".into()));
        }
        if !(self.halt_eps > 0.0 && self.halt_eps < 1.0) {
            return Err(Error::Validation(format!("halt_eps {} must lie in (0, 1)", self.halt_eps)));
        }
        if self.n_max == 0 {
            return Err(Error::Validation("n_max must be at least 1".into()));
        }
        if let Some(n) = self.fixed_n {
            if n == 0 || n > self.n_max {
                return Err(Error::Validation(format!("fixed_n {n} must lie in [1, n_max]")));
            }
        }
        if self.tau < 0.0 {
            return Err(Error::Validation("tau must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Name, shape and fan-in of every model parameter, in creation order.
pub fn param_layout(header: &Header, d: usize) -> Vec<(String, Vec<usize>, usize)> {
    let mut out = Vec::new();
    let mut add = |name: &str, shape: &[usize], fan_in: usize| out.push((name.to_string(), shape.to_vec(), fan_in));
    for (m, width) in [("v", header.d_v), ("s", header.d_s), ("h", header.d_h)] {
        add(&format!("proj.{m}.w"), &[width, d], width);
        add(&format!("proj.{m}.b"), &[1, d], width);
    }
    for stage in ["ger", "gra"] {
        for m in ["v", "s"] {
            add(&format!("{stage}.{m}.w"), &[3 * d, d], 3 * d);
            add(&format!("{stage}.{m}.b"), &[1, d], 3 * d);
        }
    }
    add("pool.w2v", &[d, d], d);
    add("pool.w2s", &[d, d], d);
    add("pool.w3", &[3 * d, d], 3 * d);
    add("pool.b3", &[1, d], 3 * d);
    add("query.wr", &[2 * d, d], 2 * d);
    add("query.wh", &[d, d], d);
    add("query.bh", &[1, d], d);
    add("temporal.w", &[2 * d, d], 2 * d);
    add("temporal.b", &[1, d], 2 * d);
    add("temporal.w4", &[d, d], d);
    add("head.w1", &[d, d], d);
    add("head.b1", &[1, d], d);
    add("head.w2", &[d, 1], d);
    add("head.b2", &[1, 1], d);
    add("disc.w_phi", &[d, d], d);
    out
}

/// Fresh parameters drawn uniformly from `±1/sqrt(fan_in)`.
pub fn init_params(header: &Header, d: usize, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, fan_in) in param_layout(header, d) {
        store.init_uniform(&name, &shape, fan_in, &mut rng);
    }
    store
}

/// Values that must be held fixed so that a forward pass is a smooth
/// function of the parameters (used by gradient checks).
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Use exactly this many queries instead of the halting rule.
    pub frozen_n: Option<usize>,
}

pub struct ForwardOutput {
    pub segments: Vec<SegmentOutput>,
    pub queries: QueryOutput,
    pub temporal: Vec<TemporalOutput>,
    pub logit: Var,
    pub prob: f64,
}

impl ForwardOutput {
    pub fn n(&self) -> usize {
        self.queries.n
    }
}

/// `tanh(x W + b)`.
pub(crate) fn project(g: &mut Graph, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let a = g.affine(x, w, b)?;
    g.tanh(a)
}

pub fn forward(
    g: &mut Graph,
    store: &ParamStore,
    clip: &ClipGraph,
    cfg: &ModelConfig,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    if clip.segments.is_empty() {
        return Err(Error::EmptyInput(format!("clip {} has no segments", clip.clip_id)));
    }
    let mut segments = Vec::with_capacity(clip.m());
    for seg in &clip.segments {
        let fv = g.constant(seg.frames.clone());
        let fs = g.constant(seg.tokens.clone());
        let v = project(g, store, fv, "proj.v")?;
        let s = project(g, store, fs, "proj.s")?;
        segments.push(segment::refine(g, store, v, s, cfg)?);
    }

    let stmt = g.constant(clip.statement.clone());
    let h = project(g, store, stmt, "proj.h")?;
    let frozen = opts.frozen_n.or(cfg.fixed_n);
    let queries = query::generate_queries(g, store, h, cfg, frozen)?;

    let mut temporal = Vec::with_capacity(queries.n);
    for qv in &queries.steps {
        temporal.push(temporal::run(g, store, &segments, qv.q, cfg)?);
    }

    let os: Vec<Var> = temporal.iter().map(|t| t.o).collect();
    let logit = global_predict(g, store, &os)?;
    let prob = crate::tensor::sigmoid_scalar(g.item(logit));
    Ok(ForwardOutput {
        segments,
        queries,
        temporal,
        logit,
        prob,
    })
}

/// Mean of the global vectors through an affine-tanh-affine head; returns the
/// `1 x 1` logit.
pub fn global_predict(g: &mut Graph, store: &ParamStore, os: &[Var]) -> Result<Var> {
    if os.is_empty() {
        return Err(Error::EmptyInput("no global vectors to pool".into()));
    }
    let stacked = g.concat(os, 0)?;
    let pooled = g.mean(stacked, Some(0))?;
    let w1 = g.param(store, "head.w1")?;
    let b1 = g.param(store, "head.b1")?;
    let w2 = g.param(store, "head.w2")?;
    let b2 = g.param(store, "head.b2")?;
    let hid = g.affine(pooled, w1, b1)?;
    let hid = g.tanh(hid)?;
    g.affine(hid, w2, b2)
}
