use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::graph_builder::ClipGraph;
use crate::mi;
use crate::model::{self, ForwardOptions, ForwardOutput};
use crate::ot::{self, Coupling};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// The four loss components of one clip (or their mean over many).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_ent: f64,
    pub l_qe_surrogate: f64,
    /// `tau N`, reported alongside the surrogate but never differentiated.
    pub l_qe_literal: f64,
    pub l_cm: f64,
    pub l_cl: f64,
    pub total: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl LossBundle {
    pub fn new(l_ent: f64, l_qe_surrogate: f64, l_qe_literal: f64, l_cm: f64, l_cl: f64, cfg: &TrainConfig) -> Self {
        LossBundle {
            l_ent,
            l_qe_surrogate,
            l_qe_literal,
            l_cm,
            l_cl,
            total: l_ent + l_qe_surrogate + l_cm + l_cl,
            tau: cfg.tau,
            alpha: cfg.alpha,
            beta: cfg.beta,
            lambda: cfg.lambda,
        }
    }

    /// Component-wise mean; weights are taken from the first bundle.
    pub fn mean(bundles: &[LossBundle]) -> LossBundle {
        let Some(first) = bundles.first() else {
            return LossBundle::default();
        };
        let n = bundles.len() as f64;
        let avg = |f: fn(&LossBundle) -> f64| bundles.iter().map(f).sum::<f64>() / n;
        LossBundle {
            l_ent: avg(|b| b.l_ent),
            l_qe_surrogate: avg(|b| b.l_qe_surrogate),
            l_qe_literal: avg(|b| b.l_qe_literal),
            l_cm: avg(|b| b.l_cm),
            l_cl: avg(|b| b.l_cl),
            total: avg(|b| b.total),
            ..first.clone()
        }
    }
}

/// Discrete choices held fixed so that the loss is smooth in the parameters.
#[derive(Clone, Debug, Default)]
pub struct Frozen {
    pub n: Option<usize>,
    pub plans: Option<Vec<Tensor>>,
}

pub struct ClipLoss {
    pub total: Var,
    pub bundle: LossBundle,
    pub forward: ForwardOutput,
    pub couplings: Vec<Coupling>,
    /// All temporal nodes of the clip stacked (`N*M x d`), for the negative buffer.
    pub temporal_nodes: Tensor,
    pub mi: Option<f64>,
}

impl ClipLoss {
    pub fn prob(&self) -> f64 {
        self.forward.prob
    }

    /// The frozen state reproducing this pass exactly.
    pub fn frozen(&self) -> Frozen {
        Frozen {
            n: Some(self.forward.n()),
            plans: if self.couplings.is_empty() {
                None
            } else {
                Some(self.couplings.iter().map(|c| c.plan.clone()).collect())
            },
        }
    }
}

fn named<T>(component: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numerical(msg) => Error::Numerical(format!("{component}: {msg}")),
        other => other,
    })
}

fn finite(component: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{component} is non-finite ({v})")))
    }
}

/// Forward pass plus all loss terms for one clip, recorded on `g`.
pub fn clip_loss(
    g: &mut Graph,
    store: &ParamStore,
    clip: &ClipGraph,
    cfg: &TrainConfig,
    buffer: Option<&Tensor>,
    frozen: &Frozen,
) -> Result<ClipLoss> {
    let mcfg = cfg.model();
    let opts = ForwardOptions { frozen_n: frozen.n };
    let fwd = named("forward", model::forward(g, store, clip, &mcfg, &opts))?;

    let l_ent = named("L_ent", g.bce_with_logit(fwd.logit, clip.label))?;
    let l_ent = named("L_ent", g.reshape(l_ent, &[]))?;

    let segs: Vec<(Var, Var)> = fwd.segments.iter().map(|s| (s.s_hat, s.v_hat)).collect();
    let (l_cm, couplings) = named("L_cm", ot::loss_cm(g, &segs, &cfg.ot(), frozen.plans.as_deref()))?;

    let ts: Vec<Var> = fwd.temporal.iter().map(|t| t.t).collect();
    let os: Vec<Var> = fwd.temporal.iter().map(|t| t.o).collect();
    let cl = named("L_cl", mi::loss_cl(g, store, &ts, &os, buffer, cfg.beta))?;

    let l_qe = fwd.queries.l_qe_surrogate;
    let sum = g.add(l_ent, l_qe)?;
    let sum = g.add(sum, l_cm)?;
    let total = named("total", g.add(sum, cl.loss))?;

    let bundle = LossBundle::new(
        finite("L_ent", g.item(l_ent))?,
        finite("L_qe", g.item(l_qe))?,
        fwd.queries.l_qe_literal,
        finite("L_cm", g.item(l_cm))?,
        finite("L_cl", g.item(cl.loss))?,
        cfg,
    );
    finite("total", g.item(total))?;

    let mut rows = Vec::new();
    for &t in &ts {
        rows.extend(g.value(t).to_rows());
    }
    let temporal_nodes = Tensor::from_rows(&rows)?;
    Ok(ClipLoss {
        total,
        bundle,
        forward: fwd,
        couplings,
        temporal_nodes,
        mi: cl.mi,
    })
}
