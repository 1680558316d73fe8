use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdjacencyNorm, ModelConfig};
use crate::ot::OtConfig;

/// Every training knob in one flat record, so that a JSON config file maps
/// field for field onto it. Missing fields take their defaults; unknown
/// fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    pub halt_eps: f64,
    pub n_max: usize,
    pub tau: f64,
    pub lr: f64,
    pub effective_batch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub eps_reg: f64,
    pub sinkhorn_iters: usize,
    pub gw_outer_iters: usize,
    pub ot_tol: f64,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Capacity of the cross-window negative buffer for the contrastive loss.
    pub neg_buffer: usize,
    pub adjacency_norm: AdjacencyNorm,
    pub disable_ger: bool,
    pub disable_gra: bool,
    pub disable_temporal: bool,
    pub fixed_n: Option<usize>,
    /// Initial value of the halting bias; `None` keeps the uniform draw.
    pub halt_bias_init: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let ot = OtConfig::default();
        TrainConfig {
            d: m.d,
            halt_eps: m.halt_eps,
            n_max: m.n_max,
            tau: m.tau,
            lr: 1e-4,
            effective_batch: 128,
            alpha: ot.alpha,
            beta: 0.1,
            lambda: ot.lambda,
            eps_reg: ot.eps_reg,
            sinkhorn_iters: ot.sinkhorn_iters,
            gw_outer_iters: ot.gw_outer_iters,
            ot_tol: ot.tol,
            epochs: 30,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            neg_buffer: 256,
            adjacency_norm: m.adjacency_norm,
            disable_ger: m.disable_ger,
            disable_gra: m.disable_gra,
            disable_temporal: m.disable_temporal,
            fixed_n: m.fixed_n,
            halt_bias_init: None,
        }
    }
}

impl TrainConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            halt_eps: self.halt_eps,
            n_max: self.n_max,
            tau: self.tau,
            adjacency_norm: self.adjacency_norm,
            disable_ger: self.disable_ger,
            disable_gra: self.disable_gra,
            disable_temporal: self.disable_temporal,
            fixed_n: self.fixed_n,
        }
    }

    pub fn ot(&self) -> OtConfig {
        OtConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            eps_reg: self.eps_reg,
            sinkhorn_iters: self.sinkhorn_iters,
            gw_outer_iters: self.gw_outer_iters,
            tol: self.ot_tol,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.ot().validate()?;
        if !(self.lr >= 0.0) || self.effective_batch == 0 {
            return Err(Error::Validation("lr must be nonnegative and effective_batch positive".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Validation("beta must be nonnegative".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Validation(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Validation("adam_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(s).map_err(|e| Error::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json_str(&s)
    }
}
