//! Loss assembly, optimization, evaluation, checkpoints and synthetic data.

mod adam;
mod checkpoint;
mod config;
mod loss;
pub mod synthetic;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, RngState, TensorEntry, MAGIC};
pub use config::TrainConfig;
pub use loss::{clip_loss, ClipLoss, Frozen, LossBundle};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Header;
use crate::error::{Error, Result};
use crate::graph_builder::ClipGraph;
use crate::mi::NegativeBuffer;
use crate::model::init_params;
use crate::model::trace::TraceBundle;
use crate::tensor::{Graph, ParamStore, Tensor};

/// One line of the per-epoch metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Validation accuracy when a validation set is given, else training accuracy.
    pub acc: f64,
    pub train_acc: f64,
    pub l_ent: f64,
    pub l_qe_surrogate: f64,
    pub l_qe_literal: f64,
    pub l_cm: f64,
    pub l_cl: f64,
    pub total: f64,
    #[serde(rename = "mean_N")]
    pub mean_n: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub count: usize,
    #[serde(rename = "mean_N")]
    pub mean_n: f64,
    pub losses: LossBundle,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub dims: Header,
    pub params: ParamStore,
    pub adam: Adam,
    buffer: NegativeBuffer,
    epoch: u64,
}

struct ClipStep {
    grads: std::collections::BTreeMap<String, Tensor>,
    bundle: LossBundle,
    correct: bool,
    n: usize,
    nodes: Tensor,
}

impl Trainer {
    pub fn new(dims: Header, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let mut params = init_params(&dims, cfg.d, cfg.seed);
        if let Some(b) = cfg.halt_bias_init {
            let p = params.get_mut("query.bh").expect("halting bias");
            p.value.data_mut().iter_mut().for_each(|v| *v = b);
        }
        Ok(Trainer {
            adam: Adam::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
            buffer: NegativeBuffer::new(cfg.neg_buffer),
            cfg,
            dims,
            params,
            epoch: 0,
        })
    }

    pub fn epochs_done(&self) -> u64 {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            dims: self.dims,
            config: self.cfg.clone(),
            rng: RngState {
                seed: self.cfg.seed,
                epoch: self.epoch,
            },
            params: self.params.clone(),
        }
    }

    /// Clip order for the next epoch.
    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    fn clip_step(&self, clip: &ClipGraph, buffer: Option<&Tensor>) -> Result<ClipStep> {
        let mut g = Graph::new();
        let cl = clip_loss(&mut g, &self.params, clip, &self.cfg, buffer, &Frozen::default())
            .map_err(|e| annotate(e, &clip.clip_id))?;
        let grads = g.backward(cl.total, &self.params)?;
        for (name, t) in &grads {
            if !t.is_finite() {
                return Err(Error::Numerical(format!(
                    "clip {}: non-finite gradient for {name}",
                    clip.clip_id
                )));
            }
        }
        Ok(ClipStep {
            grads,
            correct: (cl.prob() > 0.5) == (clip.label > 0.5),
            n: cl.forward.n(),
            bundle: cl.bundle,
            nodes: cl.temporal_nodes,
        })
    }

    /// Accumulates the mean gradient over `window` and takes one Adam step.
    fn step_window(&mut self, clips: &[ClipGraph], window: &[usize]) -> Result<Vec<ClipStep>> {
        let buffer = self.buffer.to_tensor();
        let steps: Vec<ClipStep> = window
            .par_iter()
            .map(|&i| self.clip_step(&clips[i], buffer.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        self.params.zero_grad();
        let scale = 1.0 / steps.len() as f64;
        for s in &steps {
            self.params.accumulate(&s.grads, scale)?;
        }
        self.adam.step(&mut self.params);
        for s in &steps {
            self.buffer.push_rows(&s.nodes);
        }
        Ok(steps)
    }

    /// One pass over `clips`; returns metrics with `acc` set to the training accuracy.
    pub fn train_epoch(&mut self, clips: &[ClipGraph]) -> Result<EpochMetrics> {
        if clips.is_empty() {
            return Err(Error::EmptyInput("no training clips".into()));
        }
        let order = self.epoch_order(clips.len());
        let mut bundles = Vec::with_capacity(clips.len());
        let mut correct = 0usize;
        let mut n_sum = 0usize;
        for window in order.chunks(self.cfg.effective_batch) {
            for s in self.step_window(clips, window)? {
                correct += s.correct as usize;
                n_sum += s.n;
                bundles.push(s.bundle);
            }
        }
        self.epoch += 1;
        let mean = LossBundle::mean(&bundles);
        let acc = correct as f64 / clips.len() as f64;
        Ok(EpochMetrics {
            epoch: self.epoch as usize,
            acc,
            train_acc: acc,
            l_ent: mean.l_ent,
            l_qe_surrogate: mean.l_qe_surrogate,
            l_qe_literal: mean.l_qe_literal,
            l_cm: mean.l_cm,
            l_cl: mean.l_cl,
            total: mean.total,
            mean_n: n_sum as f64 / clips.len() as f64,
        })
    }

    /// Trains for `cfg.epochs` epochs, calling `on_epoch` after each.
    pub fn run<F>(&mut self, train: &[ClipGraph], val: Option<&[ClipGraph]>, mut on_epoch: F) -> Result<Vec<EpochMetrics>>
    where
        F: FnMut(&EpochMetrics, &Trainer) -> Result<()>,
    {
        let mut out = Vec::new();
        for _ in 0..self.cfg.epochs {
            let mut m = self.train_epoch(train)?;
            if let Some(v) = val.filter(|v| !v.is_empty()) {
                m.acc = evaluate(&self.params, &self.cfg, v)?.accuracy;
            }
            info!(
                "epoch {} acc {:.4} train_acc {:.4} l_ent {:.4} l_cm {:.4} l_cl {:.4} mean_N {:.2}",
                m.epoch, m.acc, m.train_acc, m.l_ent, m.l_cm, m.l_cl, m.mean_n
            );
            on_epoch(&m, self)?;
            out.push(m);
        }
        Ok(out)
    }
}

fn annotate(e: Error, clip_id: &str) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("clip {clip_id}: {msg}")),
        other => other,
    }
}

/// Accuracy (predict 1 iff p > 0.5) and mean losses over `clips`.
pub fn evaluate(params: &ParamStore, cfg: &TrainConfig, clips: &[ClipGraph]) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::EmptyInput("evaluation set is empty".into()));
    }
    let results: Vec<(bool, usize, LossBundle)> = clips
        .par_iter()
        .map(|clip| {
            let mut g = Graph::new();
            let cl = clip_loss(&mut g, params, clip, cfg, None, &Frozen::default())
                .map_err(|e| annotate(e, &clip.clip_id))?;
            Ok(((cl.prob() > 0.5) == (clip.label > 0.5), cl.forward.n(), cl.bundle))
        })
        .collect::<Result<Vec<_>>>()?;
    let correct = results.iter().filter(|r| r.0).count();
    let n_sum: usize = results.iter().map(|r| r.1).sum();
    let bundles: Vec<LossBundle> = results.into_iter().map(|r| r.2).collect();
    Ok(EvalReport {
        accuracy: correct as f64 / clips.len() as f64,
        count: clips.len(),
        mean_n: n_sum as f64 / clips.len() as f64,
        losses: LossBundle::mean(&bundles),
    })
}

/// Full forward trace of one clip, with a transport plan per segment solved
/// under the configured OT settings (also when `alpha` is zero).
pub fn trace_clip(params: &ParamStore, cfg: &TrainConfig, clip: &ClipGraph) -> Result<TraceBundle> {
    let mut g = Graph::new();
    let fwd = crate::model::forward(&mut g, params, clip, &cfg.model(), &Default::default())
        .map_err(|e| annotate(e, &clip.clip_id))?;
    let mut bundle = TraceBundle::from_forward(&g, &clip.clip_id, &fwd);
    let ot_cfg = cfg.ot();
    let alignment = fwd
        .segments
        .iter()
        .map(|s| crate::ot::got_distance(g.value(s.s_hat), g.value(s.v_hat), &ot_cfg).map(|c| c.to_trace()))
        .collect::<Result<Vec<_>>>()?;
    bundle.alignment = Some(alignment);
    Ok(bundle)
}

/// Builds the clip graphs of a dataset, naming the clip on failure.
pub fn build_graphs(clips: &[crate::dataset::ClipRecord]) -> Result<Vec<ClipGraph>> {
    clips
        .par_iter()
        .map(|c| {
            crate::graph_builder::build_clip_graph(c).map_err(|e| match e {
                Error::Validation(m) | Error::EmptyInput(m) if !m.contains(&c.clip_id) => {
                    Error::Validation(format!("clip {}: {m}", c.clip_id))
                }
                other => other,
            })
        })
        .collect()
}
