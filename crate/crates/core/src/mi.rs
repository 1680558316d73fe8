//! Contrastive (InfoNCE) estimate of the mutual information between
//! temporal nodes and the global vector pooled from them.

use std::collections::VecDeque;

use log::debug;

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Graph, ParamStore, Tensor, Var};

/// Bilinear score `tᵀ W o`.
pub fn score(t: &[f64], w: &Tensor, o: &[f64]) -> f64 {
    t.iter()
        .enumerate()
        .map(|(i, ti)| ti * w.row_slice(i).iter().zip(o).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// `s_pos - log(exp(s_pos) + sum exp(s_neg))`.
pub fn nce_from_scores(pos: f64, negs: &[f64]) -> f64 {
    let mut all = Vec::with_capacity(negs.len() + 1);
    all.push(pos);
    all.extend_from_slice(negs);
    pos - log_sum_exp(&all)
}

/// Positive pairs `(t, o)` with the negative `t'` candidates of each.
#[derive(Clone, Debug, Default)]
pub struct NceBatch {
    pub positives: Vec<(Vec<f64>, Vec<f64>)>,
    pub negatives: Vec<Vec<Vec<f64>>>,
}

pub fn nce_estimate(batch: &NceBatch, w_phi: &Tensor) -> Result<f64> {
    if batch.positives.is_empty() {
        return Err(Error::Contract("NCE estimate of an empty batch".into()));
    }
    if batch.negatives.len() != batch.positives.len() {
        return Err(Error::Contract("every positive needs its own negative list".into()));
    }
    let mut total = 0.0;
    for ((t, o), negs) in batch.positives.iter().zip(&batch.negatives) {
        if negs.is_empty() {
            return Err(Error::Contract("positive pair without negatives".into()));
        }
        let pos = score(t, w_phi, o);
        let ns: Vec<f64> = negs.iter().map(|n| score(n, w_phi, o)).collect();
        total += nce_from_scores(pos, &ns);
    }
    Ok(total / batch.positives.len() as f64)
}

/// Mean InfoNCE estimate on the tape.
///
/// Scores are `cand W globalsᵀ` (`R x C`). Each positive `(r, c)` is scored
/// against every candidate row for column `c`, itself included.
pub fn nce_graph(g: &mut Graph, cand: Var, w: Var, globals: Var, positives: &[(usize, usize)]) -> Result<Var> {
    if positives.is_empty() {
        return Err(Error::Contract("NCE estimate of an empty batch".into()));
    }
    let cw = g.matmul(cand, w)?;
    let ot = g.transpose(globals)?;
    let scores = g.matmul(cw, ot)?;
    let (r, c) = (g.value(scores).rows(), g.value(scores).cols());
    let mut mask = Tensor::zeros(&[r, c]);
    let mut per_col = Tensor::zeros(&[1, c]);
    for &(i, j) in positives {
        if i >= r || j >= c {
            return Err(Error::Shape {
                op: "nce_graph",
                lhs: vec![r, c],
                rhs: vec![i, j],
            });
        }
        mask.data_mut()[i * c + j] += 1.0;
        per_col.data_mut()[j] += 1.0;
    }
    let mask = g.constant(mask);
    let per_col = g.constant(per_col);
    let picked = g.mul(scores, mask)?;
    let pos = g.sum(picked, None)?;
    let lse = g.log_sum_exp(scores, 0)?;
    let weighted = g.mul(lse, per_col)?;
    let norm = g.sum(weighted, None)?;
    let diff = g.sub(pos, norm)?;
    g.scale(diff, 1.0 / positives.len() as f64)
}

/// Temporal nodes kept from earlier accumulation windows, oldest first.
#[derive(Clone, Debug)]
pub struct NegativeBuffer {
    capacity: usize,
    rows: VecDeque<Vec<f64>>,
}

impl NegativeBuffer {
    pub fn new(capacity: usize) -> Self {
        NegativeBuffer {
            capacity,
            rows: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push_rows(&mut self, t: &Tensor) {
        for i in 0..t.rows() {
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
            }
            if self.capacity > 0 {
                self.rows.push_back(t.row_slice(i).to_vec());
            }
        }
    }

    pub fn to_tensor(&self) -> Option<Tensor> {
        if self.rows.is_empty() {
            None
        } else {
            let rows: Vec<&[f64]> = self.rows.iter().map(|r| r.as_slice()).collect();
            Tensor::from_rows(&rows).ok()
        }
    }
}

pub struct ClLoss {
    pub loss: Var,
    /// Estimated mutual information (mean over pairs), when any pair was scored.
    pub mi: Option<f64>,
    pub pairs: usize,
    pub skipped: usize,
}

/// `-beta` times the mean NCE estimate over all (temporal node, global
/// vector) pairs of one clip.
///
/// `temporal[n]` holds the `M x d` temporal nodes of query `n` and
/// `globals[n]` its `1 x d` global vector. Negatives for a pair are every
/// other temporal node of the clip plus the rows of `buffer`.
pub fn loss_cl(
    g: &mut Graph,
    store: &ParamStore,
    temporal: &[Var],
    globals: &[Var],
    buffer: Option<&Tensor>,
    beta: f64,
) -> Result<ClLoss> {
    if temporal.is_empty() || temporal.len() != globals.len() {
        return Err(Error::Contract("loss_cl needs one global vector per query".into()));
    }
    let m = g.value(temporal[0]).rows();
    let pairs = temporal.len() * m;
    if beta == 0.0 {
        return Ok(ClLoss {
            loss: g.constant(Tensor::scalar(0.0)),
            mi: None,
            pairs,
            skipped: 0,
        });
    }
    let mut parts = temporal.to_vec();
    if let Some(b) = buffer {
        parts.push(g.constant(b.clone()));
    }
    let cand = g.concat(&parts, 0)?;
    if g.value(cand).rows() < 2 {
        debug!("skipping {pairs} contrastive pair(s): no negatives available");
        return Ok(ClLoss {
            loss: g.constant(Tensor::scalar(0.0)),
            mi: None,
            pairs: 0,
            skipped: pairs,
        });
    }
    let positives: Vec<(usize, usize)> = (0..temporal.len())
        .flat_map(|n| (0..m).map(move |i| (n * m + i, n)))
        .collect();
    let o = g.concat(globals, 0)?;
    let w = g.param(store, "disc.w_phi")?;
    let est = nce_graph(g, cand, w, o, &positives)?;
    let mi = g.item(est);
    let loss = g.scale(est, -beta)?;
    Ok(ClLoss {
        loss,
        mi: Some(mi),
        pairs,
        skipped: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_estimate() {
        let v = nce_from_scores(2.0, &[0.0]);
        assert!((v - (2.0 - (2f64.exp() + 1.0).ln())).abs() < 1e-15);
        assert!((v + 0.1269).abs() < 1e-4);
    }

    #[test]
    fn constant_discriminator_gives_minus_log_k() {
        let w = Tensor::zeros(&[2, 2]);
        let batch = NceBatch {
            positives: vec![(vec![1.0, 2.0], vec![0.5, -1.0])],
            negatives: vec![vec![vec![3.0, 1.0], vec![0.0, 1.0], vec![2.0, 2.0]]],
        };
        let v = nce_estimate(&batch, &w).unwrap();
        assert!((v + 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_contract_error() {
        let w = Tensor::zeros(&[2, 2]);
        assert!(matches!(nce_estimate(&NceBatch::default(), &w), Err(Error::Contract(_))));
    }

    #[test]
    fn buffer_keeps_latest_rows() {
        let mut b = NegativeBuffer::new(3);
        b.push_rows(&Tensor::from_rows(&[[1.0], [2.0]]).unwrap());
        b.push_rows(&Tensor::from_rows(&[[3.0], [4.0]]).unwrap());
        assert_eq!(b.to_tensor().unwrap().data(), &[2.0, 3.0, 4.0]);
    }
}
