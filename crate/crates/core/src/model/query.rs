use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Clone, Copy, Debug)]
pub struct QueryStep {
    /// Attention over statement tokens, `l_h x 1`.
    pub r: Var,
    /// The query, `1 x d`.
    pub q: Var,
    /// Scalar halting probability.
    pub h: Var,
}

#[derive(Clone, Debug)]
pub struct QueryOutput {
    /// Projected statement tokens, `l_h x d`.
    pub h_mat: Var,
    pub g_h: Var,
    pub steps: Vec<QueryStep>,
    pub h: Vec<f64>,
    /// Cumulative halting probabilities.
    pub p: Vec<f64>,
    pub n: usize,
    /// Differentiable ponder cost `tau (N + 1 - P^(N-1))`.
    pub l_qe_surrogate: Var,
    /// `tau N`, reported only.
    pub l_qe_literal: f64,
}

pub fn should_stop(p: f64, n: usize, eps: f64, n_max: usize) -> bool {
    p > 1.0 - eps || n >= n_max
}

/// Number of queries the halting rule extracts for a stream of halting
/// probabilities. Returns `h.len()` if the stream ends before the rule fires.
pub fn halting_count(h: &[f64], eps: f64, n_max: usize) -> usize {
    let mut p = 0.0;
    for (i, &hn) in h.iter().enumerate() {
        p += hn;
        if should_stop(p, i + 1, eps, n_max) {
            return i + 1;
        }
    }
    h.len()
}

/// Value of the ponder surrogate for `n` extracted queries.
pub fn ponder_surrogate(h: &[f64], n: usize, tau: f64) -> f64 {
    let p_prev: f64 = h[..n - 1].iter().sum();
    tau * (n as f64 + 1.0 - p_prev)
}

/// Extracts queries from the projected statement `h_mat` (`l_h x d`).
///
/// The first query attends with `q^(0) = g_h`, the statement mean. With
/// `frozen_n` set, exactly that many queries are produced and the halting
/// rule is only evaluated for reporting.
pub fn generate_queries(
    g: &mut Graph,
    store: &ParamStore,
    h_mat: Var,
    cfg: &ModelConfig,
    frozen_n: Option<usize>,
) -> Result<QueryOutput> {
    if g.value(h_mat).rows() == 0 {
        return Err(Error::EmptyInput("statement has no tokens".into()));
    }
    if let Some(n) = frozen_n {
        if n == 0 {
            return Err(Error::Contract("frozen query count must be at least 1".into()));
        }
    }
    let g_h = g.mean(h_mat, Some(0))?;
    let wr = g.param(store, "query.wr")?;
    let wh = g.param(store, "query.wh")?;
    let bh = g.param(store, "query.bh")?;

    let mut steps = Vec::new();
    let mut hs = Vec::new();
    let mut ps = Vec::new();
    let mut q_prev = g_h;
    let mut p = 0.0;
    loop {
        let n = steps.len() + 1;
        let ctx = g.concat(&[g_h, q_prev], 1)?;
        let key = g.matmul(ctx, wr)?;
        let kt = g.transpose(key)?;
        let logits = g.matmul(h_mat, kt)?;
        let r = g.softmax(logits, 0)?;
        let rt = g.transpose(r)?;
        let q = g.matmul(rt, h_mat)?;
        let pre = g.affine(q, wh, bh)?;
        let act = g.sigmoid(pre)?;
        let h = g.mean(act, None)?;
        let hv = g.item(h);
        p += hv;
        steps.push(QueryStep { r, q, h });
        hs.push(hv);
        ps.push(p);
        q_prev = q;
        let done = match frozen_n {
            Some(fixed) => n >= fixed,
            None => should_stop(p, n, cfg.halt_eps, cfg.n_max),
        };
        if done {
            break;
        }
    }

    let n = steps.len();
    let l_qe_surrogate = if n == 1 {
        g.constant(crate::tensor::Tensor::scalar(cfg.tau * 2.0))
    } else {
        let mut acc = steps[0].h;
        for st in &steps[1..n - 1] {
            acc = g.add(acc, st.h)?;
        }
        let neg = g.scale(acc, -cfg.tau)?;
        g.add_scalar(neg, cfg.tau * (n as f64 + 1.0))?
    };
    Ok(QueryOutput {
        h_mat,
        g_h,
        steps,
        h: hs,
        p: ps,
        n,
        l_qe_surrogate,
        l_qe_literal: cfg.tau * n as f64,
    })
}
