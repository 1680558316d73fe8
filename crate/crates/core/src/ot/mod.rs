//! Fused Wasserstein / Gromov-Wasserstein distance between the subtitle and
//! visual nodes of a segment, and the coherence loss built on it.

mod sinkhorn;

pub use sinkhorn::{marginal_residuals, sinkhorn, uniform, SinkhornResult};

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::trace::AlignmentTrace;
use crate::tensor::{gw_linear_term, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtConfig {
    /// Weight of the node (Wasserstein) cost against the structure term.
    pub lambda: f64,
    /// Loss weight.
    pub alpha: f64,
    pub eps_reg: f64,
    pub sinkhorn_iters: usize,
    pub gw_outer_iters: usize,
    pub tol: f64,
}

impl Default for OtConfig {
    fn default() -> Self {
        OtConfig {
            lambda: 0.5,
            alpha: 0.1,
            eps_reg: 0.05,
            sinkhorn_iters: 200,
            gw_outer_iters: 10,
            tol: 1e-6,
        }
    }
}

impl OtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_reg > 0.0) {
            return Err(Error::Validation("eps_reg must be positive".into()));
        }
        if self.sinkhorn_iters == 0 || self.gw_outer_iters == 0 {
            return Err(Error::Validation("OT iteration caps must be at least 1".into()));
        }
        if self.lambda < 0.0 || self.alpha < 0.0 || !(self.tol > 0.0) {
            return Err(Error::Validation("lambda and alpha must be nonnegative, tol positive".into()));
        }
        Ok(())
    }
}

/// A transport plan with the costs it was solved against.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    /// `n x m`, subtitle rows by visual columns.
    pub plan: Tensor,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub c_node: Tensor,
    pub c_s: Tensor,
    pub c_v: Tensor,
    pub lambda: f64,
    pub distance: f64,
    pub row_residual: f64,
    pub col_residual: f64,
    pub outer_iters: usize,
}

impl Coupling {
    pub fn to_trace(&self) -> AlignmentTrace {
        AlignmentTrace {
            plan: self.plan.to_rows(),
            c_node: self.c_node.to_rows(),
            distance: self.distance,
            row_residual: self.row_residual,
            col_residual: self.col_residual,
        }
    }
}

/// `sum_ij T_ij [lambda C_ij + (L ⊗ T)_ij]`.
pub fn fused_objective(plan: &Tensor, c_node: &Tensor, c_s: &Tensor, c_v: &Tensor, lambda: f64) -> f64 {
    let lin = gw_linear_term(c_s, c_v, plan);
    plan.data()
        .iter()
        .zip(c_node.data())
        .zip(lin.data())
        .map(|((t, c), l)| t * (lambda * c + l))
        .sum()
}

/// Solves the fused problem by repeatedly linearizing the structure term
/// around the current plan and running Sinkhorn on the resulting cost.
pub fn got_distance_from_costs(c_node: &Tensor, c_s: &Tensor, c_v: &Tensor, cfg: &OtConfig) -> Result<Coupling> {
    let (n, m) = (c_node.rows(), c_node.cols());
    if c_s.shape() != [n, n] || c_v.shape() != [m, m] {
        return Err(Error::Shape {
            op: "got_distance",
            lhs: c_s.shape().to_vec(),
            rhs: c_v.shape().to_vec(),
        });
    }
    let (p, q) = (uniform(n), uniform(m));
    let mut plan = Tensor::new(
        vec![n, m],
        p.iter().flat_map(|pi| q.iter().map(move |qj| pi * qj)).collect(),
    )?;
    let mut outer_iters = 0;
    for _ in 0..cfg.gw_outer_iters {
        let lin = gw_linear_term(c_s, c_v, &plan);
        let cost_data = c_node
            .data()
            .iter()
            .zip(lin.data())
            .map(|(c, l)| cfg.lambda * c + l)
            .collect();
        let cost = Tensor::new(vec![n, m], cost_data)?;
        let next = sinkhorn(&cost, &p, &q, cfg.eps_reg, cfg.sinkhorn_iters, cfg.tol)?.plan;
        let delta = next.max_abs_diff(&plan);
        plan = next;
        outer_iters += 1;
        if delta < cfg.tol {
            break;
        }
    }
    let distance = fused_objective(&plan, c_node, c_s, c_v, cfg.lambda);
    let (row_residual, col_residual) = marginal_residuals(&plan, &p, &q);
    Ok(Coupling {
        plan,
        p,
        q,
        c_node: c_node.clone(),
        c_s: c_s.clone(),
        c_v: c_v.clone(),
        lambda: cfg.lambda,
        distance,
        row_residual,
        col_residual,
        outer_iters,
    })
}

/// Cosine cost matrices `(C_node, C_s, C_v)` recorded on `g`.
pub fn cost_matrices(g: &mut Graph, s: Var, v: Var) -> Result<(Var, Var, Var)> {
    let sn = g.row_normalize(s)?;
    let vn = g.row_normalize(v)?;
    let snt = g.transpose(sn)?;
    let vnt = g.transpose(vn)?;
    let sim = g.matmul(sn, vnt)?;
    let c_node = g.one_minus(sim)?;
    let ss = g.matmul(sn, snt)?;
    let c_s = g.one_minus(ss)?;
    let vv = g.matmul(vn, vnt)?;
    let c_v = g.one_minus(vv)?;
    Ok((c_node, c_s, c_v))
}

/// Distance between subtitle nodes `s` (`n x d`) and visual nodes `v`
/// (`m x d`) under cosine costs.
pub fn got_distance(s: &Tensor, v: &Tensor, cfg: &OtConfig) -> Result<Coupling> {
    let mut g = Graph::new();
    let sv = g.constant(s.clone());
    let vv = g.constant(v.clone());
    let (cn, cs, cv) = cost_matrices(&mut g, sv, vv)?;
    got_distance_from_costs(g.value(cn), g.value(cs), g.value(cv), cfg)
}

/// Differentiable distance for a fixed plan: gradients reach the cost
/// matrices but not the plan.
pub fn distance_expr(g: &mut Graph, c_node: Var, c_s: Var, c_v: Var, plan: &Tensor, lambda: f64) -> Result<Var> {
    let t = g.constant(plan.clone());
    let tc = g.mul(t, c_node)?;
    let node = g.sum(tc, None)?;
    let node = g.scale(node, lambda)?;
    let structure = g.gw_energy(c_s, c_v, plan)?;
    g.add(node, structure)
}

/// `alpha` times the mean segment distance between refined subtitle and
/// visual nodes. With `plans` given, those plans are used instead of solving.
pub fn loss_cm(
    g: &mut Graph,
    segments: &[(Var, Var)],
    cfg: &OtConfig,
    plans: Option<&[Tensor]>,
) -> Result<(Var, Vec<Coupling>)> {
    if segments.is_empty() {
        return Err(Error::EmptyInput("no segments for coherence loss".into()));
    }
    if cfg.alpha == 0.0 {
        return Ok((g.constant(Tensor::scalar(0.0)), Vec::new()));
    }
    let mut total: Option<Var> = None;
    let mut couplings = Vec::with_capacity(segments.len());
    for (i, &(s, v)) in segments.iter().enumerate() {
        let (cn, cs, cv) = cost_matrices(g, s, v)?;
        let coupling = match plans {
            Some(plans) => {
                let plan = plans
                    .get(i)
                    .ok_or_else(|| Error::Contract(format!("no frozen plan for segment {i}")))?;
                let (cnv, csv, cvv) = (g.value(cn), g.value(cs), g.value(cv));
                let (p, q) = (uniform(cnv.rows()), uniform(cnv.cols()));
                let (row_residual, col_residual) = marginal_residuals(plan, &p, &q);
                Coupling {
                    plan: plan.clone(),
                    distance: fused_objective(plan, cnv, csv, cvv, cfg.lambda),
                    c_node: cnv.clone(),
                    c_s: csv.clone(),
                    c_v: cvv.clone(),
                    p,
                    q,
                    lambda: cfg.lambda,
                    row_residual,
                    col_residual,
                    outer_iters: 0,
                }
            }
            None => got_distance_from_costs(g.value(cn), g.value(cs), g.value(cv), cfg)?,
        };
        let d = distance_expr(g, cn, cs, cv, &coupling.plan, cfg.lambda)?;
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
        couplings.push(coupling);
    }
    let loss = g.scale(total.expect("nonempty"), cfg.alpha / segments.len() as f64)?;
    Ok((loss, couplings))
}

/// Exact optimal transport value for a square cost with uniform marginals,
/// by enumerating permutation matrices. Limited to `n <= 6`.
pub fn brute_force_wd(c: &Tensor) -> Result<f64> {
    let n = c.rows();
    if c.shape().len() != 2 || c.cols() != n {
        return Err(Error::Shape {
            op: "brute_force_wd",
            lhs: c.shape().to_vec(),
            rhs: vec![n, n],
        });
    }
    if n == 0 {
        return Err(Error::EmptyInput("empty cost matrix".into()));
    }
    if n > 6 {
        return Err(Error::Size(format!("brute force supports n <= 6, got {n}")));
    }
    let best = (0..n)
        .permutations(n)
        .map(|perm| perm.iter().enumerate().map(|(i, &j)| c.at(i, j)).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    Ok(best / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_examples() {
        let c = Tensor::from_rows(&[[0.2, 0.9], [0.8, 0.1]]).unwrap();
        assert!((brute_force_wd(&c).unwrap() - 0.15).abs() < 1e-15);
        let mut z = Tensor::full(&[3, 3], 1.0);
        for i in 0..3 {
            z.data_mut()[i * 3 + i] = 0.0;
        }
        assert_eq!(brute_force_wd(&z).unwrap(), 0.0);
        assert!(matches!(brute_force_wd(&Tensor::zeros(&[7, 7])), Err(Error::Size(_))));
    }

    #[test]
    fn degenerate_structure_matches_brute_force() {
        let c = Tensor::from_rows(&[[0.2, 0.9], [0.8, 0.1]]).unwrap();
        let z = Tensor::zeros(&[2, 2]);
        let cfg = OtConfig {
            lambda: 1.0,
            eps_reg: 1e-3,
            sinkhorn_iters: 2000,
            ..OtConfig::default()
        };
        let cp = got_distance_from_costs(&c, &z, &z, &cfg).unwrap();
        assert!((cp.distance - 0.15).abs() / 0.15 < 0.02, "{}", cp.distance);
    }

    #[test]
    fn alpha_zero_gives_zero_loss() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let cfg = OtConfig {
            alpha: 0.0,
            ..OtConfig::default()
        };
        let (l, _) = loss_cm(&mut g, &[(s, s)], &cfg, None).unwrap();
        assert_eq!(g.item(l), 0.0);
    }
}
