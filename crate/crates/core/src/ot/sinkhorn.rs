use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornResult {
    pub plan: Tensor,
    pub iters: usize,
    /// `max_i |T 1 - p|_i`
    pub row_residual: f64,
    /// `max_j |Tᵀ 1 - q|_j`
    pub col_residual: f64,
    pub converged: bool,
}

fn check_marginal(name: &str, m: &[f64], len: usize) -> Result<()> {
    if m.len() != len {
        return Err(Error::Shape {
            op: "sinkhorn",
            lhs: vec![len],
            rhs: vec![m.len()],
        });
    }
    if m.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::Contract(format!("marginal {name} must be strictly positive")));
    }
    let total: f64 = m.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("marginal {name} sums to {total}, not 1")));
    }
    Ok(())
}

pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Entropic optimal transport by alternating scaling in the log domain.
///
/// Returns `T = diag(u) exp(-C / eps) diag(v)` after at most `iters`
/// rounds, stopping early once the row marginal error is within `tol`
/// (the column marginals are exact after every round).
pub fn sinkhorn(c: &Tensor, p: &[f64], q: &[f64], eps: f64, iters: usize, tol: f64) -> Result<SinkhornResult> {
    let (n, m) = (c.rows(), c.cols());
    if c.shape().len() != 2 || n == 0 || m == 0 {
        return Err(Error::Shape {
            op: "sinkhorn",
            lhs: c.shape().to_vec(),
            rhs: vec![p.len(), q.len()],
        });
    }
    check_marginal("p", p, n)?;
    check_marginal("q", q, m)?;
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps_reg must be positive, got {eps}")));
    }
    if iters == 0 {
        return Err(Error::Contract("sinkhorn needs at least one iteration".into()));
    }
    if !c.is_finite() {
        return Err(Error::Numerical("sinkhorn cost matrix has non-finite entries".into()));
    }

    let cd = c.data();
    let lp: Vec<f64> = p.iter().map(|x| x.ln()).collect();
    let lq: Vec<f64> = q.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut buf_m = vec![0.0; m];
    let mut buf_n = vec![0.0; n];
    let mut done = 0;
    let mut converged = false;
    for it in 1..=iters {
        for i in 0..n {
            for j in 0..m {
                buf_m[j] = (g[j] - cd[i * m + j]) / eps;
            }
            f[i] = eps * (lp[i] - log_sum_exp(&buf_m));
        }
        for j in 0..m {
            for i in 0..n {
                buf_n[i] = (f[i] - cd[i * m + j]) / eps;
            }
            g[j] = eps * (lq[j] - log_sum_exp(&buf_n));
        }
        if f.iter().chain(&g).any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "sinkhorn scaling became non-finite at iteration {it}; increase eps_reg (currently {eps})"
            )));
        }
        done = it;
        let mut err: f64 = 0.0;
        for i in 0..n {
            let row: f64 = (0..m).map(|j| ((f[i] + g[j] - cd[i * m + j]) / eps).exp()).sum();
            err = err.max((row - p[i]).abs());
        }
        if err <= tol {
            converged = true;
            break;
        }
    }

    let mut plan = Tensor::zeros(&[n, m]);
    let pd = plan.data_mut();
    for i in 0..n {
        for j in 0..m {
            pd[i * m + j] = ((f[i] + g[j] - cd[i * m + j]) / eps).exp();
        }
    }
    if !plan.is_finite() {
        return Err(Error::Numerical(format!(
            "sinkhorn plan is non-finite; increase eps_reg (currently {eps})"
        )));
    }
    let (row_residual, col_residual) = marginal_residuals(&plan, p, q);
    Ok(SinkhornResult {
        plan,
        iters: done,
        row_residual,
        col_residual,
        converged,
    })
}

pub fn marginal_residuals(plan: &Tensor, p: &[f64], q: &[f64]) -> (f64, f64) {
    let (n, m) = (plan.rows(), plan.cols());
    let mut row: f64 = 0.0;
    for (i, pi) in p.iter().enumerate().take(n) {
        let s: f64 = plan.row_slice(i).iter().sum();
        row = row.max((s - pi).abs());
    }
    let mut col: f64 = 0.0;
    for (j, qj) in q.iter().enumerate().take(m) {
        let s: f64 = (0..n).map(|i| plan.at(i, j)).sum();
        col = col.max((s - qj).abs());
    }
    (row, col)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_cost_gives_product_plan() {
        let c = Tensor::zeros(&[3, 2]);
        let (p, q) = (uniform(3), uniform(2));
        let r = sinkhorn(&c, &p, &q, 0.05, 50, 1e-12).unwrap();
        for v in r.plan.data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn permutation_cost_concentrates_on_diagonal() {
        let c = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let r = sinkhorn(&c, &uniform(2), &uniform(2), 1e-3, 200, 1e-9).unwrap();
        assert!((r.plan.at(0, 0) - 0.5).abs() < 1e-9);
        assert!((r.plan.at(1, 1) - 0.5).abs() < 1e-9);
        let cost: f64 = r.plan.data().iter().zip(c.data()).map(|(t, c)| t * c).sum();
        assert!(cost <= 1e-3);
    }

    #[test]
    fn rejects_bad_marginals_and_eps() {
        let c = Tensor::zeros(&[2, 2]);
        assert!(sinkhorn(&c, &[0.7, 0.7], &uniform(2), 0.1, 10, 1e-6).is_err());
        assert!(sinkhorn(&c, &uniform(2), &uniform(2), 0.0, 10, 1e-6).is_err());
    }
}
