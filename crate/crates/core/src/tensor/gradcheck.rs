use super::{Graph, ParamStore, Var};
use crate::error::Result;

/// Denominator floor for relative errors, so coordinates whose true gradient
/// is zero are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the coordinate with the largest
    /// relative error.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

/// Compares tape gradients against central differences for every coordinate
/// of every parameter in `store`.
///
/// `loss` builds a scalar on a fresh graph each call and must be
/// deterministic: any discrete decision it makes has to be frozen by the
/// caller.
pub fn grad_check<F>(store: &ParamStore, step: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    let analytic = g.backward(l, store)?;
    drop(g);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, s)?;
        Ok(g.item(l))
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (name, grad) in &analytic {
        for idx in 0..grad.numel() {
            let orig = store.value(name)?.data()[idx];
            work.get_mut(name).expect("param").value.data_mut()[idx] = orig + step;
            let up = eval(&work)?;
            work.get_mut(name).expect("param").value.data_mut()[idx] = orig - step;
            let down = eval(&work)?;
            work.get_mut(name).expect("param").value.data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[idx];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), idx));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn detects_agreement_on_smooth_loss() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::from_rows(&[[0.4, -0.7], [1.1, 0.2]]).unwrap());
        store.insert("b", Tensor::row(&[0.3, -0.5]));
        let report = grad_check(&store, 1e-5, |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let h = g.matmul(b, a)?;
            let h = g.tanh(h)?;
            let p = g.softmax(h, 1)?;
            let l = g.ln(p)?;
            g.sum(l, None)
        })
        .unwrap();
        assert_eq!(report.checked, 6);
        assert!(report.passes(1e-6), "{report:?}");
    }
}
