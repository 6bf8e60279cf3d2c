//! Central-difference verification of analytic gradients.

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;

/// Per-parameter outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    /// False when two evaluations at the same point disagreed; the report is then unusable.
    pub deterministic: bool,
    pub loss: f64,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.deterministic && self.max_rel_error() < tol
    }
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares backprop gradients of `loss_fn` with central differences for every
/// entry of the parameters in `ids`.
pub fn grad_check<F>(params: &mut ParamStore, ids: &[ParamId], eps: f64, loss_fn: F) -> Result<GradReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let l = loss_fn(&mut g)?;
        Ok(g.scalar(l))
    };

    let (loss, analytic) = {
        let mut g = Graph::new(params);
        let l = loss_fn(&mut g)?;
        (g.scalar(l), g.backward(l)?)
    };
    let deterministic = eval(params)?.to_bits() == loss.to_bits();

    let mut report = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = params.get(id).len();
        let grad = analytic.get(id).map(|t| t.data().to_vec());
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(params)?;
            params.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(params)?;
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.as_ref().map_or(0.0, |g| g[i]);
            worst = worst.max(relative_error(a, numeric));
        }
        report.push(ParamCheck {
            name: params.name(id).to_string(),
            entries: n,
            max_rel_error: worst,
        });
    }
    Ok(GradReport {
        params: report,
        deterministic,
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    #[test]
    fn linear_model_is_exact() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::scalar(1.7));
        let report = grad_check(&mut s, &[w], 1e-5, |g| {
            let w = g.param(w);
            let x = g.constant(Tensor::scalar(2.5));
            g.mul(w, x)
        })
        .unwrap();
        assert!(report.deterministic);
        assert!(report.max_rel_error() < 1e-10, "{report:?}");
    }

    #[test]
    fn nonlinear_composite_passes() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::from_rows(&[vec![0.3, -0.2], vec![0.5, 0.1]]).unwrap());
        let b = s.add("b", Tensor::row(vec![0.7, -0.4]));
        let report = grad_check(&mut s, &[a, b], 1e-5, |g| {
            let (a, b) = (g.param(a), g.param(b));
            let h = g.matmul(b, a)?;
            let t = g.tanh(h);
            let sm = g.softmax_rows(t)?;
            let ln = g.layer_norm(sm, b, b, 1e-5)?;
            Ok(g.sum_sq(ln))
        })
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }
}
