//! Central finite-difference checks of graph gradients.

use super::{Graph, ParamId, ParamSet, Result, Tensor, Var};

/// `|analytic − numeric| / (|numeric| + 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Component with the largest error: (analytic, numeric).
    pub worst: (f64, f64),
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport { max_rel_error: 0.0, checked: 0, worst: (0.0, 0.0) }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        if self.checked == 0 || e > self.max_rel_error {
            self.max_rel_error = e;
            self.worst = (analytic, numeric);
        }
        self.checked += 1;
    }
}

/// Compares the graph gradient of `f` at `x` against central differences
/// over every component of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t)?;
        let out = f(&mut g, v)?;
        Ok(g.item(out))
    };
    let mut g = Graph::new();
    let xv = g.leaf(&x.clone().with_requires_grad(true))?;
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut report = GradCheckReport::new();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.values_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.values_mut()[i] = orig;
        report.record(analytic[i], (plus - minus) / (2.0 * eps));
    }
    Ok(report)
}

/// Like [`finite_diff_check`], but perturbs selected parameter components
/// `(param, flat index)` of a whole model loss.
pub fn param_grad_check<F>(
    params: &ParamSet<f64>,
    f: F,
    coords: &[(ParamId, usize)],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let mut with_grads = params.clone();
    with_grads.zero_grads();
    let mut g = Graph::new();
    let out = f(&mut g, &with_grads)?;
    g.backward(out)?;
    g.accumulate_param_grads(&mut with_grads);

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, p)?;
        Ok(g.item(out))
    };
    let mut report = GradCheckReport::new();
    let mut probe = params.clone();
    for &(id, i) in coords {
        let orig = probe.tensor(id).values()[i];
        probe.tensor_mut(id).values_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.tensor_mut(id).values_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.tensor_mut(id).values_mut()[i] = orig;
        report.record(with_grads.tensor(id).grad()[i], (plus - minus) / (2.0 * eps));
    }
    Ok(report)
}
