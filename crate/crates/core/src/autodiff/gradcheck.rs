use super::{Gradients, Graph, ParamId, ParamStore, Tensor};
use crate::error::Result;

/// Magnitude below which a numeric gradient is compared in absolute terms.
pub const GRAD_SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Entries whose analytic gradient is exactly zero while the numeric one is not.
    pub flagged: Vec<(String, usize)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `loss_fn` with central differences
/// `(f(θ+eps) - f(θ-eps)) / (2 eps)` for every entry of every parameter.
pub fn grad_check<F>(loss_fn: F, params: &mut ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Tensor>,
{
    let mut graph = Graph::new();
    let loss = loss_fn(&mut graph, params)?;
    graph.backward(loss)?;
    let mut analytic = Gradients::zeros(params);
    graph.accumulate_param_grads(&mut analytic);
    compare_gradients(&analytic, loss_fn, params, eps)
}

/// The numeric half of [`grad_check`], against caller-supplied gradients.
///
/// Relative error is `|analytic - numeric| / max(|numeric|, GRAD_SCALE_FLOOR)`;
/// an analytic zero facing a numeric value above the floor counts as infinite.
pub fn compare_gradients<F>(
    analytic: &Gradients,
    loss_fn: F,
    params: &mut ParamStore,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Tensor>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let t = loss_fn(&mut g, store)?;
        Ok(g.scalar(t))
    };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        flagged: Vec::new(),
        checked: 0,
    };
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let name = params.get(id).name.clone();
        for k in 0..params.get(id).values.len() {
            let original = params.values(id)[k];
            params.values_mut(id)[k] = original + eps;
            let plus = eval(params);
            params.values_mut(id)[k] = original - eps;
            let minus = eval(params);
            params.values_mut(id)[k] = original;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic.get(id)[k];
            let err = if a == 0.0 && numeric.abs() > GRAD_SCALE_FLOOR {
                report.flagged.push((name.clone(), k));
                f64::INFINITY
            } else {
                (a - numeric).abs() / numeric.abs().max(GRAD_SCALE_FLOOR)
            };
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((name.clone(), k));
            }
        }
    }
    Ok(report)
}
