//! Central finite-difference verification of reverse-mode gradients.
//!
//! The numeric side only ever runs forward evaluations, so it exercises
//! none of the backward rules it is checking.

use super::{Graph, NodeId, ParamStore, TensorError};

#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub elements_checked: usize,
}

/// Compares `backward` gradients against central differences for every
/// element of every parameter in `params`.
///
/// `build` must construct the loss from the given parameter values alone
/// (it is re-invoked for each perturbed evaluation). Relative error uses
/// `max(|analytic|, |numeric|, 1)` as the denominator.
pub fn check_graph<F>(
    build: F,
    params: &ParamStore,
    h: f32,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId, TensorError>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let analytic = g.backward(loss)?.into_named();

    let mut report = GradCheckReport::default();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let n_elems = params.get(&name)?.numel();
        let grad = analytic.get(&name);
        for i in 0..n_elems {
            let eval = |delta: f32| -> Result<f32, TensorError> {
                let mut perturbed = params.clone();
                perturbed.get_mut(&name)?.data_mut()[i] += delta;
                let mut g = Graph::new();
                let loss = build(&mut g, &perturbed)?;
                g.value(loss).item()
            };
            let plus = eval(h)? as f64;
            let minus = eval(-h)? as f64;
            let numeric = (plus - minus) / (2.0 * h as f64);
            let a = grad.map(|t| t.data()[i] as f64).unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
            }
            report.elements_checked += 1;
        }
    }
    Ok(report)
}
