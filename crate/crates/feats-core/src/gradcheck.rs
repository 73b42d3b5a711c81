//! Central finite-difference gradient verification.
//!
//! The checker only consumes loss *values* from the forward pass, so it is
//! independent of the backward implementation it validates. Relative error
//! uses `|g - fd| / max(|g|, |fd|)`; when both magnitudes fall below the
//! denominator floor the pair is treated as matching zeros.

use crate::error::Result;
use crate::graph::{Graph, NodeId, ParamSet};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Compare analytic gradients of `build`'s scalar loss against central
/// finite differences over every scalar parameter.
pub fn check_gradients<F>(params: &mut ParamSet, build: F, h: f64, denom_floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(Graph, NodeId)>,
{
    params.zero_grads();
    let (graph, loss) = build(params)?;
    graph.backward(loss, params)?;
    let analytic: Vec<Vec<f64>> = params
        .ids()
        .map(|id| params.grad(id).data().to_vec())
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
    };

    let ids: Vec<_> = params.ids().collect();
    for (pi, id) in ids.iter().enumerate() {
        for slot in 0..params.value(*id).len() {
            let original = params.value(*id).data()[slot];

            params.value_mut(*id).data_mut()[slot] = original + h;
            let (g_plus, l_plus) = build(params)?;
            let plus = g_plus.value(l_plus).item()?;

            params.value_mut(*id).data_mut()[slot] = original - h;
            let (g_minus, l_minus) = build(params)?;
            let minus = g_minus.value(l_minus).item()?;

            params.value_mut(*id).data_mut()[slot] = original;

            let fd = (plus - minus) / (2.0 * h);
            let g = analytic[pi][slot];
            let denom = g.abs().max(fd.abs());
            let rel = if denom < denom_floor {
                0.0
            } else {
                (g - fd).abs() / denom
            };
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = format!("{}[{}]", params.name(*id), slot);
            }
        }
    }
    Ok(report)
}
