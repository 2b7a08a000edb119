//! Central finite-difference gradient checking.

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (parameter name, flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error with a floor on the denominator so coordinates whose true
/// gradient is zero are judged on absolute error.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward-pass gradients against central differences with step `h`
/// on the listed coordinates. `build` must construct the scalar loss from the
/// current parameter values.
pub fn grad_check<B>(
    store: &mut ParamStore<f64>,
    coords: &[(ParamId, usize)],
    h: f64,
    floor: f64,
    build: B,
) -> Result<GradCheckReport>
where
    B: Fn(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    store.zero_grad();
    let (g, loss) = build(store)?;
    g.backward(loss, store)?;
    drop(g);

    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    for &(id, i) in coords {
        let analytic = store.get(id).grad.data()[i];
        let orig = store.get(id).value.data()[i];

        store.get_mut(id).value.data_mut()[i] = orig + h;
        let (gp, lp) = build(store)?;
        let fp = gp.value(lp).data()[0];
        store.get_mut(id).value.data_mut()[i] = orig - h;
        let (gm, lm) = build(store)?;
        let fm = gm.value(lm).data()[0];
        store.get_mut(id).value.data_mut()[i] = orig;

        let numeric = (fp - fm) / (2.0 * h);
        let e = rel_err(analytic, numeric, floor);
        report.checked += 1;
        if e >= report.max_rel_err {
            report.max_rel_err = e;
            report.worst = Some((store.get(id).name.clone(), i, analytic, numeric));
        }
    }
    Ok(report)
}
