use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Var};

/// Floor on the relative-error denominator.
const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares backward gradients of every trainable parameter against central
/// differences `(f(p + eps) - f(p - eps)) / 2eps`.
///
/// `f` must be deterministic: it is evaluated twice at the base point and the
/// check is rejected if the two losses differ.
pub fn grad_check<F>(store: &ParamStore, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    let base = loss.item();
    let grads = tape.backward(loss)?;

    let again = {
        let tape = Tape::new();
        f(&tape, store)?.item()
    };
    if again.to_bits() != base.to_bits() {
        return Err(Error::InvalidCheck(format!(
            "objective is not deterministic ({base} vs {again})"
        )));
    }

    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        Ok(f(&tape, s)?.item())
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let analytic = grads.param(id).map(|g| g.data().to_vec());
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((store.get(id).name.clone(), i));
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
    }
    Ok(report)
}
