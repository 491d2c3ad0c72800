//! Central finite-difference gradient checks in double precision.

use crate::error::Result;
use crate::tape::{backward_scalar, ParamStore, Tape, Var};

/// Largest relative disagreement between the tape's gradients and central
/// differences `(f(w+ε) − f(w−ε)) / 2ε`, taken over every parameter entry.
///
/// The relative error of one entry is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(params: &ParamStore<f64>, eps: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let out = loss(&mut tape)?;
        backward_scalar(&mut tape, out)?
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new(store);
        let out = loss(&mut tape)?;
        Ok(tape.value(out).item())
    };

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        for i in 0..params.tensors()[p].numel() {
            let orig = params.tensors()[p].data()[i];
            probe.tensors_mut()[p].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.tensors_mut()[p].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.tensors_mut()[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.as_slice()[p].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
