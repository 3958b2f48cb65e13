use super::tape::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Compare reverse-mode gradients of `f` at `point` against central differences.
///
/// Returns `max_i |analytic_i − numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor4, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), step)
}

/// [`finite_diff_check`] over several input tensors at once.
pub fn finite_diff_check_many<F>(f: F, points: &[Tensor4], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let eval = |pts: &[Tensor4]| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(ParamId(i), p.clone()))
            .collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, out))
    };
    let scalar = |pts: &[Tensor4]| -> Result<f64> {
        let (tape, out) = eval(pts)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.shape()));
        }
        let s = v.data()[0];
        if !s.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_check" });
        }
        Ok(s)
    };

    let (tape, out) = eval(points)?;
    let grads = tape.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor4> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        let zero = Tensor4::zeros(point.shape());
        let analytic = grads.get(ParamId(pi)).unwrap_or(&zero);
        for i in 0..point.len() {
            let orig = point.data()[i];
            probe[pi].data_mut()[i] = orig + step;
            let up = scalar(&probe)?;
            probe[pi].data_mut()[i] = orig - step;
            let down = scalar(&probe)?;
            probe[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            if !a.is_finite() {
                return Err(Error::NonFinite { op: "finite_diff_check" });
            }
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
