use super::{Gradients, Params, Tape, Var};
use crate::error::Result;

/// Relative error with a floor on the denominator so that two near-zero
/// gradients compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Largest relative error between `analytic` and central differences of
/// `f` at `params` with step `h`.
pub fn finite_diff_check(
    f: impl Fn(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len(), "gradient length");
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

/// Checks tape gradients of a scalar loss against central differences over
/// every scalar in `params`. Returns the largest relative error.
pub fn check_param_gradients(
    params: &Params,
    loss: impl Fn(&mut Tape) -> Result<Var>,
    h: f64,
) -> Result<f64> {
    let mut grads = Gradients::zeros_like(params);
    {
        let mut tape = Tape::new(params);
        let out = loss(&mut tape)?;
        tape.backward(out, &mut grads)?;
    }
    let eval = |p: &Params| -> Result<f64> {
        let mut tape = Tape::new(p);
        let out = loss(&mut tape)?;
        Ok(tape.value(out).item())
    };
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for id in params.ids() {
        for i in 0..params.get(id).data().len() {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(grads.get(id).data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square() {
        let err = finite_diff_check(|x| x[0] * x[0], &[1.0], &[2.0], 1e-5);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant() {
        let err = finite_diff_check(|_| 4.2, &[0.3, -1.0], &[0.0, 0.0], 1e-5);
        assert!(err < 1e-9);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let err = finite_diff_check(|x| x[0] * x[0], &[1.0], &[2.5], 1e-5);
        assert!(err > 0.1);
    }
}
