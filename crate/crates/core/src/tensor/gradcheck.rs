use super::{Result, Tape, Tensor, Var};

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences `(f(x+ε) - f(x-ε)) / 2ε`, element by element, for every tensor
/// in `params`. Returns the maximum relative error.
///
/// Runs entirely in `f64`; `f` receives one leaf per parameter.
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; params[p].len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = params[p].data()[i];
            probe[p].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[p].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}
