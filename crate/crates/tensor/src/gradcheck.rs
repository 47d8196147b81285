//! Central finite-difference gradient checking.

use crate::{Result, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over all inputs.
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
    pub entries: usize,
}

/// Compare tape gradients of a scalar function against central differences.
///
/// `f` builds the function on a fresh tape from leaves holding `inputs`
/// (all of which require gradients) and returns the scalar output.
pub fn check_gradients<T, F>(inputs: &[Tensor<T>], eps: f64, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item().as_f64())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut diff_sq = 0.0;
    let mut a_sq = 0.0;
    let mut n_sq = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut entries = 0;
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = T::of(orig.as_f64() + eps);
            let plus = eval(&work)?;
            work[i].data_mut()[j] = T::of(orig.as_f64() - eps);
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j].as_f64();
            diff_sq += (a - numeric) * (a - numeric);
            a_sq += a * a;
            n_sq += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
            entries += 1;
        }
    }
    let denom = a_sq.sqrt().max(n_sq.sqrt()).max(1e-300);
    Ok(GradCheckReport { relative_error: diff_sq.sqrt() / denom, max_abs_error: max_abs, analytic_norm: a_sq.sqrt(), entries })
}
