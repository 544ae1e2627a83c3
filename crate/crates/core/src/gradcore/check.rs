use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of comparing analytic gradients with central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst error over all inputs (see [`relative_error`]).
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

/// `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|)`: the largest
/// element-wise discrepancy measured against the gradient's own scale.
/// Both gradients vanishing (scale below 1e-12) counts as agreement.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale < 1e-12 {
        return 0.0;
    }
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale
}

/// Checks a scalar-valued `fragment` against central differences with respect
/// to every entry of every input tensor.
pub fn grad_check<F>(fragment: F, inputs: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(Tape, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = fragment(&mut tape, &vars)?;
        if !tape.value(out).is_scalar() {
            return Err(Error::Usage(format!(
                "gradient check needs a scalar fragment output, got shape {:?}",
                tape.value(out).shape()
            )));
        }
        Ok((tape, out, vars))
    };

    let (tape, out, vars) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let mut work = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[k].shape());
        let mut numeric = vec![0.0; inputs[k].len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let (t_plus, o_plus, _) = eval(&work)?;
            let f_plus = t_plus.value(o_plus).item();
            work[k].data_mut()[i] = orig - FD_STEP;
            let (t_minus, o_minus, _) = eval(&work)?;
            let f_minus = t_minus.value(o_minus).item();
            work[k].data_mut()[i] = orig;
            *slot = (f_plus - f_minus) / (2.0 * FD_STEP);
        }
        per_input.push(relative_error(analytic.data(), &numeric));
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, per_input, tolerance, passed: max_rel_error < tolerance })
}
