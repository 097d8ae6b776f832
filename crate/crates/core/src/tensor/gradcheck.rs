use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |numeric - analytic|` normalised by the largest gradient magnitude seen.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params`. The step is
/// applied in `f32`, and the realised step `(x + h) - (x - h)` is used as the
/// denominator so rounding of the perturbed parameter does not bias the
/// estimate. Differences are formed in `f64`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f32, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&h) {
        return Err(Error::Config(format!("grad_check step {h} outside [1e-4, 1e-2]")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        let v = tape.value(root).item() as f64;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("grad_check objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let f0 = tape.value(root).item();
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("grad_check objective evaluated to {f0}")));
    }
    let grads = tape.backward(root)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_abs = 0.0f64;
    let mut scale = 0.0f64;
    let mut checked = 0;
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(params[p].shape()));
        for i in 0..params[p].numel() {
            let x = params[p].data()[i];
            let (up, down) = (x + h, x - h);
            work[p].data_mut()[i] = up;
            let fp = eval(&work)?;
            work[p].data_mut()[i] = down;
            let fm = eval(&work)?;
            work[p].data_mut()[i] = x;
            let numeric = (fp - fm) / (up as f64 - down as f64);
            let a = analytic.data()[i] as f64;
            max_abs = max_abs.max((numeric - a).abs());
            scale = scale.max(numeric.abs()).max(a.abs());
            checked += 1;
        }
    }
    let max_rel_error = if scale > 0.0 { max_abs / scale } else { max_abs };
    Ok(GradCheckReport {
        max_rel_error,
        max_abs_error: max_abs,
        tolerance: tol,
        checked,
        passed: max_rel_error <= tol,
    })
}
