use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative error with a floor on the denominator, so gradients near zero
/// are compared on an absolute scale of `floor * tol`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error for each parameter tensor.
    pub per_param: Vec<f64>,
    pub max_rel_err: f64,
    /// Coordinates skipped because the function has a kink (relu, clamp)
    /// within one step of the evaluation point.
    pub kinks_skipped: usize,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-3,
        }
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences for every element of every parameter tensor.
///
/// `f` receives a fresh tape and the parameter handles and must return a
/// scalar loss. It must be deterministic for fixed parameters.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::contract("grad_check needs a scalar function"));
    }
    let f0 = tape.value(loss).item();
    let grads = tape.backward(loss)?;

    let h = opts.step;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut kinks = 0;
    let mut checked = 0;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params[pi].len());
        let mut worst: f64 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[i] = orig;

            let central = (fp - fm) / (2.0 * h);
            let err = relative_error(a, central, opts.floor);
            if err > opts.tolerance {
                // A kink shows up as disagreeing one-sided slopes with the
                // analytic value matching one of them. A kink whose share of
                // the slope is small is caught by the second difference exceeding
                // ten times its smooth (h/hf)² scaling from a finer step hf that
                // does not straddle it; the fine central difference must then agree.
                let fwd = (fp - f0) / h;
                let bwd = (f0 - fm) / h;
                let sides_disagree = relative_error(fwd, bwd, opts.floor) > 1e-2;
                let matches_side = relative_error(a, fwd, opts.floor) < 1e-2
                    || relative_error(a, bwd, opts.floor) < 1e-2;
                let kink = if sides_disagree && matches_side {
                    true
                } else {
                    let hf = h * 1e-2;
                    work[pi].data_mut()[i] = orig + hf;
                    let fpf = eval(&work)?;
                    work[pi].data_mut()[i] = orig - hf;
                    let fmf = eval(&work)?;
                    work[pi].data_mut()[i] = orig;
                    let (d2, d2f) = ((fp - 2.0 * f0 + fm).abs(), (fpf - 2.0 * f0 + fmf).abs());
                    let fine_ok =
                        relative_error(a, (fpf - fmf) / (2.0 * hf), opts.floor) <= opts.tolerance;
                    fine_ok && d2 > 1e5 * d2f
                };
                if kink {
                    kinks += 1;
                    continue;
                }
            }
            checked += 1;
            worst = worst.max(err);
        }
        per_param.push(worst);
    }
    let max_rel_err = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        kinks_skipped: kinks,
        checked,
        tolerance: opts.tolerance,
        passed: max_rel_err <= opts.tolerance,
    })
}
