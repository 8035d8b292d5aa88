//! Central finite-difference checks for tape gradients.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it checks.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients below this magnitude are compared in absolute terms.
pub const DENOM_FLOOR: f64 = 1e-2;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(
    mut eval: impl FnMut(f64) -> Result<f64>,
    x0: f64,
    step: f64,
) -> Result<f64> {
    let hi = eval(x0 + step)?;
    let lo = eval(x0 - step)?;
    Ok((hi - lo) / (2.0 * step))
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (input, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Checks every entry of every input of a scalar-valued tape function.
pub fn check<F>(inputs: &[Tensor], build: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        scalar(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut tape, &vars)?;
    scalar(&tape, out)?;
    tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, &v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[which].numel()];
        let analytic = tape.grad(v).unwrap_or(&zeros).to_vec();
        for j in 0..inputs[which].numel() {
            let x0 = inputs[which].data()[j];
            let numeric = central_difference(
                |x| {
                    work[which].data_mut()[j] = x;
                    eval(&work)
                },
                x0,
                step,
            )?;
            work[which].data_mut()[j] = x0;
            let err = relative_error(analytic[j], numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((which, j, analytic[j], numeric));
            }
        }
    }
    Ok(report)
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradcheck needs a scalar, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}
