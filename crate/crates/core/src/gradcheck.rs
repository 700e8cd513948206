//! Central finite-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on the denominator of the relative error.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub elements_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-4)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Tensor], with_grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), with_grad)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Shape {
            op: "grad_check",
            msg: format!("closure must return a scalar, got {:?}", tape.dims(out)),
        });
    }
    Ok((tape, vars, out))
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences on every element of every input. The step used is the
/// difference of the actually representable perturbed values.
pub fn grad_check<F>(f: F, inputs: &[Tensor], epsilon: f32, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let (mut tape, vars, out) = eval(&f, inputs, true)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_default())
        .collect();
    drop(tape);

    let scalar = |inputs: &[Tensor]| -> Result<f64> {
        let (tape, _, out) = eval(&f, inputs, false)?;
        Ok(tape.value(out).data()[0] as f64)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        elements_checked: 0,
        tolerance,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let x0 = input.data()[ei];
            let xp = x0 + epsilon;
            let xm = x0 - epsilon;
            work[ii].data_mut()[ei] = xp;
            let fp = scalar(&work)?;
            work[ii].data_mut()[ei] = xm;
            let fm = scalar(&work)?;
            work[ii].data_mut()[ei] = x0;
            let numeric = (fp - fm) / (xp as f64 - xm as f64);
            let a = analytic[ii][ei] as f64;
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of input {ii} element {ei} (analytic {a}, numeric {numeric})"
                )));
            }
            let rel = relative_error(a, numeric);
            report.elements_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((ii, ei));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
