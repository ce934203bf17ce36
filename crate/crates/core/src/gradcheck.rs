//! Central finite-difference checks of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Step and comparison settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Relative error is `|a - n| / max(|a|, |n|, floor)`, so gradients far
    /// below `floor` are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, floor: 1e-6 }
    }
}

/// Worst entry found by [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input index, flat element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval(f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    match tape.value(out) {
        [v] => Ok(*v),
        other => Err(Error::Contract(format!(
            "gradient check needs a scalar function, got {} values",
            other.len()
        ))),
    }
}

/// Compares reverse-mode gradients of the scalar `f` with respect to every
/// element of every input against central differences.
pub fn check_gradients(
    inputs: &[Tensor],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let tracked: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = tracked.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&tracked)
        .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (e, &a) in grads.iter().enumerate() {
            let orig = probe[i].data()[e];
            probe[i].data_mut()[e] = orig + cfg.step;
            let plus = eval(&f, &probe)?;
            probe[i].data_mut()[e] = orig - cfg.step;
            let minus = eval(&f, &probe)?;
            probe[i].data_mut()[e] = orig;
            let n = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error(a, n, cfg.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((i, e, a, n));
            }
        }
    }
    Ok(report)
}
