//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward function, so it stays
//! independent of the backward closures it is used to verify.

use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Denominator floor for the relative error: entries whose gradients are
/// both below this are compared absolutely. Finite differences at
/// `h = 1e-6` carry about `1e-10` of cancellation noise.
pub const REL_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max |a − n| / max(|a|, |n|, REL_FLOOR)` over all checked entries.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of the scalar `f` with respect to each
/// tensor in `wrt` against central differences with step `h`.
///
/// `f` must rebuild its graph from the current values of `wrt` on every
/// call. `stride` > 1 checks every `stride`-th entry only.
pub fn check<F>(wrt: &[Tensor], f: F, h: f64, stride: usize) -> Result<GradCheck>
where
    F: Fn() -> Result<Tensor>,
{
    for t in wrt {
        t.zero_grad();
    }
    f()?.backward()?;
    let analytic: Vec<Vec<f64>> = wrt
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    for t in wrt {
        t.zero_grad();
    }

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    for (t, grad) in wrt.iter().zip(&analytic) {
        let base = t.to_vec();
        for i in (0..base.len()).step_by(stride.max(1)) {
            let mut probe = base.clone();
            probe[i] = base[i] + h;
            t.set_data(&probe)?;
            let up = f()?.item();
            probe[i] = base[i] - h;
            t.set_data(&probe)?;
            let down = f()?.item();
            t.set_data(&base)?;
            let numeric = (up - down) / (2.0 * h);
            report.max_rel_err = report.max_rel_err.max(relative_error(grad[i], numeric));
            report.max_abs_err = report.max_abs_err.max((grad[i] - numeric).abs());
            report.checked += 1;
        }
        t.zero_grad();
    }
    Ok(report)
}
