//! Central-difference gradient verification.

use super::{Tape, TensorId};
use crate::error::{FigError, Result};

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative-error tolerance used by the gradient-check CLI and acceptance
/// suite.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Compares the analytic gradient of `f` at `x` against central finite
/// differences and returns the worst relative error
/// `|analytic − numeric| / (|numeric| + 1e-8)` over all coordinates.
///
/// `f` must map the leaf it is given to a one-element tensor on the same
/// tape. A function that ignores its input checks out with error 0.
pub fn grad_check<F>(f: F, x: &[f64], shape: &[usize], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    if h <= 0.0 {
        return Err(FigError::Argument(format!("step h must be positive, got {h}")));
    }

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.to_vec(), shape.to_vec())?;
    let out = f(&mut tape, leaf)?;
    if tape.shape(out).iter().product::<usize>() != 1 {
        return Err(FigError::Shape {
            op: "grad_check",
            detail: format!("f must produce a scalar, got {:?}", tape.shape(out)),
        });
    }
    if !tape.data(out)[0].is_finite() {
        return Err(FigError::NonFinite {
            context: "grad_check forward value".into(),
        });
    }
    let analytic: Vec<f64> = if tape.requires_grad(out) {
        tape.backward(out)?;
        tape.grad(leaf).expect("leaf gradient populated").to_vec()
    } else {
        // f ignored its input; the true gradient is identically zero.
        vec![0.0; x.len()]
    };

    let eval = |perturbed: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let leaf = t.leaf(perturbed.to_vec(), shape.to_vec())?;
        let out = f(&mut t, leaf)?;
        Ok(t.data(out)[0])
    };

    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = eval(&probe)?;
        probe[i] = orig - h;
        let down = eval(&probe)?;
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(FigError::NonFinite {
                context: format!("grad_check finite-difference probe at coordinate {i}"),
            });
        }
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
