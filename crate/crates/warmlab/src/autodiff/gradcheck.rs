//! Central-difference verification of tape gradients.

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use super::AutodiffError;

/// One-sided derivatives that disagree by more than this fraction of their
/// scale mark a coordinate as sitting on a kink (e.g. a relu crossing zero
/// inside the probe interval), where central differences say nothing useful.
const KINK_THRESHOLD: f64 = 0.1;

/// Floor for the relative-deviation denominator so coordinates with tiny
/// gradients are judged on absolute error instead of blowing up the ratio.
const REL_FLOOR: f64 = 1e-3;

/// Outcome of [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Coordinates compared against the central difference.
    pub checked: usize,
    /// Coordinates skipped because a kink was detected inside the probe.
    pub excluded: Vec<usize>,
    /// Largest |central - autodiff| over checked coordinates.
    pub max_abs_dev: f64,
    /// Largest deviation relative to max(|central|, |autodiff|, 1e-3).
    pub max_rel_dev: f64,
    /// Coordinate attaining `max_rel_dev`, if any were checked.
    pub worst_coordinate: Option<usize>,
    /// True when every checked coordinate stays within the tolerance.
    pub passed: bool,
}

/// Compare the tape gradient of a scalar function against central finite
/// differences, coordinate by coordinate.
///
/// `f` receives a fresh tape plus the node holding the point and must return
/// a scalar loss node. It is called once per perturbed evaluation, so it has
/// to be a pure function of the point (constants may be closed over).
pub fn grad_check<F>(
    f: F,
    point: &Tensor,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, AutodiffError>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(AutodiffError::InvalidStepSize { value: h });
    }

    let eval = |x: Tensor| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let node = tape.leaf(x);
        let loss = f(&mut tape, node)?;
        let value = tape.value(loss);
        if !value.is_scalar() {
            return Err(AutodiffError::NotScalar {
                shape: value.shape().to_vec(),
            });
        }
        Ok(value.at(0))
    };

    // Analytic gradient once, at the center point.
    let mut tape = Tape::new();
    let node = tape.leaf(point.clone());
    let loss = f(&mut tape, node)?;
    if !tape.value(loss).is_scalar() {
        return Err(AutodiffError::NotScalar {
            shape: tape.value(loss).shape().to_vec(),
        });
    }
    let center = tape.value(loss).at(0);
    if !center.is_finite() {
        return Err(AutodiffError::NonFiniteCenter { value: center });
    }
    let grads = tape.backward(loss)?;
    let analytic = grads.wrt(node).clone();

    let mut report = GradCheckReport {
        checked: 0,
        excluded: Vec::new(),
        max_abs_dev: 0.0,
        max_rel_dev: 0.0,
        worst_coordinate: None,
        passed: true,
    };

    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let f_plus = eval(plus)?;
        let f_minus = eval(minus)?;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(AutodiffError::NonFiniteProbe { coordinate: i });
        }

        let forward = (f_plus - center) / h;
        let backward = (center - f_minus) / h;
        let scale = 1.0f64.max(forward.abs()).max(backward.abs());
        if (forward - backward).abs() > KINK_THRESHOLD * scale {
            report.excluded.push(i);
            continue;
        }

        let central = (f_plus - f_minus) / (2.0 * h);
        let a = analytic.at(i);
        let abs_dev = (central - a).abs();
        let rel_dev = abs_dev / central.abs().max(a.abs()).max(REL_FLOOR);
        report.checked += 1;
        if abs_dev > report.max_abs_dev {
            report.max_abs_dev = abs_dev;
        }
        if rel_dev > report.max_rel_dev {
            report.max_rel_dev = rel_dev;
            report.worst_coordinate = Some(i);
        }
    }

    report.passed = report.max_rel_dev <= tol;
    Ok(report)
}
