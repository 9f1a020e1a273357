//! Central finite-difference verification of tape adjoints.

use crate::autodiff::{Tape, Var};
use crate::error::{FrptError, Result};
use crate::tensor::Tensor;

/// Times the step is divided by ten when a difference quotient straddles a
/// kink before the coordinate is given up on.
const REFINEMENTS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped because every tried step straddled a kink.
    pub excluded: usize,
    /// Coordinates checked at a reduced step to step off a kink.
    pub refined: usize,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    pub fn merge(self, other: GradCheck) -> GradCheck {
        let (max_rel_error, worst_index) = if other.max_rel_error > self.max_rel_error {
            (other.max_rel_error, other.worst_index)
        } else {
            (self.max_rel_error, self.worst_index)
        };
        GradCheck {
            max_rel_error,
            worst_index,
            checked: self.checked + other.checked,
            excluded: self.excluded + other.excluded,
            refined: self.refined + other.refined,
        }
    }
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { max_rel_error: 0.0, worst_index: None, checked: 0, excluded: 0, refined: 0 }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape adjoint of `program` with respect to `leaf` against
/// central differences at `step` and `step / 2`, extrapolated.
///
/// `program` receives a fresh tape and the registered leaf and must return a
/// scalar. It is re-run once per perturbation, so it must be deterministic.
/// A difference quotient whose endpoints activate a different piece of some
/// piecewise operation than the unperturbed record is retried at a smaller
/// step; coordinates where every step straddles a kink are excluded.
pub fn finite_diff_check<F>(program: F, leaf: &Tensor<f64>, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(FrptError::InvalidValue("finite-difference step must be positive".into()));
    }
    let learn = leaf.clone().learnable();
    let mut tape = Tape::new();
    let x = tape.leaf(&learn);
    let out = program(&mut tape, x)?;
    let signature = tape.kink_signature();
    let grads = tape.backward(out)?;
    let analytic = grads.get(x).expect("learnable leaf").to_vec();

    let eval = |probe: &Tensor<f64>| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let x = tape.constant(probe);
        let out = program(&mut tape, x)?;
        Ok((tape.scalar(out), tape.kink_signature()))
    };

    let mut report = GradCheck::default();
    let mut probe = leaf.clone();
    for i in 0..leaf.len() {
        let orig = leaf.data()[i];
        let mut numeric = None;
        let mut h = step;
        for attempt in 0..=REFINEMENTS {
            let mut quotients = [0.0; 2];
            let mut smooth = true;
            for (q, hh) in quotients.iter_mut().zip([h, h / 2.0]) {
                probe.data_mut()[i] = orig + hh;
                let (fp, sp) = eval(&probe)?;
                probe.data_mut()[i] = orig - hh;
                let (fm, sm) = eval(&probe)?;
                smooth &= sp == signature && sm == signature;
                *q = (fp - fm) / (2.0 * hh);
            }
            if smooth {
                // one Richardson step cancels the h² truncation term
                numeric = Some((4.0 * quotients[1] - quotients[0]) / 3.0);
                if attempt > 0 {
                    report.refined += 1;
                }
                break;
            }
            h /= 10.0;
        }
        probe.data_mut()[i] = orig;
        let Some(numeric) = numeric else {
            report.excluded += 1;
            continue;
        };
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}
