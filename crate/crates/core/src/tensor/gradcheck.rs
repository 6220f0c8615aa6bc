//! Central-difference gradient checking.

use super::Tensor;
use crate::error::{Error, Result};

/// One evaluation of a scalar objective.
#[derive(Clone, Debug)]
pub struct Probe {
    pub value: f64,
    /// Analytic gradient with respect to the probed input; only needed at the
    /// base point.
    pub grad: Option<Tensor>,
    /// Fingerprint of the branch decisions taken (see
    /// [`Tape::with_branch_trace`](super::Tape::with_branch_trace)). Perturbed
    /// points whose signature differs from the base crossed a kink and are
    /// not compared.
    pub signature: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Restrict the check to these flat coordinates; all coordinates if `None`.
    pub coords: Option<Vec<usize>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-6,
            coords: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: Option<usize>,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tol
    }

    /// Folds another report into this one, keeping the worst error.
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.worst_coord.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst_coord = other.worst_coord;
        }
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

/// Compares the analytic gradient that `f` reports at `input` against central
/// differences with step `h`. The relative error of a coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(mut f: F, input: &Tensor, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor, bool) -> Result<Probe>,
{
    let base = f(input, true)?;
    if !base.value.is_finite() {
        return Err(Error::NonFinite {
            index: 0,
            context: "objective at the base point".into(),
        });
    }
    let analytic = base
        .grad
        .ok_or_else(|| Error::Config("objective returned no gradient at the base point".into()))?;
    if analytic.shape() != input.shape() {
        return Err(Error::dim(
            0,
            format!(
                "gradient shape {:?} differs from input shape {:?}",
                analytic.shape(),
                input.shape()
            ),
        ));
    }
    if let Some(index) = analytic.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            index,
            context: "analytic gradient".into(),
        });
    }

    let coords: Vec<usize> = match &opts.coords {
        Some(c) => c.clone(),
        None => (0..input.len()).collect(),
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: None,
        checked: 0,
        skipped_kinks: 0,
        tol: opts.tol,
    };
    let mut x = input.clone();
    for &i in &coords {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + opts.h;
        let plus = f(&x, false)?;
        x.data_mut()[i] = orig - opts.h;
        let minus = f(&x, false)?;
        x.data_mut()[i] = orig;
        if !plus.value.is_finite() || !minus.value.is_finite() {
            return Err(Error::NonFinite {
                index: i,
                context: "objective at a perturbed point".into(),
            });
        }
        if base.signature.is_some()
            && (plus.signature != base.signature || minus.signature != base.signature)
        {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * opts.h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst_coord.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst_coord = Some(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn tape_probe(
        x: &Tensor,
        want: bool,
        build: impl Fn(&mut Tape, crate::tensor::Var) -> crate::tensor::Var,
    ) -> Result<Probe> {
        let mut tape = Tape::with_branch_trace();
        let v = tape.param(x.clone());
        let y = build(&mut tape, v);
        let value = tape.value(y).sum();
        let grad = if want {
            let ones = Tensor::full(tape.shape(y), 1.0);
            tape.backward(y, ones)?.take(v)
        } else {
            None
        };
        Ok(Probe {
            value,
            grad,
            signature: tape.branch_signature(),
        })
    }

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor::from_fn(&[10], |i| i as f64 * 0.3 - 1.0);
        let r = grad_check(
            |x, g| tape_probe(x, g, |t, v| t.scale(v, 2.0)),
            &x,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.checked, 10);
    }

    #[test]
    fn abs_away_from_kink() {
        let x = Tensor::from_fn(&[8], |i| 1.5 + i as f64);
        let r = grad_check(
            |x, g| tape_probe(x, g, |t, v| t.abs(v)),
            &x,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6);
    }

    #[test]
    fn kink_crossings_are_skipped() {
        let x = Tensor::new(vec![2], vec![1e-7, 2.0]).unwrap();
        let r = grad_check(
            |x, g| tape_probe(x, g, |t, v| t.abs(v)),
            &x,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.skipped_kinks, 1);
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::from_fn(&[3], |i| i as f64 + 1.0);
        let r = grad_check(
            |x, _| {
                Ok(Probe {
                    value: x.data().iter().map(|v| v * v).sum(),
                    grad: Some(x.clone()),
                    signature: None,
                })
            },
            &x,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!((r.max_rel_error - 0.5).abs() < 1e-6);
        assert!(!r.passed());
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let x = Tensor::from_fn(&[3], |i| i as f64);
        let err = grad_check(
            |x, _| {
                let v = if x.data()[2] != 2.0 { f64::NAN } else { 0.0 };
                Ok(Probe {
                    value: v,
                    grad: Some(Tensor::zeros(&[3])),
                    signature: None,
                })
            },
            &x,
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 2, .. }));
    }
}
