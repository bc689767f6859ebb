//! Central finite-difference verification of tape gradients.

use thiserror::Error;

use super::{Tape, Tensor, TensorError, Var};

/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("function is not deterministic: {first} then {second} at the same point")]
    NonDeterministic { first: f64, second: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    /// Which input tensor.
    pub input: usize,
    /// Flat index into that tensor.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.coordinates
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, points: &[Tensor<f64>]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(TensorError::NonScalarLoss(value.shape().to_vec()));
    }
    Ok(value.item())
}

/// Compares the tape gradient of a scalar function of several inputs
/// against central differences `(f(x+h) - f(x-h)) / 2h`, coordinate by
/// coordinate.
pub fn grad_check_many<F>(
    f: F,
    points: &[Tensor<f64>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let first = evaluate(&f, points)?;
    let second = evaluate(&f, points)?;
    if first.to_bits() != second.to_bits() {
        return Err(GradCheckError::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf gradient"))
        .collect();
    drop(tape);

    let mut shifted = points.to_vec();
    let mut coordinates = Vec::new();
    for (input, grad) in analytic.iter().enumerate() {
        for index in 0..grad.len() {
            let base = points[input].data()[index];
            shifted[input].data_mut()[index] = base + h;
            let plus = evaluate(&f, &shifted)?;
            shifted[input].data_mut()[index] = base - h;
            let minus = evaluate(&f, &shifted)?;
            shifted[input].data_mut()[index] = base;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[index];
            coordinates.push(CoordinateCheck {
                input,
                index,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }
    let max_rel_error = coordinates.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        coordinates,
        max_rel_error,
        tolerance: tol,
        passed: max_rel_error < tol,
    })
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(
    f: F,
    point: &Tensor<f64>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        h,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn point() -> Tensor<f64> {
        Tensor::new(vec![5], vec![0.3, -1.2, 2.5, 0.0, 4.0]).unwrap()
    }

    #[test]
    fn sum_of_squares_passes_tight_tolerance() {
        let report = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.sum_all(sq)
            },
            &point(),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn corrupted_backward_rule_fails() {
        // d(x^2)/dx reported as x instead of 2x.
        let report = grad_check(
            |tape, x| {
                let sq = tape.custom_unary(
                    x,
                    &|t: &Tensor<f64>| {
                        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * v).collect())
                            .unwrap()
                    },
                    Box::new(|input: &Tensor<f64>, _out: &Tensor<f64>, g: &[f64]| {
                        input.data().iter().zip(g).map(|(x, g)| x * g).collect()
                    }),
                )?;
                tape.sum_all(sq)
            },
            &point(),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_error > 0.4);
    }

    #[test]
    fn correct_custom_rule_passes() {
        let report = grad_check(
            |tape, x| {
                let sq = tape.custom_unary(
                    x,
                    &|t: &Tensor<f64>| {
                        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * v).collect())
                            .unwrap()
                    },
                    Box::new(|input: &Tensor<f64>, _out: &Tensor<f64>, g: &[f64]| {
                        input
                            .data()
                            .iter()
                            .zip(g)
                            .map(|(x, g)| 2.0 * x * g)
                            .collect()
                    }),
                )?;
                tape.sum_all(sq)
            },
            &point(),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed);
    }

    #[test]
    fn non_deterministic_function_is_detected() {
        let calls = AtomicUsize::new(0);
        let err = grad_check(
            |tape, x| {
                let n = calls.fetch_add(1, Ordering::SeqCst) as f64;
                let s = tape.sum_all(x)?;
                tape.add_scalar(s, n)
            },
            &point(),
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, GradCheckError::NonDeterministic { .. }));
    }
}
