//! Central-difference gradient verification.

use super::real::Real;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative discrepancy used throughout the verification suites.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn eval<F, G>(f: &G, inputs: &[Tensor<F>]) -> Result<f64>
where
    F: Real,
    G: Fn(&mut Tape<F>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarBackward(v.shape().to_vec()));
    }
    let y = v.item().to_f64().unwrap();
    if !y.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(y)
}

/// Compares the tape gradient of a scalar function of several tensors
/// against central differences on every coordinate.
pub fn grad_check_many<F, G>(f: G, inputs: &[Tensor<F>], eps: f64) -> Result<GradCheckReport>
where
    F: Real,
    G: Fn(&mut Tape<F>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let y = tape.value(out).item().to_f64().unwrap();
    if !y.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| match tape.grad(v) {
            Some(g) => g.to_f64_vec(),
            None => vec![0.0; x.len()],
        })
        .collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut work: Vec<Tensor<F>> = inputs.to_vec();
    for (ti, x) in inputs.iter().enumerate() {
        for c in 0..x.len() {
            let orig = x.data()[c];
            let base = orig.to_f64().unwrap();
            work[ti].data_mut()[c] = F::from_f64_lossy(base + eps);
            let plus = eval(&f, &work)?;
            work[ti].data_mut()[c] = F::from_f64_lossy(base - eps);
            let minus = eval(&f, &work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[ti][c], numeric);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (ti, c);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Single-input form; returns the maximum relative error.
pub fn grad_check<F, G>(f: G, x: &Tensor<F>, eps: f64) -> Result<f64>
where
    F: Real,
    G: Fn(&mut Tape<F>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
        .map(|r| r.max_relative_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::<f64>::from_f64(&[5], &[0.3, -1.2, 2.5, 0.01, -4.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(7.0))),
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_objective_errors() {
        let x = Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let s = t.scale(v, f64::INFINITY);
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
