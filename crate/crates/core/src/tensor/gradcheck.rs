//! Finite-difference verification of the backward rules.

use super::{Tape, TensorData, Var};
use crate::error::{IonError, Result};

/// A differentiable map under test: builds a scalar loss from leaves that
/// were already recorded on the tape.
pub type GradCheckFn = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Compares the tape's gradients against central differences
/// `(f(x+eps) - f(x-eps)) / 2 eps` for every element of every input, and
/// returns the maximum relative error `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// Runs in double precision; `eps` defaults to 1e-5 when 0 is passed.
pub fn grad_check(f: &GradCheckFn, inputs: &[TensorData<f64>], eps: f64) -> Result<f64> {
    let eps = if eps == 0.0 { 1e-5 } else { eps };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(IonError::InvalidArg {
            op: "grad_check",
            detail: format!("map must produce a scalar, got shape {:?}", tape.value(loss).shape),
        });
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad_of(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let eval = |perturbed: &[TensorData<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data[0])
    };

    let mut worst = 0.0f64;
    let mut work: Vec<TensorData<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let orig = input.data[ei];
            work[ti].data[ei] = orig + eps;
            let fa = eval(&work)?;
            work[ti].data[ei] = orig - eps;
            let fb = eval(&work)?;
            work[ti].data[ei] = orig;
            let numeric = (fa - fb) / (2.0 * eps);
            let a = analytic[ti][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_rounding() {
        let f: Box<GradCheckFn> = Box::new(|tape, vs| {
            let sq = tape.mul(vs[0], vs[0])?;
            Ok(tape.sum(sq))
        });
        let x = TensorData::new(vec![3], vec![3.0, -1.5, 0.25]).unwrap();
        let err = grad_check(&f, &[x], 1e-5).unwrap();
        assert!(err < 1e-6, "max rel error {err}");
    }

    #[test]
    fn rejects_non_scalar_map() {
        let f: Box<GradCheckFn> = Box::new(|_tape, vs| Ok(vs[0]));
        let x = TensorData::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            grad_check(&f, &[x], 1e-5),
            Err(IonError::InvalidArg { op: "grad_check", .. })
        ));
    }

    #[test]
    fn tanh_chain_passes() {
        let f: Box<GradCheckFn> = Box::new(|tape, vs| {
            let t = tape.tanh(vs[0]);
            let t = tape.tanh(t);
            Ok(tape.sum(t))
        });
        let x = TensorData::new(vec![2], vec![0.3, -0.8]).unwrap();
        let err = grad_check(&f, &[x], 1e-5).unwrap();
        assert!(err < 1e-4, "max rel error {err}");
    }
}
