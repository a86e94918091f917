//! Central finite-difference gradient checker.
//!
//! Works in f64 only; f32 rounding drowns the O(eps^2) truncation error of
//! central differences. The loss closure is re-run from scratch for every
//! perturbed element, so it must be a pure function of the parameter values
//! it is handed (fixed data, fixed dropout masks).

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per parameter, in input order.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub worst_param: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with an absolute floor, so near-zero gradient pairs do not
/// blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compare tape gradients of `f` against central finite differences for
/// every element of every parameter.
pub fn grad_check<F>(
    params: &[(String, Tensor<f64>)],
    eps: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |f: &mut F, ps: &[(String, Tensor<f64>)], want_grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss).at(0, 0);
        let mut grads = Vec::new();
        if want_grads {
            tape.backward(loss)?;
            for &v in &vars {
                grads.push(tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| {
                    vec![0.0; tape.value(v).numel()]
                }));
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(&mut f, params, true)?;

    let mut work: Vec<(String, Tensor<f64>)> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_err = 0.0;
    let mut worst_param = String::new();
    for pi in 0..work.len() {
        let mut param_max = 0.0f64;
        for e in 0..work[pi].1.numel() {
            let orig = work[pi].1.data()[e];
            work[pi].1.data_mut()[e] = orig + eps;
            let (up, _) = eval(&mut f, &work, false)?;
            work[pi].1.data_mut()[e] = orig - eps;
            let (down, _) = eval(&mut f, &work, false)?;
            work[pi].1.data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic[pi][e], numeric);
            if err > param_max {
                param_max = err;
            }
        }
        if param_max > max_rel_err {
            max_rel_err = param_max;
            worst_param = work[pi].0.clone();
        }
        per_param.push((work[pi].0.clone(), param_max));
    }
    Ok(GradCheckReport { per_param, max_rel_err, worst_param })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floors_near_zero() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, -1e-12) < 1e-3);
    }

    #[test]
    fn passes_on_a_correct_quadratic() {
        // loss = sum((x W)^2) via matmul_nt with itself.
        let x = Tensor::from_vec(1, 3, vec![0.3, -0.7, 1.1]).unwrap();
        let report = grad_check(&[("x".into(), x)], 1e-5, |tape, vars| {
            let y = tape.matmul_nt(vars[0], vars[0])?;
            Ok(y)
        })
        .unwrap();
        assert!(report.passes(1e-7), "max err {}", report.max_rel_err);
    }

    #[test]
    fn flags_a_corrupted_gradient() {
        // Scale the loss value without the tape noticing by tampering with
        // the closure between analytic and numeric evaluations: simplest is a
        // closure whose value depends on a counter, making numeric != analytic.
        let x = Tensor::from_vec(1, 2, vec![0.5, -0.25]).unwrap();
        let mut calls = 0usize;
        let report = grad_check(&[("x".into(), x)], 1e-5, move |tape, vars| {
            calls += 1;
            // After the first (analytic) call, evaluate a different function.
            let v = if calls == 1 { vars[0] } else { tape.scale_const(vars[0], 1.5)? };
            tape.matmul_nt(v, v)
        })
        .unwrap();
        assert!(!report.passes(1e-7));
        assert_eq!(report.worst_param, "x");
    }
}
