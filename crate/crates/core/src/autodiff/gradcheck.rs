//! Central finite-difference verification of reverse-mode gradients.

use super::tape::{Gradients, ParamStore, Tape, Var};
use serde::Serialize;

use crate::error::Result;

/// Below this magnitude central differences are dominated by roundoff, so
/// such entries are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Max over elements of `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub elements_checked: usize,
}

/// Loss value and reverse-mode gradients of `build` at `params`.
pub fn analytic_gradient<F>(params: &ParamStore<f64>, build: F) -> Result<(f64, Gradients<f64>)>
where
    F: for<'p> Fn(&mut Tape<'p, f64>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = build(&mut tape)?;
    let value = tape.value(loss).data()[0];
    Ok((value, tape.backward(loss)?))
}

fn evaluate<F>(params: &ParamStore<f64>, build: &F) -> Result<f64>
where
    F: for<'p> Fn(&mut Tape<'p, f64>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = build(&mut tape)?;
    Ok(tape.value(loss).data()[0])
}

/// `(f(θ + eps) - f(θ - eps)) / (2 eps)` for every parameter element.
pub fn numeric_gradient<F>(params: &ParamStore<f64>, build: F, eps: f64) -> Result<Gradients<f64>>
where
    F: for<'p> Fn(&mut Tape<'p, f64>) -> Result<Var>,
{
    let mut work = params.clone();
    let mut out = Gradients::zeros_like(params);
    for id in 0..params.len() {
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let plus = evaluate(&work, &build)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let minus = evaluate(&work, &build)?;
            work.get_mut(id).data_mut()[i] = orig;
            out.get_mut(id).data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(out)
}

/// Elementwise comparison of two gradient sets over the same store.
pub fn compare(
    params: &ParamStore<f64>,
    analytic: &Gradients<f64>,
    numeric: &Gradients<f64>,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        elements_checked: 0,
    };
    for id in 0..params.len() {
        for (i, (a, n)) in analytic
            .get(id)
            .data()
            .iter()
            .zip(numeric.get(id).data())
            .enumerate()
        {
            report.elements_checked += 1;
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR);
            if rel > report.max_relative_error || report.worst_param.is_empty() {
                report.max_relative_error = rel;
                report.worst_param = params.name(id).to_string();
                report.worst_index = i;
                report.analytic_at_worst = *a;
                report.numeric_at_worst = *n;
            }
        }
    }
    report
}

/// Checks reverse-mode gradients of the scalar built by `build` against
/// central differences with step `eps`.
pub fn grad_check<F>(params: &ParamStore<f64>, build: F, eps: f64) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Tape<'p, f64>) -> Result<Var>,
{
    let (_, analytic) = analytic_gradient(params, &build)?;
    let numeric = numeric_gradient(params, &build, eps)?;
    Ok(compare(params, &analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn quadratic_store() -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.push(
            "w",
            Tensor::matrix(2, 2, vec![0.3, -0.7, 1.1, 0.4]).unwrap(),
        );
        p.push("b", Tensor::vector(vec![0.2, -0.1]));
        p
    }

    fn build<'p>(tape: &mut Tape<'p, f64>) -> Result<Var> {
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.5, -1.5]).unwrap());
        let w = tape.param(0);
        let b = tape.param(1);
        let h = tape.affine(x, w, b)?;
        let s = tape.sigmoid(h);
        let sq = tape.mul(s, s)?;
        Ok(tape.sum(sq))
    }

    #[test]
    fn small_network_passes() {
        let report = grad_check(&quadratic_store(), build, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
        assert_eq!(report.elements_checked, 6);
    }

    #[test]
    fn doubled_analytic_gradient_is_reported() {
        let p = quadratic_store();
        let (_, mut analytic) = analytic_gradient(&p, build).unwrap();
        analytic.scale(2.0);
        let numeric = numeric_gradient(&p, build, 1e-5).unwrap();
        let report = compare(&p, &analytic, &numeric);
        assert!((report.max_relative_error - 0.5).abs() < 1e-4, "{report:?}");
    }
}
