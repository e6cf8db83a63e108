//! Central-difference verification of reverse-mode gradients.

use super::params::{Bindings, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst: Option<Mismatch>,
    /// Largest relative error seen in each parameter.
    pub per_param: Vec<(String, f64)>,
    pub coordinates: usize,
    /// Every compared coordinate.
    pub entries: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }

    pub fn failures(&self, tolerance: f64) -> impl Iterator<Item = &Mismatch> {
        self.entries
            .iter()
            .filter(move |m| m.relative_error >= tolerance)
    }
}

fn eval(
    tape_fn: &impl Fn(&mut Tape, &Bindings) -> Result<Var>,
    params: &ParamStore,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = tape_fn(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}

/// Compare the tape gradient of `loss_fn` against central differences
/// `(f(θ+eps) - f(θ-eps)) / (2 eps)` for every scalar of every parameter.
///
/// `loss_fn` must be deterministic: it is re-evaluated twice per coordinate.
pub fn grad_check<F>(params: &ParamStore, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!(
            "grad_check eps must be positive, got {eps}"
        )));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = loss_fn(&mut tape, &vars)?;
    let base = tape.value(loss).data()[0];
    if !base.is_finite() {
        return Err(Error::Numerical(format!(
            "grad_check: loss is {base} at the base point"
        )));
    }
    let analytic = vars.gradients(&tape.backward(loss)?, &tape);
    drop(tape);

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        per_param: Vec::new(),
        coordinates: 0,
        entries: Vec::new(),
    };
    for (name, grad) in analytic.iter() {
        let mut param_max: f64 = 0.0;
        for i in 0..grad.len() {
            let original = probe.require(name)?.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = original + eps;
            let plus = eval(&loss_fn, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original - eps;
            let minus = eval(&loss_fn, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numerical(format!(
                    "grad_check: non-finite loss when perturbing `{name}`[{i}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            param_max = param_max.max(err);
            let entry = Mismatch {
                param: name.clone(),
                index: i,
                analytic: a,
                numeric,
                relative_error: err,
            };
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some(entry.clone());
            }
            report.entries.push(entry);
        }
        report.per_param.push((name.clone(), param_max));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn sum_of_squares() {
        let mut params = ParamStore::new();
        params.insert("theta", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let report = grad_check(&params, 1e-6, |tape, vars| {
            let t = vars.var("theta")?;
            let sq = tape.square(t);
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-9, "{report:?}");

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let t = vars.var("theta").unwrap();
        let sq = tape.square(t);
        let s = tape.sum_all(sq);
        let g = vars.gradients(&tape.backward(s).unwrap(), &tape);
        assert_eq!(g.get("theta").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn independent_loss_has_exact_zero_gradient() {
        let mut params = ParamStore::new();
        params.insert("theta", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        params.insert("other", Tensor::scalar(1.5));
        let report = grad_check(&params, 1e-6, |tape, vars| {
            let o = vars.var("other")?;
            Ok(tape.square(o))
        })
        .unwrap();
        let theta = report.per_param.iter().find(|(n, _)| n == "theta").unwrap();
        assert_eq!(theta.1, 0.0);
        assert!(report.max_relative_error < 1e-9);

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let o = vars.var("other").unwrap();
        let l = tape.square(o);
        let g = vars.gradients(&tape.backward(l).unwrap(), &tape);
        assert!(g.get("theta").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut params = ParamStore::new();
        params.insert("theta", Tensor::scalar(1e300));
        let err = grad_check(&params, 1e-6, |tape, vars| {
            let t = vars.var("theta")?;
            Ok(tape.square(t))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }
}
