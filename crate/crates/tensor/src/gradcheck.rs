//! Central finite-difference checking of recorded gradients.

use crate::error::{Result, TensorError};
use crate::{Graph, Scalar, Tensor, Var};

/// Denominator floor of the relative error, so gradients near zero are
/// compared on an absolute scale of this size.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub elements: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval<T: Scalar>(
    inputs: &[Tensor<T>],
    f: &impl Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item().as_f64())
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with the given step, element by element.
pub fn check_gradients<T: Scalar>(
    inputs: &[Tensor<T>],
    step: f64,
    f: impl Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        elements: 0,
    };
    let mut probe = inputs.to_vec();
    for (ii, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(*v) {
            Some(t) => t.data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; inputs[ii].len()],
        };
        for k in 0..inputs[ii].len() {
            let orig = inputs[ii].data()[k];
            probe[ii].data_mut()[k] = orig + T::lit(step);
            let plus = eval(&probe, &f)?;
            probe[ii].data_mut()[k] = orig - T::lit(step);
            let minus = eval(&probe, &f)?;
            probe[ii].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let e = rel_err(analytic[k], numeric);
            if !e.is_finite() {
                return Err(TensorError::NonFinite { op: "gradcheck" });
            }
            report.elements += 1;
            if e > report.max_rel_err || report.elements == 1 {
                report.max_rel_err = e.max(report.max_rel_err);
                report.worst = (ii, k);
                report.analytic = analytic[k];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
