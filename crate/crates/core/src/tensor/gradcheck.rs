//! Central-difference gradient checking against the tape.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A scalar function of parameter leaves, recorded on a fresh tape per call.
pub trait GradFn: Fn(&mut Tape, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape, &[Var]) -> Result<Var>> GradFn for F {}

fn evaluate(f: &impl GradFn, params: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Evaluation(format!("function returned shape {:?}", v.shape())));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("function value is not finite: {v}")));
    }
    Ok(v)
}

/// Value and tape gradients of `f` at `params`.
pub fn analytic_gradients(f: &impl GradFn, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item();
    if !value.is_finite() {
        return Err(Error::Evaluation(format!("function value is not finite: {value}")));
    }
    let grads = tape.backward(out)?;
    Ok((value, vars.iter().map(|&v| grads.get(v)).collect()))
}

pub fn numeric_gradients(f: &impl GradFn, params: &[Tensor], step: f64) -> Result<Vec<Tensor>> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Tensor::zeros(params[pi].shape());
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + step;
            let plus = evaluate(f, &work)?;
            work[pi].data_mut()[j] = orig - step;
            let minus = evaluate(f, &work)?;
            work[pi].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// `max |a - n| / max(1, |a|, |n|)` over every entry.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

/// Largest relative disagreement between the tape gradient and central
/// differences with the given step.
pub fn grad_check(f: impl GradFn, params: &[Tensor], step: f64) -> Result<f64> {
    let numeric = numeric_gradients(&f, params, step)?;
    let (_, analytic) = analytic_gradients(&f, params)?;
    Ok(max_relative_error(&analytic, &numeric))
}
