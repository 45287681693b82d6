//! Central finite-difference gradient checking.
//!
//! The checker only evaluates forward values to build its numerical
//! gradient, so it shares no code path with the reverse sweep it audits.

use crate::autograd::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error `‖g - ĝ‖₂ / max(‖g‖₂, ‖ĝ‖₂)` between the tape gradient `g`
/// and the central-difference estimate `ĝ`, over all inputs jointly.
/// Returns 0 when both are (numerically) zero.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_gradients_with_step(inputs, DEFAULT_STEP, f)
}

pub fn check_gradients_with_step<F>(inputs: &[Tensor], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = tape_gradients(inputs, &f)?;
    let numeric = numeric_gradients(inputs, step, &f)?;
    Ok(relative_error(&analytic, &numeric))
}

pub fn tape_gradients<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect())
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

pub fn numeric_gradients<F>(inputs: &[Tensor], step: f64, f: &F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut result = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].rows(), inputs[k].cols());
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let up = eval(&work, f)?;
            work[k].data_mut()[i] = orig - step;
            let down = eval(&work, f)?;
            work[k].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * step);
        }
        result.push(g);
    }
    Ok(result)
}

pub fn relative_error(a: &[Tensor], b: &[Tensor]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.data().iter().zip(y.data()) {
            diff += (p - q) * (p - q);
            na += p * p;
            nb += q * q;
        }
    }
    let denom = na.sqrt().max(nb.sqrt());
    if denom < 1e-12 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}
