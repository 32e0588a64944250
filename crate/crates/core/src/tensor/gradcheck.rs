use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::shape(format!(
            "grad_check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    let v = value.data()[0];
    if !v.is_finite() {
        return Err(Error::Eval(format!("function value is {v}")));
    }
    Ok(v)
}

/// Compares tape gradients of a scalar `f` with central differences.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// over every coordinate of every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::config(format!(
            "grad_check step {eps} outside [1e-6, 1e-4]"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 || !value.data()[0].is_finite() {
        return Err(Error::Eval(format!(
            "grad_check needs a finite scalar function, got {value:?}"
        )));
    }
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape().to_vec());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}
