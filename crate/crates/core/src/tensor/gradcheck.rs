//! Finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Symmetric relative error with an absolute floor for tiny values.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / f64::max(1e-8, a.abs() + n.abs())
}

/// Max relative error between tape gradients and central differences, over
/// every coordinate of every input. `f` must rebuild the graph from the
/// given leaves and return a scalar loss.
pub fn grad_check_multi<F>(inputs: &[Tensor], f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_sampled(inputs, f, h, usize::MAX)
}

/// Like [`grad_check_multi`] but probes at most `max_per_input` evenly
/// strided coordinates per tensor, so large parameter blocks stay cheap.
pub fn grad_check_sampled<F>(inputs: &[Tensor], f: F, h: f64, max_per_input: usize) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        if tape.value(loss).shape() != [1] {
            return Err(Error::NonScalarLoss(tape.value(loss).shape().to_vec()));
        }
        Ok(tape.value(loss).item())
    };

    // analytic gradients in one reverse pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.len();
        let stride = if n > max_per_input { n.div_ceil(max_per_input) } else { 1 };
        for j in (0..n).step_by(stride) {
            let orig = t.data()[j];
            probe[ti].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[ti].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[ti][j], numeric));
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check<F>(input: &Tensor, f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_multi(std::slice::from_ref(input), |tape, vars| f(tape, vars[0]), h)
}
