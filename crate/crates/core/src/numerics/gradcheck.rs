use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Compare tape gradients of `f` against central finite differences.
///
/// `f` receives a fresh tape and one parameter leaf per entry of `params`
/// and must return a scalar node. Every coordinate of every parameter is
/// perturbed by `±h`; the relative error per coordinate uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`. Returns the largest such error.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = perturbed.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        Ok(tape.value(out).item())
    };

    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for i in 0..param.numel() {
            let mut data = param.to_vec();
            let x = data[i];
            data[i] = x + h;
            work[pi] = Tensor::new(param.shape().to_vec(), data.clone())?;
            let plus = eval(&work)?;
            data[i] = x - h;
            work[pi] = Tensor::new(param.shape().to_vec(), data)?;
            let minus = eval(&work)?;
            work[pi] = param.clone();

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
