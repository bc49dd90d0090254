use super::array::Array;
use super::backward::grad;
use super::tape::{Tape, Tensor};
use crate::error::{Error, Result};

/// Largest relative disagreement between reverse-mode gradients of `f` and
/// central differences with the given step, taken over every coordinate of
/// every parameter. Relative error is `|analytic - numeric| / max(|analytic|, 1e-12)`.
///
/// `f` is evaluated once on tape leaves and then twice per coordinate on
/// constants, so it must be deterministic.
pub fn finite_diff_check<F>(f: F, params: &[Array], step: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::config("step", "finite-difference step must be positive"));
    }
    if params.is_empty() {
        return Err(Error::EmptyWrt);
    }
    let tape = Tape::new();
    let leaves: Vec<Tensor> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&leaves)?;
    let refs: Vec<&Tensor> = leaves.iter().collect();
    let analytic = grad(&loss, &refs, false)?;

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Array> = params.to_vec();
    for (k, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            let original = p.data()[j];
            probe[k].data_mut()[j] = original + step;
            let plus = eval(&f, &probe)?;
            probe[k].data_mut()[j] = original - step;
            let minus = eval(&f, &probe)?;
            probe[k].data_mut()[j] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[k].data()[j];
            let err = (a - numeric).abs() / a.abs().max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn eval<F>(f: &F, params: &[Array]) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let consts: Vec<Tensor> = params.iter().cloned().map(Tensor::constant).collect();
    let v = f(&consts)?.item();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "finite_diff_check" });
    }
    Ok(v)
}
