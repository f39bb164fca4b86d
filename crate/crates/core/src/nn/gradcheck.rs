use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Compares backprop gradients of `loss` against central differences on
/// `per_param` randomly chosen entries of every parameter under `prefixes`.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; the store must be f64.
pub fn gradient_check<F>(
    store: &ParamStore,
    prefixes: &[&str],
    loss: F,
    per_param: usize,
    step: f64,
    floor: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    if store.dtype() != DType::F64 {
        return Err(Error::Contract("gradient checks need an f64 parameter store".into()));
    }
    let scalar = |t: Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let grads = loss()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for (name, var) in store.vars_with_prefix(prefixes) {
        let original = var.as_tensor().detach().copy()?;
        let shape = original.shape().clone();
        let values: Vec<f64> = original.flatten_all()?.to_vec1()?;
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; values.len()],
        };
        for _ in 0..per_param.min(values.len()) {
            let i = rng.random_range(0..values.len());
            let mut probe = values.clone();
            probe[i] = values[i] + step;
            var.set(&Tensor::from_vec(probe.clone(), shape.clone(), original.device())?)?;
            let up = scalar(loss()?)?;
            probe[i] = values[i] - step;
            var.set(&Tensor::from_vec(probe, shape.clone(), original.device())?)?;
            let down = scalar(loss()?)?;
            var.set(&original)?;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{i}]: analytic {a:.6e}, numeric {numeric:.6e}");
            }
        }
    }
    Ok(report)
}
