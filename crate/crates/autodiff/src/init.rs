use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// `(fan_in, fan_out)` of a weight shaped `(fan_out, fan_in, receptive...)`.
pub fn fans(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(AutodiffError::Contract(format!(
            "xavier init needs at least 2 dimensions, got {shape:?}"
        )));
    }
    let receptive: usize = shape[2..].iter().product();
    let fan_out = shape[0] * receptive;
    let fan_in = shape[1] * receptive;
    if fan_in == 0 || fan_out == 0 {
        return Err(AutodiffError::Contract(format!("zero fan in shape {shape:?}")));
    }
    Ok((fan_in, fan_out))
}

/// Glorot/Xavier uniform draw on `[-√(6/(fan_in+fan_out)), +√(6/(fan_in+fan_out))]`.
pub fn xavier_uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let (fan_in, fan_out) = fans(shape)?;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data)
}

pub fn xavier_init(shape: &[usize], seed: u64) -> Result<Tensor> {
    xavier_uniform(shape, &mut rng_for(seed, "xavier"))
}
