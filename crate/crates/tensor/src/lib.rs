//! Dense tensors, a reverse-mode differentiation tape, Adam, finite-difference
//! gradient checks and a binary checkpoint format.

pub mod checkpoint;
mod element;
mod error;
pub mod gradcheck;
pub mod optim;
mod params;
pub mod shape;
mod tape;
mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use optim::{Adam, AdamConfig};
pub use params::{normal, uniform_fan_in, Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::Rng;

/// Inverted dropout: survivors are scaled by `1/(1-rate)` so evaluation is
/// the identity. Returns `x` untouched when not training or when `rate == 0`.
pub fn dropout<T: Element>(
    tape: &Tape<T>,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x);
    let keep = T::of(1.0 / (1.0 - rate));
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, mask)
}
