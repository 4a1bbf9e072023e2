use sfad_tensor::{Element, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Output of [`masked_mae_loss`].
#[derive(Clone, Copy, Debug)]
pub struct MaskedLoss {
    pub loss: Var,
    /// Entries that entered the mean.
    pub count: usize,
}

/// Mean `|pred − target|` over entries with `target > 0` in the first
/// `horizon_limit` steps. `pred` and `target` are `[B, Tf, N, C]`.
///
/// An all-masked batch yields a constant zero loss with `count == 0`.
pub fn masked_mae_loss<T: Element>(
    tape: &Tape<T>,
    pred: Var,
    target: &Tensor<f64>,
    horizon_limit: usize,
) -> Result<MaskedLoss> {
    let shape = tape.shape(pred);
    if shape != target.shape() {
        return Err(Error::config(format!(
            "prediction {shape:?} and target {:?} differ in shape",
            target.shape()
        )));
    }
    let tf = shape[1];
    if horizon_limit == 0 || horizon_limit > tf {
        return Err(Error::config(format!("horizon limit {horizon_limit} outside 1..={tf}")));
    }
    let step = shape[2] * shape[3];
    let mut mask = Vec::with_capacity(target.numel());
    let mut count = 0usize;
    for (i, &y) in target.data().iter().enumerate() {
        let t = (i / step) % tf;
        let keep = y > 0.0 && t < horizon_limit;
        count += keep as usize;
        mask.push(if keep { T::one() } else { T::zero() });
    }
    if count == 0 {
        return Ok(MaskedLoss { loss: tape.constant(Tensor::scalar(T::zero())), count });
    }
    let y = tape.constant(target.cast());
    let m = tape.constant(Tensor::new(shape, mask)?);
    let err = tape.mul(tape.abs(tape.sub(pred, y)?), m)?;
    let loss = tape.scale(tape.sum(err), T::of(1.0 / count as f64));
    Ok(MaskedLoss { loss, count })
}
