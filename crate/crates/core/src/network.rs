//! Layers of the forecasting network. Activations use a node-major layout
//! `[B, N, Th, channels]`, so graph propagation over all time steps of a
//! window is one `N × N` by `N × (Th·d)` product.

use rand::Rng;
use sfad_tensor::{dropout, Element, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Per-position linear lift `[.., C] → [.., d]`.
pub fn input_project<T: Element>(tape: &Tape<T>, x: Var, w: Var) -> Result<Var> {
    Ok(tape.matmul(x, w)?)
}

/// Degree-normalised propagation operator `D̃⁻¹(A + I)` for `a` `[.., N, N]`.
pub fn normalized_operator<T: Element>(tape: &Tape<T>, a: Var) -> Result<Var> {
    let shape = tape.shape(a);
    let n = shape[shape.len() - 1];
    let eye = tape.constant(Tensor::eye(n));
    let a_tilde = tape.add(a, eye)?;
    let degree = tape.sum_axis(a_tilde, -1)?;
    Ok(tape.div(a_tilde, degree)?)
}

/// Residual graph propagation with a precomputed operator `p` `[.., N, N]`:
/// `H⁽⁰⁾ = H_in`, `H⁽ᵏ⁾ = γ·H_in + (1−γ)·P·H⁽ᵏ⁻¹⁾` for `k < K`, output
/// `[H⁽⁰⁾ ‖ … ‖ H⁽ᴷ⁻¹⁾]·W`. `h_in` is `[B, N, Th, d]`, `w` is `[K·d, d_out]`.
pub fn rgc_propagate<T: Element>(
    tape: &Tape<T>,
    h_in: Var,
    p: Var,
    gamma: f64,
    depth: usize,
    w: Var,
) -> Result<Var> {
    if depth == 0 {
        return Err(Error::config("propagation depth must be at least 1"));
    }
    let shape = tape.shape(h_in);
    let (b, n, th, d) = (shape[0], shape[1], shape[2], shape[3]);
    let flat = tape.reshape(h_in, &[b, n, th * d])?;
    let mut hops = vec![h_in];
    let mut h = flat;
    for _ in 1..depth {
        // Written as H_in + (1−γ)·(P·H − H_in) so that γ = 1 and P = I
        // reproduce H_in exactly rather than up to rounding.
        let delta = tape.sub(tape.matmul(p, h)?, flat)?;
        h = tape.add(flat, tape.scale(delta, T::of(1.0 - gamma)))?;
        hops.push(tape.reshape(h, &[b, n, th, d])?);
    }
    let stacked = tape.concat(&hops, -1)?;
    Ok(tape.matmul(stacked, w)?)
}

/// [`rgc_propagate`] on the raw adjacency `a`.
pub fn rgc_forward<T: Element>(
    tape: &Tape<T>,
    h_in: Var,
    a: Var,
    gamma: f64,
    depth: usize,
    w: Var,
) -> Result<Var> {
    let p = normalized_operator(tape, a)?;
    rgc_propagate(tape, h_in, p, gamma, depth, w)
}

/// GRU weights: `w_*` `[d_in, h]`, `u_*` `[h, h]`, `b_*` `[h]`.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

/// Gated recurrence over the time axis of `x` `[B, N, Th, d_in]`, nodes
/// acting as batch elements; returns the stacked states `[B, N, Th, h]`
/// after dropout. The initial state is zero.
pub fn gru_forward<T: Element>(
    tape: &Tape<T>,
    x: Var,
    g: &GruVars,
    dropout_rate: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let shape = tape.shape(x);
    let (b, n, th) = (shape[0], shape[1], shape[2]);
    let hidden = tape.shape(g.u_z)[0];
    // Input contributions for every step at once.
    let xz = tape.add(tape.matmul(x, g.w_z)?, g.b_z)?;
    let xr = tape.add(tape.matmul(x, g.w_r)?, g.b_r)?;
    let xh = tape.add(tape.matmul(x, g.w_h)?, g.b_h)?;
    let mut h: Option<Var> = None;
    let mut states = Vec::with_capacity(th);
    for t in 0..th {
        let step = |v: Var| tape.narrow(v, 2, t, 1);
        let (sz, sr, sh) = (step(xz)?, step(xr)?, step(xh)?);
        let next = match h {
            None => {
                // h₋₁ = 0: z·h̃ with h̃ = tanh(W_h x + b_h).
                let z = tape.sigmoid(sz);
                tape.mul(z, tape.tanh(sh))?
            }
            Some(prev) => {
                let z = tape.sigmoid(tape.add(sz, tape.matmul(prev, g.u_z)?)?);
                let r = tape.sigmoid(tape.add(sr, tape.matmul(prev, g.u_r)?)?);
                let cand = tape.matmul(tape.mul(r, prev)?, g.u_h)?;
                let cand = tape.tanh(tape.add(sh, cand)?);
                // (1 − z)·h + z·h̃ = h + z·(h̃ − h)
                tape.add(prev, tape.mul(z, tape.sub(cand, prev)?)?)?
            }
        };
        debug_assert_eq!(tape.shape(next), vec![b, n, 1, hidden]);
        states.push(next);
        h = Some(next);
    }
    let stacked = tape.concat(&states, 2)?;
    Ok(dropout(tape, stacked, dropout_rate, training, rng)?)
}

/// Regression-head weights: `w1` `[F, hh]`, `w2` `[hh, hh]`,
/// `conv_w` `[Th·hh, Tf·C]`, and matching biases.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub conv_w: Var,
    pub conv_b: Var,
}

/// Skip-connected head. Inputs are node-major `[B, N, Th, ·]`; the result is
/// `[B, Tf, N, C]`.
///
/// `H = [H_out ‖ X_out ‖ X ‖ T_D ‖ T_W]`, `Z = ReLU(ReLU(H)·W1 + b1)·W2 + b2`
/// per (node, step); each node's `Th × hh` block is then flattened and mapped
/// to `Tf × C` outputs by one shared linear map (a 1×1 convolution over the
/// time-channel plane).
#[allow(clippy::too_many_arguments)]
pub fn regression_head<T: Element>(
    tape: &Tape<T>,
    h_out: Var,
    x_out: Var,
    x_raw: Var,
    daily: Var,
    weekly: Var,
    w: &HeadVars,
    horizon: usize,
    channels: usize,
) -> Result<Var> {
    let skip = tape.concat(&[h_out, x_out, x_raw, daily, weekly], -1)?;
    let z = tape.relu(skip);
    let z = tape.relu(tape.add(tape.matmul(z, w.w1)?, w.b1)?);
    let z = tape.add(tape.matmul(z, w.w2)?, w.b2)?;
    let shape = tape.shape(z);
    let (b, n, th, hh) = (shape[0], shape[1], shape[2], shape[3]);
    let flat = tape.reshape(z, &[b, n, th * hh])?;
    let out = tape.add(tape.matmul(flat, w.conv_w)?, w.conv_b)?;
    let out = tape.reshape(out, &[b, n, horizon, channels])?;
    Ok(tape.permute(out, &[0, 2, 1, 3])?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use sfad_tensor::{normal, uniform_fan_in};

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn projection_of_ones_replicates_input() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 1, 1], 3.0));
        let w = tape.constant(Tensor::full(vec![1, 2], 1.0));
        assert_eq!(&*tape.data(input_project(&tape, x, w).unwrap()), &[3.0, 3.0]);
        let z = tape.constant(Tensor::zeros(vec![1, 2]));
        assert!(tape.data(input_project(&tape, x, z).unwrap()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn operator_rows_sum_to_one() {
        let mut r = rng(1);
        let tape = Tape::<f64>::new();
        let a = normal::<f64>(&[2, 6, 6], 1.0, &mut r);
        let a = Tensor::new(vec![2, 6, 6], a.data().iter().map(|v| v.abs()).collect()).unwrap();
        let p = normalized_operator(&tape, tape.constant(a)).unwrap();
        for row in tape.data(p).chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    fn replicate(tape: &Tape<f64>, h: Var, k: usize, w: Var) -> Var {
        let copies = vec![h; k];
        tape.matmul(tape.concat(&copies, -1).unwrap(), w).unwrap()
    }

    #[test]
    fn full_retention_replicates_the_input() {
        let mut r = rng(2);
        let tape = Tape::<f64>::new();
        let h = tape.leaf(&normal(&[2, 5, 3, 4], 1.0, &mut r));
        let a = tape.leaf(&uniform_fan_in(&[5, 5], &mut r));
        let w = tape.leaf(&uniform_fan_in(&[12, 6], &mut r));
        let out = rgc_forward(&tape, h, tape.relu(a), 1.0, 3, w).unwrap();
        let expect = replicate(&tape, h, 3, w);
        assert_eq!(&*tape.data(out), &*tape.data(expect));
    }

    #[test]
    fn empty_graph_propagates_identity() {
        let mut r = rng(3);
        let tape = Tape::<f64>::new();
        let h = tape.leaf(&normal(&[1, 4, 2, 3], 1.0, &mut r));
        let a = tape.constant(Tensor::zeros(vec![4, 4]));
        let w = tape.leaf(&uniform_fan_in(&[9, 3], &mut r));
        let out = rgc_forward(&tape, h, a, 0.3, 3, w).unwrap();
        let expect = replicate(&tape, h, 3, w);
        assert_eq!(&*tape.data(out), &*tape.data(expect));
    }

    fn gru_vars(tape: &Tape<f64>, d_in: usize, h: usize, zero: bool, seed: u64) -> GruVars {
        let mut r = rng(seed);
        let mut mk = |s: &[usize]| {
            if zero {
                tape.leaf(&Tensor::zeros(s.to_vec()))
            } else {
                tape.leaf(&uniform_fan_in(s, &mut r))
            }
        };
        GruVars {
            w_z: mk(&[d_in, h]),
            w_r: mk(&[d_in, h]),
            w_h: mk(&[d_in, h]),
            u_z: mk(&[h, h]),
            u_r: mk(&[h, h]),
            u_h: mk(&[h, h]),
            b_z: mk(&[h]),
            b_r: mk(&[h]),
            b_h: mk(&[h]),
        }
    }

    #[test]
    fn zero_gru_stays_at_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 4, 5]));
        let g = gru_vars(&tape, 5, 6, true, 0);
        let h = gru_forward(&tape, x, &g, 0.0, false, &mut rng(0)).unwrap();
        assert_eq!(tape.shape(h), vec![1, 3, 4, 6]);
        assert!(tape.data(h).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_gru_shape_and_bounded_states() {
        let mut r = rng(4);
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&normal(&[2, 3, 1, 4], 3.0, &mut r));
        let g = gru_vars(&tape, 4, 8, false, 5);
        let h = gru_forward(&tape, x, &g, 0.0, false, &mut r).unwrap();
        assert_eq!(tape.shape(h), vec![2, 3, 1, 8]);

        let x = tape.leaf(&normal(&[2, 3, 7, 4], 3.0, &mut r));
        let h = gru_forward(&tape, x, &g, 0.0, false, &mut r).unwrap();
        assert!(tape.data(h).iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn zero_head_predicts_zero() {
        let mut r = rng(6);
        let tape = Tape::<f64>::new();
        let act = |c: usize, r: &mut ChaCha8Rng| tape.leaf(&normal(&[2, 5, 3, c], 1.0, r));
        let (h, xo, x, d, w) = (act(4, &mut r), act(8, &mut r), act(1, &mut r), act(2, &mut r), act(2, &mut r));
        let z = |s: &[usize]| tape.leaf(&Tensor::zeros(s.to_vec()));
        let vars = HeadVars {
            w1: z(&[17, 6]),
            b1: z(&[6]),
            w2: z(&[6, 6]),
            b2: z(&[6]),
            conv_w: z(&[18, 4]),
            conv_b: z(&[4]),
        };
        let out = regression_head(&tape, h, xo, x, d, w, &vars, 4, 1).unwrap();
        assert_eq!(tape.shape(out), vec![2, 4, 5, 1]);
        assert!(tape.data(out).iter().all(|&v| v == 0.0));
    }
}
