//! Learned adjacency: saturated directed graphs from feature matrices, daily
//! and weekly time-pool lookups, and attention fusion of the spatial and
//! temporal graphs.
//!
//! Every function here takes and returns tape variables; leading batch axes
//! broadcast, so a window-independent spatial graph `[N, N]` combines freely
//! with per-window temporal graphs `[B, N, N]`.

use sfad_tensor::{Element, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Keeps the `k` largest entries of each row of `scores` (`[.., N, N]`);
/// ties go to the lower column index. Returns the 0/1 mask.
pub fn top_k_mask<T: Element>(scores: &[T], n: usize, k: usize) -> Vec<T> {
    let mut mask = vec![T::zero(); scores.len()];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for (row, out) in scores.chunks(n).zip(mask.chunks_mut(n)) {
        order.clear();
        order.extend(0..n);
        // Stable sort keeps ascending column order among equal scores.
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
        for &j in &order[..k.min(n)] {
            out[j] = T::one();
        }
    }
    mask
}

/// Saturated directed graph from two feature matrices.
///
/// `M1 = tanh(α·F1·W1)`, `M2 = tanh(α·F2·W2)`, `P = M1·M2ᵀ`,
/// `A = ReLU(tanh(α·(P − Pᵀ)))`, then row-wise top-`k`. Because the score is
/// formed as `P − Pᵀ` it is exactly antisymmetric, so at most one of
/// `A[i,j]`, `A[j,i]` is nonzero and the diagonal is zero. The top-k mask is a
/// constant during backward.
pub fn directed_graph<T: Element>(
    tape: &Tape<T>,
    f1: Var,
    f2: Var,
    w1: Var,
    w2: Var,
    alpha: f64,
    k: usize,
) -> Result<Var> {
    let n = tape.shape(f1)[tape.shape(f1).len() - 2];
    if k > n {
        return Err(Error::config(format!("top-k of {k} exceeds node count {n}")));
    }
    let a = T::of(alpha);
    let m1 = tape.tanh(tape.scale(tape.matmul(f1, w1)?, a));
    let m2 = tape.tanh(tape.scale(tape.matmul(f2, w2)?, a));
    let p = tape.matmul(m1, tape.transpose(m2)?)?;
    let s = tape.sub(p, tape.transpose(p)?)?;
    let dense = tape.relu(tape.tanh(tape.scale(s, a)));
    if k == n {
        return Ok(dense);
    }
    let mask = top_k_mask(&tape.data(dense), n, k);
    let mask = tape.constant(Tensor::new(tape.shape(dense), mask)?);
    Ok(tape.mul(dense, mask)?)
}

/// Time-pool lookups for a batch of windows.
#[derive(Clone, Copy, Debug)]
pub struct TimeFeatures {
    /// Daily-pool slices, `[B, Th, N, D]`.
    pub daily: Var,
    /// Weekly-pool slices, `[B, Th, N, D]`.
    pub weekly: Var,
    /// `daily` averaged over the window, `[B, N, D]`.
    pub daily_mean: Var,
    /// `weekly` averaged over the window, `[B, N, D]`.
    pub weekly_mean: Var,
}

/// Looks up `[B·Th]` time-of-day and day-of-week indices in the pools
/// (`[slots, N, D]`) and averages each window over its `Th` steps.
pub fn temporal_features<T: Element>(
    tape: &Tape<T>,
    daily_pool: Var,
    weekly_pool: Var,
    tod: &[usize],
    dow: &[usize],
    history: usize,
) -> Result<TimeFeatures> {
    if history == 0 || tod.len() != dow.len() || !tod.len().is_multiple_of(history) {
        return Err(Error::config(format!(
            "time indices of length {}/{} do not form windows of {history} steps",
            tod.len(),
            dow.len()
        )));
    }
    let b = tod.len() / history;
    let look = |pool: Var, idx: &[usize]| -> Result<(Var, Var)> {
        let shape = tape.shape(pool);
        let (n, d) = (shape[1], shape[2]);
        let rows = tape.index_select(pool, idx)?;
        let seq = tape.reshape(rows, &[b, history, n, d])?;
        let mean = tape.reshape(tape.mean_axis(seq, 1)?, &[b, n, d])?;
        Ok((seq, mean))
    };
    let (daily, daily_mean) = look(daily_pool, tod)?;
    let (weekly, weekly_mean) = look(weekly_pool, dow)?;
    Ok(TimeFeatures { daily, weekly, daily_mean, weekly_mean })
}

/// Attention-fusion weights: `wq`, `wk`, `wv` `[s, N, d_h]`, `wo` `[s·d_h, N]`.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Fused {
    /// `ReLU(tanh(β·A_s·A_t))`
    pub saturated: Var,
    /// Row-softmax attention scores, `[.., s, N, N]`.
    pub attention: Var,
    /// Non-negative fused adjacency, `[.., N, N]`.
    pub adjacency: Var,
}

/// `Â^f = ReLU(tanh(β·A_s·A_t))`; per head `Q = A_s·W_Q`, `K = A_t·W_K`,
/// `V = Â^f·W_V`, `softmax(Q·Kᵀ/√d_h)·V`; heads are concatenated, projected
/// by `W_O` and passed through a final ReLU.
pub fn fuse_graphs<T: Element>(
    tape: &Tape<T>,
    a_s: Var,
    a_t: Var,
    beta: f64,
    w: FusionVars,
) -> Result<Fused> {
    let saturated = tape.relu(tape.tanh(tape.scale(tape.matmul(a_s, a_t)?, T::of(beta))));
    let wshape = tape.shape(w.wq);
    let (heads, dh) = (wshape[0], wshape[2]);
    // Insert a head axis: [.., N, N] -> [.., 1, N, N].
    let head_axis = |v: Var| -> Result<Var> {
        let mut s = tape.shape(v);
        let r = s.len();
        s.insert(r - 2, 1);
        Ok(tape.reshape(v, &s)?)
    };
    let q = tape.matmul(head_axis(a_s)?, w.wq)?;
    let k = tape.matmul(head_axis(a_t)?, w.wk)?;
    let v = tape.matmul(head_axis(saturated)?, w.wv)?;
    let logits = tape.scale(tape.matmul(q, tape.transpose(k)?)?, T::of(1.0 / (dh as f64).sqrt()));
    let attention = tape.softmax(logits, -1)?;
    let heads_out = tape.matmul(attention, v)?;
    // [.., s, N, d_h] -> [.., N, s·d_h]
    let shape = tape.shape(heads_out);
    let r = shape.len();
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 3, r - 2);
    let joined = tape.permute(heads_out, &perm)?;
    let mut flat: Vec<usize> = shape[..r - 3].to_vec();
    flat.extend([shape[r - 2], heads * dh]);
    let joined = tape.reshape(joined, &flat)?;
    let adjacency = tape.relu(tape.matmul(joined, w.wo)?);
    Ok(Fused { saturated, attention, adjacency })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use sfad_tensor::{normal, uniform_fan_in};

    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn top_k_keeps_largest_with_low_index_ties() {
        let m = top_k_mask(&[0.5, 0.2, 0.9, 0.1], 4, 2);
        assert_eq!(m, vec![1.0, 0.0, 1.0, 0.0]);
        let m = top_k_mask(&[0.3, 0.3, 0.3, 0.1], 4, 2);
        assert_eq!(m, vec![1.0, 1.0, 0.0, 0.0]);
        let m = top_k_mask(&[0.0f64; 4], 4, 1);
        assert_eq!(m, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn shared_features_give_antisymmetric_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::<f64>::new();
        let e = tape.leaf(&normal(&[6, 3], 1.0, &mut rng));
        let w = tape.leaf(&uniform_fan_in(&[3, 3], &mut rng));
        let a = directed_graph(&tape, e, e, w, w, 3.0, 6).unwrap();
        let a = tape.data(a);
        for i in 0..6 {
            assert_eq!(a[i * 6 + i], 0.0);
            for j in 0..6 {
                assert_eq!(a[i * 6 + j] * a[j * 6 + i], 0.0);
            }
        }
    }

    #[test]
    fn directed_graph_rows_are_sparse_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::<f64>::new();
        let f1 = tape.leaf(&normal(&[3, 7, 4], 1.0, &mut rng));
        let f2 = tape.leaf(&normal(&[3, 7, 4], 1.0, &mut rng));
        let w1 = tape.leaf(&uniform_fan_in(&[4, 4], &mut rng));
        let w2 = tape.leaf(&uniform_fan_in(&[4, 4], &mut rng));
        let a = directed_graph(&tape, f1, f2, w1, w2, 3.0, 2).unwrap();
        assert_eq!(tape.shape(a), vec![3, 7, 7]);
        for row in tape.data(a).chunks(7) {
            assert!(row.iter().filter(|&&v| v != 0.0).count() <= 2);
            assert!(row.iter().all(|&v| (0.0..1.0).contains(&v)));
        }
        assert!(directed_graph(&tape, f1, f2, w1, w2, 3.0, 8).is_err());
    }

    #[test]
    fn temporal_features_average_lookups() {
        let tape = Tape::<f64>::new();
        let daily = tape.leaf(&t(&[3, 1, 1], &[1.0, 2.0, 4.0]));
        let weekly = tape.leaf(&Tensor::full(vec![7, 1, 1], 5.0));
        let f = temporal_features(&tape, daily, weekly, &[0, 2, 1, 2], &[3, 4, 5, 6], 2).unwrap();
        assert_eq!(&*tape.data(f.daily_mean), &[2.5, 3.0]);
        assert_eq!(&*tape.data(f.weekly_mean), &[5.0, 5.0]);
        let one = temporal_features(&tape, daily, weekly, &[2], &[0], 1).unwrap();
        assert_eq!(&*tape.data(one.daily_mean), &[4.0]);
        assert!(temporal_features(&tape, daily, weekly, &[3], &[0], 1).is_err());
    }

    fn fusion_vars(tape: &Tape<f64>, n: usize, heads: usize, dh: usize, zero_qk: bool) -> FusionVars {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mk = |shape: &[usize], zero: bool| {
            if zero {
                tape.leaf(&Tensor::zeros(shape.to_vec()))
            } else {
                tape.leaf(&uniform_fan_in(shape, &mut rng))
            }
        };
        FusionVars {
            wq: mk(&[heads, n, dh], zero_qk),
            wk: mk(&[heads, n, dh], zero_qk),
            wv: mk(&[heads, n, dh], false),
            wo: mk(&[heads * dh, n], false),
        }
    }

    #[test]
    fn zero_query_key_weights_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::<f64>::new();
        let n = 5;
        let a_s = tape.leaf(&normal(&[n, n], 1.0, &mut rng));
        let a_t = tape.leaf(&normal(&[n, n], 1.0, &mut rng));
        let w = fusion_vars(&tape, n, 1, 3, true);
        let f = fuse_graphs(&tape, a_s, a_t, 3.0, w).unwrap();
        assert!(tape.data(f.attention).iter().all(|&p| (p - 0.2).abs() < 1e-15));
        // Head output: the column mean of V = Â^f·W_V, replicated across rows.
        let vv = tape.matmul(f.saturated, w.wv).unwrap();
        let v = tape.value(vv);
        let head = tape.matmul(f.attention, vv).unwrap();
        let head = tape.data(head);
        for i in 0..n {
            for c in 0..3 {
                let mean: f64 = (0..n).map(|r| v.data()[r * 3 + c]).sum::<f64>() / n as f64;
                assert!((head[i * 3 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_graphs_fuse_to_zero() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(vec![4, 4]));
        let f = fuse_graphs(&tape, z, z, 3.0, fusion_vars(&tape, 4, 2, 8, false)).unwrap();
        assert!(tape.data(f.saturated).iter().all(|&v| v == 0.0));
        assert!(tape.data(f.adjacency).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_fusion_is_non_negative_with_stochastic_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::<f64>::new();
        let a_s = tape.leaf(&normal(&[6, 6], 1.0, &mut rng));
        let a_t = tape.leaf(&normal(&[2, 6, 6], 1.0, &mut rng));
        let f = fuse_graphs(&tape, a_s, a_t, 3.0, fusion_vars(&tape, 6, 3, 4, false)).unwrap();
        assert_eq!(tape.shape(f.attention), vec![2, 3, 6, 6]);
        assert_eq!(tape.shape(f.adjacency), vec![2, 6, 6]);
        for row in tape.data(f.attention).chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p > 0.0));
        }
        assert!(tape.data(f.adjacency).iter().all(|&v| v >= 0.0));
    }
}
