use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfad_tensor::{
    dropout, grad_check, normal, GradCheckConfig, ParamStore, Tape, Tensor, TensorError, Var,
};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn store_of(tensors: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, t) in tensors {
        s.insert(name, t).unwrap();
    }
    s
}

/// Weighted sum so every output entry carries a distinct cotangent.
fn weighted_sum(tape: &Tape<f64>, x: Var) -> Result<Var, TensorError> {
    let shape = tape.shape(x);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7) % 11) as f64 * 0.1).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let p = tape.mul(x, w)?;
    let s = tape.sum(p);
    Ok(tape.scale(s, 1.0 / n as f64))
}

fn fd_config() -> GradCheckConfig {
    GradCheckConfig { h: 1e-6, tol: 1e-6, floor: 1e-4 }
}

#[test]
fn matmul_examples() {
    let tape = Tape::new();
    let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(&*tape.data(c), &[3.0, 4.0, 5.0, 6.0]);

    let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    let d = tape.matmul(r, col).unwrap();
    assert_eq!(&*tape.data(d), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn matmul_sum_gradient_is_row_sums_of_b() {
    // d sum(A·B)/dA[i,p] = Σ_j B[p,j]
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = normal::<f64>(&[3, 4], 1.0, &mut rng);
    let b = normal::<f64>(&[4, 2], 1.0, &mut rng);
    let p = store_of(vec![("a", a), ("b", b.clone())]);
    let tape = Tape::new();
    let bound = p.bind(&tape);
    let c = tape.matmul(bound.vars()[0], bound.vars()[1]).unwrap();
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap();
    let ga = g.get(bound.vars()[0]).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expect = b.data()[k * 2] + b.data()[k * 2 + 1];
            assert!((ga[i * 4 + k] - expect).abs() < 1e-12);
        }
    }
    let report = grad_check(
        &p,
        |tape, b| {
            let c = tape.matmul(b.vars()[0], b.vars()[1])?;
            Ok::<_, TensorError>(tape.sum(c))
        },
        fd_config(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn batched_and_broadcast_matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases: Vec<(Vec<usize>, Vec<usize>)> = vec![
        (vec![2, 3, 4], vec![4, 5]),
        (vec![4, 4], vec![2, 3, 4, 5]),
        (vec![2, 1, 3, 4], vec![2, 3, 4, 2]),
        (vec![2, 3, 4], vec![2, 4, 3]),
        // large enough to take the packed kernel path
        (vec![20, 17], vec![17, 19]),
    ];
    for (sa, sb) in cases {
        let p = store_of(vec![
            ("a", normal::<f64>(&sa, 1.0, &mut rng)),
            ("b", normal::<f64>(&sb, 1.0, &mut rng)),
        ]);
        let report = grad_check(
            &p,
            |tape, b| {
                let c = tape.matmul(b.vars()[0], b.vars()[1])?;
                weighted_sum(tape, c)
            },
            fd_config(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{sa:?} x {sb:?}: {report:?}");
    }
}

#[test]
fn batched_matmul_matches_per_batch_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = normal::<f64>(&[3, 2, 4], 1.0, &mut rng);
    let b = normal::<f64>(&[4, 5], 1.0, &mut rng);
    let tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.value(tape.matmul(va, vb).unwrap());
    assert_eq!(c.shape(), &[3, 2, 5]);
    for batch in 0..3 {
        for i in 0..2 {
            for j in 0..5 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.data()[batch * 8 + i * 4 + p] * b.data()[p * 5 + j];
                }
                assert!((c.data()[batch * 10 + i * 5 + j] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn activation_values() {
    let tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, -3.0, 3.0]));
    assert_eq!(tape.data(tape.sigmoid(x))[0], 0.5);
    let r = tape.relu(x);
    assert_eq!(&*tape.data(r), &[0.0, 0.0, 3.0]);
}

#[test]
fn tanh_gradient_at_zero_is_one() {
    let p = store_of(vec![("x", t(&[1], &[0.0]))]);
    let tape = Tape::new();
    let b = p.bind(&tape);
    let y = tape.tanh(b.vars()[0]);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(b.vars()[0]).unwrap(), &[1.0]);
    let report = grad_check(
        &p,
        |tape, b| {
            let y = tape.tanh(b.vars()[0]);
            Ok::<_, TensorError>(tape.sum(y))
        },
        fd_config(),
    )
    .unwrap();
    assert!((report.params[0].numeric - 1.0).abs() < 1e-9);
}

#[test]
fn elementwise_gradients_with_broadcasting() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = store_of(vec![
        ("a", normal::<f64>(&[2, 3, 4], 1.0, &mut rng)),
        ("b", normal::<f64>(&[3, 1], 1.0, &mut rng)),
        ("c", normal::<f64>(&[4], 1.0, &mut rng)),
    ]);
    let report = grad_check(
        &p,
        |tape, b| {
            let [a, bb, c] = [b.vars()[0], b.vars()[1], b.vars()[2]];
            let s = tape.add(a, bb)?;
            let d = tape.sub(s, c)?;
            let m = tape.mul(d, c)?;
            let th = tape.tanh(m);
            let sg = tape.sigmoid(d);
            let q = tape.mul(th, sg)?;
            let r = tape.relu(q);
            let ab = tape.abs(d);
            let den = tape.shift(ab, 1.5);
            let dv = tape.div(r, den)?;
            let sc = tape.scale(dv, 2.5);
            weighted_sum(tape, sc)
        },
        fd_config(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = tape.softmax(x, -1).unwrap();
    for &v in tape.data(y).iter() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = tape.constant(t(&[2], &[1000.0, 1000.0]));
    let y = tape.softmax(big, 0).unwrap();
    assert_eq!(&*tape.data(y), &[0.5, 0.5]);
}

#[test]
fn softmax_gradient_along_inner_and_outer_axes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for axis in [0isize, 1, 2] {
        let p = store_of(vec![("x", normal::<f64>(&[3, 4, 2], 2.0, &mut rng))]);
        let report = grad_check(
            &p,
            |tape, b| {
                let y = tape.softmax(b.vars()[0], axis)?;
                weighted_sum(tape, y)
            },
            fd_config(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "axis {axis}: {report:?}");
    }
}

#[test]
fn concat_examples_and_gradient() {
    let tape = Tape::new();
    let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
    let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.shape(c), vec![2, 2]);
    assert_eq!(&*tape.data(c), &[1.0, 3.0, 2.0, 4.0]);
    let single = tape.concat(&[a], 0).unwrap();
    assert_eq!(&*tape.data(single), &[1.0, 2.0]);
    let bad = tape.constant(Tensor::zeros([3, 1]));
    assert!(matches!(tape.concat(&[a, bad], 1), Err(TensorError::Dimension(_))));

    let p = store_of(vec![("a", t(&[2, 1], &[1.0, 2.0])), ("b", t(&[2, 2], &[0.0; 4]))]);
    let tape = Tape::new();
    let bound = p.bind(&tape);
    let c = tape.concat(bound.vars(), 1).unwrap();
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(bound.vars()[0]).unwrap(), &[1.0, 1.0]);
}

#[test]
fn structural_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = store_of(vec![
        ("a", normal::<f64>(&[2, 3, 4], 1.0, &mut rng)),
        ("b", normal::<f64>(&[2, 2, 4], 1.0, &mut rng)),
        ("table", normal::<f64>(&[5, 2], 1.0, &mut rng)),
        ("row", normal::<f64>(&[1, 4], 1.0, &mut rng)),
    ]);
    let report = grad_check(
        &p,
        |tape, b| {
            let [a, bb, table, row] = [b.vars()[0], b.vars()[1], b.vars()[2], b.vars()[3]];
            let c = tape.concat(&[a, bb], 1)?; // [2,5,4]
            let n = tape.narrow(c, 1, 1, 3)?; // [2,3,4]
            let pm = tape.permute(n, &[2, 0, 1])?; // [4,2,3]
            let tr = tape.transpose(pm)?; // [4,3,2]
            let rs = tape.reshape(tr, &[12, 2])?;
            let sel = tape.index_select(table, &[0, 3, 3, 1])?; // [4,2]
            let sel = tape.reshape(sel, &[1, 8])?;
            let br = tape.broadcast_to(row, &[3, 4])?;
            let sa = tape.sum_axis(rs, 0)?; // [1,2]
            let ma = tape.mean_axis(br, 0)?; // [1,4]
            let u = tape.concat(&[sa, ma, sel], 1)?;
            let v = tape.tanh(u);
            weighted_sum(tape, v)
        },
        fd_config(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn index_select_out_of_range_is_lookup_error() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([3, 2]));
    assert!(matches!(tape.index_select(x, &[3]), Err(TensorError::Lookup(_))));
}

#[test]
fn backward_visits_each_op_once_and_accumulates_shared_leaves() {
    let p = store_of(vec![("x", t(&[2], &[1.0, -2.0]))]);
    let tape = Tape::new();
    let b = p.bind(&tape);
    let x = b.vars()[0];
    let y = tape.mul(x, x).unwrap(); // x used twice
    let z = tape.add(y, x).unwrap();
    let s = tape.sum(z);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[3.0, -3.0]);
    // leaf, mul, add, sum
    assert_eq!(g.visited(), 4);
    assert!(matches!(tape.backward(z), Err(TensorError::Usage(_))));
    tape.clear();
    assert!(tape.is_empty());
}

#[test]
fn dropout_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full([4], 2.0));
    assert_eq!(dropout(&tape, x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(dropout(&tape, x, 0.5, false, &mut rng).unwrap(), x);
    assert!(matches!(dropout(&tape, x, 1.0, true, &mut rng), Err(TensorError::Config(_))));

    // Monte-Carlo: inverted dropout preserves the mean.
    let n = 100_000;
    let x = tape.constant(Tensor::full([n], 3.0));
    let y = dropout(&tape, x, 0.5, true, &mut rng).unwrap();
    let data = tape.data(y);
    let mean = data.iter().sum::<f64>() / n as f64;
    // std of each draw is 3, so the sample mean has std 3/sqrt(n) ≈ 0.0095
    assert!((mean - 3.0).abs() < 5.0 * 3.0 / (n as f64).sqrt(), "mean {mean}");
    assert!(data.iter().all(|&v| v == 0.0 || v == 6.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_positive_and_normalised(
        vals in prop::collection::vec(-50.0f64..50.0, 12)
    ) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([3, 4], vals).unwrap());
        let y = tape.softmax(x, -1).unwrap();
        let d = tape.data(y);
        for r in 0..3 {
            let row = &d[r * 4..r * 4 + 4];
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences(
        a in prop::collection::vec(-2.0f64..2.0, 6),
        b in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        let p = store_of(vec![
            ("a", Tensor::new([2, 3], a).unwrap()),
            ("b", Tensor::new([3, 2], b).unwrap()),
        ]);
        let report = grad_check(&p, |tape, bd| {
            let m = tape.matmul(bd.vars()[0], bd.vars()[1])?;
            let s = tape.softmax(m, -1)?;
            let th = tape.tanh(m);
            let sg = tape.sigmoid(th);
            let q = tape.mul(s, sg)?;
            weighted_sum(tape, q)
        }, GradCheckConfig::default()).unwrap();
        prop_assert!(report.max_rel_err < 1e-5, "{:?}", report);
    }

    #[test]
    fn reshape_and_permute_roundtrip(vals in prop::collection::vec(-5.0f64..5.0, 24)) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([2, 3, 4], vals.clone()).unwrap());
        let p = tape.permute(x, &[1, 2, 0]).unwrap();
        let back = tape.permute(p, &[2, 0, 1]).unwrap();
        prop_assert_eq!(&*tape.data(back), vals.as_slice());
    }
}
