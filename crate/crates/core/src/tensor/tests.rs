use super::*;
use crate::check::grad_check;

fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor {
    Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
}

#[test]
fn tensor_rejects_wrong_element_count() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::new(vec![2, 0], vec![]).is_err());
}

#[test]
fn matmul_identity_and_zero() {
    let mut tape = Tape::new();
    let eye = DiffTensor::constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let a = DiffTensor::constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let prod = tape.matmul(&eye, &a).unwrap();
    assert_eq!(prod.data(), a.data());
    let zero = DiffTensor::constant(t2(2, 2, &[0.0; 4]));
    let ann = tape.matmul(&a, &zero).unwrap();
    assert!(ann.data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_mismatch_is_error() {
    let mut tape = Tape::new();
    let a = DiffTensor::constant(t2(2, 3, &[0.0; 6]));
    let b = DiffTensor::constant(t2(2, 3, &[0.0; 6]));
    assert!(tape.matmul(&a, &b).is_err());
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
    let b = Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.73).cos());
    let err = grad_check(&[a, b], |t, l| {
        let y = t.matmul(&l[0], &l[1])?;
        t.sum(&y)
    })
    .unwrap();
    assert!(err < 1e-6, "max rel err {}", err);
}

#[test]
fn depthwise_delta_kernel_is_identity() {
    let mut tape = Tape::new();
    let x = DiffTensor::constant(Tensor::from_fn(&[2, 4, 4], |i| i as f64));
    let mut k = Tensor::zeros(&[2, 3, 3]);
    k.data_mut()[4] = 1.0;
    k.data_mut()[9 + 4] = 1.0;
    let y = tape
        .depthwise_conv2d(&x, &DiffTensor::constant(k), 1)
        .unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn depthwise_zero_input_gives_zero() {
    let mut tape = Tape::new();
    let x = DiffTensor::constant(Tensor::zeros(&[1, 4, 4]));
    let k = DiffTensor::constant(Tensor::filled(&[1, 5, 5], 0.3));
    let y = tape.depthwise_conv2d(&x, &k, 2).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn depthwise_rejects_even_kernel() {
    let mut tape = Tape::new();
    let x = DiffTensor::constant(Tensor::zeros(&[1, 4, 4]));
    let k = DiffTensor::constant(Tensor::zeros(&[1, 4, 4]));
    assert!(tape.depthwise_conv2d(&x, &k, 1).is_err());
}

#[test]
fn pointwise_identity_and_stride() {
    let mut tape = Tape::new();
    let x = DiffTensor::constant(Tensor::from_fn(&[2, 4, 4], |i| i as f64));
    let eye = DiffTensor::constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let y = tape.pointwise_conv(&x, &eye, 1).unwrap();
    assert_eq!(y.data(), x.data());

    let c = DiffTensor::constant(Tensor::filled(&[1, 4, 4], 2.5));
    let w = DiffTensor::constant(t2(1, 1, &[1.0]));
    let d = tape.pointwise_conv(&c, &w, 2).unwrap();
    assert_eq!(d.shape(), &[1, 2, 2]);
    assert!(d.data().iter().all(|&v| v == 2.5));
}

#[test]
fn pointwise_rejects_zero_stride() {
    let mut tape = Tape::new();
    let x = DiffTensor::constant(Tensor::zeros(&[1, 4, 4]));
    let w = DiffTensor::constant(Tensor::zeros(&[1, 1]));
    assert!(tape.pointwise_conv(&x, &w, 0).is_err());
}

#[test]
fn diff_tensors_are_shareable_between_threads() {
    fn assert_send_sync<T: Send + Sync>() {}
    assert_send_sync::<Tensor>();
    assert_send_sync::<DiffTensor>();
}

#[test]
fn activation_fixed_points_and_asymptote() {
    let mut tape = Tape::new();
    let x = DiffTensor::constant(Tensor::new(vec![3], vec![0.0, 10.0, -10.0]).unwrap());
    let s = tape.silu(&x).unwrap();
    assert_eq!(s.data()[0], 0.0);
    assert!((s.data()[1] - 10.0).abs() < 1e-3);
    let g = tape.gelu(&x).unwrap();
    assert_eq!(g.data()[0], 0.0);
    assert!((g.data()[1] - 10.0).abs() < 1e-3);
    let sp = tape.softplus(&x).unwrap();
    assert!((sp.data()[0] - (2.0f64).ln()).abs() < 1e-12);
}

#[test]
fn layer_norm_constant_input_is_zero() {
    let mut tape = Tape::new();
    let x = DiffTensor::constant(Tensor::filled(&[4, 2, 2], 3.7));
    let gain = DiffTensor::constant(Tensor::filled(&[4], 1.0));
    let bias = DiffTensor::constant(Tensor::zeros(&[4]));
    let y = tape.layer_norm(&x, &gain, &bias, 1e-5).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_normalizes_each_location() {
    let mut tape = Tape::new();
    let c = 8;
    let x = DiffTensor::constant(Tensor::from_fn(&[c, 3, 3], |i| ((i * 31 + 7) % 13) as f64));
    let gain = DiffTensor::constant(Tensor::filled(&[c], 1.0));
    let bias = DiffTensor::constant(Tensor::zeros(&[c]));
    let y = tape.layer_norm(&x, &gain, &bias, 1e-5).unwrap();
    for p in 0..9 {
        let vals: Vec<f64> = (0..c).map(|ch| y.data()[ch * 9 + p]).collect();
        let mean: f64 = vals.iter().sum::<f64>() / c as f64;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4); // eps-limited
    }
}

#[test]
fn split_concat_round_trip_is_bit_exact() {
    let mut tape = Tape::new();
    let x = DiffTensor::constant(Tensor::new(vec![4], vec![1.5, -2.25, 3.125, 0.0625]).unwrap());
    let parts = tape.channel_split(&x, &[1, 1, 2]).unwrap();
    let refs: Vec<&DiffTensor> = parts.iter().collect();
    let back = tape.channel_concat(&refs).unwrap();
    assert_eq!(back.data(), x.data());
}

#[test]
fn split_rejects_extent_mismatch() {
    let mut tape = Tape::new();
    let x = DiffTensor::constant(Tensor::zeros(&[4]));
    assert!(tape.channel_split(&x, &[1, 2]).is_err());
    assert!(tape.channel_split(&x, &[0, 4]).is_err());
}

#[test]
fn concat_routes_gradient_to_slices() {
    let mut tape = Tape::new();
    let zeros = Tensor::zeros(&[2, 2]);
    let x = Tensor::from_fn(&[3, 2], |i| i as f64);
    let zl = tape.leaf(&zeros);
    let xl = tape.leaf(&x);
    let c = tape.channel_concat(&[&zl, &xl]).unwrap();
    // weight only the x part
    let mut w = Tensor::zeros(&[5, 2]);
    for i in 4..10 {
        w.data_mut()[i] = (i - 3) as f64;
    }
    let wc = DiffTensor::constant(w);
    let prod = tape.mul(&c, &wc).unwrap();
    let root = tape.sum(&prod).unwrap();
    tape.backward(&root).unwrap();
    let gx = tape.grad(&xl).unwrap();
    assert_eq!(gx.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let gz = tape.grad(&zl).unwrap();
    assert!(gz.data().iter().all(|&v| v == 0.0));
}

#[test]
fn elementwise_identities() {
    let mut tape = Tape::new();
    let x = DiffTensor::constant(Tensor::from_fn(&[6], |i| i as f64 - 2.5));
    let ones = DiffTensor::constant(Tensor::filled(&[6], 1.0));
    let m = tape.mul(&x, &ones).unwrap();
    assert_eq!(m.data(), x.data());
    let neg = tape.scale(&x, -1.0).unwrap();
    let z = tape.add(&x, &neg).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn elementwise_shape_mismatch_is_error() {
    let mut tape = Tape::new();
    let a = DiffTensor::constant(Tensor::zeros(&[3]));
    let b = DiffTensor::constant(Tensor::zeros(&[4]));
    assert!(tape.add(&a, &b).is_err());
}

#[test]
fn mul_gradient_is_other_factor() {
    let mut tape = Tape::new();
    let av = Tensor::from_fn(&[5], |i| i as f64 + 1.0);
    let bv = Tensor::from_fn(&[5], |i| 0.5 * i as f64 - 1.0);
    let a = tape.leaf(&av);
    let b = tape.leaf(&bv);
    let prod = tape.mul(&a, &b).unwrap();
    let up = Tensor::from_fn(&[5], |i| (i as f64).cos());
    let weighted = tape.mul(&prod, &DiffTensor::constant(up.clone())).unwrap();
    let root = tape.sum(&weighted).unwrap();
    tape.backward(&root).unwrap();
    let ga = tape.grad(&a).unwrap();
    for i in 0..5 {
        assert!((ga.data()[i] - up.data()[i] * bv.data()[i]).abs() < 1e-14);
    }
}

#[test]
fn reduce_max_basics_and_tie_rule() {
    let mut tape = Tape::new();
    let x = DiffTensor::constant(Tensor::new(vec![3], vec![1.0, 3.0, 2.0]).unwrap());
    let (v, arg) = tape.reduce_max_arg(&x, 0).unwrap();
    assert_eq!(v.shape(), &[] as &[usize]);
    assert_eq!(v.data()[0], 3.0);
    assert_eq!(arg, vec![1]);

    let ties = DiffTensor::constant(Tensor::new(vec![3], vec![5.0, 5.0, 5.0]).unwrap());
    let (tv, targ) = tape.reduce_max_arg(&ties, 0).unwrap();
    assert_eq!(tv.data()[0], 5.0);
    assert_eq!(targ, vec![0]);

    assert!(tape.reduce_max_arg(&x, 1).is_err());
}

#[test]
fn reduce_max_gradient_is_one_hot() {
    let mut tape = Tape::new();
    let xv = Tensor::new(vec![4], vec![0.1, 0.9, 0.3, -0.2]).unwrap();
    let x = tape.leaf(&xv);
    let (v, _) = tape.reduce_max_arg(&x, 0).unwrap();
    tape.backward(&v).unwrap();
    let g = tape.grad(&x).unwrap();
    assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn backward_sum_gives_ones_and_norm_gives_x() {
    let mut tape = Tape::new();
    let xv = Tensor::from_fn(&[7], |i| (i as f64 * 0.31).sin());
    let x = tape.leaf(&xv);
    let s = tape.sum(&x).unwrap();
    tape.backward(&s).unwrap();
    assert!(tape.grad(&x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut tape2 = Tape::new();
    let x2 = tape2.leaf(&xv);
    let sq = tape2.mul(&x2, &x2).unwrap();
    let half = tape2.scale(&sq, 0.5).unwrap();
    let root = tape2.sum(&half).unwrap();
    tape2.backward(&root).unwrap();
    let g = tape2.grad(&x2).unwrap();
    for i in 0..7 {
        assert!((g.data()[i] - xv.data()[i]).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(&[3]));
    assert!(tape.backward(&x).is_err());
}

#[test]
fn fan_out_accumulates() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::filled(&[4], 1.5));
    let y = tape.add(&x, &x).unwrap();
    let root = tape.sum(&y).unwrap();
    tape.backward(&root).unwrap();
    assert!(tape.grad(&x).unwrap().data().iter().all(|&v| v == 2.0));
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.17).tan()));
        let w = tape.leaf(&Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.29).cos()));
        let m = tape.matmul(&x, &w).unwrap();
        let s = tape.silu(&m).unwrap();
        let r = tape.sum(&s).unwrap();
        r.scalar_value().to_bits()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_result_is_an_error() {
    let mut tape = Tape::new();
    let big = DiffTensor::constant(Tensor::filled(&[2], f64::MAX));
    let r = tape.mul(&big, &big);
    assert!(matches!(r, Err(crate::error::Error::NonFinite(_))));
}

#[test]
fn gather_rows_and_segment_ops() {
    let mut tape = Tape::new();
    let x = DiffTensor::constant(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let g = tape.gather_rows(&x, &[2, 0, 1, 1]).unwrap();
    assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
    assert!(tape.gather_rows(&x, &[3]).is_err());

    let sm = tape.segment_max(&g, 2).unwrap();
    assert_eq!(sm.data(), &[5.0, 6.0, 3.0, 4.0]);
    let mean = tape.segment_mean(&g, 2).unwrap();
    assert_eq!(mean.data(), &[3.0, 4.0, 3.0, 4.0]);
    let sum = tape.segment_sum(&g, 2).unwrap();
    assert_eq!(sum.data(), &[6.0, 8.0, 6.0, 8.0]);
}

#[test]
fn patchify_grid_round_trips() {
    let mut tape = Tape::new();
    let x = DiffTensor::constant(Tensor::from_fn(&[3, 4, 6], |i| i as f64));
    let p = tape.patchify(&x, 2).unwrap();
    assert_eq!(p.shape(), &[6, 12]);
    let back = tape.unpatchify(&p, 3, 4, 6, 2).unwrap();
    assert_eq!(back.data(), x.data());

    let g = tape.rows_to_grid(&p, 2, 3).unwrap();
    assert_eq!(g.shape(), &[12, 2, 3]);
    let rows = tape.grid_to_rows(&g).unwrap();
    assert_eq!(rows.data(), p.data());
}

#[test]
fn upsample_nearest_repeats_blocks() {
    let mut tape = Tape::new();
    let x = DiffTensor::constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let u = tape.upsample_nearest2(&x).unwrap();
    assert_eq!(
        u.data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
}

#[test]
fn channel_softmax_sums_to_one() {
    let mut tape = Tape::new();
    let x = DiffTensor::constant(Tensor::from_fn(&[5, 2, 2], |i| (i as f64 * 0.41).sin()));
    let s = tape.channel_softmax(&x).unwrap();
    for p in 0..4 {
        let total: f64 = (0..5).map(|c| s.data()[c * 4 + p]).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn split_concat_reproduces_input(
            data in proptest::collection::vec(-1e6f64..1e6, 6 * 4),
            cut in 1usize..5,
        ) {
            let mut tape = Tape::new();
            let x = DiffTensor::constant(Tensor::new(vec![6, 4], data.clone()).unwrap());
            let parts = tape.channel_split(&x, &[cut, 6 - cut]).unwrap();
            let refs: Vec<&DiffTensor> = parts.iter().collect();
            let back = tape.channel_concat(&refs).unwrap();
            prop_assert_eq!(back.data(), &data[..]);
        }

        #[test]
        fn reduce_max_picks_true_maximum(
            data in proptest::collection::vec(-1e3f64..1e3, 12),
        ) {
            let mut tape = Tape::new();
            let x = DiffTensor::constant(Tensor::new(vec![12], data.clone()).unwrap());
            let (v, arg) = tape.reduce_max_arg(&x, 0).unwrap();
            let best = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(v.data()[0], best);
            prop_assert_eq!(data[arg[0]], best);
            // lowest-index tie rule
            prop_assert!(data[..arg[0]].iter().all(|&d| d < best));
        }
    }
}
