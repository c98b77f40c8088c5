use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{grad_check, DEFAULT_EPS};

fn t64(shape: &[usize], values: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), values).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    t64(shape, &v)
}

/// `Σ out ⊙ R` with a fixed random `R`, so every output element matters.
fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let r = random(tape.shape(v), seed ^ 0x5eed);
    let w = tape.mul_const(v, &r)?;
    tape.sum(w)
}

const TOL64: f64 = 1e-4;

#[test]
fn conv_delta_kernel_is_identity() {
    let mut tape = Tape::<f32>::new();
    let x: Vec<f32> = (1..=9).map(|v| v as f32 * 0.5).collect();
    let input = tape.constant(Tensor::new([1, 3, 3, 1], x.clone()).unwrap());
    let mut k = vec![0.0f32; 9];
    k[4] = 1.0;
    let kernels = tape.constant(Tensor::new([3, 3, 1, 1], k).unwrap());
    let bias = tape.constant(Tensor::zeros([1]));
    let out = tape.conv2d(input, kernels, bias).unwrap();
    assert_eq!(tape.value(out).data(), &x[..]);
}

#[test]
fn conv_all_ones_center_and_corner() {
    let mut tape = Tape::<f32>::new();
    let input = tape.constant(Tensor::full([1, 3, 3, 1], 1.0));
    let kernels = tape.constant(Tensor::full([3, 3, 1, 1], 1.0));
    let bias = tape.constant(Tensor::zeros([1]));
    let out = tape.conv2d(input, kernels, bias).unwrap();
    let v = tape.value(out).data();
    assert_eq!(v[4], 9.0);
    assert_eq!(v[0], 4.0);
    assert_eq!(v[1], 6.0);
}

#[test]
fn conv_zero_kernel_gives_zero() {
    let mut tape = Tape::<f64>::new();
    let input = tape.constant(random(&[2, 4, 4, 3], 1));
    let kernels = tape.constant(Tensor::zeros([3, 3, 3, 5]));
    let bias = tape.constant(Tensor::zeros([5]));
    let out = tape.conv2d(input, kernels, bias).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_channel_mismatch_is_shape_error() {
    let mut tape = Tape::<f32>::new();
    let input = tape.constant(Tensor::zeros([1, 4, 4, 3]));
    let kernels = tape.constant(Tensor::zeros([3, 3, 2, 4]));
    let bias = tape.constant(Tensor::zeros([4]));
    assert!(matches!(tape.conv2d(input, kernels, bias), Err(Error::Shape(_))));
}

#[test]
fn batch_norm_constant_input_is_zero() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full([2, 3, 3, 2], 4.0));
    let g = tape.constant(Tensor::full([2], 1.0));
    let b = tape.constant(Tensor::zeros([2]));
    let (out, stats) = tape.batch_norm(x, g, b, NormStats::Batch).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v.abs() <= 4.0 * 1e-5));
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![4.0, 4.0]);
    assert_eq!(stats.var, vec![0.0, 0.0]);
}

#[test]
fn batch_norm_is_near_identity_on_standardized_data() {
    // Per channel: values ±1 in equal number, so mean 0 and biased variance 1.
    let mut data = Vec::new();
    for i in 0..16 {
        let s = if i % 2 == 0 { 1.0 } else { -1.0 };
        data.push(s);
        data.push(-s);
    }
    let x = t64(&[4, 2, 2, 2], &data);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::full([2], 1.0));
    let b = tape.constant(Tensor::zeros([2]));
    let (out, _) = tape.batch_norm(xv, g, b, NormStats::Batch).unwrap();
    for (a, b) in tape.value(out).data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn batch_norm_zero_gamma_outputs_beta() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(random(&[2, 2, 2, 3], 9));
    let g = tape.constant(Tensor::zeros([3]));
    let b = tape.constant(t64(&[3], &[0.5, -1.0, 2.0]));
    let (out, _) = tape.batch_norm(x, g, b, NormStats::Batch).unwrap();
    for px in tape.value(out).data().chunks(3) {
        assert_eq!(px, &[0.5, -1.0, 2.0]);
    }
}

#[test]
fn relu_example() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t64(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn max_pool_example_and_odd_rejection() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.max_pool_2x2(x, false).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);
    let odd = tape.constant(Tensor::zeros([1, 3, 4, 1]));
    assert!(matches!(tape.max_pool_2x2(odd, false), Err(Error::Shape(_))));
    let floored = tape.max_pool_2x2(odd, true).unwrap();
    assert_eq!(tape.shape(floored), &[1, 1, 2, 1]);
}

#[test]
fn max_pool_gradient_goes_to_first_maximum() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t64(&[1, 2, 2, 1], &[3.0, 3.0, 1.0, 3.0]));
    let y = tape.max_pool_2x2(x, false).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn softmax_closed_form() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 2], &[2f64.ln(), 0.0]));
    let y = tape.softmax(x).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((v[1] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn backward_sum_gives_ones() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::new([3], vec![0.1, 0.2, 0.3]).unwrap());
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_sum_of_squares() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_twice_doubles_gradients() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t64(&[2], &[1.5, -0.5]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    let once = tape.grad(x).unwrap().clone();
    tape.backward(s).unwrap();
    let twice = tape.grad(x).unwrap();
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
    tape.zero_grads();
    assert!(tape.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::zeros([2]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new([1], vec![f32::MAX]).unwrap());
    assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite("scale"))));
}

#[test]
fn cosine_zero_query_is_clamped_and_flagged() {
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(t64(&[1, 2], &[0.0, 0.0]));
    let s = tape.constant(t64(&[1, 2], &[1.0, 1.0]));
    let c = tape.row_cosine_u(q, s).unwrap();
    assert_eq!(tape.value(c).data(), &[0.0]);
    assert_eq!(tape.clamped_norms(), 1);
}

#[test]
fn film_matches_hand_arithmetic() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full([1, 1, 1, 1], 2.0));
    let gz = tape.constant(Tensor::full([1, 1], 0.5));
    let bz = tape.constant(Tensor::full([1, 1], 0.25));
    let g0 = tape.constant(Tensor::full([1], 1.0));
    let b0 = tape.constant(Tensor::full([1], 1.0));
    let y = tape.film(x, gz, bz, g0, b0).unwrap();
    assert_eq!(tape.value(y).data(), &[3.25]);
}

#[test]
fn nll_gradient_is_zero_below_floor() {
    let mut tape = Tape::<f64>::new();
    let p = tape.param(t64(&[1, 2], &[0.0, 1.0]));
    let l = tape.nll(p, &[0]).unwrap();
    assert!((tape.value(l).item() - (-(1e-12f64).ln())).abs() < 1e-9);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(p).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn full_conv_block_gradcheck_in_f32() {
    // A conv -> bn -> relu -> pool -> avgpool chain, checked in single precision.
    let x = random(&[2, 4, 4, 2], 3).cast::<f32>();
    let k = random(&[3, 3, 2, 3], 4).cast::<f32>();
    let err = grad_check(
        |t, kv| {
            let xv = t.constant(x.clone());
            let b = t.constant(Tensor::zeros([3]));
            let g = t.constant(Tensor::full([3], 1.0));
            let beta = t.constant(Tensor::zeros([3]));
            let c = t.conv2d(xv, kv, b)?;
            let (n, _) = t.batch_norm(c, g, beta, NormStats::Batch)?;
            let r = t.scale(n, 0.5)?;
            let p = t.global_avg_pool(r)?;
            let sq = t.mul(p, p)?;
            t.sum(sq)
        },
        &k,
        1e-2,
    )
    .unwrap();
    assert!(err < 1e-2, "{err}");
}

fn dims() -> impl Strategy<Value = usize> {
    1usize..=6
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv2d_gradients(b in 1usize..=2, h in dims(), w in dims(), cin in 1usize..=3, cout in 1usize..=3, seed in any::<u64>()) {
        let x = random(&[b, h, w, cin], seed);
        let k = random(&[3, 3, cin, cout], seed + 1);
        let bias = random(&[cout], seed + 2);
        let wrt_input = grad_check(|t, v| {
            let kv = t.constant(k.clone());
            let bv = t.constant(bias.clone());
            let o = t.conv2d(v, kv, bv)?;
            weighted_sum(t, o, seed)
        }, &x, DEFAULT_EPS).unwrap();
        let wrt_kernel = grad_check(|t, v| {
            let xv = t.constant(x.clone());
            let bv = t.constant(bias.clone());
            let o = t.conv2d(xv, v, bv)?;
            weighted_sum(t, o, seed)
        }, &k, DEFAULT_EPS).unwrap();
        let wrt_bias = grad_check(|t, v| {
            let xv = t.constant(x.clone());
            let kv = t.constant(k.clone());
            let o = t.conv2d(xv, kv, v)?;
            weighted_sum(t, o, seed)
        }, &bias, DEFAULT_EPS).unwrap();
        prop_assert!(wrt_input < TOL64 && wrt_kernel < TOL64 && wrt_bias < TOL64);
    }

    #[test]
    fn batch_norm_gradients(b in 1usize..=3, h in dims(), w in 2usize..=6, c in 1usize..=4, seed in any::<u64>()) {
        let x = random(&[b, h, w, c], seed);
        let gamma = random(&[c], seed + 1);
        let beta = random(&[c], seed + 2);
        let rm = random(&[c], seed + 3);
        let rv = random(&[c], seed + 4).map(|v| v.abs() + 0.5);
        for running in [false, true] {
            let st = if running {
                NormStats::Running { mean: rm.data(), var: rv.data() }
            } else {
                NormStats::Batch
            };
            let e_x = grad_check(|t, v| {
                let g = t.constant(gamma.clone());
                let bb = t.constant(beta.clone());
                let (o, _) = t.batch_norm(v, g, bb, st)?;
                weighted_sum(t, o, seed)
            }, &x, DEFAULT_EPS).unwrap();
            let e_g = grad_check(|t, v| {
                let xv = t.constant(x.clone());
                let bb = t.constant(beta.clone());
                let (o, _) = t.batch_norm(xv, v, bb, st)?;
                weighted_sum(t, o, seed)
            }, &gamma, DEFAULT_EPS).unwrap();
            let e_b = grad_check(|t, v| {
                let xv = t.constant(x.clone());
                let g = t.constant(gamma.clone());
                let (o, _) = t.batch_norm(xv, g, v, st)?;
                weighted_sum(t, o, seed)
            }, &beta, DEFAULT_EPS).unwrap();
            prop_assert!(e_x < TOL64 && e_g < TOL64 && e_b < TOL64, "running={} {} {} {}", running, e_x, e_g, e_b);
        }
    }

    #[test]
    fn relu_gradients(n in 1usize..=36, seed in any::<u64>()) {
        // Keep inputs away from the kink so central differences are valid.
        let x = random(&[n], seed).map(|v| if v.abs() < 0.01 { 0.5 } else { v });
        let e = grad_check(|t, v| { let r = t.relu(v)?; weighted_sum(t, r, seed) }, &x, DEFAULT_EPS).unwrap();
        prop_assert!(e < TOL64);
    }

    #[test]
    fn max_pool_gradients(b in 1usize..=2, h in 1usize..=3, w in 1usize..=3, c in 1usize..=3, seed in any::<u64>()) {
        // Distinct, well-separated values so the argmax is stable under ±eps.
        let n = b * 2 * h * 2 * w * c;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            vals.swap(i, j);
        }
        let x = t64(&[b, 2 * h, 2 * w, c], &vals);
        let e = grad_check(|t, v| { let p = t.max_pool_2x2(v, false)?; weighted_sum(t, p, seed) }, &x, DEFAULT_EPS).unwrap();
        prop_assert!(e < TOL64);
    }

    #[test]
    fn pool_concat_affine_softmax_gradients(b in 1usize..=3, h in dims(), w in dims(), c in 1usize..=4, e in 1usize..=5, seed in any::<u64>()) {
        let x = random(&[b, h, w, c], seed);
        let y = random(&[b, c], seed + 1);
        let wt = random(&[2 * c, e], seed + 2);
        let bias = random(&[e], seed + 3);
        let chain = |t: &mut Tape<f64>, xv: Var, yv: Var, wv: Var, bv: Var| -> Result<Var> {
            let p = t.global_avg_pool(xv)?;
            let cat = t.concat_channels(p, yv)?;
            let a = t.affine(cat, wv, bv)?;
            let s = t.softmax(a)?;
            weighted_sum(t, s, seed)
        };
        let e_x = grad_check(|t, v| {
            let (yv, wv, bv) = (t.constant(y.clone()), t.constant(wt.clone()), t.constant(bias.clone()));
            chain(t, v, yv, wv, bv)
        }, &x, DEFAULT_EPS).unwrap();
        let e_y = grad_check(|t, v| {
            let (xv, wv, bv) = (t.constant(x.clone()), t.constant(wt.clone()), t.constant(bias.clone()));
            chain(t, xv, v, wv, bv)
        }, &y, DEFAULT_EPS).unwrap();
        let e_w = grad_check(|t, v| {
            let (xv, yv, bv) = (t.constant(x.clone()), t.constant(y.clone()), t.constant(bias.clone()));
            chain(t, xv, yv, v, bv)
        }, &wt, DEFAULT_EPS).unwrap();
        let e_b = grad_check(|t, v| {
            let (xv, yv, wv) = (t.constant(x.clone()), t.constant(y.clone()), t.constant(wt.clone()));
            chain(t, xv, yv, wv, v)
        }, &bias, DEFAULT_EPS).unwrap();
        prop_assert!(e_x < TOL64 && e_y < TOL64 && e_w < TOL64 && e_b < TOL64, "{} {} {} {}", e_x, e_y, e_w, e_b);
    }

    #[test]
    fn film_gradients(b in 1usize..=3, h in dims(), w in dims(), c in 1usize..=4, seed in any::<u64>()) {
        let inputs = [
            random(&[b, h, w, c], seed),
            random(&[b, c], seed + 1),
            random(&[b, c], seed + 2),
            random(&[c], seed + 3),
            random(&[c], seed + 4),
        ];
        for which in 0..5 {
            let err = grad_check(|t, v| {
                let vars: Vec<Var> = (0..5).map(|i| if i == which { v } else { t.constant(inputs[i].clone()) }).collect();
                let o = t.film(vars[0], vars[1], vars[2], vars[3], vars[4])?;
                weighted_sum(t, o, seed)
            }, &inputs[which], DEFAULT_EPS).unwrap();
            prop_assert!(err < TOL64, "input {} err {}", which, err);
        }
    }

    #[test]
    fn cosine_gather_matmul_nll_gradients(p in 1usize..=4, d in 1usize..=6, seed in any::<u64>()) {
        // Bounded away from the zero-norm floor, where curvature blows up.
        let q = random(&[p, d], seed).map(|v| v + 0.5 * v.signum());
        let s = random(&[p, d], seed + 1);
        let m = random(&[p, 3], seed + 2);
        let idx: Vec<usize> = (0..p).rev().collect();
        let labels: Vec<usize> = (0..p).map(|i| i % 3).collect();
        let chain = |t: &mut Tape<f64>, qv: Var, sv: Var, mv: Var| -> Result<Var> {
            let sg = t.gather_rows(sv, &idx)?;
            let c = t.row_cosine_u(qv, sg)?;
            let row = t.reshape(c, &[1, p])?;
            let mm = t.matmul(row, mv)?;
            let sm = t.softmax(mm)?;
            t.nll(sm, &labels[..1])
        };
        let e_q = grad_check(|t, v| { let (sv, mv) = (t.constant(s.clone()), t.constant(m.clone())); chain(t, v, sv, mv) }, &q, DEFAULT_EPS).unwrap();
        let e_s = grad_check(|t, v| { let (qv, mv) = (t.constant(q.clone()), t.constant(m.clone())); chain(t, qv, v, mv) }, &s, DEFAULT_EPS).unwrap();
        let e_m = grad_check(|t, v| { let (qv, sv) = (t.constant(q.clone()), t.constant(s.clone())); chain(t, qv, sv, v) }, &m, DEFAULT_EPS).unwrap();
        prop_assert!(e_q < TOL64 && e_s < TOL64 && e_m < TOL64, "{} {} {}", e_q, e_s, e_m);
    }

    #[test]
    fn columns_gradients(rows in 1usize..=4, cols in 2usize..=6, seed in any::<u64>()) {
        let x = random(&[rows, cols], seed);
        let mid = cols / 2;
        let e = grad_check(|t, v| {
            let a = t.columns(v, 0, mid)?;
            let b = t.columns(v, mid, cols)?;
            let wa = weighted_sum(t, a, seed)?;
            let wb = weighted_sum(t, b, seed + 1)?;
            t.add(wa, wb)
        }, &x, DEFAULT_EPS).unwrap();
        prop_assert!(e < TOL64);
    }

    #[test]
    fn elementwise_gradients(n in 1usize..=6, seed in any::<u64>()) {
        let a = random(&[n], seed).map(|v| if v.abs() < 0.01 { 0.3 } else { v });
        let b = random(&[n], seed + 1);
        let e = grad_check(|t, v| {
            let bv = t.constant(b.clone());
            let s = t.add(v, bv)?;
            let m = t.mul(s, v)?;
            let sc = t.scale(m, 0.7)?;
            let l1 = t.abs_sum(v)?;
            let mn = t.mean(sc)?;
            t.add(l1, mn)
        }, &a, DEFAULT_EPS).unwrap();
        prop_assert!(e < TOL64);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..=6, d in 1usize..=6, seed in any::<u64>()) {
        let x = random(&[rows, d], seed).map(|v| v * 30.0);
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.cast());
        let y = tape.softmax(xv).unwrap();
        for row in tape.value(y).data().chunks(d) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn conv_delta_identity_any_input(h in dims(), w in dims(), c in 1usize..=4, seed in any::<u64>()) {
        let x = random(&[1, h, w, c], seed).cast::<f32>();
        let mut k = vec![0.0f32; 9 * c * c];
        for ch in 0..c {
            k[(4 * c + ch) * c + ch] = 1.0;
        }
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let kv = tape.constant(Tensor::new([3, 3, c, c], k).unwrap());
        let bv = tape.constant(Tensor::zeros([c]));
        let y = tape.conv2d(xv, kv, bv).unwrap();
        prop_assert_eq!(tape.value(y).data(), x.data());
    }
}

