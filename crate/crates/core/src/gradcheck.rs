//! Central-difference gradient verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NormStats, Tape, Var};
use crate::data::{sample_episode, synthetic_dataset, Episode, EpisodeSpec, SyntheticMode};
use crate::model::{ModelKind, Network};
use crate::training::{episode_loss, loss_and_gradients};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-3;

/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between the tape gradient of a scalar-valued `f` and
/// Richardson-extrapolated central differences, over every element of `input`.
pub fn grad_check<T, F>(f: F, input: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..input.numel()).collect();
    grad_check_at(f, input, eps, &all)
}

/// Like [`grad_check`] but only over the listed flat indices.
pub fn grad_check_at<T, F>(f: F, input: &Tensor<T>, eps: f64, indices: &[usize]) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(input.clone());
    let out = f(&mut tape, x)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));

    let eval = |t: Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let out = f(&mut tape, x)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item().as_f64())
    };

    let central = |i: usize, h: f64| -> Result<f64> {
        let mut plus = input.clone();
        let mut minus = input.clone();
        let base = input.data()[i].as_f64();
        plus.data_mut()[i] = T::of(base + h);
        minus.data_mut()[i] = T::of(base - h);
        // Use the perturbation actually representable in T.
        let step = plus.data()[i].as_f64() - minus.data()[i].as_f64();
        Ok((eval(plus)? - eval(minus)?) / step)
    };

    let mut worst = 0.0f64;
    for &i in indices {
        // Richardson extrapolation cancels the O(eps²) truncation term, so a
        // step large enough to keep rounding noise small stays accurate on
        // near-zero gradient components.
        let numeric = (4.0 * central(i, eps / 2.0)? - central(i, eps)?) / 3.0;
        worst = worst.max(relative_error(analytic.data()[i].as_f64(), numeric));
    }
    Ok(worst)
}

/// One line of a gradient-check suite.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub precision: &'static str,
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_error < self.tolerance)
    }
}

/// Tolerance on the max relative error for a precision.
pub fn tolerance<T: Scalar>() -> f64 {
    if T::NAME == "f64" {
        1e-4
    } else {
        1e-2
    }
}

/// Central-difference step of the suites. Differences are always taken in
/// f64 (see [`grad_check_against_f64`]), so one step serves both precisions.
pub const SUITE_EPS: f64 = 1e-5;

/// Tape gradient of `f` computed in precision `T`, against central
/// differences of the same function evaluated in f64 by `reference`. The
/// point is first rounded to `T`, so both sides see the same input.
///
/// Finite differences taken in f32 itself are dominated by rounding noise
/// at any step small enough to stay clear of relu kinks; the f64 reference
/// isolates the error of the f32 backward pass.
pub fn grad_check_against_f64<T, F, G>(f: F, reference: G, input: &Tensor<f64>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
    G: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let point: Tensor<T> = input.cast();
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let out = f(&mut tape, x)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape().to_vec()));
    let base: Tensor<f64> = point.cast();
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let out = reference(&mut tape, x)?;
        Ok(tape.value(out).item())
    };
    let mut worst = 0.0f64;
    for i in 0..base.numel() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus.data_mut()[i] += eps;
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i].as_f64(), numeric));
    }
    Ok(worst)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values in `±[0.3, 1.3)`, pairwise distinct: clear of relu kinks and
/// max-pool ties.
fn spread(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| 0.3 + i as f64 / n as f64).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let data = vals
        .into_iter()
        .map(|v| if rng.random_bool(0.5) { v } else { -v })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Weighted sum with fixed random weights, so that every output element
/// contributes a distinct gradient.
fn project<T: Scalar>(tape: &mut Tape<T>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let p = tape.mul_const(y, &weights.cast())?;
    tape.sum(p)
}

/// Instantiates one check body for precision `T` and for the f64 reference.
macro_rules! check {
    ($out:ident, $T:ty, $name:expr, $input:expr, |$t:ident, $v:ident| $body:expr) => {{
        let err = grad_check_against_f64::<$T, _, _>(
            |$t: &mut Tape<$T>, $v: Var| -> Result<Var> { $body },
            |$t: &mut Tape<f64>, $v: Var| -> Result<Var> { $body },
            &$input,
            SUITE_EPS,
        )?;
        $out.push(CheckResult {
            name: $name.to_string(),
            max_rel_error: err,
        });
    }};
}

fn op_checks<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();

    let x = random(rng, &[2, 5, 6, 3], -1.0, 1.0);
    let k = random(rng, &[3, 3, 3, 4], -1.0, 1.0);
    let bias = random(rng, &[4], -1.0, 1.0);
    let w = random(rng, &[2, 5, 6, 4], -1.0, 1.0);
    check!(out, T, "conv2d/input", x, |t, v| {
        let (kv, bv) = (t.constant(k.cast()), t.constant(bias.cast()));
        let y = t.conv2d(v, kv, bv)?;
        project(t, y, &w)
    });
    check!(out, T, "conv2d/kernels", k, |t, v| {
        let (xv, bv) = (t.constant(x.cast()), t.constant(bias.cast()));
        let y = t.conv2d(xv, v, bv)?;
        project(t, y, &w)
    });
    check!(out, T, "conv2d/bias", bias, |t, v| {
        let (xv, kv) = (t.constant(x.cast()), t.constant(k.cast()));
        let y = t.conv2d(xv, kv, v)?;
        project(t, y, &w)
    });

    let bx = random(rng, &[3, 2, 2, 4], -2.0, 2.0);
    let gamma = random(rng, &[4], 0.5, 1.5);
    let beta = random(rng, &[4], -0.5, 0.5);
    let mean = random(rng, &[4], -0.5, 0.5);
    let var = random(rng, &[4], 0.5, 2.0);
    let bw = random(rng, &[3, 2, 2, 4], -1.0, 1.0);
    check!(out, T, "batch_norm/input", bx, |t, v| {
        let (g, b) = (t.constant(gamma.cast()), t.constant(beta.cast()));
        let (y, _) = t.batch_norm(v, g, b, NormStats::Batch)?;
        project(t, y, &bw)
    });
    check!(out, T, "batch_norm/gamma", gamma, |t, v| {
        let (xv, b) = (t.constant(bx.cast()), t.constant(beta.cast()));
        let (y, _) = t.batch_norm(xv, v, b, NormStats::Batch)?;
        project(t, y, &bw)
    });
    check!(out, T, "batch_norm/beta", beta, |t, v| {
        let (xv, g) = (t.constant(bx.cast()), t.constant(gamma.cast()));
        let (y, _) = t.batch_norm(xv, g, v, NormStats::Batch)?;
        project(t, y, &bw)
    });
    check!(out, T, "batch_norm/running_input", bx, |t, v| {
        let (g, b) = (t.constant(gamma.cast()), t.constant(beta.cast()));
        let (m, s) = (mean.cast(), var.cast());
        let stats = NormStats::Running {
            mean: m.data(),
            var: s.data(),
        };
        let (y, _) = t.batch_norm(v, g, b, stats)?;
        project(t, y, &bw)
    });

    let rx = spread(rng, &[2, 4, 4, 3]);
    let rw = random(rng, &[2, 2, 2, 3], -1.0, 1.0);
    check!(out, T, "relu+max_pool", rx, |t, v| {
        let r = t.relu(v)?;
        let p = t.max_pool_2x2(r, false)?;
        project(t, p, &rw)
    });

    let gx = random(rng, &[2, 3, 3, 4], -1.0, 1.0);
    let ow = random(rng, &[8, 6], -1.0, 1.0);
    let ob = random(rng, &[6], -1.0, 1.0);
    let sw = random(rng, &[2, 6], -1.0, 1.0);
    check!(out, T, "gap+concat+affine+softmax", gx, |t, v| {
        let g = t.global_avg_pool(v)?;
        let c = t.concat_channels(g, g)?;
        let (wv, bv) = (t.constant(ow.cast()), t.constant(ob.cast()));
        let a = t.affine(c, wv, bv)?;
        let s = t.softmax(a)?;
        project(t, s, &sw)
    });
    check!(out, T, "affine/weight", ow, |t, v| {
        let g = t.constant(gx.cast());
        let g = t.global_avg_pool(g)?;
        let c = t.concat_channels(g, g)?;
        let bv = t.constant(ob.cast());
        let a = t.affine(c, v, bv)?;
        project(t, a, &sw)
    });

    let fx = random(rng, &[2, 3, 3, 4], -1.0, 1.0);
    let fz = random(rng, &[2, 8], -1.0, 1.0);
    let g0 = random(rng, &[4], -1.0, 1.0);
    let b0 = random(rng, &[4], -1.0, 1.0);
    let fw = random(rng, &[2, 3, 3, 4], -1.0, 1.0);
    check!(out, T, "film/input", fx, |t, v| {
        let (z, g, b) = (t.constant(fz.cast()), t.constant(g0.cast()), t.constant(b0.cast()));
        let (gz, bz) = (t.columns(z, 0, 4)?, t.columns(z, 4, 8)?);
        let y = t.film(v, gz, bz, g, b)?;
        project(t, y, &fw)
    });
    check!(out, T, "film/generator_output", fz, |t, v| {
        let (x, g, b) = (t.constant(fx.cast()), t.constant(g0.cast()), t.constant(b0.cast()));
        let (gz, bz) = (t.columns(v, 0, 4)?, t.columns(v, 4, 8)?);
        let y = t.film(x, gz, bz, g, b)?;
        project(t, y, &fw)
    });
    check!(out, T, "film/gamma0", g0, |t, v| {
        let (x, z, b) = (t.constant(fx.cast()), t.constant(fz.cast()), t.constant(b0.cast()));
        let (gz, bz) = (t.columns(z, 0, 4)?, t.columns(z, 4, 8)?);
        let y = t.film(x, gz, bz, v, b)?;
        project(t, y, &fw)
    });
    check!(out, T, "film/beta0", b0, |t, v| {
        let (x, z, g) = (t.constant(fx.cast()), t.constant(fz.cast()), t.constant(g0.cast()));
        let (gz, bz) = (t.columns(z, 0, 4)?, t.columns(z, 4, 8)?);
        let y = t.film(x, gz, bz, g, v)?;
        project(t, y, &fw)
    });

    let q = spread(rng, &[6, 5]);
    let s = random(rng, &[3, 5], -1.0, 1.0);
    let onehot = Tensor::<f64>::from_f64([3, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0])?;
    check!(out, T, "cosine+softmax+matmul+nll", q, |t, v| {
        let sv = t.constant(s.cast());
        let sg = t.gather_rows(sv, &[0, 1, 2, 0, 1, 2])?;
        let sims = t.row_cosine_u(v, sg)?;
        let sims = t.reshape(sims, &[2, 3])?;
        let wts = t.softmax(sims)?;
        let oh = t.constant(onehot.cast());
        let probs = t.matmul(wts, oh)?;
        t.nll(probs, &[0, 1])
    });
    check!(out, T, "cosine/support", s, |t, v| {
        let qv = t.constant(q.cast());
        let sg = t.gather_rows(v, &[0, 1, 2, 0, 1, 2])?;
        let sims = t.row_cosine_u(qv, sg)?;
        project(t, sims, &spread(&mut ChaCha8Rng::seed_from_u64(1), &[6]))
    });
    check!(out, T, "abs_sum+scale+add+mul", g0, |t, v| {
        let a = t.abs_sum(v)?;
        let a = t.scale(a, num_traits::cast(0.3).expect("finite"))?;
        let m = t.mul(v, v)?;
        let m = t.mean(m)?;
        t.add(a, m)
    });
    Ok(out)
}

/// Relative error of the full episode loss gradient (computed in `T`)
/// against central differences of the f64 loss, at a few sampled entries
/// of each listed parameter.
pub fn model_grad_check<T: Scalar>(
    net: &Network<T>,
    episode: &Episode,
    l1: f64,
    params: &[&str],
    samples_per_param: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<CheckResult>> {
    let analytic = loss_and_gradients(net, episode, l1)?.gradients;
    let reference: Network<f64> = net.cast();
    let names = net.param_names();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &name in params {
        let pi = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let numel = analytic[pi].numel();
        let mut worst = 0.0f64;
        for _ in 0..samples_per_param.min(numel) {
            let i = rng.random_range(0..numel);
            let mut plus = reference.clone();
            let mut minus = reference.clone();
            plus.params_mut()[pi].data_mut()[i] += eps;
            minus.params_mut()[pi].data_mut()[i] -= eps;
            let numeric = (episode_loss(&plus, episode, l1)? - episode_loss(&minus, episode, l1)?) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[pi].data()[i].as_f64(), numeric));
        }
        out.push(CheckResult {
            name: format!("episode_loss/{name}"),
            max_rel_error: worst,
        });
    }
    Ok(out)
}

/// Every op on small random tensors plus the full cross-modulated episode
/// loss (non-zero post-multipliers, L1 active) with respect to sampled
/// entries of conv kernels, generator weights and biases, and `γ0`/`β0`.
pub fn run_suite<T: Scalar>(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = op_checks::<T>(&mut rng)?;

    let mut net = Network::<T>::new(ModelKind::CrossMod, 4, seed);
    for g in net.generators_mut() {
        for v in g.gamma0.data_mut().iter_mut().chain(g.beta0.data_mut()) {
            let m = rng.random_range(0.2..0.8);
            *v = T::of(if rng.random_bool(0.5) { m } else { -m });
        }
    }
    let split = synthetic_dataset(3, 2, 16, SyntheticMode::Pairwise, seed)?;
    let mut erng = ChaCha8Rng::seed_from_u64(seed);
    let episode = sample_episode(
        &split,
        EpisodeSpec {
            way: 3,
            shot: 1,
            queries_per_class: 1,
        },
        &mut erng,
    )?;
    checks.extend(model_grad_check(
        &net,
        &episode,
        0.001,
        &[
            "block1.kernels",
            "block3.kernels",
            "gen2.W",
            "gen3.b",
            "gen4.W",
            "gen2.gamma0",
            "gen3.beta0",
            "gen4.gamma0",
        ],
        4,
        SUITE_EPS,
        seed,
    )?);
    Ok(SuiteReport {
        precision: T::NAME,
        tolerance: tolerance::<T>(),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_in_both_precisions() {
        for report in [run_suite::<f64>(3).unwrap(), run_suite::<f32>(3).unwrap()] {
            for c in &report.checks {
                println!("{} {:<32} {:.3e}", report.precision, c.name, c.max_rel_error);
            }
            assert!(report.passed(), "{} max {:.3e}", report.precision, report.max_rel_error());
        }
    }

    #[test]
    fn sum_of_squares_is_accurate() {
        let x = Tensor::<f64>::from_f64([5], &[0.3, -1.2, 2.0, 0.01, -0.7]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.sum(sq)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn linear_function_is_exact_up_to_rounding() {
        let x = Tensor::<f64>::from_f64([4], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let s = t.scale(v, 3.5)?;
                t.sum(s)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
