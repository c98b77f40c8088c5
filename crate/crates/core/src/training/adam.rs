use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First/second moment buffers, one per parameter, and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        let zeros = |p: &&Tensor<T>| Tensor::zeros(p.shape().to_vec());
        Self {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    fn check(&self, params: &[&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        let ok = params.len() == grads.len()
            && params.len() == self.m.len()
            && params
                .iter()
                .zip(grads)
                .zip(&self.m)
                .all(|((p, g), m)| p.shape() == g.shape() && p.shape() == m.shape());
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("optimizer state does not match the parameters".into()))
        }
    }
}

/// One bias-corrected Adam update. Every gradient is checked before any
/// parameter moves; a NaN aborts naming the parameter. Gradients are zeroed
/// afterwards.
pub fn adam_step<T: Scalar>(
    mut params: Vec<&mut Tensor<T>>,
    names: &[String],
    grads: &mut [Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    state.check(&params, grads)?;
    for (i, g) in grads.iter().enumerate() {
        if g.data().iter().any(|x| x.is_nan()) {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("param#{i}"));
            return Err(Error::NanGradient(name));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads.iter_mut())
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let (pd, gd, md, vd) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for k in 0..pd.len() {
            let gk = gd[k].as_f64();
            let mk = ADAM_BETA1 * md[k].as_f64() + (1.0 - ADAM_BETA1) * gk;
            let vk = ADAM_BETA2 * vd[k].as_f64() + (1.0 - ADAM_BETA2) * gk * gk;
            md[k] = T::of(mk);
            vd[k] = T::of(vk);
            let step = lr * (mk / c1) / ((vk / c2).sqrt() + ADAM_EPSILON);
            pd[k] = T::of(pd[k].as_f64() - step);
        }
        g.fill(T::zero());
    }
    Ok(())
}
