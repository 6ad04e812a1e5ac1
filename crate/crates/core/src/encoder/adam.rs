use super::EncoderParams;
use crate::real::Real;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub m: EncoderParams<T>,
    pub v: EncoderParams<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &EncoderParams<T>) -> Self {
        Self { step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub(crate) fn update(&mut self, params: &mut EncoderParams<T>, grads: &EncoderParams<T>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
        let t = self.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let lr = T::lit(lr);
        let eps = T::lit(ADAM_EPS);
        let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
        for ((p, g), (m, v)) in tensors.zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut())) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
