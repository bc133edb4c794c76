//! Bias-corrected Adam.

use crate::Parameter;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update to `param` from its accumulated gradient, then
    /// zeroes the gradient. Non-trainable parameters are left untouched.
    pub fn step(&self, param: &mut Parameter) {
        if !param.is_trainable() {
            return;
        }
        param.step_count += 1;
        let t = param.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for i in 0..param.value.len() {
            let g = param.grad[i];
            let m = b1 * param.adam_m[i] + (1.0 - b1) * g;
            let v = b2 * param.adam_v[i] + (1.0 - b2) * g * g;
            param.adam_m[i] = m;
            param.adam_v[i] = v;
            let m_hat = m as f64 / bc1;
            let v_hat = v as f64 / bc2;
            let update = self.lr * m_hat / (v_hat.sqrt() + self.eps);
            param.value[i] = (param.value[i] as f64 - update) as f32;
            param.grad[i] = 0.0;
        }
    }
}
