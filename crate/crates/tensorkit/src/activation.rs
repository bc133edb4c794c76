//! Elementwise activations.

use crate::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU given its input `x`; zero at the kink.
pub fn relu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("relu_backward shape")
}

pub fn sigmoid_scalar(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Gradient of the logistic function given its *output* `y`.
pub fn sigmoid_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::from_vec(y.shape(), data).expect("sigmoid_backward shape")
}
