//! Stateful layers: each caches what its backward pass needs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::{relu, relu_backward, sigmoid, sigmoid_backward};
use crate::conv::{conv3d, conv3d_backward, conv_transpose3d, conv_transpose3d_backward, ConvGeometry};
use crate::norm::{batchnorm_eval, batchnorm_eval_backward, batchnorm_train, batchnorm_train_backward, BatchNormCache};
use crate::pool::{maxpool2, maxpool2_backward};
use crate::resize::{resize_tensor, resize_tensor_adjoint};
use crate::{Parameter, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv3,
    ConvT3,
    BatchNorm,
    ReLU,
    Sigmoid,
    MaxPool2,
    ConcatC,
    Add,
    GlobalAvgPool,
    Dense,
    Resample,
}

/// Manifest entry describing one layer of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            in_channels: None,
            out_channels: None,
            kernel: None,
            stride: None,
        }
    }

    pub fn channels(mut self, cin: usize, cout: usize) -> Self {
        self.in_channels = Some(cin);
        self.out_channels = Some(cout);
        self
    }

    pub fn kernel(mut self, kernel: usize, stride: usize) -> Self {
        self.kernel = Some(kernel);
        self.stride = Some(stride);
        self
    }
}

/// Anything that owns parameters.
pub trait Module {
    /// Visits every parameter (trainable or not) in a fixed order.
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn layer_specs(&self, out: &mut Vec<LayerSpec>);

    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    fn num_trainable(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.is_trainable() {
                n += p.len()
            }
        });
        n
    }
}

/// A single-input, single-output differentiable layer.
pub trait Layer: Module + Send {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor>;

    /// Accumulates parameter gradients and returns the input gradient.
    ///
    /// # Panics
    /// If called without a preceding `forward`.
    fn backward(&mut self, grad: &Tensor) -> Tensor;
}

const NO_FORWARD: &str = "backward called before forward";

pub struct Conv3d {
    name: String,
    pub weight: Parameter,
    pub bias: Parameter,
    cin: usize,
    cout: usize,
    geom: ConvGeometry,
    input: Option<Tensor>,
}

impl Conv3d {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, geom: ConvGeometry, rng: &mut R) -> Self {
        let k = geom.kernel;
        Conv3d {
            name: name.to_string(),
            weight: Parameter::he_uniform(format!("{name}.weight"), vec![cout, cin, k, k, k], cin * k * k * k, rng),
            bias: Parameter::filled(format!("{name}.bias"), vec![cout], 0.0),
            cin,
            cout,
            geom,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }
}

impl Module for Conv3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn layer_specs(&self, out: &mut Vec<LayerSpec>) {
        out.push(
            LayerSpec::new(&self.name, LayerKind::Conv3)
                .channels(self.cin, self.cout)
                .kernel(self.geom.kernel, self.geom.stride),
        );
    }
}

impl Layer for Conv3d {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        if x.channels() != self.cin {
            return Err(TensorError::shape("conv3d input channels", self.cin, x.channels()));
        }
        let y = conv3d(x, &self.weight.value, &self.bias.value, self.cout, self.geom)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect(NO_FORWARD);
        let g = conv3d_backward(&x, &self.weight.value, grad, self.cout, self.geom).expect("conv3d backward shapes");
        self.weight.accumulate_grad(&g.weight);
        self.bias.accumulate_grad(&g.bias);
        g.input
    }
}

/// 2³ kernel, stride 2 transposed convolution.
pub struct ConvTranspose3d {
    name: String,
    pub weight: Parameter,
    pub bias: Parameter,
    cin: usize,
    cout: usize,
    input: Option<Tensor>,
}

impl ConvTranspose3d {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        ConvTranspose3d {
            name: name.to_string(),
            weight: Parameter::he_uniform(format!("{name}.weight"), vec![cin, cout, 2, 2, 2], cin, rng),
            bias: Parameter::filled(format!("{name}.bias"), vec![cout], 0.0),
            cin,
            cout,
            input: None,
        }
    }
}

impl Module for ConvTranspose3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn layer_specs(&self, out: &mut Vec<LayerSpec>) {
        out.push(LayerSpec::new(&self.name, LayerKind::ConvT3).channels(self.cin, self.cout).kernel(2, 2));
    }
}

impl Layer for ConvTranspose3d {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        if x.channels() != self.cin {
            return Err(TensorError::shape("conv_transpose3d input channels", self.cin, x.channels()));
        }
        let y = conv_transpose3d(x, &self.weight.value, &self.bias.value, self.cout)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect(NO_FORWARD);
        let g = conv_transpose3d_backward(&x, &self.weight.value, grad, self.cout).expect("conv_transpose3d backward shapes");
        self.weight.accumulate_grad(&g.weight);
        self.bias.accumulate_grad(&g.bias);
        g.input
    }
}

enum BnCache {
    Train(BatchNormCache),
    Eval(Tensor),
}

pub struct BatchNorm3d {
    name: String,
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Parameter,
    pub running_var: Parameter,
    cache: Option<BnCache>,
}

impl BatchNorm3d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm3d {
            name: name.to_string(),
            gamma: Parameter::filled(format!("{name}.gamma"), vec![channels], 1.0),
            beta: Parameter::filled(format!("{name}.beta"), vec![channels], 0.0),
            running_mean: Parameter::filled(format!("{name}.running_mean"), vec![channels], 0.0).non_trainable(),
            running_var: Parameter::filled(format!("{name}.running_var"), vec![channels], 1.0).non_trainable(),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

impl Module for BatchNorm3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }

    fn layer_specs(&self, out: &mut Vec<LayerSpec>) {
        let c = self.channels();
        out.push(LayerSpec::new(&self.name, LayerKind::BatchNorm).channels(c, c));
    }
}

impl Layer for BatchNorm3d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if x.channels() != self.channels() {
            return Err(TensorError::shape("batchnorm channels", self.channels(), x.channels()));
        }
        match mode {
            Mode::Train => {
                let (y, cache) = batchnorm_train(
                    x,
                    &self.gamma.value,
                    &self.beta.value,
                    &mut self.running_mean.value,
                    &mut self.running_var.value,
                );
                self.cache = Some(BnCache::Train(cache));
                Ok(y)
            }
            Mode::Eval => {
                let y = batchnorm_eval(x, &self.gamma.value, &self.beta.value, &self.running_mean.value, &self.running_var.value);
                self.cache = Some(BnCache::Eval(x.clone()));
                Ok(y)
            }
        }
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (gx, dgamma, dbeta) = match self.cache.take().expect(NO_FORWARD) {
            BnCache::Train(cache) => batchnorm_train_backward(grad, &self.gamma.value, &cache),
            BnCache::Eval(x) => batchnorm_eval_backward(&x, grad, &self.gamma.value, &self.running_mean.value, &self.running_var.value),
        };
        self.gamma.accumulate_grad(&dgamma);
        self.beta.accumulate_grad(&dbeta);
        gx
    }
}

pub struct Relu {
    name: String,
    input: Option<Tensor>,
}

impl Relu {
    pub fn new(name: &str) -> Self {
        Relu { name: name.to_string(), input: None }
    }
}

impl Module for Relu {
    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Parameter)) {}

    fn layer_specs(&self, out: &mut Vec<LayerSpec>) {
        out.push(LayerSpec::new(&self.name, LayerKind::ReLU));
    }
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        self.input = Some(x.clone());
        Ok(relu(x))
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        relu_backward(&self.input.take().expect(NO_FORWARD), grad)
    }
}

pub struct Sigmoid {
    name: String,
    output: Option<Tensor>,
}

impl Sigmoid {
    pub fn new(name: &str) -> Self {
        Sigmoid { name: name.to_string(), output: None }
    }
}

impl Module for Sigmoid {
    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Parameter)) {}

    fn layer_specs(&self, out: &mut Vec<LayerSpec>) {
        out.push(LayerSpec::new(&self.name, LayerKind::Sigmoid));
    }
}

impl Layer for Sigmoid {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let y = sigmoid(x);
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        sigmoid_backward(&self.output.take().expect(NO_FORWARD), grad)
    }
}

pub struct MaxPool2 {
    name: String,
    cache: Option<(Vec<u32>, [usize; 5])>,
}

impl MaxPool2 {
    pub fn new(name: &str) -> Self {
        MaxPool2 { name: name.to_string(), cache: None }
    }
}

impl Module for MaxPool2 {
    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Parameter)) {}

    fn layer_specs(&self, out: &mut Vec<LayerSpec>) {
        out.push(LayerSpec::new(&self.name, LayerKind::MaxPool2).kernel(2, 2));
    }
}

impl Layer for MaxPool2 {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (y, arg) = maxpool2(x)?;
        self.cache = Some((arg, x.shape()));
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (arg, shape) = self.cache.take().expect(NO_FORWARD);
        maxpool2_backward(grad, &arg, shape)
    }
}

/// Mean over `D·H·W`: `(N, C, D, H, W) → (N, C, 1, 1, 1)`.
pub struct GlobalAvgPool {
    name: String,
    in_shape: Option<[usize; 5]>,
}

impl GlobalAvgPool {
    pub fn new(name: &str) -> Self {
        GlobalAvgPool { name: name.to_string(), in_shape: None }
    }
}

impl Module for GlobalAvgPool {
    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Parameter)) {}

    fn layer_specs(&self, out: &mut Vec<LayerSpec>) {
        out.push(LayerSpec::new(&self.name, LayerKind::GlobalAvgPool));
    }
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let [n, c, ..] = x.shape();
        let v = x.voxels() as f64;
        let mut data = Vec::with_capacity(n * c);
        for s in 0..n {
            for ch in 0..c {
                data.push((x.channel(s, ch).iter().map(|&a| a as f64).sum::<f64>() / v) as f32);
            }
        }
        self.in_shape = Some(x.shape());
        Tensor::from_vec([n, c, 1, 1, 1], data)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let shape = self.in_shape.take().expect(NO_FORWARD);
        let mut gx = Tensor::zeros(shape);
        let v = (shape[2] * shape[3] * shape[4]) as f32;
        for s in 0..shape[0] {
            for ch in 0..shape[1] {
                let g = grad.data()[s * shape[1] + ch] / v;
                gx.channel_mut(s, ch).fill(g);
            }
        }
        gx
    }
}

/// Fully connected map on `(N, C, 1, 1, 1)` tensors.
pub struct Dense {
    name: String,
    pub weight: Parameter,
    pub bias: Parameter,
    cin: usize,
    cout: usize,
    input: Option<Tensor>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Dense {
            name: name.to_string(),
            weight: Parameter::he_uniform(format!("{name}.weight"), vec![cout, cin], cin, rng),
            bias: Parameter::filled(format!("{name}.bias"), vec![cout], 0.0),
            cin,
            cout,
            input: None,
        }
    }
}

impl Module for Dense {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn layer_specs(&self, out: &mut Vec<LayerSpec>) {
        out.push(LayerSpec::new(&self.name, LayerKind::Dense).channels(self.cin, self.cout));
    }
}

impl Layer for Dense {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let [n, c, d, h, w] = x.shape();
        if c != self.cin || d * h * w != 1 {
            return Err(TensorError::shape("dense input", [n, self.cin, 1, 1, 1], x.shape()));
        }
        let mut data = Vec::with_capacity(n * self.cout);
        for s in 0..n {
            let xs = x.sample(s);
            for o in 0..self.cout {
                let row = &self.weight.value[o * self.cin..(o + 1) * self.cin];
                let acc: f64 = row.iter().zip(xs).map(|(&a, &b)| a as f64 * b as f64).sum();
                data.push((acc + self.bias.value[o] as f64) as f32);
            }
        }
        self.input = Some(x.clone());
        Tensor::from_vec([n, self.cout, 1, 1, 1], data)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect(NO_FORWARD);
        let n = x.batch();
        let mut gx = Tensor::zeros(x.shape());
        let mut gw = vec![0.0f32; self.cout * self.cin];
        let mut gb = vec![0.0f32; self.cout];
        for s in 0..n {
            let xs = x.sample(s).to_vec();
            let gs = grad.sample(s);
            for o in 0..self.cout {
                gb[o] += gs[o];
                for i in 0..self.cin {
                    gw[o * self.cin + i] += gs[o] * xs[i];
                }
            }
            let gxs = &mut gx.data_mut()[s * self.cin..(s + 1) * self.cin];
            for (i, g) in gxs.iter_mut().enumerate() {
                *g = (0..self.cout).map(|o| gs[o] as f64 * self.weight.value[o * self.cin + i] as f64).sum::<f64>() as f32;
            }
        }
        self.weight.accumulate_grad(&gw);
        self.bias.accumulate_grad(&gb);
        gx
    }
}

/// Trilinear resample of every channel to fixed spatial dims.
pub struct Resample {
    name: String,
    target: [usize; 3],
    src: Option<[usize; 3]>,
}

impl Resample {
    pub fn new(name: &str, target: [usize; 3]) -> Self {
        Resample { name: name.to_string(), target, src: None }
    }

    pub fn set_target(&mut self, target: [usize; 3]) {
        self.target = target;
    }
}

impl Module for Resample {
    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Parameter)) {}

    fn layer_specs(&self, out: &mut Vec<LayerSpec>) {
        out.push(LayerSpec::new(&self.name, LayerKind::Resample));
    }
}

impl Layer for Resample {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        self.src = Some(x.spatial());
        Ok(resize_tensor(x, self.target))
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        resize_tensor_adjoint(grad, self.src.take().expect(NO_FORWARD))
    }
}

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, layer: impl Layer + 'static) -> Self {
        self.layers.push(Box::new(layer));
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Module for Sequential {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for l in &mut self.layers {
            l.visit_params(f);
        }
    }

    fn layer_specs(&self, out: &mut Vec<LayerSpec>) {
        for l in &self.layers {
            l.layer_specs(out);
        }
    }
}

impl Layer for Sequential {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }
}
