//! Composite blocks shared by both networks.

use rand::Rng;
use tensorkit::conv::ConvGeometry;
use tensorkit::layers::{BatchNorm3d, Conv3d, Dense, GlobalAvgPool, Relu, Resample, Sequential, Sigmoid};
use tensorkit::{Layer, LayerKind, LayerSpec, Mode, Module, Parameter, Result, Tensor, TensorError};

const NO_FORWARD: &str = "backward called before forward";

/// conv3 → BN → ReLU.
pub fn conv_bn_relu<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Sequential {
    Sequential::new()
        .push(Conv3d::new(&format!("{name}.conv"), cin, cout, ConvGeometry::same3(), rng))
        .push(BatchNorm3d::new(&format!("{name}.bn"), cout))
        .push(Relu::new(&format!("{name}.relu")))
}

/// Two conv3 → BN → ReLU stages.
pub fn double_conv<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Sequential {
    Sequential::new()
        .push(Conv3d::new(&format!("{name}.conv1"), cin, cout, ConvGeometry::same3(), rng))
        .push(BatchNorm3d::new(&format!("{name}.bn1"), cout))
        .push(Relu::new(&format!("{name}.relu1")))
        .push(Conv3d::new(&format!("{name}.conv2"), cout, cout, ConvGeometry::same3(), rng))
        .push(BatchNorm3d::new(&format!("{name}.bn2"), cout))
        .push(Relu::new(&format!("{name}.relu2")))
}

/// `out[n, c, v] = x[n, c, v] * a[n, 0, v]`.
pub fn scale_by_map(x: &Tensor, a: &Tensor) -> Tensor {
    let mut out = x.clone();
    for n in 0..x.batch() {
        let an = a.channel(n, 0);
        for c in 0..x.channels() {
            for (o, &s) in out.channel_mut(n, c).iter_mut().zip(an) {
                *o *= s;
            }
        }
    }
    out
}

/// `out[n, c, v] = x[n, c, v] * s[n, c]`.
pub fn scale_by_channel(x: &Tensor, s: &Tensor) -> Tensor {
    let mut out = x.clone();
    for n in 0..x.batch() {
        for c in 0..x.channels() {
            let k = s.data()[n * x.channels() + c];
            out.channel_mut(n, c).iter_mut().for_each(|v| *v *= k);
        }
    }
    out
}

/// Additive attention gate: `alpha = sigmoid(psi(relu(w_x x + up(w_g g))))`,
/// output `alpha * x` with `alpha` shared across channels.
pub struct AttentionGate {
    pub w_x: Conv3d,
    pub w_g: Conv3d,
    up: Resample,
    relu: Relu,
    pub psi: Conv3d,
    sigmoid: Sigmoid,
    cache: Option<(Tensor, Tensor)>,
}

impl AttentionGate {
    pub fn new<R: Rng + ?Sized>(name: &str, x_channels: usize, g_channels: usize, rng: &mut R) -> Self {
        let f_int = (x_channels / 2).max(1);
        AttentionGate {
            w_x: Conv3d::new(&format!("{name}.w_x"), x_channels, f_int, ConvGeometry::pointwise(), rng),
            w_g: Conv3d::new(&format!("{name}.w_g"), g_channels, f_int, ConvGeometry::pointwise(), rng),
            up: Resample::new(&format!("{name}.up"), [1, 1, 1]),
            relu: Relu::new(&format!("{name}.relu")),
            psi: Conv3d::new(&format!("{name}.psi"), f_int, 1, ConvGeometry::pointwise(), rng),
            sigmoid: Sigmoid::new(&format!("{name}.sigmoid")),
            cache: None,
        }
    }

    pub fn intermediate_channels(&self) -> usize {
        self.w_x.out_channels()
    }

    pub fn forward(&mut self, x: &Tensor, g: &Tensor, mode: Mode) -> Result<Tensor> {
        let xs = x.spatial();
        let gs = g.spatial();
        if xs != gs.map(|n| 2 * n) || x.batch() != g.batch() {
            return Err(TensorError::shape("attention gate gating signal", [x.batch(), g.channels(), xs[0] / 2, xs[1] / 2, xs[2] / 2], g.shape()));
        }
        let theta = self.w_x.forward(x, mode)?;
        self.up.set_target(xs);
        let phi = self.up.forward(&self.w_g.forward(g, mode)?, mode)?;
        let q = self.relu.forward(&theta.add(&phi)?, mode)?;
        let alpha = self.sigmoid.forward(&self.psi.forward(&q, mode)?, mode)?;
        let out = scale_by_map(x, &alpha);
        self.cache = Some((x.clone(), alpha));
        Ok(out)
    }

    /// Returns `(grad_x, grad_g)`.
    pub fn backward(&mut self, grad: &Tensor) -> (Tensor, Tensor) {
        let (x, alpha) = self.cache.take().expect(NO_FORWARD);
        let mut gx = scale_by_map(grad, &alpha);
        let [n, c, ..] = x.shape();
        let mut galpha = Tensor::zeros(alpha.shape());
        for s in 0..n {
            let ga = galpha.channel_mut(s, 0);
            for ch in 0..c {
                for ((a, &gv), &xv) in ga.iter_mut().zip(grad.channel(s, ch)).zip(x.channel(s, ch)) {
                    *a += gv * xv;
                }
            }
        }
        let gq = self.psi.backward(&self.sigmoid.backward(&galpha));
        let gs = self.relu.backward(&gq);
        gx.add_assign(&self.w_x.backward(&gs));
        let gg = self.w_g.backward(&self.up.backward(&gs));
        (gx, gg)
    }
}

impl Module for AttentionGate {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.w_x.visit_params(f);
        self.w_g.visit_params(f);
        self.psi.visit_params(f);
    }

    fn layer_specs(&self, out: &mut Vec<LayerSpec>) {
        self.w_x.layer_specs(out);
        self.w_g.layer_specs(out);
        self.up.layer_specs(out);
        self.relu.layer_specs(out);
        self.psi.layer_specs(out);
        self.sigmoid.layer_specs(out);
    }
}

/// Squeeze-and-excitation channel attention.
pub struct ChannelAttention {
    pool: GlobalAvgPool,
    pub fc1: Dense,
    relu: Relu,
    pub fc2: Dense,
    sigmoid: Sigmoid,
    cache: Option<(Tensor, Tensor)>,
}

impl ChannelAttention {
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, reduction: usize, rng: &mut R) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        ChannelAttention {
            pool: GlobalAvgPool::new(&format!("{name}.pool")),
            fc1: Dense::new(&format!("{name}.fc1"), channels, hidden, rng),
            relu: Relu::new(&format!("{name}.relu")),
            fc2: Dense::new(&format!("{name}.fc2"), hidden, channels, rng),
            sigmoid: Sigmoid::new(&format!("{name}.sigmoid")),
            cache: None,
        }
    }
}

impl Module for ChannelAttention {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }

    fn layer_specs(&self, out: &mut Vec<LayerSpec>) {
        self.pool.layer_specs(out);
        self.fc1.layer_specs(out);
        self.relu.layer_specs(out);
        self.fc2.layer_specs(out);
        self.sigmoid.layer_specs(out);
    }
}

impl Layer for ChannelAttention {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let z = self.pool.forward(x, mode)?;
        let h = self.relu.forward(&self.fc1.forward(&z, mode)?, mode)?;
        let s = self.sigmoid.forward(&self.fc2.forward(&h, mode)?, mode)?;
        let out = scale_by_channel(x, &s);
        self.cache = Some((x.clone(), s));
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (x, s) = self.cache.take().expect(NO_FORWARD);
        let mut gx = scale_by_channel(grad, &s);
        let [n, c, ..] = x.shape();
        let gs: Vec<f32> = (0..n * c)
            .map(|i| {
                let (b, ch) = (i / c, i % c);
                grad.channel(b, ch).iter().zip(x.channel(b, ch)).map(|(&g, &v)| g as f64 * v as f64).sum::<f64>() as f32
            })
            .collect();
        let gs = Tensor::from_vec(s.shape(), gs).expect("one value per channel");
        let gz = self.fc1.backward(&self.relu.backward(&self.fc2.backward(&self.sigmoid.backward(&gs))));
        gx.add_assign(&self.pool.backward(&gz));
        gx
    }
}

/// `relu(BN(conv(relu(BN(conv x)))) + shortcut(x))`; the shortcut is the
/// identity when channel counts match and `project` is off, a 1³ projection
/// otherwise. With `residual` off the shortcut is dropped.
pub struct ResidualBlock {
    pub conv1: Conv3d,
    pub bn1: BatchNorm3d,
    relu1: Relu,
    pub conv2: Conv3d,
    pub bn2: BatchNorm3d,
    pub proj: Option<Conv3d>,
    relu_out: Relu,
    residual: bool,
    name: String,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, residual: bool, rng: &mut R) -> Self {
        Self::build(name, cin, cout, residual, false, rng)
    }

    /// Always projects the shortcut, even when channel counts match.
    pub fn projected<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, residual: bool, rng: &mut R) -> Self {
        Self::build(name, cin, cout, residual, true, rng)
    }

    fn build<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, residual: bool, project: bool, rng: &mut R) -> Self {
        let conv1 = Conv3d::new(&format!("{name}.conv1"), cin, cout, ConvGeometry::same3(), rng);
        let conv2 = Conv3d::new(&format!("{name}.conv2"), cout, cout, ConvGeometry::same3(), rng);
        let proj = (residual && (project || cin != cout)).then(|| Conv3d::new(&format!("{name}.proj"), cin, cout, ConvGeometry::pointwise(), rng));
        ResidualBlock {
            conv1,
            bn1: BatchNorm3d::new(&format!("{name}.bn1"), cout),
            relu1: Relu::new(&format!("{name}.relu1")),
            conv2,
            bn2: BatchNorm3d::new(&format!("{name}.bn2"), cout),
            proj,
            relu_out: Relu::new(&format!("{name}.relu_out")),
            residual,
            name: name.to_string(),
        }
    }
}

impl Module for ResidualBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some(p) = &mut self.proj {
            p.visit_params(f);
        }
    }

    fn layer_specs(&self, out: &mut Vec<LayerSpec>) {
        self.conv1.layer_specs(out);
        self.bn1.layer_specs(out);
        self.relu1.layer_specs(out);
        self.conv2.layer_specs(out);
        self.bn2.layer_specs(out);
        if let Some(p) = &self.proj {
            p.layer_specs(out);
        }
        if self.residual {
            out.push(LayerSpec::new(format!("{}.add", self.name), LayerKind::Add));
        }
        self.relu_out.layer_specs(out);
    }
}

impl Layer for ResidualBlock {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.relu1.forward(&self.bn1.forward(&self.conv1.forward(x, mode)?, mode)?, mode)?;
        let mut h = self.bn2.forward(&self.conv2.forward(&h, mode)?, mode)?;
        if self.residual {
            match &mut self.proj {
                Some(p) => h.add_assign(&p.forward(x, mode)?),
                None => h.add_assign(x),
            }
        }
        self.relu_out.forward(&h, mode)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.relu_out.backward(grad);
        let gh = self.relu1.backward(&self.conv2.backward(&self.bn2.backward(&g)));
        let mut gx = self.conv1.backward(&self.bn1.backward(&gh));
        if self.residual {
            match &mut self.proj {
                Some(p) => gx.add_assign(&p.backward(&g)),
                None => gx.add_assign(&g),
            }
        }
        gx
    }
}
