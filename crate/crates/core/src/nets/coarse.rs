//! Deeply supervised attention U-Net.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensorkit::conv::ConvGeometry;
use tensorkit::layers::{Conv3d, ConvTranspose3d, MaxPool2, Resample, Sequential, Sigmoid};
use tensorkit::{concat_channels, split_channels, Layer, LayerKind, LayerSpec, Mode, Module, Parameter, Tensor};

use super::blocks::{double_conv, AttentionGate};
use super::NetConfig;
use crate::error::{Error, Result};

/// 1³ conv → sigmoid, optionally followed by an upsample to the input dims.
struct Head {
    conv: Conv3d,
    sigmoid: Sigmoid,
    up: Option<Resample>,
}

impl Head {
    fn forward(&mut self, x: &Tensor, target: [usize; 3], mode: Mode) -> Result<Tensor> {
        let p = self.sigmoid.forward(&self.conv.forward(x, mode)?, mode)?;
        Ok(match &mut self.up {
            Some(up) => {
                up.set_target(target);
                up.forward(&p, mode)?
            }
            None => p,
        })
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = match &mut self.up {
            Some(up) => up.backward(grad),
            None => grad.clone(),
        };
        self.conv.backward(&self.sigmoid.backward(&g))
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.conv.visit_params(f);
    }

    fn specs(&self, out: &mut Vec<LayerSpec>) {
        self.conv.layer_specs(out);
        self.sigmoid.layer_specs(out);
        if let Some(up) = &self.up {
            up.layer_specs(out);
        }
    }
}

/// Main probability map plus the auxiliary maps (train mode only), all at
/// input resolution.
#[derive(Debug, Clone)]
pub struct CoarseOutput {
    pub main: Tensor,
    /// Deepest-but-one level first: `aux[i]` comes from decoder level `i + 1`.
    pub aux: Vec<Tensor>,
}

pub struct CoarseNet {
    config: NetConfig,
    encoders: Vec<Sequential>,
    pools: Vec<MaxPool2>,
    /// Indexed by decoder level `l` in `0..levels - 1`.
    ups: Vec<ConvTranspose3d>,
    gates: Vec<AttentionGate>,
    decoders: Vec<Sequential>,
    head: Head,
    /// `aux_heads[i]` reads decoder level `i + 1`.
    aux_heads: Vec<Head>,
    ready: bool,
    last_mode: Option<Mode>,
}

impl CoarseNet {
    /// Fresh He-initialized network. It reports itself untrained until
    /// [`CoarseNet::mark_ready`] is called.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.supervision_weights.len() != config.levels {
            return Err(Error::LengthMismatch {
                what: "supervision_weights",
                expected: config.levels,
                found: config.supervision_weights.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = config.levels;
        let ch = |l: usize| config.channels(l);
        let encoders = (0..levels)
            .map(|l| double_conv(&format!("enc{l}"), if l == 0 { 1 } else { ch(l - 1) }, ch(l), &mut rng))
            .collect();
        let pools = (0..levels - 1).map(|l| MaxPool2::new(&format!("pool{l}"))).collect();
        let mut ups = Vec::new();
        let mut gates = Vec::new();
        let mut decoders = Vec::new();
        for l in 0..levels - 1 {
            ups.push(ConvTranspose3d::new(&format!("up{l}"), ch(l + 1), ch(l), &mut rng));
            gates.push(AttentionGate::new(&format!("gate{l}"), ch(l), ch(l + 1), &mut rng));
            decoders.push(double_conv(&format!("dec{l}"), 2 * ch(l), ch(l), &mut rng));
        }
        let head = Head {
            conv: Conv3d::new("head", ch(0), 1, ConvGeometry::pointwise(), &mut rng),
            sigmoid: Sigmoid::new("head.sigmoid"),
            up: None,
        };
        let aux_heads = (1..levels)
            .map(|l| Head {
                conv: Conv3d::new(&format!("aux{l}"), ch(l), 1, ConvGeometry::pointwise(), &mut rng),
                sigmoid: Sigmoid::new(&format!("aux{l}.sigmoid")),
                up: Some(Resample::new(&format!("aux{l}.up"), [1, 1, 1])),
            })
            .collect();
        let mut net = CoarseNet { config, encoders, pools, ups, gates, decoders, head, aux_heads, ready: false, last_mode: None };
        let b = net.config.head_bias;
        for h in std::iter::once(&mut net.head).chain(&mut net.aux_heads) {
            h.conv.bias.value.fill(b);
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn is_ready(&self) -> bool {
        self.ready
    }

    pub fn mark_ready(&mut self) {
        self.ready = true;
    }

    pub fn gate_mut(&mut self, level: usize) -> &mut AttentionGate {
        &mut self.gates[level]
    }

    /// Sets the weights and biases of the main and auxiliary heads.
    pub fn fill_heads(&mut self, value: f32) {
        for h in std::iter::once(&mut self.head).chain(&mut self.aux_heads) {
            h.conv.weight.value.fill(value);
            h.conv.bias.value.fill(value);
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<CoarseOutput> {
        let levels = self.config.levels;
        let dims = x.spatial();
        let div = 1 << (levels - 1);
        if x.channels() != 1 || dims.iter().any(|&n| n % div != 0 || n == 0) {
            return Err(tensorkit::TensorError::shape("coarse net input (dims divisible by 2^(levels-1))", [x.batch(), 1, div, div, div], x.shape()).into());
        }
        let mut skips = Vec::with_capacity(levels);
        let mut h = x.clone();
        for l in 0..levels {
            if l > 0 {
                h = self.pools[l - 1].forward(&h, mode)?;
            }
            h = self.encoders[l].forward(&h, mode)?;
            skips.push(h.clone());
        }
        let mut dec: Vec<Option<Tensor>> = vec![None; levels];
        dec[levels - 1] = skips.pop();
        for l in (0..levels - 1).rev() {
            let g = dec[l + 1].as_ref().expect("deeper level computed");
            let up = self.ups[l].forward(g, mode)?;
            let gated = self.gates[l].forward(&skips[l], g, mode)?;
            dec[l] = Some(self.decoders[l].forward(&concat_channels(&gated, &up)?, mode)?);
        }
        let main = self.head.forward(dec[0].as_ref().expect("top level"), dims, mode)?;
        let aux = match mode {
            Mode::Train => (1..levels)
                .map(|l| self.aux_heads[l - 1].forward(dec[l].as_ref().expect("level computed"), dims, mode))
                .collect::<Result<Vec<_>>>()?,
            Mode::Eval => Vec::new(),
        };
        self.last_mode = Some(mode);
        Ok(CoarseOutput { main, aux })
    }

    /// Backpropagates the head gradients (aux gradients are required after a
    /// train-mode forward) and returns the input gradient.
    pub fn backward(&mut self, grad_main: &Tensor, grad_aux: &[Tensor]) -> Tensor {
        let levels = self.config.levels;
        let expected_aux = if self.last_mode.take() == Some(Mode::Train) { levels - 1 } else { 0 };
        assert_eq!(grad_aux.len(), expected_aux, "one gradient per auxiliary head");
        let mut gdec: Vec<Option<Tensor>> = vec![None; levels];
        gdec[0] = Some(self.head.backward(grad_main));
        for (i, g) in grad_aux.iter().enumerate() {
            gdec[i + 1] = Some(self.aux_heads[i].backward(g));
        }
        let mut gskip: Vec<Option<Tensor>> = vec![None; levels];
        for l in 0..levels - 1 {
            let g = gdec[l].take().expect("gradient reaches every decoder level");
            let gc = self.decoders[l].backward(&g);
            let c = gc.channels() / 2;
            let (g_gated, g_up) = split_channels(&gc, c);
            let (g_skip, g_gate_signal) = self.gates[l].backward(&g_gated);
            let mut g_deeper = self.ups[l].backward(&g_up);
            g_deeper.add_assign(&g_gate_signal);
            accumulate(&mut gdec[l + 1], g_deeper);
            gskip[l] = Some(g_skip);
        }
        gskip[levels - 1] = gdec[levels - 1].take();
        let mut g = gskip[levels - 1].take().expect("bottleneck gradient");
        for l in (0..levels).rev() {
            g = self.encoders[l].backward(&g);
            if l > 0 {
                g = self.pools[l - 1].backward(&g);
                g.add_assign(gskip[l - 1].as_ref().expect("skip gradient"));
            }
        }
        g
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Module for CoarseNet {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for e in &mut self.encoders {
            e.visit_params(f);
        }
        for l in 0..self.ups.len() {
            self.ups[l].visit_params(f);
            self.gates[l].visit_params(f);
            self.decoders[l].visit_params(f);
        }
        self.head.visit(f);
        for h in &mut self.aux_heads {
            h.visit(f);
        }
    }

    fn layer_specs(&self, out: &mut Vec<LayerSpec>) {
        for (l, e) in self.encoders.iter().enumerate() {
            if l > 0 {
                self.pools[l - 1].layer_specs(out);
            }
            e.layer_specs(out);
        }
        for l in (0..self.ups.len()).rev() {
            self.ups[l].layer_specs(out);
            self.gates[l].layer_specs(out);
            out.push(LayerSpec::new(format!("concat{l}"), LayerKind::ConcatC));
            self.decoders[l].layer_specs(out);
        }
        self.head.specs(out);
        for h in &self.aux_heads {
            h.specs(out);
        }
    }
}
