//! Residual U-Net with multi-scale inputs and channel-attention skips.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensorkit::conv::ConvGeometry;
use tensorkit::layers::{Conv3d, ConvTranspose3d, MaxPool2, Resample, Sequential, Sigmoid};
use tensorkit::{concat_channels, split_channels, Layer, LayerKind, LayerSpec, Mode, Module, Parameter, Tensor, TensorError};

use super::blocks::{conv_bn_relu, ChannelAttention, ResidualBlock};
use super::NetConfig;
use crate::error::Result;

/// Resamples an auxiliary input to its fusion level and lifts it to
/// feature space.
pub struct Stem {
    resample: Resample,
    pub block: Sequential,
}

pub struct FineNet {
    config: NetConfig,
    encoders: Vec<ResidualBlock>,
    pools: Vec<MaxPool2>,
    /// `stems[i]` feeds encoder level `i + 1`.
    stems: Vec<Stem>,
    ups: Vec<ConvTranspose3d>,
    attention: Vec<ChannelAttention>,
    decoders: Vec<ResidualBlock>,
    head: Conv3d,
    sigmoid: Sigmoid,
    ready: bool,
}

/// Number of auxiliary inputs.
pub const AUX_INPUTS: usize = 2;

impl FineNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = config.levels;
        let ch = |l: usize| config.channels(l);
        let n_stems = if config.multiscale { AUX_INPUTS.min(levels - 1) } else { 0 };
        let stem_ch = ch(0);
        let mut encoders = vec![ResidualBlock::new("enc0", 1, ch(0), config.residual, &mut rng)];
        let mut stems = Vec::new();
        for l in 1..levels {
            let extra = if l <= n_stems { stem_ch } else { 0 };
            if extra > 0 {
                stems.push(Stem {
                    resample: Resample::new(&format!("stem{l}.resample"), [1, 1, 1]),
                    block: conv_bn_relu(&format!("stem{l}"), 1, stem_ch, &mut rng),
                });
            }
            // Fused blocks always project so that zeroed stems reduce exactly
            // to the single-scale network.
            encoders.push(ResidualBlock::projected(&format!("enc{l}"), ch(l - 1) + extra, ch(l), config.residual, &mut rng));
        }
        let pools = (0..levels - 1).map(|l| MaxPool2::new(&format!("pool{l}"))).collect();
        let mut ups = Vec::new();
        let mut attention = Vec::new();
        let mut decoders = Vec::new();
        for l in 0..levels - 1 {
            ups.push(ConvTranspose3d::new(&format!("up{l}"), ch(l + 1), ch(l), &mut rng));
            attention.push(ChannelAttention::new(&format!("se{l}"), ch(l), config.se_reduction, &mut rng));
            decoders.push(ResidualBlock::new(&format!("dec{l}"), 2 * ch(l), ch(l), config.residual, &mut rng));
        }
        let mut head = Conv3d::new("head", ch(0), 1, ConvGeometry::pointwise(), &mut rng);
        head.bias.value.fill(config.head_bias);
        Ok(FineNet {
            config,
            encoders,
            pools,
            stems,
            ups,
            attention,
            decoders,
            head,
            sigmoid: Sigmoid::new("head.sigmoid"),
            ready: false,
        })
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

    /// `x1` at base dims; `x2`, `x3` at any dims (resampled to encoder
    /// levels 1 and 2). Unused when multi-scale fusion is off.
    pub fn forward(&mut self, x1: &Tensor, x2: &Tensor, x3: &Tensor, mode: Mode) -> Result<Tensor> {
        let levels = self.config.levels;
        let dims = x1.spatial();
        let div = 1 << (levels - 1);
        if x1.channels() != 1 || dims.iter().any(|&n| n % div != 0 || n == 0) {
            return Err(TensorError::shape("fine net input (dims divisible by 2^(levels-1))", [x1.batch(), 1, div, div, div], x1.shape()).into());
        }
        for x in [x2, x3] {
            if x.channels() != 1 || x.batch() != x1.batch() {
                return Err(TensorError::shape("fine net auxiliary input", [x1.batch(), 1, 0, 0, 0], x.shape()).into());
            }
        }
        let aux = [x2, x3];
        let mut skips = Vec::with_capacity(levels);
        let mut h = self.encoders[0].forward(x1, mode)?;
        skips.push(h.clone());
        for l in 1..levels {
            h = self.pools[l - 1].forward(&h, mode)?;
            if let Some(stem) = self.stems.get_mut(l - 1) {
                stem.resample.set_target(h.spatial());
                let s = stem.block.forward(&stem.resample.forward(aux[l - 1], mode)?, mode)?;
                h = concat_channels(&h, &s)?;
            }
            h = self.encoders[l].forward(&h, mode)?;
            skips.push(h.clone());
        }
        let mut d = skips.pop().expect("bottleneck");
        for l in (0..levels - 1).rev() {
            let up = self.ups[l].forward(&d, mode)?;
            let skip = self.attention[l].forward(&skips[l], mode)?;
            d = self.decoders[l].forward(&concat_channels(&skip, &up)?, mode)?;
        }
        Ok(self.sigmoid.forward(&self.head.forward(&d, mode)?, mode)?)
    }

    /// Accumulates parameter gradients; returns the gradient for `x1`.
    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let levels = self.config.levels;
        let mut g = self.head.backward(&self.sigmoid.backward(grad));
        let mut gskip = vec![None; levels];
        for l in 0..levels - 1 {
            let gc = self.decoders[l].backward(&g);
            let (g_skip, g_up) = split_channels(&gc, gc.channels() / 2);
            gskip[l] = Some(self.attention[l].backward(&g_skip));
            g = self.ups[l].backward(&g_up);
        }
        for l in (1..levels).rev() {
            g = self.encoders[l].backward(&g);
            if let Some(stem) = self.stems.get_mut(l - 1) {
                let (gh, gs) = split_channels(&g, self.config.channels(l - 1));
                stem.resample.backward(&stem.block.backward(&gs));
                g = gh;
            }
            g = self.pools[l - 1].backward(&g);
            g.add_assign(gskip[l - 1].as_ref().expect("skip gradient"));
        }
        self.encoders[0].backward(&g)
    }
}

impl Module for FineNet {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for (l, e) in self.encoders.iter_mut().enumerate() {
            if l > 0 {
                if let Some(stem) = self.stems.get_mut(l - 1) {
                    stem.block.visit_params(f);
                }
            }
            e.visit_params(f);
        }
        for l in 0..self.ups.len() {
            self.ups[l].visit_params(f);
            self.attention[l].visit_params(f);
            self.decoders[l].visit_params(f);
        }
        self.head.visit_params(f);
    }

    fn layer_specs(&self, out: &mut Vec<LayerSpec>) {
        for (l, e) in self.encoders.iter().enumerate() {
            if l > 0 {
                self.pools[l - 1].layer_specs(out);
                if let Some(stem) = self.stems.get(l - 1) {
                    stem.resample.layer_specs(out);
                    stem.block.layer_specs(out);
                    out.push(LayerSpec::new(format!("stem{l}.concat"), LayerKind::ConcatC));
                }
            }
            e.layer_specs(out);
        }
        for l in (0..self.ups.len()).rev() {
            self.ups[l].layer_specs(out);
            self.attention[l].layer_specs(out);
            out.push(LayerSpec::new(format!("concat{l}"), LayerKind::ConcatC));
            self.decoders[l].layer_specs(out);
        }
        self.head.layer_specs(out);
        self.sigmoid.layer_specs(out);
    }
}
