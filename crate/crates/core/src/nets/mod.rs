//! The two segmentation networks and their shared configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tensorkit::checkpoint::Checkpoint;
use tensorkit::loss::{dice_loss, dice_loss_grad};
use tensorkit::gradcheck::GradCheckable;
use tensorkit::{Mode, Module, Parameter, Tensor};

use crate::error::{Error, Result};

pub mod blocks;
mod coarse;
mod fine;

pub use coarse::{CoarseNet, CoarseOutput};
pub use fine::{FineNet, Stem, AUX_INPUTS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub levels: usize,
    pub base_channels: usize,
    /// Grid order `[nx, ny, nz]`.
    pub input_dims: [usize; 3],
    /// Main head first, then one weight per auxiliary head.
    pub supervision_weights: Vec<f64>,
    pub se_reduction: usize,
    /// Residual shortcuts in the fine network's blocks.
    pub residual: bool,
    /// Auxiliary-scale inputs in the fine network.
    pub multiscale: bool,
    /// Initial bias of every sigmoid head: a foreground prior in logits.
    pub head_bias: f32,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            levels: 3,
            base_channels: 8,
            input_dims: [64, 64, 64],
            supervision_weights: vec![1.0, 0.5, 0.25],
            se_reduction: 4,
            residual: true,
            multiscale: true,
            head_bias: -4.0,
        }
    }
}

impl NetConfig {
    pub fn coarse_default() -> Self {
        Self::default()
    }

    pub fn fine_default() -> Self {
        NetConfig { input_dims: [48, 48, 48], ..Self::default() }
    }

    /// Channels at encoder level `l`: doubled at every downsampling step.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Tensor-order spatial dims `[D, H, W]` of the input.
    pub fn tensor_dims(&self) -> [usize; 3] {
        let [x, y, z] = self.input_dims;
        [z, y, x]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.levels < 2 || self.levels > 8 {
            return bad(format!("levels {} must be in 2..=8", self.levels));
        }
        if self.base_channels == 0 || self.se_reduction == 0 {
            return bad("base_channels and se_reduction must be >= 1".into());
        }
        let div = 1 << (self.levels - 1);
        if self.input_dims.iter().any(|&n| n == 0 || n % div != 0) {
            return bad(format!("input dims {:?} must be divisible by {div}", self.input_dims));
        }
        if self.supervision_weights.len() != self.levels {
            return bad(format!("{} supervision weights for {} levels", self.supervision_weights.len(), self.levels));
        }
        if !self.head_bias.is_finite() {
            return bad(format!("head_bias {}", self.head_bias));
        }
        if self.supervision_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.supervision_weights[0] <= 0.0 {
            return bad(format!("supervision weights {:?}", self.supervision_weights));
        }
        Ok(())
    }
}

fn check_weights(aux: usize, weights: &[f64]) -> Result<()> {
    if weights.len() != aux + 1 {
        return Err(Error::LengthMismatch { what: "supervision weights", expected: aux + 1, found: weights.len() });
    }
    Ok(())
}

/// `(w0 L(main) + sum_i w_i L(aux_i)) / sum(w)` with dice losses.
pub fn supervised_loss(main: &Tensor, aux: &[Tensor], g: &Tensor, weights: &[f64]) -> Result<f64> {
    check_weights(aux.len(), weights)?;
    let mut total = weights[0] * dice_loss(main, g)?;
    for (a, w) in aux.iter().zip(&weights[1..]) {
        total += w * dice_loss(a, g)?;
    }
    Ok(total / weights.iter().sum::<f64>())
}

/// Loss plus gradients for the main and each auxiliary output.
pub fn supervised_loss_grad(main: &Tensor, aux: &[Tensor], g: &Tensor, weights: &[f64]) -> Result<(f64, Tensor, Vec<Tensor>)> {
    check_weights(aux.len(), weights)?;
    let norm = weights.iter().sum::<f64>();
    let (l0, mut g0) = dice_loss_grad(main, g)?;
    g0.scale((weights[0] / norm) as f32);
    let mut total = weights[0] * l0;
    let mut grads = Vec::with_capacity(aux.len());
    for (a, &w) in aux.iter().zip(&weights[1..]) {
        let (l, mut ga) = dice_loss_grad(a, g)?;
        ga.scale((w / norm) as f32);
        total += w * l;
        grads.push(ga);
    }
    Ok((total / norm, g0, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetKind {
    Coarse,
    Fine,
}

/// Architecture record stored in checkpoint manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub net: NetKind,
    pub config: NetConfig,
}

fn save(kind: NetKind, config: &NetConfig, module: &mut dyn Module, path: &Path) -> Result<()> {
    let arch = serde_json::to_value(Arch { net: kind, config: config.clone() })?;
    Checkpoint::capture(arch, module).save(path).map_err(|e| match e {
        tensorkit::TensorError::Io(io) => Error::file(path, io),
        other => other.into(),
    })
}

fn load(kind: NetKind, path: &Path) -> Result<(Checkpoint, NetConfig)> {
    let ck = Checkpoint::load(path).map_err(|e| match e {
        tensorkit::TensorError::Io(io) => Error::file(path, io),
        other => other.into(),
    })?;
    let arch: Arch = serde_json::from_value(ck.manifest.arch.clone())
        .map_err(|e| Error::CheckpointMismatch(format!("architecture record: {e}")))?;
    if arch.net != kind {
        return Err(Error::CheckpointMismatch(format!("expected a {kind:?} network, found {:?}", arch.net)));
    }
    Ok((ck, arch.config))
}

impl CoarseNet {
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let config = self.config().clone();
        save(NetKind::Coarse, &config, self, path)
    }

    /// Rebuilds the network from a checkpoint. A checkpoint written before
    /// any optimizer step loads as untrained.
    pub fn load(path: &Path) -> Result<Self> {
        let (ck, config) = load(NetKind::Coarse, path)?;
        let mut net = CoarseNet::new(config, 0)?;
        ck.restore_into(&mut net)?;
        if ck.manifest.step_count > 0 {
            net.mark_ready();
        }
        Ok(net)
    }
}

impl FineNet {
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let config = self.config().clone();
        save(NetKind::Fine, &config, self, path)
    }

    /// See [`CoarseNet::load`].
    pub fn load(path: &Path) -> Result<Self> {
        let (ck, config) = load(NetKind::Fine, path)?;
        let mut net = FineNet::new(config, 0)?;
        ck.restore_into(&mut net)?;
        if ck.manifest.step_count > 0 {
            net.mark_ready();
        }
        Ok(net)
    }
}

/// A coarse network closed by its supervised loss, for gradient checks.
pub struct CoarseFragment {
    pub net: CoarseNet,
    pub x: Tensor,
    pub target: Tensor,
}

impl GradCheckable for CoarseFragment {
    fn loss(&mut self) -> f64 {
        let out = self.net.forward(&self.x, Mode::Train).expect("fragment forward");
        let w = self.net.config().supervision_weights.clone();
        supervised_loss(&out.main, &out.aux, &self.target, &w).expect("fragment loss")
    }

    fn loss_and_grad(&mut self) -> f64 {
        let out = self.net.forward(&self.x, Mode::Train).expect("fragment forward");
        let w = self.net.config().supervision_weights.clone();
        let (l, gm, ga) = supervised_loss_grad(&out.main, &out.aux, &self.target, &w).expect("fragment loss");
        self.net.backward(&gm, &ga);
        l
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.net.visit_params(f);
    }
}

/// A fine network closed by dice loss, for gradient checks.
pub struct FineFragment {
    pub net: FineNet,
    pub inputs: [Tensor; 3],
    pub target: Tensor,
}

impl GradCheckable for FineFragment {
    fn loss(&mut self) -> f64 {
        let [x1, x2, x3] = &self.inputs;
        let p = self.net.forward(x1, x2, x3, Mode::Train).expect("fragment forward");
        dice_loss(&p, &self.target).expect("fragment loss")
    }

    fn loss_and_grad(&mut self) -> f64 {
        let [x1, x2, x3] = &self.inputs;
        let p = self.net.forward(x1, x2, x3, Mode::Train).expect("fragment forward");
        let (l, g) = dice_loss_grad(&p, &self.target).expect("fragment loss");
        self.net.backward(&g);
        l
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.net.visit_params(f);
    }
}

/// Sets every parameter value (including running statistics) to `v`.
pub fn fill_params(module: &mut dyn Module, v: f32) {
    module.visit_params(&mut |p| p.value.fill(v));
}
