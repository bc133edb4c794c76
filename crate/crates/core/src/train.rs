//! Training loops for both networks.
//!
//! Samples are prepared once up front. Each epoch visits them in a seeded
//! shuffled order in mini-batches; every batch is one forward, one backward
//! and one Adam step over all trainable parameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensorkit::loss::dice_loss_grad;
use tensorkit::{stack_batch, Adam, Mode, Module, Tensor};

use crate::error::{Error, Result};
use crate::nets::{supervised_loss_grad, CoarseNet, FineNet};
use crate::pipeline::{extract_voi, make_multiscale_inputs, PipelineConfig, Side};
use crate::volgrid::{crop_pad, resample, BinaryMask, Interp, Volume};
use crate::windowing::auto_window;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_coarse: usize,
    pub epochs_fine: usize,
    /// Seeds network initialization and the epoch shuffles.
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig { lr: 1e-3, batch_size: 2, epochs_coarse: 20, epochs_fine: 30, seed: 0 }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.epochs_coarse == 0 || self.epochs_fine == 0 {
            return Err(Error::InvalidConfig("batch_size and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Windowed scan at coarse input dims and the union of both canals as a
/// soft (trilinearly resampled) target.
#[derive(Debug, Clone)]
pub struct CoarseSample {
    pub x: Tensor,
    pub target: Tensor,
}

/// Multi-scale VOI inputs around one ground-truth canal and its soft target
/// at base dims.
#[derive(Debug, Clone)]
pub struct FineSample {
    pub inputs: [Tensor; 3],
    pub target: Tensor,
}

fn soft(m: &BinaryMask) -> crate::volgrid::ProbMap {
    m.map(|v| v as f32)
}

pub fn coarse_sample(volume: &Volume, gt_left: &BinaryMask, gt_right: &BinaryMask, cfg: &PipelineConfig) -> Result<CoarseSample> {
    let (_, norm) = auto_window(volume, cfg.bin_width)?;
    let x = resample(&norm, cfg.coarse_input_dims, Interp::Trilinear)?;
    let target = resample(&soft(&gt_left.union(gt_right)?), cfg.coarse_input_dims, Interp::Trilinear)?;
    Ok(CoarseSample { x: x.to_tensor(), target: target.to_tensor() })
}

/// One sample per side with a non-empty canal. The VOI comes from the
/// ground truth itself, boxed exactly as the pipeline boxes a coarse mask.
pub fn fine_samples(volume: &Volume, gt_left: &BinaryMask, gt_right: &BinaryMask, cfg: &PipelineConfig) -> Result<Vec<FineSample>> {
    let (_, norm) = auto_window(volume, cfg.bin_width)?;
    let mut out = Vec::new();
    for (side, gt) in [(Side::Left, gt_left), (Side::Right, gt_right)] {
        if gt.is_all_zero() {
            continue;
        }
        let (voi, crop) = extract_voi(&norm, gt, side, cfg)?;
        let inputs = make_multiscale_inputs(&crop, cfg)?.map(|g| g.to_tensor());
        let target = resample(&crop_pad(&soft(gt), voi.bbox(), 0.0), cfg.base_dims(), Interp::Trilinear)?;
        out.push(FineSample { inputs, target: target.to_tensor() });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
}

fn run_epochs<S>(
    samples: &[S],
    epochs: usize,
    cfg: &TrainingConfig,
    step: &mut dyn FnMut(&[&S]) -> Result<f64>,
    on_epoch: &mut dyn FnMut(EpochStats),
) -> Result<Vec<EpochStats>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&S> = chunk.iter().map(|&i| &samples[i]).collect();
            total += step(&batch)?;
            batches += 1;
        }
        let stats = EpochStats { epoch, loss: total / batches as f64 };
        log::info!("epoch {epoch}: loss {:.5}", stats.loss);
        on_epoch(stats);
        history.push(stats);
    }
    Ok(history)
}

fn adam_step(net: &mut dyn Module, adam: &Adam) {
    net.visit_params(&mut |p| adam.step(p));
}

/// Trains with the deeply supervised loss and marks the net ready.
pub fn train_coarse(
    net: &mut CoarseNet,
    samples: &[CoarseSample],
    cfg: &TrainingConfig,
    on_epoch: &mut dyn FnMut(EpochStats),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let adam = Adam::new(cfg.lr);
    let weights = net.config().supervision_weights.clone();
    net.zero_grad();
    let history = run_epochs(
        samples,
        cfg.epochs_coarse,
        cfg,
        &mut |batch| {
            let x = stack_batch(&batch.iter().map(|s| &s.x).collect::<Vec<_>>())?;
            let g = stack_batch(&batch.iter().map(|s| &s.target).collect::<Vec<_>>())?;
            let out = net.forward(&x, Mode::Train)?;
            let (loss, g_main, g_aux) = supervised_loss_grad(&out.main, &out.aux, &g, &weights)?;
            net.backward(&g_main, &g_aux);
            adam_step(net, &adam);
            Ok(loss)
        },
        on_epoch,
    )?;
    net.mark_ready();
    Ok(history)
}

/// Trains with dice loss and marks the net ready.
pub fn train_fine(
    net: &mut FineNet,
    samples: &[FineSample],
    cfg: &TrainingConfig,
    on_epoch: &mut dyn FnMut(EpochStats),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let adam = Adam::new(cfg.lr);
    net.zero_grad();
    let history = run_epochs(
        samples,
        cfg.epochs_fine,
        cfg,
        &mut |batch| {
            let x: Vec<Tensor> = (0..3)
                .map(|k| stack_batch(&batch.iter().map(|s| &s.inputs[k]).collect::<Vec<_>>()))
                .collect::<tensorkit::Result<_>>()?;
            let g = stack_batch(&batch.iter().map(|s| &s.target).collect::<Vec<_>>())?;
            let p = net.forward(&x[0], &x[1], &x[2], Mode::Train)?;
            let (loss, grad) = dice_loss_grad(&p, &g)?;
            net.backward(&grad);
            adam_step(net, &adam);
            Ok(loss)
        },
        on_epoch,
    )?;
    net.mark_ready();
    Ok(history)
}
