//! Soft dice loss over the whole batch (single global sums).

use crate::{Result, Tensor, TensorError};

/// Smoothing term added to numerator and denominator; keeps the loss
/// defined when both prediction and target are empty.
pub const DICE_SMOOTH: f64 = 1.0;

fn sums(p: &Tensor, g: &Tensor) -> Result<(f64, f64, f64)> {
    if p.shape() != g.shape() {
        return Err(TensorError::shape("dice_loss", p.shape(), g.shape()));
    }
    let (mut spg, mut sp, mut sg) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in p.data().iter().zip(g.data()) {
        spg += a as f64 * b as f64;
        sp += a as f64;
        sg += b as f64;
    }
    Ok((spg, sp, sg))
}

/// `1 − (2·Σpg + ε) / (Σp + Σg + ε)`.
pub fn dice_loss(p: &Tensor, g: &Tensor) -> Result<f64> {
    let (spg, sp, sg) = sums(p, g)?;
    Ok(1.0 - (2.0 * spg + DICE_SMOOTH) / (sp + sg + DICE_SMOOTH))
}

/// Loss and its gradient with respect to `p`.
pub fn dice_loss_grad(p: &Tensor, g: &Tensor) -> Result<(f64, Tensor)> {
    let (spg, sp, sg) = sums(p, g)?;
    let num = 2.0 * spg + DICE_SMOOTH;
    let den = sp + sg + DICE_SMOOTH;
    let loss = 1.0 - num / den;
    let den2 = den * den;
    let grad = g.map(|gi| (-(2.0 * gi as f64 * den - num) / den2) as f32);
    Ok((loss, grad))
}
