//! Per-scan window selection from the intensity histogram.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{compute_histogram, Histogram, NormVolume, Volume};

/// Range up to which the window width tracks the intensity range one to one.
pub const WW_KNEE: f64 = 2000.0;
/// Width growth per HU of range above the knee.
pub const WW_SLOPE_ABOVE_KNEE: f64 = 0.25;
/// Default histogram bin width in HU.
pub const DEFAULT_BIN_WIDTH: i32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowParams {
    pub wc: f64,
    pub ww: f64,
}

impl WindowParams {
    pub fn new(wc: f64, ww: f64) -> Result<Self> {
        if !(wc.is_finite() && ww.is_finite() && ww >= 1.0) {
            return Err(Error::InvalidConfig(format!("window ({wc}, {ww}) needs finite values and ww >= 1")));
        }
        Ok(WindowParams { wc, ww })
    }
}

/// Centre of the first bin whose cumulative count reaches `num/den` of the
/// total. Integer comparison keeps the quantile exact.
fn quantile_center(h: &Histogram, num: u64, den: u64) -> f64 {
    let total = h.total();
    let mut cum = 0u64;
    for (k, &c) in h.counts.iter().enumerate() {
        cum += c;
        if cum * den >= num * total {
            return h.bin_center(k);
        }
    }
    h.bin_center(h.counts.len() - 1)
}

/// Window width for an effective intensity range `r`.
pub fn width_for_range(r: f64) -> f64 {
    let ww = if r <= WW_KNEE { r } else { WW_KNEE + WW_SLOPE_ABOVE_KNEE * (r - WW_KNEE) };
    ww.max(1.0)
}

/// Centre at the modal bin (lowest index on ties), width from the
/// p0.5..p99.5 range.
pub fn compute_window(h: &Histogram) -> Result<WindowParams> {
    if h.total() == 0 {
        return Err(Error::EmptyHistogram);
    }
    let mut mode = 0;
    for (k, &c) in h.counts.iter().enumerate() {
        if c > h.counts[mode] {
            mode = k;
        }
    }
    let r = quantile_center(h, 995, 1000) - quantile_center(h, 5, 1000);
    Ok(WindowParams { wc: h.bin_center(mode), ww: width_for_range(r) })
}

/// `clamp((x - (wc - ww/2)) / ww, 0, 1)`, evaluated in `f64`.
#[inline]
pub fn window_value(x: f64, w: WindowParams) -> f32 {
    ((x - (w.wc - w.ww / 2.0)) / w.ww).clamp(0.0, 1.0) as f32
}

pub fn apply_window(v: &Volume, w: WindowParams) -> NormVolume {
    v.map(|x| window_value(x as f64, w))
}

/// Histogram, window selection and windowing in one step.
pub fn auto_window(v: &Volume, bin_width: i32) -> Result<(WindowParams, NormVolume)> {
    let w = compute_window(&compute_histogram(v, bin_width)?)?;
    Ok((w, apply_window(v, w)))
}
