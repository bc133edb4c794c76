//! Binary morphology, 26-connected components and canal refinement.
//!
//! Voxels outside the grid count as background for every operation.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::volgrid::{BinaryMask, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeShape {
    /// Cube of side `2r + 1`.
    Box,
    /// L1 ball; the 6-neighbourhood plus centre at radius 1.
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructElem {
    pub shape: SeShape,
    pub radius: usize,
}

impl StructElem {
    /// # Panics
    /// If `radius` is zero.
    pub fn new(shape: SeShape, radius: usize) -> Self {
        assert!(radius >= 1, "structuring element radius must be >= 1");
        StructElem { shape, radius }
    }

    pub fn box1() -> Self {
        Self::new(SeShape::Box, 1)
    }

    pub fn cross1() -> Self {
        Self::new(SeShape::Cross, 1)
    }

    /// Element offsets; the set is symmetric about the origin.
    pub fn offsets(&self) -> Vec<[isize; 3]> {
        let r = self.radius as isize;
        let mut out = Vec::new();
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if self.shape == SeShape::Box || dx.abs() + dy.abs() + dz.abs() <= r {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MorphOp {
    Dilate,
    Erode,
    Open,
    Close,
}

/// Running OR (`dilate`) or AND (`erode`) over a window of `±r` along one
/// axis with background beyond the ends.
fn axis_pass(m: &BinaryMask, axis: usize, r: usize, dilate: bool) -> BinaryMask {
    let dims = m.dims();
    let n = dims[axis];
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let src = m.data();
    let mut out = m.clone();
    let dst = out.data_mut();
    let mut line = vec![0u8; n];
    // prefix[i] = number of set voxels in line[..i]
    let mut prefix = vec![0usize; n + 1];
    for start in 0..src.len() {
        if (start / stride) % n != 0 {
            continue;
        }
        for (i, v) in line.iter_mut().enumerate() {
            *v = src[start + i * stride];
        }
        for i in 0..n {
            prefix[i + 1] = prefix[i] + (line[i] != 0) as usize;
        }
        for i in 0..n {
            let lo = i.saturating_sub(r);
            let hi = (i + r + 1).min(n);
            let set = prefix[hi] - prefix[lo];
            let v = if dilate { set > 0 } else { set == 2 * r + 1 };
            dst[start + i * stride] = v as u8;
        }
    }
    out
}

fn stencil(m: &BinaryMask, offsets: &[[isize; 3]], dilate: bool) -> BinaryMask {
    let [nx, ny, nz] = m.dims();
    let mut out = Grid::filled(m.dims(), m.spacing(), 0u8);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut hits = 0;
                for o in offsets {
                    let (px, py, pz) = (x as isize + o[0], y as isize + o[1], z as isize + o[2]);
                    let inside = px >= 0 && py >= 0 && pz >= 0 && (px as usize) < nx && (py as usize) < ny && (pz as usize) < nz;
                    if inside && m.get(px as usize, py as usize, pz as usize) != 0 {
                        hits += 1;
                        if dilate {
                            break;
                        }
                    } else if !dilate {
                        break;
                    }
                }
                let v = if dilate { hits > 0 } else { hits == offsets.len() };
                out.set(x, y, z, v as u8);
            }
        }
    }
    out
}

pub fn dilate(m: &BinaryMask, se: StructElem) -> BinaryMask {
    match se.shape {
        SeShape::Box => (0..3).fold(m.clone(), |acc, a| axis_pass(&acc, a, se.radius, true)),
        SeShape::Cross => stencil(m, &se.offsets(), true),
    }
}

pub fn erode(m: &BinaryMask, se: StructElem) -> BinaryMask {
    match se.shape {
        SeShape::Box => (0..3).fold(m.clone(), |acc, a| axis_pass(&acc, a, se.radius, false)),
        SeShape::Cross => stencil(m, &se.offsets(), false),
    }
}

pub fn morph(m: &BinaryMask, op: MorphOp, se: StructElem) -> BinaryMask {
    match op {
        MorphOp::Dilate => dilate(m, se),
        MorphOp::Erode => erode(m, se),
        MorphOp::Open => dilate(&erode(m, se), se),
        MorphOp::Close => erode(&dilate(m, se), se),
    }
}

/// Component labelling. Label 0 is background; components are numbered from
/// 1 in order of their first voxel in scan order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    pub dims: [usize; 3],
    pub labels: Vec<u32>,
    /// `sizes[k]` is the voxel count of label `k + 1`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Label of the largest component (lowest label on ties).
    pub fn largest(&self) -> Option<u32> {
        let mut best: Option<(usize, usize)> = None;
        for (k, &s) in self.sizes.iter().enumerate() {
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((k, s));
            }
        }
        best.map(|(k, _)| k as u32 + 1)
    }

    /// Mask of the voxels whose label satisfies `keep`.
    pub fn select(&self, spacing: [f64; 3], keep: impl Fn(u32) -> bool) -> BinaryMask {
        let data = self.labels.iter().map(|&l| u8::from(l != 0 && keep(l))).collect();
        Grid::new(self.dims, spacing, data).expect("labels match dims")
    }
}

/// 26-connected components by breadth-first flood fill.
pub fn connected_components(m: &BinaryMask) -> Components {
    let dims = m.dims();
    let [nx, ny, nz] = dims;
    let mut labels = vec![0u32; m.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..m.len() {
        if m.data()[seed] == 0 || labels[seed] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[seed] = label;
        queue.push_back(seed);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let [x, y, z] = m.coords(i);
            for dz in z.saturating_sub(1)..=(z + 1).min(nz - 1) {
                for dy in y.saturating_sub(1)..=(y + 1).min(ny - 1) {
                    for dx in x.saturating_sub(1)..=(x + 1).min(nx - 1) {
                        let j = m.index(dx, dy, dz);
                        if m.data()[j] != 0 && labels[j] == 0 {
                            labels[j] = label;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        sizes.push(size);
    }
    Components { dims, labels, sizes }
}

/// Fraction of the kept component below which re-split fragments are dropped.
pub const SPECKLE_FRACTION: f64 = 0.001;

/// Bridges small gaps and removes noise from a single-canal mask.
///
/// Close (box r1), keep the largest component, open (cross r1), then drop
/// fragments smaller than [`SPECKLE_FRACTION`] of the kept component. When
/// the opening empties the mask or leaves more than one significant
/// fragment, the closed component is returned instead, so a non-empty input
/// always yields exactly one component.
pub fn refine_canal(m: &BinaryMask) -> BinaryMask {
    let closed = morph(m, MorphOp::Close, StructElem::box1());
    let cc = connected_components(&closed);
    let Some(largest) = cc.largest() else {
        return closed;
    };
    let kept = cc.select(m.spacing(), |l| l == largest);
    let kept_size = cc.sizes[largest as usize - 1];
    let opened = morph(&kept, MorphOp::Open, StructElem::cross1());
    let parts = connected_components(&opened);
    if parts.count() == 1 {
        return opened;
    }
    let min_size = SPECKLE_FRACTION * kept_size as f64;
    let survivors: Vec<u32> =
        (1..=parts.count() as u32).filter(|&l| parts.sizes[l as usize - 1] as f64 >= min_size).collect();
    if survivors.len() == 1 {
        parts.select(m.spacing(), |l| l == survivors[0])
    } else {
        kept
    }
}
