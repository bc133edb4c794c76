//! Synthetic mandible phantoms with known canal geometry.
//!
//! Coordinates are continuous voxel units: voxel `(i, j, k)` covers
//! `[i, i+1) x [j, j+1) x [k, k+1)` and its centre is `(i+0.5, j+0.5, k+0.5)`.
//! `x` runs across the jaw (left canal at low `x`), `y` front to back and
//! `z` along the scan axis.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{BinaryMask, Grid, PolygonAnnotation, SlicePolygon, Volume};

/// Intensity regime of the simulated scanner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    /// -1000..1000 HU
    TypeA,
    /// -1000..2000 HU
    TypeB,
    /// 0..5000 HU
    TypeC,
}

impl Regime {
    pub fn hu_range(self) -> (i32, i32) {
        match self {
            Regime::TypeA => (-1000, 1000),
            Regime::TypeB => (-1000, 2000),
            Regime::TypeC => (0, 5000),
        }
    }

    /// Maps a TypeA value into this regime. TypeB is a pure offset of 500
    /// HU, a multiple of the default histogram bin width.
    pub fn from_type_a(self, hu: i32) -> i32 {
        match self {
            Regime::TypeA => hu,
            Regime::TypeB => hu + 500,
            Regime::TypeC => (2.5 * hu as f64).round() as i32 + 2500,
        }
    }
}

pub const AIR_HU: f64 = -950.0;
pub const SOFT_TISSUE_HU: f64 = 40.0;
pub const BONE_HU: f64 = 900.0;
pub const CANAL_HU: f64 = 350.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub regime: Regime,
    pub canal_radius_range: [f64; 2],
    /// Maximum relative left/right difference in canal radius and length.
    pub left_right_asymmetry: f64,
    pub noise_sigma: f64,
    /// Small canal-intensity pockets scattered in the bone.
    pub speckles: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            dims: [96, 96, 64],
            regime: Regime::TypeA,
            canal_radius_range: [1.5, 3.5],
            left_right_asymmetry: 0.2,
            noise_sigma: 40.0,
            speckles: 4,
        }
    }
}

impl PhantomSpec {
    pub fn with_seed(seed: u64) -> Self {
        PhantomSpec { seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n < 32) {
            return Err(Error::SpecInvalid(format!("dims {:?} must be >= 32", self.dims)));
        }
        let [lo, hi] = self.canal_radius_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::SpecInvalid(format!("radius range {:?}", self.canal_radius_range)));
        }
        if !(0.0..1.0).contains(&self.left_right_asymmetry) {
            return Err(Error::SpecInvalid(format!("asymmetry {}", self.left_right_asymmetry)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::SpecInvalid(format!("noise sigma {}", self.noise_sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    pub gt_left: BinaryMask,
    pub gt_right: BinaryMask,
    pub annotation: PolygonAnnotation,
}

/// Parabolic arch `y = front + k (x - cx)^2` in the axial plane.
struct Arch {
    cx: f64,
    front: f64,
    k: f64,
    half_width: f64,
    z_lo: f64,
    z_hi: f64,
    x_extent: f64,
}

impl Arch {
    fn y(&self, x: f64) -> f64 {
        self.front + self.k * (x - self.cx).powi(2)
    }

    /// Approximate in-plane distance to the arch curve (vertical offset over
    /// the normal length).
    fn distance(&self, x: f64, y: f64) -> f64 {
        let slope = 2.0 * self.k * (x - self.cx);
        (y - self.y(x)).abs() / (1.0 + slope * slope).sqrt()
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        (p[0] - self.cx).abs() <= self.x_extent && p[2] >= self.z_lo && p[2] <= self.z_hi && self.distance(p[0], p[1]) <= self.half_width
    }
}

/// Swept tube: union of capsules along a polyline.
struct Tube {
    points: Vec<[f64; 3]>,
    radius: f64,
}

impl Tube {
    fn bounds(&self, dims: [usize; 3]) -> ([usize; 3], [usize; 3]) {
        let mut lo = [f64::MAX; 3];
        let mut hi = [f64::MIN; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a] - self.radius);
                hi[a] = hi[a].max(p[a] + self.radius);
            }
        }
        let lo = [0, 1, 2].map(|a| (lo[a].floor().max(0.0)) as usize);
        let hi = [0, 1, 2].map(|a| (hi[a].ceil() as usize + 1).min(dims[a]));
        (lo, hi)
    }

    fn distance_sq(&self, p: [f64; 3]) -> f64 {
        let mut best = f64::MAX;
        for w in self.points.windows(2) {
            best = best.min(segment_distance_sq(p, w[0], w[1]));
        }
        best
    }

    fn rasterize(&self, dims: [usize; 3]) -> BinaryMask {
        let mut m = Grid::filled(dims, [1.0; 3], 0u8);
        let (lo, hi) = self.bounds(dims);
        let r2 = self.radius * self.radius;
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    if self.distance_sq(center(x, y, z)) <= r2 {
                        m.set(x, y, z, 1);
                    }
                }
            }
        }
        m
    }
}

fn center(x: usize, y: usize, z: usize) -> [f64; 3] {
    [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5]
}

fn segment_distance_sq(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1], ap[2] - t * ab[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

const TUBE_SAMPLES: usize = 48;

/// Canal centreline following the arch from lateral offset `s0` to `s1`,
/// mirrored to the requested side, descending in `z` towards the front.
fn canal_tube(arch: &Arch, left: bool, s0: f64, s1: f64, z_front: f64, z_back: f64, radius: f64) -> Tube {
    let sign = if left { -1.0 } else { 1.0 };
    let points = (0..TUBE_SAMPLES)
        .map(|i| {
            let t = i as f64 / (TUBE_SAMPLES - 1) as f64;
            let s = s0 + t * (s1 - s0);
            let x = arch.cx + sign * s;
            [x, arch.y(x), z_front + t * (z_back - z_front)]
        })
        .collect();
    Tube { points, radius }
}

/// Convex hull (Andrew's monotone chain), counter-clockwise without
/// collinear points.
fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Per-slice convex hulls of the set voxels' footprints.
fn slice_polygons(m: &BinaryMask) -> Vec<SlicePolygon> {
    let [nx, ny, nz] = m.dims();
    let mut out = Vec::new();
    for z in 0..nz {
        let mut corners = Vec::new();
        for y in 0..ny {
            for x in 0..nx {
                if m.get(x, y, z) != 0 {
                    let (fx, fy) = (x as f64, y as f64);
                    corners.extend([[fx, fy], [fx + 1.0, fy], [fx, fy + 1.0], [fx + 1.0, fy + 1.0]]);
                }
            }
        }
        if !corners.is_empty() {
            out.push(SlicePolygon { z, pts: convex_hull(corners) });
        }
    }
    out
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dims = spec.dims;
    let [nx, ny, nz] = dims.map(|n| n as f64);
    let spacing_mm = rng.random_range(0.30..=0.39);
    let spacing = [spacing_mm; 3];

    let x_extent = 0.40 * nx;
    let front = ny * rng.random_range(0.16..0.24);
    let back = ny * rng.random_range(0.72..0.80);
    let arch = Arch {
        cx: nx / 2.0,
        front,
        k: (back - front) / (x_extent * x_extent),
        half_width: 0.08 * nx,
        z_lo: 0.15 * nz,
        z_hi: 0.85 * nz,
        x_extent,
    };

    let [r_lo, r_hi] = spec.canal_radius_range;
    let r0 = rng.random_range(r_lo..=r_hi);
    let a = spec.left_right_asymmetry;
    let s0 = 0.10 * nx;
    let len0 = rng.random_range(0.20..0.24) * nx;
    let z_front = nz * rng.random_range(0.38..0.46);
    let z_back = z_front + nz * rng.random_range(0.10..0.18);
    let side = |left: bool, rng: &mut ChaCha8Rng| {
        let radius = (r0 * (1.0 + rng.random_range(-a..=a))).clamp(r_lo, r_hi);
        let len = (len0 * (1.0 + rng.random_range(-a..=a))).min(x_extent - s0 - 1.0);
        canal_tube(&arch, left, s0, s0 + len, z_front, z_back, radius)
    };
    let left = side(true, &mut rng);
    let right = side(false, &mut rng);
    let gt_left = left.rasterize(dims).with_spacing(spacing)?;
    let gt_right = right.rasterize(dims).with_spacing(spacing)?;

    // Pockets sit in bone, clear of both canals.
    let mut pockets: Vec<([f64; 3], f64)> = Vec::new();
    let mut tries = 0;
    while pockets.len() < spec.speckles && tries < 1000 {
        tries += 1;
        let x = rng.random_range(arch.cx - x_extent..arch.cx + x_extent);
        let p = [x, arch.y(x) + rng.random_range(-0.5..0.5) * arch.half_width, rng.random_range(arch.z_lo + 3.0..arch.z_hi - 3.0)];
        let clearance = |t: &Tube| t.distance_sq(p).sqrt() - t.radius;
        if arch.contains(p) && clearance(&left) > 6.0 && clearance(&right) > 6.0 {
            pockets.push((p, rng.random_range(0.8..1.3)));
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let (hu_lo, hu_hi) = Regime::TypeA.hu_range();
    let head = [0.48 * nx, 0.48 * ny];
    let mut data = Vec::with_capacity(gt_left.len());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = center(x, y, z);
                let (ex, ey) = ((p[0] - nx / 2.0) / head[0], (p[1] - ny / 2.0) / head[1]);
                let i = gt_left.index(x, y, z);
                let base = if gt_left.data()[i] != 0 || gt_right.data()[i] != 0 {
                    CANAL_HU
                } else if arch.contains(p) {
                    let in_pocket = pockets.iter().any(|(c, r)| {
                        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                        d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= r * r
                    });
                    if in_pocket {
                        CANAL_HU
                    } else {
                        BONE_HU
                    }
                } else if ex * ex + ey * ey <= 1.0 {
                    SOFT_TISSUE_HU
                } else {
                    AIR_HU
                };
                let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let hu = ((base + n).round() as i32).clamp(hu_lo, hu_hi);
                data.push(spec.regime.from_type_a(hu));
            }
        }
    }
    let volume = Grid::new(dims, spacing, data)?;
    let annotation = PolygonAnnotation { left: slice_polygons(&gt_left), right: slice_polygons(&gt_right) };
    Ok(Phantom { volume, gt_left, gt_right, annotation })
}

pub const VOLUME_FILE: &str = "volume.volz";
pub const GT_LEFT_FILE: &str = "gt_left.volz";
pub const GT_RIGHT_FILE: &str = "gt_right.volz";
pub const ANNOTATION_FILE: &str = "annotation.json";
pub const SPEC_FILE: &str = "spec.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub seed: u64,
    pub regime: Regime,
    pub split: Split,
    /// Case directory relative to the manifest.
    pub dir: PathBuf,
    pub volume: PathBuf,
    pub gt_left: PathBuf,
    pub gt_right: PathBuf,
    pub annotation: PathBuf,
    pub spec: PathBuf,
}

/// Scan and ground truth of one case, read from disk.
#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub volume: Volume,
    pub gt_left: BinaryMask,
    pub gt_right: BinaryMask,
}

impl CaseEntry {
    /// Reads the case; `root` is the directory holding the manifest.
    pub fn load(&self, root: &Path) -> Result<LoadedCase> {
        Ok(LoadedCase {
            volume: Volume::load(&root.join(&self.volume))?,
            gt_left: BinaryMask::load(&root.join(&self.gt_left))?,
            gt_right: BinaryMask::load(&root.join(&self.gt_right))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub base_seed: u64,
    pub cases: Vec<CaseEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(move |c| c.split == split)
    }
}

/// Options for [`generate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetOptions {
    pub n: usize,
    pub base_seed: u64,
    /// Regimes assigned round-robin by case index.
    pub regimes: Vec<Regime>,
    /// The last `n_test` cases form the test split.
    pub n_test: usize,
    pub template: PhantomSpec,
}

/// Writes `n` case directories under `root` plus `manifest.json`.
pub fn generate_dataset(root: &Path, opts: &DatasetOptions) -> Result<Manifest> {
    if opts.n == 0 {
        return Err(Error::SpecInvalid("dataset needs at least one case".into()));
    }
    if opts.regimes.is_empty() {
        return Err(Error::SpecInvalid("regime mix is empty".into()));
    }
    if opts.n_test > opts.n {
        return Err(Error::SpecInvalid(format!("{} test cases out of {}", opts.n_test, opts.n)));
    }
    std::fs::create_dir_all(root).map_err(|e| Error::file(root, e))?;
    let mut cases = Vec::with_capacity(opts.n);
    for i in 0..opts.n {
        let seed = opts.base_seed + i as u64;
        let regime = opts.regimes[i % opts.regimes.len()];
        let spec = PhantomSpec { seed, regime, ..opts.template.clone() };
        let ph = generate_phantom(&spec)?;
        let id = format!("case_{i:03}");
        let dir = root.join(&id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
        ph.volume.save(&dir.join(VOLUME_FILE))?;
        ph.gt_left.save(&dir.join(GT_LEFT_FILE))?;
        ph.gt_right.save(&dir.join(GT_RIGHT_FILE))?;
        ph.annotation.save(&dir.join(ANNOTATION_FILE))?;
        let spec_path = dir.join(SPEC_FILE);
        std::fs::write(&spec_path, serde_json::to_vec_pretty(&spec)?).map_err(|e| Error::file(&spec_path, e))?;
        let rel = PathBuf::from(&id);
        cases.push(CaseEntry {
            id,
            seed,
            regime,
            split: if i + opts.n_test >= opts.n { Split::Test } else { Split::Train },
            volume: rel.join(VOLUME_FILE),
            gt_left: rel.join(GT_LEFT_FILE),
            gt_right: rel.join(GT_RIGHT_FILE),
            annotation: rel.join(ANNOTATION_FILE),
            spec: rel.join(SPEC_FILE),
            dir: rel,
        });
    }
    let manifest = Manifest { base_seed: opts.base_seed, cases };
    let path = root.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::file(&path, e))?;
    Ok(manifest)
}
