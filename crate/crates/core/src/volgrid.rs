//! Voxel grids, boxes, histograms, resampling, polygon rasterization and the
//! VOLZ on-disk format.
//!
//! Grids are stored x-fastest with dims `[nx, ny, nz]`. A grid maps onto a
//! single-channel tensor with `D = nz, H = ny, W = nx` and identical memory
//! layout.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tensorkit::resize::{source_coord, trilinear};
use tensorkit::Tensor;

use crate::error::{Error, Result};

/// Scalar types a grid can hold.
pub trait Voxel: Copy + Default + PartialEq + PartialOrd + Send + Sync + std::fmt::Debug + 'static {
    /// VOLZ dtype tag.
    const DTYPE: &'static str;
    const BYTES: usize;
    /// Label grids may only be resampled with nearest-neighbour.
    const LABEL: bool;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn to_f32(self) -> f32;
    fn from_f32(v: f32) -> Self;
}

impl Voxel for i32 {
    const DTYPE: &'static str = "i32";
    const BYTES: usize = 4;
    const LABEL: bool = false;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        i32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn from_f32(v: f32) -> Self {
        v.round() as i32
    }
}

impl Voxel for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    const LABEL: bool = false;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
    fn to_f32(self) -> f32 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v
    }
}

impl Voxel for u8 {
    const DTYPE: &'static str = "u8";
    const BYTES: usize = 1;
    const LABEL: bool = true;

    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(b: &[u8]) -> Self {
        b[0]
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn from_f32(v: f32) -> Self {
        v.round().clamp(0.0, 255.0) as u8
    }
}

/// Dense 3D grid with physical spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<T>,
}

/// HU intensities.
pub type Volume = Grid<i32>;
/// Windowed intensities in `[0, 1]`.
pub type NormVolume = Grid<f32>;
/// Per-voxel probabilities in `[0, 1]`.
pub type ProbMap = Grid<f32>;
/// Labels in `{0, 1}`.
pub type BinaryMask = Grid<u8>;

fn check_geometry(dims: [usize; 3], spacing: [f64; 3]) -> std::result::Result<(), String> {
    if dims.iter().any(|&n| n == 0) {
        return Err(format!("dims {dims:?} must be positive"));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(format!("spacing {spacing:?} must be positive"));
    }
    Ok(())
}

impl<T: Voxel> Grid<T> {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        check_geometry(dims, spacing).map_err(Error::InvalidConfig)?;
        let n = dims.iter().product();
        if data.len() != n {
            return Err(Error::LengthMismatch { what: "grid data", expected: n, found: data.len() });
        }
        Ok(Grid { dims, spacing, data })
    }

    /// # Panics
    /// If any dim is zero or any spacing is not positive.
    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: T) -> Self {
        if let Err(e) = check_geometry(dims, spacing) {
            panic!("Grid::filled: {e}");
        }
        Grid { dims, spacing, data: vec![value; dims.iter().product()] }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    /// Inverse of [`Grid::index`].
    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Same geometry, new values.
    pub fn map<U: Voxel>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { dims: self.dims, spacing: self.spacing, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        check_geometry(self.dims, spacing).map_err(Error::InvalidConfig)?;
        self.spacing = spacing;
        Ok(self)
    }

    /// Single-sample, single-channel tensor view of the grid.
    pub fn to_tensor(&self) -> Tensor {
        let [nx, ny, nz] = self.dims;
        let data = self.data.iter().map(|v| v.to_f32()).collect();
        Tensor::from_vec([1, 1, nz, ny, nx], data).expect("grid length matches dims")
    }

    /// Reads channel `(n, c)` of `t` as a grid.
    pub fn from_tensor_channel(t: &Tensor, n: usize, c: usize, spacing: [f64; 3]) -> Result<Self> {
        let [d, h, w] = t.spatial();
        Grid::new([w, h, d], spacing, t.channel(n, c).iter().map(|&v| T::from_f32(v)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_volume(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_volume(path)
    }
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Voxelwise OR; dims must match.
    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(self.dims, other.dims));
        }
        Ok(Grid {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| u8::from(a != 0 || b != 0)).collect(),
        })
    }

    /// Mean voxel coordinate of the set voxels.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        let mut sum = [0.0f64; 3];
        let mut n = 0u64;
        for (i, &v) in self.data.iter().enumerate() {
            if v != 0 {
                let c = self.coords(i);
                for a in 0..3 {
                    sum[a] += c[a] as f64;
                }
                n += 1;
            }
        }
        (n > 0).then(|| sum.map(|s| s / n as f64))
    }
}

impl NormVolume {
    /// Thresholds at `t` (values `>= t` become 1).
    pub fn threshold(&self, t: f32) -> BinaryMask {
        self.map(|v| u8::from(v >= t))
    }
}

/// Axis-aligned voxel box, `lo` inclusive and `hi` exclusive. May extend
/// outside a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Box3 {
    pub lo: [i64; 3],
    pub hi: [i64; 3],
}

impl Box3 {
    pub fn new(lo: [i64; 3], hi: [i64; 3]) -> Result<Self> {
        if (0..3).any(|a| lo[a] >= hi[a]) {
            return Err(Error::InvalidConfig(format!("box {lo:?}..{hi:?} is empty")));
        }
        Ok(Box3 { lo, hi })
    }

    /// Whole-grid box.
    pub fn of_dims(dims: [usize; 3]) -> Self {
        Box3 { lo: [0; 3], hi: dims.map(|n| n as i64) }
    }

    pub fn dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| (self.hi[a] - self.lo[a]) as usize)
    }

    pub fn expand(&self, margin: i64) -> Self {
        Box3 { lo: self.lo.map(|v| v - margin), hi: self.hi.map(|v| v + margin) }
    }

    /// Intersection with `[0, dims)`; `None` when disjoint.
    pub fn clip(&self, dims: [usize; 3]) -> Option<Self> {
        let lo = [0, 1, 2].map(|a| self.lo[a].max(0));
        let hi = [0, 1, 2].map(|a| self.hi[a].min(dims[a] as i64));
        Box3::new(lo, hi).ok()
    }

    pub fn within(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] >= 0 && self.hi[a] <= dims[a] as i64)
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] as i64 && (p[a] as i64) < self.hi[a])
    }
}

/// Tight bounding box of the set voxels, `None` for an all-zero mask.
pub fn mask_bounding_box(m: &BinaryMask) -> Option<Box3> {
    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    for (i, &v) in m.data.iter().enumerate() {
        if v != 0 {
            let c = m.coords(i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a] as i64);
                hi[a] = hi[a].max(c[a] as i64 + 1);
            }
        }
    }
    (lo[0] != i64::MAX).then_some(Box3 { lo, hi })
}

/// Copies `b` out of `g`, filling voxels outside `g` with `fill`. Spacing is
/// preserved.
pub fn crop_pad<T: Voxel>(g: &Grid<T>, b: Box3, fill: T) -> Grid<T> {
    let out_dims = b.dims();
    let [ox, oy, oz] = out_dims;
    let [nx, ny, nz] = g.dims.map(|n| n as i64);
    let mut data = vec![fill; ox * oy * oz];
    // In-bounds x span is the same for every row.
    let x0 = b.lo[0].max(0);
    let x1 = b.hi[0].min(nx);
    for z in 0..oz {
        let sz = b.lo[2] + z as i64;
        if sz < 0 || sz >= nz {
            continue;
        }
        for y in 0..oy {
            let sy = b.lo[1] + y as i64;
            if sy < 0 || sy >= ny || x0 >= x1 {
                continue;
            }
            let src = g.index(x0 as usize, sy as usize, sz as usize);
            let dst = (z * oy + y) * ox + (x0 - b.lo[0]) as usize;
            let n = (x1 - x0) as usize;
            data[dst..dst + n].copy_from_slice(&g.data[src..src + n]);
        }
    }
    Grid { dims: out_dims, spacing: g.spacing, data }
}

/// Writes `src` (box-sized) into `dst` at `b`, skipping voxels outside `dst`.
pub fn paste<T: Voxel>(dst: &mut Grid<T>, src: &Grid<T>, b: Box3) -> Result<()> {
    if src.dims != b.dims() {
        return Err(Error::DimMismatch(src.dims, b.dims()));
    }
    for (i, &v) in src.data.iter().enumerate() {
        let c = src.coords(i);
        let p = [0, 1, 2].map(|a| b.lo[a] + c[a] as i64);
        if (0..3).all(|a| p[a] >= 0 && p[a] < dst.dims[a] as i64) {
            dst.set(p[0] as usize, p[1] as usize, p[2] as usize, v);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Trilinear,
    Nearest,
}

/// Resamples to `out_dims` with voxel-centre alignment; spacing scales by
/// `in/out` per axis.
pub fn resample<T: Voxel>(g: &Grid<T>, out_dims: [usize; 3], mode: Interp) -> Result<Grid<T>> {
    check_geometry(out_dims, g.spacing).map_err(Error::InvalidConfig)?;
    let spacing = [0, 1, 2].map(|a| g.spacing[a] * g.dims[a] as f64 / out_dims[a] as f64);
    let data = match mode {
        Interp::Trilinear => {
            if T::LABEL {
                return Err(Error::ModeLabelMismatch);
            }
            let [nx, ny, nz] = g.dims;
            let src: Vec<f32> = g.data.iter().map(|v| v.to_f32()).collect();
            trilinear(&src, [nz, ny, nx], [out_dims[2], out_dims[1], out_dims[0]])
                .into_iter()
                .map(T::from_f32)
                .collect()
        }
        Interp::Nearest => {
            let idx: [Vec<usize>; 3] = [0, 1, 2].map(|a| {
                (0..out_dims[a])
                    .map(|o| (source_coord(o, g.dims[a], out_dims[a]).round() as usize).min(g.dims[a] - 1))
                    .collect()
            });
            let mut data = Vec::with_capacity(out_dims.iter().product());
            for &z in &idx[2] {
                for &y in &idx[1] {
                    for &x in &idx[0] {
                        data.push(g.get(x, y, z));
                    }
                }
            }
            data
        }
    };
    Ok(Grid { dims: out_dims, spacing, data })
}

/// Intensity histogram anchored at the volume minimum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: i32,
    /// Left edge of bin 0.
    pub origin: i32,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_center(&self, k: usize) -> f64 {
        self.origin as f64 + (k as f64 + 0.5) * self.bin_width as f64
    }
}

pub fn compute_histogram(v: &Volume, bin_width: i32) -> Result<Histogram> {
    if bin_width < 1 {
        return Err(Error::InvalidConfig(format!("bin width {bin_width} must be >= 1")));
    }
    let min = *v.data.iter().min().expect("grids are non-empty");
    let max = *v.data.iter().max().expect("grids are non-empty");
    let bw = bin_width as i64;
    let bins = ((max as i64 - min as i64) / bw + 1) as usize;
    let mut counts = vec![0u64; bins];
    for &x in &v.data {
        counts[((x as i64 - min as i64) / bw) as usize] += 1;
    }
    Ok(Histogram { bin_width, origin: min, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicePolygon {
    pub z: usize,
    /// Voxel-space `(x, y)` vertices.
    pub pts: Vec<[f64; 2]>,
}

/// Per-canal lists of slice polygons, matching the annotation JSON file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolygonAnnotation {
    pub left: Vec<SlicePolygon>,
    pub right: Vec<SlicePolygon>,
}

impl PolygonAnnotation {
    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::file(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }
}

/// Even-odd containment of `(px, py)` in `pts`, crossing-number form.
pub fn point_in_polygon(pts: &[[f64; 2]], px: f64, py: f64) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let [xi, yi] = pts[i];
        let [xj, yj] = pts[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn fill_polygon(mask: &mut BinaryMask, poly: &SlicePolygon) -> Result<()> {
    let [nx, ny, nz] = mask.dims;
    if poly.pts.len() < 3 {
        return Err(Error::DegeneratePolygon { z: poly.z, vertices: poly.pts.len() });
    }
    if poly.z >= nz {
        return Err(Error::SliceOutOfRange { z: poly.z, nz });
    }
    let pts = &poly.pts;
    let mut xs = Vec::new();
    for j in 0..ny {
        let py = j as f64 + 0.5;
        xs.clear();
        let mut k = pts.len() - 1;
        for i in 0..pts.len() {
            let [xi, yi] = pts[i];
            let [xk, yk] = pts[k];
            if (yi > py) != (yk > py) {
                xs.push((xk - xi) * (py - yi) / (yk - yi) + xi);
            }
            k = i;
        }
        if xs.is_empty() {
            continue;
        }
        xs.sort_by(f64::total_cmp);
        for i in 0..nx {
            let px = i as f64 + 0.5;
            // Centre is inside when an odd number of crossings lie to its right.
            let right = xs.len() - xs.partition_point(|&c| c <= px);
            if right % 2 == 1 {
                mask.set(i, j, poly.z, 1);
            }
        }
    }
    Ok(())
}

/// Rasterizes both canals' polygons into `(left, right)` masks.
pub fn rasterize_polygons(ann: &PolygonAnnotation, dims: [usize; 3]) -> Result<(BinaryMask, BinaryMask)> {
    let mut out = [Grid::filled(dims, [1.0; 3], 0u8), Grid::filled(dims, [1.0; 3], 0u8)];
    for (mask, polys) in out.iter_mut().zip([&ann.left, &ann.right]) {
        for p in polys {
            fill_polygon(mask, p)?;
        }
    }
    let [l, r] = out;
    Ok((l, r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolzHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    pub order: String,
}

/// Reads only the header line of a VOLZ file.
pub fn read_header(path: &Path) -> Result<VolzHeader> {
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut r = BufReader::new(f);
    parse_header(&mut r)
}

fn parse_header(r: &mut impl BufRead) -> Result<VolzHeader> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::MalformedHeader("missing header terminator".into()));
    }
    let h: VolzHeader = serde_json::from_slice(&line[..line.len() - 1]).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if h.order != "xfastest" {
        return Err(Error::MalformedHeader(format!("order {:?}", h.order)));
    }
    check_geometry(h.dims, h.spacing).map_err(Error::MalformedHeader)?;
    Ok(h)
}

pub fn save_volume<T: Voxel>(g: &Grid<T>, path: &Path) -> Result<()> {
    let header = VolzHeader { dims: g.dims, spacing: g.spacing, dtype: T::DTYPE.into(), order: "xfastest".into() };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.reserve(g.data.len() * T::BYTES);
    for &v in &g.data {
        v.write_le(&mut bytes);
    }
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn load_volume<T: Voxel>(path: &Path) -> Result<Grid<T>> {
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut r = BufReader::new(f);
    let h = parse_header(&mut r)?;
    if !matches!(h.dtype.as_str(), "i32" | "u8" | "f32") || h.dtype != T::DTYPE {
        return Err(Error::UnsupportedDtype { expected: T::DTYPE, found: h.dtype });
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let n: usize = h.dims.iter().product();
    if payload.len() != n * T::BYTES {
        return Err(Error::PayloadSizeMismatch { expected: n * T::BYTES, found: payload.len() });
    }
    let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
    Ok(Grid { dims: h.dims, spacing: h.spacing, data })
}
