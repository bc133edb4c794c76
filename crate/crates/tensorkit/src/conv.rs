//! 3-D convolution (cross-correlation) and stride-2 transposed convolution.
//!
//! `conv3d` lowers each chunk of output depth slices to a matrix product via
//! im2col; the products run through `matrixmultiply::sgemm`. Chunks are
//! independent, so they are evaluated in parallel, but every reduction
//! (weight gradient, col2im scatter) is folded sequentially in chunk order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// `kernel / 2` zeros on every side; spatial dims preserved at stride 1.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: Padding) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(TensorError::InvalidConfig {
                op: "conv3d",
                reason: format!("kernel {kernel} and stride {stride} must be positive"),
            });
        }
        if padding == Padding::Same && kernel % 2 == 0 {
            return Err(TensorError::InvalidConfig {
                op: "conv3d",
                reason: format!("same padding needs an odd kernel, got {kernel}"),
            });
        }
        Ok(ConvGeometry { kernel, stride, padding })
    }

    /// 3³ kernel, stride 1, same padding.
    pub fn same3() -> Self {
        ConvGeometry { kernel: 3, stride: 1, padding: Padding::Same }
    }

    /// 1³ kernel (pointwise).
    pub fn pointwise() -> Self {
        ConvGeometry { kernel: 1, stride: 1, padding: Padding::Valid }
    }

    pub fn pad(&self) -> usize {
        match self.padding {
            Padding::Same => self.kernel / 2,
            Padding::Valid => 0,
        }
    }

    pub fn output_len(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad();
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    pub fn output_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for (o, &n) in out.iter_mut().zip(&dims) {
            *o = self.output_len(n).ok_or_else(|| TensorError::InvalidConfig {
                op: "conv3d",
                reason: format!("input {dims:?} smaller than kernel {}", self.kernel),
            })?;
        }
        Ok(out)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad() == 0
    }
}

/// Gradients returned by the backward kernels.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Upper bound on im2col buffer elements per chunk.
const COL_BUDGET: usize = 1 << 16;

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: A out of bounds");
        assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: B out of bounds");
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Layout bookkeeping shared by the forward and backward passes.
#[derive(Clone, Copy)]
struct Plan {
    geom: ConvGeometry,
    cin: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    /// Rows of the im2col matrix: `cin * k³`.
    rows: usize,
    /// Output rows (`(od, oh)` pairs) per chunk.
    rows_per_chunk: usize,
}

impl Plan {
    fn new(x: &Tensor, weight_len: usize, bias_len: usize, cout: usize, geom: ConvGeometry) -> Result<Plan> {
        let cin = x.channels();
        let k3 = geom.kernel.pow(3);
        if weight_len != cout * cin * k3 {
            return Err(TensorError::shape(
                "conv3d weight",
                [cout, cin, geom.kernel, geom.kernel, geom.kernel],
                weight_len,
            ));
        }
        if bias_len != cout {
            return Err(TensorError::shape("conv3d bias", cout, bias_len));
        }
        let in_dims = x.spatial();
        let out_dims = geom.output_dims(in_dims)?;
        let rows = cin * k3;
        let rows_per_chunk = (COL_BUDGET / (rows * out_dims[2]).max(1)).clamp(1, out_dims[0] * out_dims[1]);
        Ok(Plan { geom, cin, in_dims, out_dims, rows, rows_per_chunk })
    }

    fn in_voxels(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// `(sample, first row, end row)` for every chunk, in fixed order. A
    /// row is one `(od, oh)` pair of the output.
    fn tasks(&self, batch: usize) -> Vec<(usize, usize, usize)> {
        let total = self.out_dims[0] * self.out_dims[1];
        let mut tasks = Vec::new();
        for n in 0..batch {
            let mut r0 = 0;
            while r0 < total {
                let r1 = (r0 + self.rows_per_chunk).min(total);
                tasks.push((n, r0, r1));
                r0 = r1;
            }
        }
        tasks
    }

    /// Fills `col` (`rows x cols`) with the receptive fields of output rows
    /// `r0..r1` of one sample.
    fn im2col(&self, xs: &[f32], r0: usize, r1: usize, col: &mut [f32]) {
        let ConvGeometry { kernel: k, stride: s, .. } = self.geom;
        let p = self.geom.pad() as isize;
        let [d, h, w] = self.in_dims;
        let [_, oh, ow] = self.out_dims;
        let cols = (r1 - r0) * ow;
        let vox = self.in_voxels();
        for ci in 0..self.cin {
            let xc = &xs[ci * vox..(ci + 1) * vox];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = ((ci * k + kd) * k + kh) * k + kw;
                        let dst = &mut col[row * cols..(row + 1) * cols];
                        for (local, r) in (r0..r1).enumerate() {
                            let drow = &mut dst[local * ow..(local + 1) * ow];
                            let id = ((r / oh) * s + kd) as isize - p;
                            let ih = ((r % oh) * s + kh) as isize - p;
                            if id < 0 || id >= d as isize || ih < 0 || ih >= h as isize {
                                drow.fill(0.0);
                                continue;
                            }
                            let base = (id as usize * h + ih as usize) * w;
                            fill_row(drow, &xc[base..base + w], s, kw as isize - p);
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Plan::im2col`]: scatters `col` back into `gx`.
    fn col2im(&self, col: &[f32], r0: usize, r1: usize, gx: &mut [f32]) {
        let ConvGeometry { kernel: k, stride: s, .. } = self.geom;
        let p = self.geom.pad() as isize;
        let [d, h, w] = self.in_dims;
        let [_, oh, ow] = self.out_dims;
        let cols = (r1 - r0) * ow;
        let vox = self.in_voxels();
        for ci in 0..self.cin {
            let gc = &mut gx[ci * vox..(ci + 1) * vox];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = ((ci * k + kd) * k + kh) * k + kw;
                        let src = &col[row * cols..(row + 1) * cols];
                        for (local, r) in (r0..r1).enumerate() {
                            let id = ((r / oh) * s + kd) as isize - p;
                            let ih = ((r % oh) * s + kh) as isize - p;
                            if id < 0 || id >= d as isize || ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let base = (id as usize * h + ih as usize) * w;
                            scatter_row(&mut gc[base..base + w], &src[local * ow..(local + 1) * ow], s, kw as isize - p);
                        }
                    }
                }
            }
        }
    }
}

/// `dst[o] = src[o * stride + offset]`, zero where out of range.
fn fill_row(dst: &mut [f32], src: &[f32], stride: usize, offset: isize) {
    let w = src.len() as isize;
    if stride == 1 {
        let lo = (-offset).clamp(0, dst.len() as isize) as usize;
        let hi = (w - offset).clamp(lo as isize, dst.len() as isize) as usize;
        dst[..lo].fill(0.0);
        let start = (lo as isize + offset) as usize;
        dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
        dst[hi..].fill(0.0);
    } else {
        for (o, v) in dst.iter_mut().enumerate() {
            let i = (o * stride) as isize + offset;
            *v = if i >= 0 && i < w { src[i as usize] } else { 0.0 };
        }
    }
}

/// `dst[o * stride + offset] += src[o]` where in range.
fn scatter_row(dst: &mut [f32], src: &[f32], stride: usize, offset: isize) {
    let w = dst.len() as isize;
    if stride == 1 {
        let lo = (-offset).clamp(0, src.len() as isize) as usize;
        let hi = (w - offset).clamp(lo as isize, src.len() as isize) as usize;
        let start = (lo as isize + offset) as usize;
        for (g, v) in dst[start..start + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
            *g += v;
        }
    } else {
        for (o, v) in src.iter().enumerate() {
            let i = (o * stride) as isize + offset;
            if i >= 0 && i < w {
                dst[i as usize] += v;
            }
        }
    }
}

fn task_groups<T: Send>(tasks: &[(usize, usize, usize)], f: impl Fn(usize, usize, usize) -> T + Sync + Send, mut sink: impl FnMut((usize, usize, usize), T)) {
    // Bounded groups keep at most one chunk of scratch per worker alive.
    let group = rayon::current_num_threads().max(1);
    for chunk in tasks.chunks(group) {
        let results: Vec<T> = chunk.par_iter().map(|&(n, a, b)| f(n, a, b)).collect();
        for (task, r) in chunk.iter().zip(results) {
            sink(*task, r);
        }
    }
}

/// Cross-correlation of `x` (`N, Cin, D, H, W`) with `weight`
/// (`Cout, Cin, k, k, k`, row-major) plus `bias` (`Cout`).
pub fn conv3d(x: &Tensor, weight: &[f32], bias: &[f32], cout: usize, geom: ConvGeometry) -> Result<Tensor> {
    let plan = Plan::new(x, weight.len(), bias.len(), cout, geom)?;
    let [od, oh, ow] = plan.out_dims;
    let batch = x.batch();
    let mut out = Tensor::zeros([batch, cout, od, oh, ow]);
    let out_vox = plan.out_voxels();
    let in_vox = plan.in_voxels();
    let tasks = plan.tasks(batch);
    let out_data = out.data_mut();
    task_groups(
        &tasks,
        |n, r0, r1| {
            let cols = (r1 - r0) * ow;
            let xs = x.sample(n);
            let mut local = vec![0.0f32; cout * cols];
            if geom.is_pointwise() {
                let b = &xs[r0 * ow..];
                gemm(cout, plan.rows, cols, weight, plan.rows, 1, b, in_vox, 1, 0.0, &mut local, cols, 1);
            } else {
                let mut col = vec![0.0f32; plan.rows * cols];
                plan.im2col(xs, r0, r1, &mut col);
                gemm(cout, plan.rows, cols, weight, plan.rows, 1, &col, cols, 1, 0.0, &mut local, cols, 1);
            }
            local
        },
        |(n, r0, r1), local| {
            let cols = (r1 - r0) * ow;
            for co in 0..cout {
                let start = (n * cout + co) * out_vox + r0 * ow;
                let bco = bias[co];
                for (o, v) in out_data[start..start + cols].iter_mut().zip(&local[co * cols..(co + 1) * cols]) {
                    *o = v + bco;
                }
            }
        },
    );
    Ok(out)
}

/// Backward pass of [`conv3d`] given the upstream gradient `gy`.
pub fn conv3d_backward(x: &Tensor, weight: &[f32], gy: &Tensor, cout: usize, geom: ConvGeometry) -> Result<ConvGrads> {
    let plan = Plan::new(x, weight.len(), cout, cout, geom)?;
    let batch = x.batch();
    let expected = [batch, cout, plan.out_dims[0], plan.out_dims[1], plan.out_dims[2]];
    if gy.shape() != expected {
        return Err(TensorError::shape("conv3d_backward", expected, gy.shape()));
    }
    let ow = plan.out_dims[2];
    let out_vox = plan.out_voxels();
    let in_vox = plan.in_voxels();
    let rows = plan.rows;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = vec![0.0f32; cout * rows];
    let sample_len = plan.cin * in_vox;
    let tasks = plan.tasks(batch);
    {
        let gx_data = gx.data_mut();
        task_groups(
            &tasks,
            |n, r0, r1| {
                let cols = (r1 - r0) * ow;
                let xs = x.sample(n);
                let gys = &gy.sample(n)[r0 * ow..];
                let mut gw_part = vec![0.0f32; cout * rows];
                let mut gcol = vec![0.0f32; rows * cols];
                if geom.is_pointwise() {
                    let b = &xs[r0 * ow..];
                    gemm(cout, cols, rows, gys, out_vox, 1, b, 1, in_vox, 0.0, &mut gw_part, rows, 1);
                } else {
                    let mut col = vec![0.0f32; rows * cols];
                    plan.im2col(xs, r0, r1, &mut col);
                    gemm(cout, cols, rows, gys, out_vox, 1, &col, 1, cols, 0.0, &mut gw_part, rows, 1);
                }
                gemm(rows, cout, cols, weight, 1, rows, gys, out_vox, 1, 0.0, &mut gcol, cols, 1);
                (gw_part, gcol)
            },
            |(n, r0, r1), (gw_part, gcol)| {
                for (a, b) in gw.iter_mut().zip(&gw_part) {
                    *a += b;
                }
                let gxs = &mut gx_data[n * sample_len..(n + 1) * sample_len];
                if geom.is_pointwise() {
                    let cols = (r1 - r0) * ow;
                    for ci in 0..plan.cin {
                        let dst = &mut gxs[ci * in_vox + r0 * ow..ci * in_vox + r0 * ow + cols];
                        for (g, v) in dst.iter_mut().zip(&gcol[ci * cols..(ci + 1) * cols]) {
                            *g += v;
                        }
                    }
                } else {
                    plan.col2im(&gcol, r0, r1, gxs);
                }
            },
        );
    }
    let gb = channel_sums(gy);
    Ok(ConvGrads { input: gx, weight: gw, bias: gb })
}

/// Per-channel sums over batch and space, accumulated in `f64`.
pub(crate) fn channel_sums(t: &Tensor) -> Vec<f32> {
    (0..t.channels())
        .map(|c| {
            (0..t.batch())
                .map(|n| t.channel(n, c).iter().map(|&v| v as f64).sum::<f64>())
                .sum::<f64>() as f32
        })
        .collect()
}

/// Transposed convolution with a 2³ kernel and stride 2: every input voxel
/// paints one 2x2x2 output block. `weight` is laid out `(Cin, Cout, 2, 2, 2)`.
pub fn conv_transpose3d(x: &Tensor, weight: &[f32], bias: &[f32], cout: usize) -> Result<Tensor> {
    let cin = x.channels();
    if weight.len() != cin * cout * 8 {
        return Err(TensorError::shape("conv_transpose3d weight", [cin, cout, 2, 2, 2], weight.len()));
    }
    if bias.len() != cout {
        return Err(TensorError::shape("conv_transpose3d bias", cout, bias.len()));
    }
    let [d, h, w] = x.spatial();
    let p = d * h * w;
    let c8 = cout * 8;
    let mut out = Tensor::zeros([x.batch(), cout, 2 * d, 2 * h, 2 * w]);
    let out_vox = 8 * p;
    let mut y8 = vec![0.0f32; c8 * p];
    for n in 0..x.batch() {
        gemm(c8, cin, p, weight, 1, c8, x.sample(n), p, 1, 0.0, &mut y8, p, 1);
        let out_data = out.data_mut();
        for co in 0..cout {
            let oc = &mut out_data[(n * cout + co) * out_vox..(n * cout + co + 1) * out_vox];
            for a in 0..2 {
                for b in 0..2 {
                    for c in 0..2 {
                        let j = co * 8 + a * 4 + b * 2 + c;
                        let src = &y8[j * p..(j + 1) * p];
                        for z in 0..d {
                            for y in 0..h {
                                let row = &src[(z * h + y) * w..(z * h + y + 1) * w];
                                let base = ((2 * z + a) * 2 * h + 2 * y + b) * 2 * w + c;
                                for (xi, &v) in row.iter().enumerate() {
                                    oc[base + 2 * xi] = v + bias[co];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv_transpose3d_backward(x: &Tensor, weight: &[f32], gy: &Tensor, cout: usize) -> Result<ConvGrads> {
    let cin = x.channels();
    let [d, h, w] = x.spatial();
    let expected = [x.batch(), cout, 2 * d, 2 * h, 2 * w];
    if gy.shape() != expected {
        return Err(TensorError::shape("conv_transpose3d_backward", expected, gy.shape()));
    }
    if weight.len() != cin * cout * 8 {
        return Err(TensorError::shape("conv_transpose3d weight", [cin, cout, 2, 2, 2], weight.len()));
    }
    let p = d * h * w;
    let c8 = cout * 8;
    let out_vox = 8 * p;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = vec![0.0f32; cin * c8];
    let mut gw_part = vec![0.0f32; cin * c8];
    let mut g8 = vec![0.0f32; c8 * p];
    for n in 0..x.batch() {
        let gys = gy.sample(n);
        for co in 0..cout {
            let gc = &gys[co * out_vox..(co + 1) * out_vox];
            for a in 0..2 {
                for b in 0..2 {
                    for c in 0..2 {
                        let j = co * 8 + a * 4 + b * 2 + c;
                        let dst = &mut g8[j * p..(j + 1) * p];
                        for z in 0..d {
                            for y in 0..h {
                                let base = ((2 * z + a) * 2 * h + 2 * y + b) * 2 * w + c;
                                let row = &mut dst[(z * h + y) * w..(z * h + y + 1) * w];
                                for (xi, v) in row.iter_mut().enumerate() {
                                    *v = gc[base + 2 * xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        let len = cin * p;
        gemm(cin, c8, p, weight, c8, 1, &g8, p, 1, 0.0, &mut gx.data_mut()[n * len..(n + 1) * len], p, 1);
        gemm(cin, p, c8, x.sample(n), p, 1, &g8, 1, p, 0.0, &mut gw_part, c8, 1);
        for (a, b) in gw.iter_mut().zip(&gw_part) {
            *a += b;
        }
    }
    Ok(ConvGrads { input: gx, weight: gw, bias: channel_sums(gy) })
}
