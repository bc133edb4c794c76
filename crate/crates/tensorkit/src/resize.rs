//! Trilinear resampling between voxel grids with voxel-centre alignment.
//!
//! Output voxel `o` samples source coordinate `(o + 0.5)·(in/out) − 0.5`,
//! clamped to `[0, in − 1]`. When `in == out` the mapping is the identity
//! and the result is an exact copy.
//!
//! Grids are `[d, h, w]` with `w` fastest, matching a tensor channel volume.

/// Per-axis interpolation stencil.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisStencil {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f32>,
}

/// Clamped voxel-centre source coordinate of output index `o`.
pub fn source_coord(o: usize, n_in: usize, n_out: usize) -> f64 {
    let s = (o as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5;
    s.clamp(0.0, (n_in - 1) as f64)
}

pub fn axis_stencil(n_in: usize, n_out: usize) -> AxisStencil {
    let mut st = AxisStencil {
        lo: Vec::with_capacity(n_out),
        hi: Vec::with_capacity(n_out),
        frac: Vec::with_capacity(n_out),
    };
    for o in 0..n_out {
        let s = source_coord(o, n_in, n_out);
        let lo = s.floor() as usize;
        st.lo.push(lo);
        st.hi.push((lo + 1).min(n_in - 1));
        st.frac.push((s - lo as f64) as f32);
    }
    st
}

fn stencils(src: [usize; 3], dst: [usize; 3]) -> [AxisStencil; 3] {
    [axis_stencil(src[0], dst[0]), axis_stencil(src[1], dst[1]), axis_stencil(src[2], dst[2])]
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a * (1.0 - t) + b * t
}

/// Trilinear resample of one channel volume.
pub fn trilinear(src: &[f32], src_dims: [usize; 3], dst_dims: [usize; 3]) -> Vec<f32> {
    let [sd, sh, sw] = src_dims;
    assert_eq!(src.len(), sd * sh * sw, "trilinear: source length");
    assert!(dst_dims.iter().all(|&n| n > 0), "trilinear: empty output");
    let [az, ay, ax] = stencils(src_dims, dst_dims);
    let [dd, dh, dw] = dst_dims;
    let mut out = Vec::with_capacity(dd * dh * dw);
    for z in 0..dd {
        let (z0, z1, fz) = (az.lo[z], az.hi[z], az.frac[z]);
        for y in 0..dh {
            let (y0, y1, fy) = (ay.lo[y], ay.hi[y], ay.frac[y]);
            let r00 = &src[(z0 * sh + y0) * sw..][..sw];
            let r01 = &src[(z0 * sh + y1) * sw..][..sw];
            let r10 = &src[(z1 * sh + y0) * sw..][..sw];
            let r11 = &src[(z1 * sh + y1) * sw..][..sw];
            for x in 0..dw {
                let (x0, x1, fx) = (ax.lo[x], ax.hi[x], ax.frac[x]);
                let c00 = lerp(r00[x0], r00[x1], fx);
                let c01 = lerp(r01[x0], r01[x1], fx);
                let c10 = lerp(r10[x0], r10[x1], fx);
                let c11 = lerp(r11[x0], r11[x1], fx);
                let c0 = lerp(c00, c01, fy);
                let c1 = lerp(c10, c11, fy);
                out.push(lerp(c0, c1, fz));
            }
        }
    }
    out
}

/// Adjoint of [`trilinear`]: scatters `grad` (on `dst_dims`) back onto the
/// source grid.
pub fn trilinear_adjoint(grad: &[f32], src_dims: [usize; 3], dst_dims: [usize; 3]) -> Vec<f32> {
    let [_, sh, sw] = src_dims;
    let [dd, dh, dw] = dst_dims;
    assert_eq!(grad.len(), dd * dh * dw, "trilinear_adjoint: gradient length");
    let [az, ay, ax] = stencils(src_dims, dst_dims);
    let mut out = vec![0.0f32; src_dims.iter().product()];
    let mut i = 0;
    for z in 0..dd {
        let (z0, z1, fz) = (az.lo[z], az.hi[z], az.frac[z]);
        for y in 0..dh {
            let (y0, y1, fy) = (ay.lo[y], ay.hi[y], ay.frac[y]);
            for x in 0..dw {
                let (x0, x1, fx) = (ax.lo[x], ax.hi[x], ax.frac[x]);
                let g = grad[i];
                i += 1;
                let g0 = g * (1.0 - fz);
                let g1 = g * fz;
                for (zz, gz) in [(z0, g0), (z1, g1)] {
                    for (yy, gy) in [(y0, gz * (1.0 - fy)), (y1, gz * fy)] {
                        let row = (zz * sh + yy) * sw;
                        out[row + x0] += gy * (1.0 - fx);
                        out[row + x1] += gy * fx;
                    }
                }
            }
        }
    }
    out
}

/// Resamples every channel of a tensor to new spatial dims.
pub fn resize_tensor(x: &crate::Tensor, dst_dims: [usize; 3]) -> crate::Tensor {
    let [n, c, ..] = x.shape();
    let src_dims = x.spatial();
    let mut data = Vec::with_capacity(n * c * dst_dims.iter().product::<usize>());
    for s in 0..n {
        for ch in 0..c {
            data.extend(trilinear(x.channel(s, ch), src_dims, dst_dims));
        }
    }
    crate::Tensor::from_vec([n, c, dst_dims[0], dst_dims[1], dst_dims[2]], data).expect("resize shape")
}

/// Adjoint of [`resize_tensor`].
pub fn resize_tensor_adjoint(g: &crate::Tensor, src_dims: [usize; 3]) -> crate::Tensor {
    let [n, c, ..] = g.shape();
    let dst_dims = g.spatial();
    let mut data = Vec::with_capacity(n * c * src_dims.iter().product::<usize>());
    for s in 0..n {
        for ch in 0..c {
            data.extend(trilinear_adjoint(g.channel(s, ch), src_dims, dst_dims));
        }
    }
    crate::Tensor::from_vec([n, c, src_dims[0], src_dims[1], src_dims[2]], data).expect("resize shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_resample_is_exact_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src: Vec<f32> = (0..60).map(|_| rng.random_range(-5.0..5.0)).collect();
        assert_eq!(trilinear(&src, [3, 4, 5], [3, 4, 5]), src);
    }

    #[test]
    fn adjoint_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (sd, dd) = ([3, 5, 4], [7, 4, 9]);
        let x: Vec<f32> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f32> = (0..252).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ax = trilinear(&x, sd, dd);
        let aty = trilinear_adjoint(&y, sd, dd);
        let lhs: f64 = ax.iter().zip(&y).map(|(&a, &b)| a as f64 * b as f64).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(&a, &b)| a as f64 * b as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn stencil_clamps_at_edges() {
        let st = axis_stencil(2, 4);
        assert_eq!(st.lo, vec![0, 0, 0, 1]);
        assert_eq!(st.frac[0], 0.0);
        assert_eq!(st.frac[1], 0.25);
        assert_eq!(st.hi[3], 1);
    }
}
