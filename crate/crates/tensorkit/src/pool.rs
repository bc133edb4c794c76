//! 2x2x2 max pooling with stride 2.

use crate::{Result, Tensor, TensorError};

/// Returns the pooled tensor and, per output element, the linear index of
/// the input element that won. Ties go to the lowest linear index.
pub fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let [n, c, d, h, w] = x.shape();
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::OddDims { op: "maxpool2", dims: [d, h, w] });
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, od, oh, ow]);
    let mut argmax = vec![0u32; out.numel()];
    let vin = d * h * w;
    let vout = od * oh * ow;
    let xd = x.data();
    let od_data = out.data_mut();
    for nc in 0..n * c {
        let base = nc * vin;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    // Window visited in increasing linear index order.
                    for a in 0..2 {
                        for b in 0..2 {
                            for cc in 0..2 {
                                let idx = base + ((2 * z + a) * h + 2 * y + b) * w + 2 * xx + cc;
                                let v = xd[idx];
                                if best_idx == usize::MAX || v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let o = nc * vout + (z * oh + y) * ow + xx;
                    od_data[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient to the input element recorded in `argmax`.
pub fn maxpool2_backward(gy: &Tensor, argmax: &[u32], input_shape: [usize; 5]) -> Tensor {
    assert_eq!(gy.numel(), argmax.len(), "maxpool2_backward: argmax length");
    let mut gx = Tensor::zeros(input_shape);
    let g = gx.data_mut();
    for (&idx, &v) in argmax.iter().zip(gy.data()) {
        g[idx as usize] += v;
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_of_one_to_eight_gives_eight() {
        let x = Tensor::from_vec([1, 1, 2, 2, 2], (1..=8).map(|v| v as f32).collect()).unwrap();
        let (y, arg) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[8.0]);
        assert_eq!(arg, vec![7]);
    }

    #[test]
    fn constant_input_pools_to_constant_with_first_index() {
        let x = Tensor::full([1, 2, 4, 4, 2], 3.0);
        let (y, arg) = maxpool2(&x).unwrap();
        assert_eq!(y.shape(), [1, 2, 2, 2, 1]);
        assert!(y.data().iter().all(|&v| v == 3.0));
        assert_eq!(arg[0], 0);
        let gx = maxpool2_backward(&Tensor::full(y.shape(), 1.0), &arg, x.shape());
        assert_eq!(gx.data().iter().sum::<f32>(), 8.0);
        assert_eq!(gx.data()[0], 1.0);
        assert_eq!(gx.data()[1], 0.0);
    }

    #[test]
    fn odd_dims_are_rejected() {
        assert!(matches!(maxpool2(&Tensor::zeros([1, 1, 3, 2, 2])), Err(TensorError::OddDims { .. })));
    }
}
