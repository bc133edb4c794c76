use rand::Rng;

use crate::{Result, TensorError};

/// Dense `(N, C, D, H, W)` tensor of `f32`, `W` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 5],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 5], value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::shape("Tensor::from_vec", expected, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    /// Uniform random values in `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(shape: [usize; 5], lo: f32, hi: f32, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// `(D, H, W)`.
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Number of voxels in one channel volume.
    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// The voxels of channel `c` of sample `n`.
    pub fn channel(&self, n: usize, c: usize) -> &[f32] {
        let v = self.voxels();
        let start = (n * self.shape[1] + c) * v;
        &self.data[start..start + v]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let v = self.voxels();
        let start = (n * self.shape[1] + c) * v;
        &mut self.data[start..start + v]
    }

    /// All channels of sample `n`.
    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.shape[1] * self.voxels();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise sum; shapes must agree.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::shape("Tensor::add", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { shape: self.shape, data })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// Inner product accumulated in `f64`, in storage order.
    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "dot shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Concatenates two tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(TensorError::shape("concat_channels", sa, sb));
    }
    let shape = [sa[0], sa[1] + sb[1], sa[2], sa[3], sa[4]];
    let mut data = Vec::with_capacity(shape.iter().product());
    for n in 0..sa[0] {
        data.extend_from_slice(a.sample(n));
        data.extend_from_slice(b.sample(n));
    }
    Tensor::from_vec(shape, data)
}

/// Inverse of [`concat_channels`]: splits off the first `first` channels.
pub fn split_channels(x: &Tensor, first: usize) -> (Tensor, Tensor) {
    let s = x.shape();
    assert!(first <= s[1], "split_channels: {first} > {}", s[1]);
    let v = x.voxels();
    let mut a = Vec::with_capacity(s[0] * first * v);
    let mut b = Vec::with_capacity(s[0] * (s[1] - first) * v);
    for n in 0..s[0] {
        let sample = x.sample(n);
        a.extend_from_slice(&sample[..first * v]);
        b.extend_from_slice(&sample[first * v..]);
    }
    (
        Tensor::from_vec([s[0], first, s[2], s[3], s[4]], a).expect("split shape"),
        Tensor::from_vec([s[0], s[1] - first, s[2], s[3], s[4]], b).expect("split shape"),
    )
}

/// Stacks single-sample tensors into a batch.
pub fn stack_batch(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| TensorError::InvalidConfig {
        op: "stack_batch",
        reason: "empty batch".into(),
    })?;
    let s = first.shape();
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape()[1..] != s[1..] {
            return Err(TensorError::shape("stack_batch", s, t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec([items.len() * s[0], s[1], s[2], s[3], s[4]], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_restores_inputs() {
        let a = Tensor::from_vec([2, 1, 1, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::from_vec([2, 2, 1, 1, 2], (10..18).map(|x| x as f32).collect()).unwrap();
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), [2, 3, 1, 1, 2]);
        assert_eq!(c.channel(1, 0), &[3., 4.]);
        let (a2, b2) = split_channels(&c, 1);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec([1, 1, 2, 2, 2], vec![0.0; 7]).is_err());
    }
}
