//! Brute-force oracles and seeded case suites shared by the kernel and
//! gradient tests (and by the workspace acceptance suite).

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorkit::activation::{relu, relu_backward, sigmoid, sigmoid_backward};
use tensorkit::conv::{conv3d, conv3d_backward, conv_transpose3d, conv_transpose3d_backward, ConvGeometry, Padding};
use tensorkit::gradcheck::{grad_check, GradCheckConfig, LayerFragment, LossHead};
use tensorkit::layers::{BatchNorm3d, Conv3d, ConvTranspose3d, Dense, GlobalAvgPool, MaxPool2, Relu, Resample, Sigmoid};
use tensorkit::norm::{batchnorm_eval, batchnorm_train, BN_EPS, BN_MOMENTUM};
use tensorkit::pool::maxpool2;
use tensorkit::{Layer, Mode, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::random_uniform(shape, -1.0, 1.0, rng)
}

pub fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn idx(shape: [usize; 5], n: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
    (((n * shape[1] + c) * shape[2] + z) * shape[3] + y) * shape[4] + x
}

fn max_abs(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "oracle length mismatch");
    a.iter().zip(b).map(|(&u, &v)| (u as f64 - v).abs()).fold(0.0, f64::max)
}

/// Direct-summation cross-correlation; weight `(Cout, Cin, k, k, k)`.
pub fn conv_oracle(x: &Tensor, w: &[f32], bias: &[f32], cout: usize, k: usize, stride: usize, pad: usize) -> (Vec<f64>, [usize; 5]) {
    let [n, cin, d, h, wd] = x.shape();
    let out_len = |len: usize| (len + 2 * pad - k) / stride + 1;
    let oshape = [n, cout, out_len(d), out_len(h), out_len(wd)];
    let xd = x.data();
    let mut out = vec![0.0f64; oshape.iter().product()];
    for s in 0..n {
        for co in 0..cout {
            for oz in 0..oshape[2] {
                for oy in 0..oshape[3] {
                    for ox in 0..oshape[4] {
                        let mut acc = bias[co] as f64;
                        for ci in 0..cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (oz * stride + kz) as isize - pad as isize;
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let wv = w[(((co * cin + ci) * k + kz) * k + ky) * k + kx] as f64;
                                        acc += wv * xd[idx(x.shape(), s, ci, iz as usize, iy as usize, ix as usize)] as f64;
                                    }
                                }
                            }
                        }
                        out[idx(oshape, s, co, oz, oy, ox)] = acc;
                    }
                }
            }
        }
    }
    (out, oshape)
}

/// Every input voxel paints a 2³ block; weight `(Cin, Cout, 2, 2, 2)`.
pub fn conv_transpose_oracle(x: &Tensor, w: &[f32], bias: &[f32], cout: usize) -> Vec<f64> {
    let [n, cin, d, h, wd] = x.shape();
    let oshape = [n, cout, 2 * d, 2 * h, 2 * wd];
    let mut out = vec![0.0f64; oshape.iter().product()];
    for s in 0..n {
        for co in 0..cout {
            for z in 0..2 * d {
                for y in 0..2 * h {
                    for xx in 0..2 * wd {
                        let (a, b, c) = (z % 2, y % 2, xx % 2);
                        let mut acc = bias[co] as f64;
                        for ci in 0..cin {
                            let wv = w[(ci * cout + co) * 8 + a * 4 + b * 2 + c] as f64;
                            acc += wv * x.data()[idx(x.shape(), s, ci, z / 2, y / 2, xx / 2)] as f64;
                        }
                        out[idx(oshape, s, co, z, y, xx)] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Per-window max and the lowest linear index attaining it.
pub fn maxpool_oracle(x: &Tensor) -> (Vec<f64>, Vec<u32>) {
    let [n, c, d, h, w] = x.shape();
    let mut vals = Vec::new();
    let mut arg = Vec::new();
    for s in 0..n {
        for ch in 0..c {
            for z in 0..d / 2 {
                for y in 0..h / 2 {
                    for xx in 0..w / 2 {
                        let mut cands: Vec<(usize, f32)> = Vec::new();
                        for a in 0..2 {
                            for b in 0..2 {
                                for cc in 0..2 {
                                    let i = idx(x.shape(), s, ch, 2 * z + a, 2 * y + b, 2 * xx + cc);
                                    cands.push((i, x.data()[i]));
                                }
                            }
                        }
                        let m = cands.iter().map(|c| c.1).fold(f32::NEG_INFINITY, f32::max);
                        let first = cands.iter().filter(|c| c.1 == m).map(|c| c.0).min().unwrap();
                        vals.push(m as f64);
                        arg.push(first as u32);
                    }
                }
            }
        }
    }
    (vals, arg)
}

/// Batch-norm output and updated running stats, straight from the formula.
pub fn batchnorm_oracle(x: &Tensor, gamma: &[f32], beta: &[f32], rm: &[f32], rv: &[f32], train: bool) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, c, ..] = x.shape();
    let vox = x.voxels();
    let m = (n * vox) as f64;
    let mut y = vec![0.0f64; x.numel()];
    let mut new_rm = Vec::new();
    let mut new_rv = Vec::new();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|s| x.channel(s, ch).iter().map(|&v| v as f64)).collect();
        let mean = vals.iter().sum::<f64>() / m;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        let (mu, sig2) = if train { (mean, var) } else { (rm[ch] as f64, rv[ch] as f64) };
        for s in 0..n {
            for i in 0..vox {
                let k = (s * c + ch) * vox + i;
                y[k] = gamma[ch] as f64 * (x.data()[k] as f64 - mu) / (sig2 + BN_EPS).sqrt() + beta[ch] as f64;
            }
        }
        let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
        new_rm.push(if train { BN_MOMENTUM * rm[ch] as f64 + (1.0 - BN_MOMENTUM) * mean } else { rm[ch] as f64 });
        new_rv.push(if train { BN_MOMENTUM * rv[ch] as f64 + (1.0 - BN_MOMENTUM) * unbiased } else { rv[ch] as f64 });
    }
    (y, new_rm, new_rv)
}

#[derive(Debug, Clone)]
pub struct KernelResult {
    pub name: &'static str,
    pub cases: usize,
    pub max_err: f64,
}

impl KernelResult {
    fn new(name: &'static str) -> Self {
        KernelResult { name, cases: 0, max_err: 0.0 }
    }

    fn record(&mut self, err: f64) {
        self.cases += 1;
        self.max_err = self.max_err.max(err);
    }
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> [usize; 3] {
    [rng.random_range(lo..=hi), rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
}

/// Forward and input-gradient of conv3 against the direct sum, over random
/// kernel size, stride and padding.
pub fn conv3_cases(cases: usize, seed: u64) -> KernelResult {
    let mut r = KernelResult::new("conv3");
    let mut rng = rng(seed);
    for _ in 0..cases {
        let n = rng.random_range(1..=2);
        let cin = rng.random_range(1..=3);
        let cout = rng.random_range(1..=3);
        let k = if rng.random_bool(0.75) { 3 } else { 1 };
        let stride = rng.random_range(1..=2);
        let padding = if rng.random_bool(0.5) { Padding::Same } else { Padding::Valid };
        let [d, h, w] = dims(&mut rng, 3, 7);
        let x = rand_tensor([n, cin, d, h, w], &mut rng);
        let wt = rand_vec(cout * cin * k * k * k, &mut rng);
        let b = rand_vec(cout, &mut rng);
        let geom = ConvGeometry::new(k, stride, padding).unwrap();
        let y = conv3d(&x, &wt, &b, cout, geom).unwrap();
        let (want, oshape) = conv_oracle(&x, &wt, &b, cout, k, stride, geom.pad());
        assert_eq!(y.shape(), oshape);
        let mut err = max_abs(y.data(), &want);

        // Input gradient of Σ gy·conv(x) is linear in x: check it against
        // the oracle's response to unit perturbations on a few voxels.
        let gy = rand_tensor(oshape, &mut rng);
        let grads = conv3d_backward(&x, &wt, &gy, cout, geom).unwrap();
        let zero_b = vec![0.0; cout];
        for _ in 0..4 {
            let i = rng.random_range(0..x.numel());
            let mut e = Tensor::zeros(x.shape());
            e.data_mut()[i] = 1.0;
            let (resp, _) = conv_oracle(&e, &wt, &zero_b, cout, k, stride, geom.pad());
            let want_g: f64 = resp.iter().zip(gy.data()).map(|(a, &b)| a * b as f64).sum();
            err = err.max((grads.input.data()[i] as f64 - want_g).abs());
        }
        r.record(err);
    }
    r
}

/// conv_transpose3 forward against the block-painting oracle, and its input
/// gradient against a strided conv3 sharing the weights (the adjoint).
pub fn conv_transpose3_cases(cases: usize, seed: u64) -> KernelResult {
    let mut r = KernelResult::new("conv_transpose3");
    let mut rng = rng(seed);
    for _ in 0..cases {
        let n = rng.random_range(1..=2);
        let cin = rng.random_range(1..=3);
        let cout = rng.random_range(1..=3);
        let sp = dims(&mut rng, 1, 4);
        let x = rand_tensor([n, cin, sp[0], sp[1], sp[2]], &mut rng);
        let wt = rand_vec(cin * cout * 8, &mut rng);
        let b = rand_vec(cout, &mut rng);
        let y = conv_transpose3d(&x, &wt, &b, cout).unwrap();
        let mut err = max_abs(y.data(), &conv_transpose_oracle(&x, &wt, &b, cout));

        let gy = rand_tensor(y.shape(), &mut rng);
        let grads = conv_transpose3d_backward(&x, &wt, &gy, cout).unwrap();
        let geom = ConvGeometry::new(2, 2, Padding::Valid).unwrap();
        let (adj, _) = conv_oracle(&gy, &wt, &vec![0.0; cin], cin, 2, 2, geom.pad());
        err = err.max(max_abs(grads.input.data(), &adj));
        r.record(err);
    }
    r
}

/// Adjoint identity `⟨conv(y), x⟩ = ⟨y, convT(x)⟩` for stride-2 2³ kernels
/// with shared weights and zero bias. Returns the worst relative gap.
pub fn adjoint_identity_cases(cases: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let cin = rng.random_range(1..=3);
        let cout = rng.random_range(1..=3);
        let sp = dims(&mut rng, 1, 4);
        let x = rand_tensor([1, cin, sp[0], sp[1], sp[2]], &mut rng);
        let y = rand_tensor([1, cout, 2 * sp[0], 2 * sp[1], 2 * sp[2]], &mut rng);
        let wt = rand_vec(cin * cout * 8, &mut rng);
        let t = conv_transpose3d(&x, &wt, &vec![0.0; cout], cout).unwrap();
        let c = conv3d(&y, &wt, &vec![0.0; cin], cin, ConvGeometry::new(2, 2, Padding::Valid).unwrap()).unwrap();
        let (lhs, rhs) = (c.dot(&x), y.dot(&t));
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0));
    }
    worst
}

/// Values and argmax against the window scan. Half the cases use small
/// integer values so that ties are frequent.
pub fn maxpool2_cases(cases: usize, seed: u64) -> KernelResult {
    let mut r = KernelResult::new("maxpool2");
    let mut rng = rng(seed);
    for case in 0..cases {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=3);
        let sp = dims(&mut rng, 1, 4).map(|v| 2 * v);
        let shape = [n, c, sp[0], sp[1], sp[2]];
        let x = if case % 2 == 0 {
            rand_tensor(shape, &mut rng)
        } else {
            let data = (0..shape.iter().product()).map(|_| rng.random_range(0..3) as f32).collect();
            Tensor::from_vec(shape, data).unwrap()
        };
        let (y, arg) = maxpool2(&x).unwrap();
        let (want, want_arg) = maxpool_oracle(&x);
        let mut err = max_abs(y.data(), &want);
        if arg != want_arg {
            err = f64::INFINITY;
        }
        r.record(err);
    }
    r
}

/// Train and eval modes, including the running-statistics update.
pub fn batchnorm_cases(cases: usize, seed: u64) -> KernelResult {
    let mut r = KernelResult::new("batchnorm");
    let mut rng = rng(seed);
    for case in 0..cases {
        let n = rng.random_range(1..=3);
        let c = rng.random_range(1..=3);
        let sp = dims(&mut rng, 1, 5);
        let shape = [n, c, sp[0], sp[1], sp[2]];
        let mut x = rand_tensor(shape, &mut rng);
        let shift = rng.random_range(-3.0f32..3.0);
        x.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v + shift);
        let gamma = rand_vec(c, &mut rng);
        let beta = rand_vec(c, &mut rng);
        let mut rm = rand_vec(c, &mut rng);
        let mut rv: Vec<f32> = (0..c).map(|_| rng.random_range(0.5f32..2.0)).collect();
        let train = case % 2 == 0;
        let (want, want_rm, want_rv) = batchnorm_oracle(&x, &gamma, &beta, &rm, &rv, train);
        let y = if train {
            batchnorm_train(&x, &gamma, &beta, &mut rm, &mut rv).0
        } else {
            batchnorm_eval(&x, &gamma, &beta, &rm, &rv)
        };
        let err = max_abs(y.data(), &want).max(max_abs(&rm, &want_rm)).max(max_abs(&rv, &want_rv));
        r.record(err);
    }
    r
}

/// relu and sigmoid with their backward passes, elementwise from the formulas.
pub fn activation_cases(cases: usize, seed: u64) -> KernelResult {
    let mut r = KernelResult::new("activations");
    let mut rng = rng(seed);
    for _ in 0..cases {
        let sp = dims(&mut rng, 1, 6);
        let shape = [rng.random_range(1..=2), rng.random_range(1..=3), sp[0], sp[1], sp[2]];
        let mut x = rand_tensor(shape, &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v *= 8.0);
        let gy = rand_tensor(shape, &mut rng);
        let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let gs: Vec<f64> = gy.data().iter().map(|&v| v as f64).collect();

        let relu_want: Vec<f64> = xs.iter().map(|&v| v.max(0.0)).collect();
        let relu_g: Vec<f64> = xs.iter().zip(&gs).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
        let sig_want: Vec<f64> = xs.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let sig_g: Vec<f64> = sig_want.iter().zip(&gs).map(|(&s, &g)| g * s * (1.0 - s)).collect();

        let s = sigmoid(&x);
        let err = max_abs(relu(&x).data(), &relu_want)
            .max(max_abs(relu_backward(&x, &gy).data(), &relu_g))
            .max(max_abs(s.data(), &sig_want))
            .max(max_abs(sigmoid_backward(&s, &gy).data(), &sig_g));
        r.record(err);
    }
    r
}

pub const KERNEL_TOL: f64 = 1e-5;

pub fn kernel_suite(cases: usize, seed: u64) -> Vec<KernelResult> {
    vec![
        conv3_cases(cases, seed),
        conv_transpose3_cases(cases, seed + 1),
        maxpool2_cases(cases, seed + 2),
        batchnorm_cases(cases, seed + 3),
        activation_cases(cases, seed + 4),
    ]
}

/// Inputs bounded away from zero and pairwise at least 0.01 apart, so a
/// ±1e-3 probe never crosses a ReLU kink or flips a max-pool winner.
pub fn kink_free_tensor(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| 0.05 + 0.01 * i as f32).collect();
    for v in vals.iter_mut().step_by(2) {
        *v = -*v;
    }
    vals.shuffle(rng);
    Tensor::from_vec(shape, vals).unwrap()
}

/// Positive head weights. Together with positive weights and inputs for the
/// linear layers no gradient element is a near-cancelling sum, which would
/// otherwise sink below the f32 noise floor of a 1e-3 central difference.
fn projection(shape: [usize; 5], rng: &mut ChaCha8Rng) -> LossHead {
    LossHead::Projection(Tensor::random_uniform(shape, 0.5, 1.5, rng))
}

fn positive(p: &mut tensorkit::Parameter, rng: &mut ChaCha8Rng) {
    p.value.iter_mut().for_each(|v| *v = rng.random_range(0.2f32..1.0));
}

fn positive_tensor(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::random_uniform(shape, 0.2, 1.0, rng)
}

fn check<L: Layer>(layer: L, input: Tensor, out_shape: [usize; 5], mode: Mode, rng: &mut ChaCha8Rng) -> f64 {
    let mut frag = LayerFragment::new(layer, input, projection(out_shape, rng), mode);
    grad_check(&mut frag, GradCheckConfig::new(SINGLE_LAYER_TOL)).max_rel_err
}

pub const SINGLE_LAYER_TOL: f64 = 1e-3;

/// Elementwise gradient check of every layer type, each closed by a random
/// projection head. Returns `(layer, worst relative error)`.
pub fn layer_grad_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = rng(seed);
    let mut out = Vec::new();
    let same = ConvGeometry::same3();
    let mut conv = Conv3d::new("c", 2, 3, same, &mut rng);
    positive(&mut conv.weight, &mut rng);
    let x = positive_tensor([1, 2, 4, 4, 4], &mut rng);
    out.push(("conv3 same", check(conv, x, [1, 3, 4, 4, 4], Mode::Train, &mut rng)));

    let mut conv = Conv3d::new("c", 1, 2, ConvGeometry::new(3, 2, Padding::Valid).unwrap(), &mut rng);
    positive(&mut conv.weight, &mut rng);
    let x = positive_tensor([2, 1, 9, 9, 9], &mut rng);
    out.push(("conv3 stride 2", check(conv, x, [2, 2, 4, 4, 4], Mode::Train, &mut rng)));

    let mut conv = Conv3d::new("c", 3, 2, ConvGeometry::pointwise(), &mut rng);
    positive(&mut conv.weight, &mut rng);
    let x = positive_tensor([1, 3, 3, 3, 3], &mut rng);
    out.push(("conv 1x1x1", check(conv, x, [1, 2, 3, 3, 3], Mode::Train, &mut rng)));

    let mut convt = ConvTranspose3d::new("t", 2, 2, &mut rng);
    positive(&mut convt.weight, &mut rng);
    let x = positive_tensor([2, 2, 2, 2, 2], &mut rng);
    out.push(("conv_transpose3", check(convt, x, [2, 2, 4, 4, 4], Mode::Train, &mut rng)));

    // Normalisation removes the mean and x̂ components of the head, so the
    // head is signed with magnitudes in [0.5, 1.5] and the input spread is
    // kept near 0.2, where f32 rounding of the output is smallest relative
    // to a 1e-3 probe while curvature is still negligible.
    let mut bn = BatchNorm3d::new("bn", 2);
    bn.gamma.value = (0..2).map(|_| rng.random_range(0.5f32..1.5)).collect();
    let mut x = rand_tensor([2, 2, 3, 3, 3], &mut rng);
    x.data_mut().iter_mut().for_each(|v| *v *= 0.35);
    let head: Vec<f32> = (0..108).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.5f32..1.5)).collect();
    let head = LossHead::Projection(Tensor::from_vec([2, 2, 3, 3, 3], head).unwrap());
    let mut frag = LayerFragment::new(bn, x, head, Mode::Train);
    out.push(("batchnorm train", grad_check(&mut frag, GradCheckConfig::new(SINGLE_LAYER_TOL)).max_rel_err));

    let mut bn = BatchNorm3d::new("bn", 2);
    positive(&mut bn.gamma, &mut rng);
    bn.running_mean.value = vec![-0.4, -0.7];
    bn.running_var.value = vec![0.7, 1.6];
    let x = positive_tensor([2, 2, 3, 3, 3], &mut rng);
    out.push(("batchnorm eval", check(bn, x, [2, 2, 3, 3, 3], Mode::Eval, &mut rng)));

    let x = kink_free_tensor([1, 2, 3, 3, 3], &mut rng);
    out.push(("relu", check(Relu::new("r"), x, [1, 2, 3, 3, 3], Mode::Train, &mut rng)));

    let x = rand_tensor([1, 2, 3, 3, 3], &mut rng);
    out.push(("sigmoid", check(Sigmoid::new("s"), x, [1, 2, 3, 3, 3], Mode::Train, &mut rng)));

    let x = kink_free_tensor([1, 2, 4, 4, 4], &mut rng);
    out.push(("maxpool2", check(MaxPool2::new("p"), x, [1, 2, 2, 2, 2], Mode::Train, &mut rng)));

    let x = rand_tensor([2, 3, 3, 3, 3], &mut rng);
    out.push(("global avg pool", check(GlobalAvgPool::new("g"), x, [2, 3, 1, 1, 1], Mode::Train, &mut rng)));

    let mut dense = Dense::new("d", 3, 2, &mut rng);
    positive(&mut dense.weight, &mut rng);
    let x = positive_tensor([2, 3, 1, 1, 1], &mut rng);
    out.push(("dense", check(dense, x, [2, 2, 1, 1, 1], Mode::Train, &mut rng)));

    let x = rand_tensor([1, 2, 3, 4, 5], &mut rng);
    out.push(("trilinear resample", check(Resample::new("z", [5, 3, 4]), x, [1, 2, 5, 3, 4], Mode::Train, &mut rng)));
    out
}
