//! Set-definition and flood-fill oracles for the mask operations, the
//! seeded case suites built on them, and whole-network gradient checks.
//! Shared with the acceptance suite.

#![allow(dead_code)]

use canalseg::postproc::{connected_components, morph, refine_canal, MorphOp, SeShape, StructElem, SPECKLE_FRACTION};
use canalseg::nets::{CoarseFragment, CoarseNet, FineFragment, FineNet, NetConfig};
use canalseg::volgrid::{BinaryMask, Grid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorkit::gradcheck::GradCheckable;
use tensorkit::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mask(dims: [usize; 3], density: f64, rng: &mut ChaCha8Rng) -> BinaryMask {
    let n = dims.iter().product();
    Grid::new(dims, [1.0; 3], (0..n).map(|_| u8::from(rng.random_bool(density))).collect()).unwrap()
}

fn element(se: StructElem) -> Vec<[i64; 3]> {
    let r = se.radius as i64;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                let inside = match se.shape {
                    SeShape::Box => true,
                    SeShape::Cross => dx.abs() + dy.abs() + dz.abs() <= r,
                };
                if inside {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

fn at(m: &BinaryMask, p: [i64; 3]) -> bool {
    let d = m.dims();
    (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < d[a]) && m.get(p[0] as usize, p[1] as usize, p[2] as usize) != 0
}

/// `p ∈ dilate(m)` iff some `p − e` is set; `p ∈ erode(m)` iff every `p + e`
/// is set, with everything outside the grid background.
pub fn morph_oracle(m: &BinaryMask, op: MorphOp, se: StructElem) -> BinaryMask {
    let e = element(se);
    let [nx, ny, nz] = m.dims();
    let dilate = |m: &BinaryMask| {
        let mut out = Grid::filled(m.dims(), m.spacing(), 0u8);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = [x as i64, y as i64, z as i64];
                    let hit = e.iter().any(|o| at(m, [p[0] - o[0], p[1] - o[1], p[2] - o[2]]));
                    out.set(x, y, z, u8::from(hit));
                }
            }
        }
        out
    };
    let erode = |m: &BinaryMask| {
        let mut out = Grid::filled(m.dims(), m.spacing(), 0u8);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = [x as i64, y as i64, z as i64];
                    let all = e.iter().all(|o| at(m, [p[0] + o[0], p[1] + o[1], p[2] + o[2]]));
                    out.set(x, y, z, u8::from(all));
                }
            }
        }
        out
    };
    match op {
        MorphOp::Dilate => dilate(m),
        MorphOp::Erode => erode(m),
        MorphOp::Open => dilate(&erode(m)),
        MorphOp::Close => erode(&dilate(m)),
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// 26-connected labels by union-find over forward neighbours, renumbered
/// from 1 in order of first voxel. Returns `(labels, sizes)`.
pub fn components_oracle(m: &BinaryMask) -> (Vec<u32>, Vec<usize>) {
    let [nx, ny, nz] = m.dims();
    let n = m.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if m.get(x, y, z) == 0 {
                    continue;
                }
                let i = m.index(x, y, z);
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let q = [x as i64 + dx, y as i64 + dy, z as i64 + dz];
                            if at(m, q) {
                                let j = m.index(q[0] as usize, q[1] as usize, q[2] as usize);
                                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                                parent[a.max(b)] = a.min(b);
                            }
                        }
                    }
                }
            }
        }
    }
    let mut labels = vec![0u32; n];
    let mut root_label = std::collections::HashMap::new();
    let mut sizes = Vec::new();
    for i in 0..n {
        if m.data()[i] == 0 {
            continue;
        }
        let r = find(&mut parent, i);
        let l = *root_label.entry(r).or_insert_with(|| {
            sizes.push(0);
            sizes.len() as u32
        });
        sizes[l as usize - 1] += 1;
        labels[i] = l;
    }
    (labels, sizes)
}

fn complement(m: &BinaryMask) -> BinaryMask {
    m.map(|v| u8::from(v == 0))
}

fn subset(a: &BinaryMask, b: &BinaryMask) -> bool {
    a.data().iter().zip(b.data()).all(|(&x, &y)| x == 0 || y != 0)
}

/// Zero border of `r` voxels on every side.
fn pad(m: &BinaryMask, r: usize) -> BinaryMask {
    let [nx, ny, nz] = m.dims();
    let mut out = Grid::filled([nx + 2 * r, ny + 2 * r, nz + 2 * r], m.spacing(), 0u8);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                out.set(x + r, y + r, z + r, m.get(x, y, z));
            }
        }
    }
    out
}

fn unpad(m: &BinaryMask, r: usize, dims: [usize; 3]) -> BinaryMask {
    let mut out = Grid::filled(dims, m.spacing(), 0u8);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                out.set(x, y, z, m.get(x + r, y + r, z + r));
            }
        }
    }
    out
}

#[derive(Debug, Default, Clone)]
pub struct MorphReport {
    pub masks: usize,
    /// Op or labelling disagreeing with its oracle.
    pub oracle_mismatches: Vec<String>,
    /// Duality, idempotence or inclusion violations.
    pub invariant_failures: Vec<String>,
}

impl MorphReport {
    pub fn passed(&self) -> bool {
        self.oracle_mismatches.is_empty() && self.invariant_failures.is_empty()
    }
}

pub const ELEMENTS: [StructElem; 4] = [
    StructElem { shape: SeShape::Box, radius: 1 },
    StructElem { shape: SeShape::Cross, radius: 1 },
    StructElem { shape: SeShape::Box, radius: 2 },
    StructElem { shape: SeShape::Cross, radius: 2 },
];

const OPS: [MorphOp; 4] = [MorphOp::Dilate, MorphOp::Erode, MorphOp::Open, MorphOp::Close];

/// Random 16³ masks; densities and structuring elements cycle so every
/// pairing of the two occurs.
pub fn morph_suite(masks: usize, seed: u64) -> MorphReport {
    let mut rng = rng(seed);
    let mut rep = MorphReport { masks, ..Default::default() };
    let dims = [16; 3];
    for k in 0..masks {
        let density = [0.05, 0.2, 0.5, 0.8][k % 4];
        let m = random_mask(dims, density, &mut rng);
        let se = ELEMENTS[(k / 4) % ELEMENTS.len()];
        for op in OPS {
            if morph(&m, op, se) != morph_oracle(&m, op, se) {
                rep.oracle_mismatches.push(format!("mask {k}: {op:?} {se:?}"));
            }
        }
        let cc = connected_components(&m);
        let (labels, sizes) = components_oracle(&m);
        if cc.labels != labels || cc.sizes != sizes {
            rep.oracle_mismatches.push(format!("mask {k}: components"));
        }

        let r = se.radius;
        let p = pad(&m, r);
        let dual = complement(&morph(&complement(&p), MorphOp::Erode, se));
        if unpad(&dual, r, dims) != morph(&m, MorphOp::Dilate, se) {
            rep.invariant_failures.push(format!("mask {k}: duality {se:?}"));
        }
        for op in [MorphOp::Open, MorphOp::Close] {
            let once = morph(&m, op, se);
            if morph(&once, op, se) != once {
                rep.invariant_failures.push(format!("mask {k}: {op:?} not idempotent"));
            }
        }
        let (er, di) = (morph(&m, MorphOp::Erode, se), morph(&m, MorphOp::Dilate, se));
        if !subset(&er, &m) || !subset(&m, &di) {
            rep.invariant_failures.push(format!("mask {k}: erode ⊆ m ⊆ dilate"));
        }
    }
    rep
}

/// `refine_canal` rebuilt from the oracles above.
pub fn refine_oracle(m: &BinaryMask) -> BinaryMask {
    let closed = morph_oracle(m, MorphOp::Close, StructElem::box1());
    let (labels, sizes) = components_oracle(&closed);
    if sizes.is_empty() {
        return closed;
    }
    let largest = (0..sizes.len()).fold(0, |b, k| if sizes[k] > sizes[b] { k } else { b }) as u32 + 1;
    let kept = Grid::new(m.dims(), m.spacing(), labels.iter().map(|&l| u8::from(l == largest)).collect()).unwrap();
    let opened = morph_oracle(&kept, MorphOp::Open, StructElem::cross1());
    let (plabels, psizes) = components_oracle(&opened);
    if psizes.len() == 1 {
        return opened;
    }
    let min = SPECKLE_FRACTION * sizes[largest as usize - 1] as f64;
    let survivors: Vec<u32> = (1..=psizes.len() as u32).filter(|&l| psizes[l as usize - 1] as f64 >= min).collect();
    if survivors.len() == 1 {
        Grid::new(m.dims(), m.spacing(), plabels.iter().map(|&l| u8::from(l == survivors[0])).collect()).unwrap()
    } else {
        kept
    }
}

/// A tube along x with random radius and a wavy centre line, cut by 1–2
/// one-voxel gaps, plus 1–4 isolated single-voxel speckles. Returns the
/// mask and the speckle positions.
pub fn gap_speckle_case(rng: &mut ChaCha8Rng) -> (BinaryMask, Vec<[usize; 3]>) {
    let dims = [64, 24, 24];
    let mut m = Grid::filled(dims, [1.0; 3], 0u8);
    let radius = rng.random_range(3.0..4.0);
    let (amp, freq, phase) = (rng.random_range(0.0..2.0), rng.random_range(0.05..0.15), rng.random_range(0.0..6.3));
    let gaps: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(12..52)).collect();
    for x in 4..60 {
        if gaps.contains(&x) {
            continue;
        }
        let cy = 12.0 + amp * (freq * x as f64 + phase).sin();
        let cz = 12.0 + amp * (freq * x as f64 + phase).cos();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                let (dy, dz) = (y as f64 + 0.5 - cy, z as f64 + 0.5 - cz);
                if dy * dy + dz * dz <= radius * radius {
                    m.set(x, y, z, 1);
                }
            }
        }
    }
    let tube = m.clone();
    let mut speckles = Vec::new();
    while speckles.len() < rng.random_range(1..=4) {
        let p = [rng.random_range(0..dims[0]), rng.random_range(0..dims[1]), rng.random_range(0..dims[2])];
        // Far enough that closing cannot join it to the tube or another speckle.
        let clear = (-3i64..=3).all(|dz| {
            (-3i64..=3).all(|dy| {
                (-3i64..=3).all(|dx| !at(&tube, [p[0] as i64 + dx, p[1] as i64 + dy, p[2] as i64 + dz]))
            })
        }) && speckles.iter().all(|s: &[usize; 3]| (0..3).any(|a| s[a].abs_diff(p[a]) > 3));
        if clear {
            m.set(p[0], p[1], p[2], 1);
            speckles.push(p);
        }
    }
    (m, speckles)
}

#[derive(Debug, Default, Clone)]
pub struct RefineReport {
    pub cases: usize,
    pub failures: Vec<String>,
}

/// Refinement contract on constructed gap/speckle cases: output equals the
/// oracle exactly, is a single 26-connected component, contains no speckle
/// smaller than 0.1% of the canal, and spans the tube across every gap.
pub fn refine_suite(cases: usize, seed: u64) -> RefineReport {
    let mut rng = rng(seed);
    let mut rep = RefineReport { cases, ..Default::default() };
    for k in 0..cases {
        let (m, speckles) = gap_speckle_case(&mut rng);
        let out = refine_canal(&m);
        if out != refine_oracle(&m) {
            rep.failures.push(format!("case {k}: differs from oracle"));
        }
        let (_, sizes) = components_oracle(&out);
        if sizes.len() != 1 {
            rep.failures.push(format!("case {k}: {} components", sizes.len()));
        }
        let canal = m.count() - speckles.len();
        for s in &speckles {
            if (1.0 / canal as f64) < SPECKLE_FRACTION && out.get(s[0], s[1], s[2]) != 0 {
                rep.failures.push(format!("case {k}: speckle {s:?} kept"));
            }
        }
        let xs: Vec<usize> = (0..out.len()).filter(|&i| out.data()[i] != 0).map(|i| out.coords(i)[0]).collect();
        if xs.iter().min() != Some(&4) || xs.iter().max() != Some(&59) {
            rep.failures.push(format!("case {k}: tube ends lost"));
        }
    }
    rep
}

#[derive(Debug, Default, Clone)]
pub struct MetricIdentityReport {
    pub checked: usize,
    pub f1_not_dice: usize,
    /// Largest |dice − 2·iou/(1+iou)|.
    pub max_iou_gap: f64,
}

/// Random confusion counts spanning small to very large magnitudes.
pub fn metric_identity_suite(n: usize, seed: u64) -> MetricIdentityReport {
    use canalseg::metrics::{report, ConfusionCounts};
    let mut rng = rng(seed);
    let mut rep = MetricIdentityReport { checked: n, ..Default::default() };
    for _ in 0..n {
        let scale = 10u64.pow(rng.random_range(0..=12));
        let mut draw = || rng.random_range(0..=scale);
        let c = ConfusionCounts { tp: draw(), fp: draw(), fn_: draw(), tn: draw() };
        let r = report(&c);
        if r.f1.map(f64::to_bits) != r.dice.map(f64::to_bits) {
            rep.f1_not_dice += 1;
        }
        if let (Some(d), Some(i)) = (r.dice, r.iou) {
            rep.max_iou_gap = rep.max_iou_gap.max((d - 2.0 * i / (1.0 + i)).abs());
        }
    }
    rep
}

/// Hand-built 4³ pair with tp 6, fp 2, fn 2, tn 54.
pub fn hand_confusion_masks() -> (BinaryMask, BinaryMask) {
    let mut pred = Grid::filled([4; 3], [1.0; 3], 0u8);
    let mut gt = pred.clone();
    for i in 0..8 {
        pred.data_mut()[i] = 1;
    }
    for i in 2..10 {
        gt.data_mut()[i] = 1;
    }
    (pred, gt)
}

// ---- whole-network gradient checks ----

pub fn blob_target(shape: [usize; 5]) -> Tensor {
    let [n, _, d, h, w] = shape;
    let mut t = Tensor::zeros(shape);
    for s in 0..n {
        let ch = t.channel_mut(s, 0);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let r2 = [(z, d), (y, h), (x, w)].iter().map(|&(i, n)| (i as f64 + 0.5 - n as f64 / 2.0).powi(2)).sum::<f64>();
                    if r2 <= (d as f64 / 4.0).powi(2) {
                        ch[(z * h + y) * w + x] = 1.0;
                    }
                }
            }
        }
    }
    t
}

pub fn tiny(levels: usize, base: usize, dims: usize) -> NetConfig {
    NetConfig {
        levels,
        base_channels: base,
        input_dims: [dims; 3],
        supervision_weights: [1.0, 0.5, 0.25, 0.125][..levels].to_vec(),
        ..NetConfig::default()
    }
}

/// Compares `g . v` with a central difference of the loss along unit
/// directions `v` over all trainable parameters. Whole networks have ReLU and
/// max-pool kinks near many single-element probes; along a dense direction
/// those average out while a misrouted gradient does not. Each `v` mixes the
/// analytic gradient direction with an equal-norm random one, so `g . v`
/// stays well above f32 loss noise.
pub fn directional_check(frag: &mut dyn GradCheckable, seed: u64) -> f64 {
    frag.visit_params(&mut |p| p.zero_grad());
    frag.loss_and_grad();
    let mut grads = Vec::new();
    frag.visit_params(&mut |p| {
        if p.is_trainable() {
            grads.push(p.grad.iter().map(|&g| g as f64).collect::<Vec<_>>());
        }
    });
    let unit = |v: &mut Vec<Vec<f64>>| {
        let n = v.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().flatten().for_each(|x| *x /= n);
    };
    let mut g_hat = grads.clone();
    unit(&mut g_hat);
    let mut worst = 0.0f64;
    for k in 0..4 {
        let mut r = rng(seed + k);
        let mut dir: Vec<Vec<f64>> = grads.iter().map(|g| g.iter().map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        unit(&mut dir);
        dir.iter_mut().flatten().zip(g_hat.iter().flatten()).for_each(|(d, g)| *d += g);
        unit(&mut dir);
        let analytic: f64 = grads.iter().flatten().zip(dir.iter().flatten()).map(|(g, d)| g * d).sum();
        let h = 1e-3;
        let shift = |frag: &mut dyn GradCheckable, s: f64| {
            let mut i = 0;
            frag.visit_params(&mut |p| {
                if p.is_trainable() {
                    for (v, &d) in p.value.iter_mut().zip(&dir[i]) {
                        *v += (s * d) as f32;
                    }
                    i += 1;
                }
            });
        };
        shift(frag, h);
        let lp = frag.loss();
        shift(frag, -2.0 * h);
        let lm = frag.loss();
        shift(frag, h);
        let numeric = (lp - lm) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    worst
}

pub const NET_TOL: f64 = 1e-2;

fn rand_t(shape: [usize; 5], seed: u64) -> Tensor {
    Tensor::random_uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// Directional check of a two-level coarse net on a batch of two.
pub fn coarse_fragment_error() -> f64 {
    let net = CoarseNet::new(tiny(2, 2, 8), 21).unwrap();
    let shape = [2, 1, 8, 8, 8];
    let mut frag = CoarseFragment { net, x: rand_t(shape, 22), target: blob_target(shape) };
    directional_check(&mut frag, 30)
}

/// Directional check of a three-level fine net with both auxiliary inputs.
pub fn fine_fragment_error() -> f64 {
    let net = FineNet::new(tiny(3, 2, 8), 23).unwrap();
    let shape = [2, 1, 8, 8, 8];
    let mut frag = FineFragment {
        net,
        inputs: [rand_t(shape, 24), rand_t([2, 1, 6, 6, 6], 25), rand_t([2, 1, 4, 4, 4], 26)],
        target: blob_target(shape),
    };
    directional_check(&mut frag, 40)
}
