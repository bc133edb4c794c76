//! Central-difference verification of analytic gradients.

use crate::loss::{dice_loss, dice_loss_grad};
use crate::{Layer, Mode, Parameter, Tensor};

/// A model fragment with a scalar loss at its head.
pub trait GradCheckable {
    /// Forward pass and loss only.
    fn loss(&mut self) -> f64;

    /// Forward pass, loss and backward pass; leaves gradients in the
    /// parameters.
    fn loss_and_grad(&mut self) -> f64;

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter));
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Perturbation `h`.
    pub step: f32,
    pub tolerance: f64,
    /// Evenly strided subset of elements per parameter; `None` checks all.
    pub max_per_param: Option<usize>,
}

impl GradCheckConfig {
    pub fn new(tolerance: f64) -> Self {
        GradCheckConfig { step: 1e-3, tolerance, max_per_param: None }
    }

    pub fn sampled(mut self, max_per_param: usize) -> Self {
        self.max_per_param = Some(max_per_param);
        self
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the element with the largest error.
    pub worst: String,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, 1e-4)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

fn with_param<T>(frag: &mut dyn GradCheckable, idx: usize, f: impl FnOnce(&mut Parameter) -> T) -> T {
    let mut f = Some(f);
    let mut out = None;
    let mut i = 0;
    frag.visit_params(&mut |p| {
        if i == idx {
            out = Some((f.take().expect("visited twice"))(p));
        }
        i += 1;
    });
    out.expect("parameter index out of range")
}

pub fn grad_check(frag: &mut dyn GradCheckable, cfg: GradCheckConfig) -> GradCheckReport {
    frag.visit_params(&mut |p| p.zero_grad());
    frag.loss_and_grad();
    let mut analytic: Vec<(String, bool, Vec<f32>)> = Vec::new();
    frag.visit_params(&mut |p| analytic.push((p.name.clone(), p.is_trainable(), p.grad.clone())));

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
        tolerance: cfg.tolerance,
        passed: true,
    };
    for (pi, (name, trainable, grads)) in analytic.iter().enumerate() {
        if !trainable {
            continue;
        }
        let n = grads.len();
        let stride = cfg.max_per_param.map_or(1, |m| n.div_ceil(m.max(1)));
        for j in (0..n).step_by(stride.max(1)) {
            let orig = with_param(frag, pi, |p| p.value[j]);
            let plus = orig + cfg.step;
            let minus = orig - cfg.step;
            with_param(frag, pi, |p| p.value[j] = plus);
            let lp = frag.loss();
            with_param(frag, pi, |p| p.value[j] = minus);
            let lm = frag.loss();
            with_param(frag, pi, |p| p.value[j] = orig);
            let numeric = (lp - lm) / (plus as f64 - minus as f64);
            let err = relative_error(grads[j] as f64, numeric);
            report.checked += 1;
            if report.worst.is_empty() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{name}[{j}]");
            }
        }
    }
    report.passed = report.max_rel_err < cfg.tolerance;
    report
}

/// Scalar head used to close a fragment.
#[derive(Debug, Clone)]
pub enum LossHead {
    /// Soft dice against a fixed target.
    Dice(Tensor),
    /// `Σ r·y` with fixed random `r`; gives O(1) gradients everywhere.
    Projection(Tensor),
}

impl LossHead {
    fn eval(&self, y: &Tensor) -> f64 {
        match self {
            LossHead::Dice(g) => dice_loss(y, g).expect("dice head shape"),
            LossHead::Projection(r) => y.dot(r),
        }
    }

    fn eval_grad(&self, y: &Tensor) -> (f64, Tensor) {
        match self {
            LossHead::Dice(g) => dice_loss_grad(y, g).expect("dice head shape"),
            LossHead::Projection(r) => (y.dot(r), r.clone()),
        }
    }
}

/// A single layer fed by a learnable input, closed by a [`LossHead`].
/// The input is checked like any other parameter.
pub struct LayerFragment<L: Layer> {
    pub layer: L,
    pub input: Parameter,
    shape: [usize; 5],
    pub head: LossHead,
    pub mode: Mode,
}

impl<L: Layer> LayerFragment<L> {
    pub fn new(layer: L, input: Tensor, head: LossHead, mode: Mode) -> Self {
        let shape = input.shape();
        LayerFragment {
            layer,
            input: Parameter::new("input", shape.to_vec(), input.into_data()),
            shape,
            head,
            mode,
        }
    }

    fn input_tensor(&self) -> Tensor {
        Tensor::from_vec(self.shape, self.input.value.clone()).expect("fragment input shape")
    }
}

impl<L: Layer> GradCheckable for LayerFragment<L> {
    fn loss(&mut self) -> f64 {
        let x = self.input_tensor();
        let y = self.layer.forward(&x, self.mode).expect("fragment forward");
        self.head.eval(&y)
    }

    fn loss_and_grad(&mut self) -> f64 {
        let x = self.input_tensor();
        let y = self.layer.forward(&x, self.mode).expect("fragment forward");
        let (l, gy) = self.head.eval_grad(&y);
        let gx = self.layer.backward(&gy);
        self.input.accumulate_grad(gx.data());
        l
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.input);
        self.layer.visit_params(f);
    }
}
