mod common;

use common::*;
use tensorkit::conv::ConvGeometry;
use tensorkit::gradcheck::{grad_check, GradCheckConfig, LayerFragment, LossHead};
use tensorkit::layers::Conv3d;
use tensorkit::{Mode, Tensor};

#[test]
fn every_layer_type_passes_elementwise_check() {
    for (name, err) in layer_grad_suite(7) {
        println!("{name}: {err:e}");
        assert!(err < SINGLE_LAYER_TOL, "{name}: rel err {err:e}");
    }
}

#[test]
fn conv_with_dice_head() {
    let mut rng = rng(8);
    let conv = Conv3d::new("c", 1, 1, ConvGeometry::same3(), &mut rng);
    let x = Tensor::random_uniform([1, 1, 6, 6, 6], 0.0, 1.0, &mut rng);
    let g = Tensor::from_vec([1, 1, 6, 6, 6], (0..216).map(|i| (i % 3 == 0) as u8 as f32).collect()).unwrap();
    let mut frag = LayerFragment::new(conv, x, LossHead::Dice(g), Mode::Train);
    let report = grad_check(&mut frag, GradCheckConfig::new(1e-2));
    assert!(report.passed, "{report:?}");
}

#[test]
fn pointwise_conv_is_linear_enough_for_tight_tolerance() {
    let mut rng = rng(9);
    let conv = Conv3d::new("c", 2, 2, ConvGeometry::pointwise(), &mut rng);
    let x = rand_tensor([1, 2, 3, 3, 3], &mut rng);
    let head = LossHead::Projection(rand_tensor([1, 2, 3, 3, 3], &mut rng));
    let report = grad_check(&mut LayerFragment::new(conv, x, head, Mode::Train), GradCheckConfig::new(1e-3));
    assert!(report.passed, "{report:?}");
}

#[test]
fn zero_weights_still_get_correct_gradients() {
    let mut rng = rng(10);
    let mut conv = Conv3d::new("c", 2, 2, ConvGeometry::same3(), &mut rng);
    conv.weight.value.iter_mut().for_each(|v| *v = 0.0);
    let x = rand_tensor([1, 2, 4, 4, 4], &mut rng);
    let head = LossHead::Projection(rand_tensor([1, 2, 4, 4, 4], &mut rng));
    let report = grad_check(&mut LayerFragment::new(conv, x, head, Mode::Train), GradCheckConfig::new(1e-3));
    assert!(report.passed, "{report:?}");
}
