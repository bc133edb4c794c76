mod common;

use common::*;
use proptest::prelude::*;
use tensorkit::conv::conv_transpose3d;
use tensorkit::loss::dice_loss;
use tensorkit::{Adam, Parameter, Tensor};

fn assert_suite(r: &KernelResult) {
    assert!(r.cases >= 50, "{}: only {} cases", r.name, r.cases);
    assert!(r.max_err <= KERNEL_TOL, "{}: max abs error {:e}", r.name, r.max_err);
}

#[test]
fn conv3_matches_direct_summation() {
    assert_suite(&conv3_cases(60, 11));
}

#[test]
fn conv_transpose3_matches_block_painting_and_its_adjoint() {
    assert_suite(&conv_transpose3_cases(60, 12));
}

#[test]
fn maxpool2_matches_window_scan_including_ties() {
    assert_suite(&maxpool2_cases(60, 13));
}

#[test]
fn batchnorm_matches_formula_in_both_modes() {
    assert_suite(&batchnorm_cases(60, 14));
}

#[test]
fn activations_match_formulas() {
    assert_suite(&activation_cases(60, 15));
}

#[test]
fn strided_conv_and_transpose_are_adjoint() {
    let gap = adjoint_identity_cases(50, 16);
    assert!(gap < 1e-4, "relative gap {gap:e}");
}

#[test]
fn conv_transpose3_of_zero_is_zero() {
    let mut rng = rng(17);
    let w = rand_vec(2 * 3 * 8, &mut rng);
    let y = conv_transpose3d(&Tensor::zeros([1, 2, 2, 3, 2]), &w, &[0.0; 3], 3).unwrap();
    assert_eq!(y.shape(), [1, 3, 4, 6, 4]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn adam_with_zero_lr_never_moves() {
    let mut rng = rng(18);
    let mut p = Parameter::new("p", vec![16], rand_vec(16, &mut rng));
    let before = p.value.clone();
    for _ in 0..5 {
        p.accumulate_grad(&rand_vec(16, &mut rng));
        Adam::new(0.0).step(&mut p);
    }
    assert_eq!(p.value, before);
    assert_eq!(p.step_count(), 5);
}

fn binary(bits: &[bool]) -> Tensor {
    Tensor::from_vec([1, 1, 1, 1, bits.len()], bits.iter().map(|&b| b as u8 as f32).collect()).unwrap()
}

proptest! {
    #[test]
    fn dice_loss_is_bounded_and_symmetric_on_binary(
        a in prop::collection::vec(any::<bool>(), 64),
        b in prop::collection::vec(any::<bool>(), 64),
        soft in prop::collection::vec(0.0f32..=1.0, 64),
    ) {
        let (p, g) = (binary(&a), binary(&b));
        let l = dice_loss(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
        prop_assert_eq!(l, dice_loss(&g, &p).unwrap());
        let s = Tensor::from_vec([1, 1, 1, 1, 64], soft).unwrap();
        let ls = dice_loss(&s, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&ls));
    }
}
