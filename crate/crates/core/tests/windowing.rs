use canalseg::volgrid::{compute_histogram, Grid, Histogram, Volume};
use canalseg::windowing::{apply_window, auto_window, compute_window, width_for_range, window_value, WindowParams};
use proptest::prelude::*;

/// Bin centres −1000..=1000 in steps of 10.
fn histogram(points: &[(i32, u64)]) -> Histogram {
    let mut counts = vec![0u64; 201];
    for &(centre, c) in points {
        counts[((centre + 1000) / 10) as usize] += c;
    }
    Histogram { bin_width: 10, origin: -1005, counts }
}

#[test]
fn mode_and_quantile_range() {
    let w = compute_window(&histogram(&[(-1000, 100), (-200, 1000), (1000, 100)])).unwrap();
    assert_eq!((w.wc, w.ww), (-200.0, 2000.0));
}

#[test]
fn single_bin_is_clamped_to_unit_width() {
    let h = Histogram { bin_width: 10, origin: 495, counts: vec![42] };
    let w = compute_window(&h).unwrap();
    assert_eq!((w.wc, w.ww), (500.0, 1.0));
}

#[test]
fn wide_range_uses_reduced_slope() {
    assert_eq!(width_for_range(5000.0), 2750.0);
    assert_eq!(width_for_range(2000.0), 2000.0);
    let mut counts = vec![0u64; 501];
    counts[0] = 50;
    counts[100] = 1000;
    counts[500] = 50;
    let w = compute_window(&Histogram { bin_width: 10, origin: -5, counts }).unwrap();
    assert_eq!((w.wc, w.ww), (1000.0, 2750.0));
}

#[test]
fn window_values() {
    let w = WindowParams::new(0.0, 2000.0).unwrap();
    assert_eq!(window_value(500.0, w), 0.75);
    assert_eq!(window_value(0.0, w), 0.5);
    assert_eq!(window_value(-1000.0, w), 0.0);
    assert_eq!(window_value(1500.0, w), 1.0);
}

proptest! {
    #[test]
    fn shift_by_bin_multiple_gives_identical_windowed_volume(
        vals in prop::collection::vec(-1000i32..2000, 125),
        k in -150i32..150,
    ) {
        let v: Volume = Grid::new([5, 5, 5], [1.0; 3], vals.clone()).unwrap();
        let s: Volume = Grid::new([5, 5, 5], [1.0; 3], vals.iter().map(|x| x + 10 * k).collect()).unwrap();
        let (w, n) = auto_window(&v, 10).unwrap();
        let (ws, ns) = auto_window(&s, 10).unwrap();
        prop_assert_eq!(ws.wc, w.wc + (10 * k) as f64);
        prop_assert_eq!(ws.ww, w.ww);
        prop_assert!(n.data().iter().zip(ns.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(n.data().iter().all(|&y| (0.0..=1.0).contains(&y)));
    }

    #[test]
    fn windowing_is_monotone(mut vals in prop::collection::vec(-3000i32..6000, 64), wc in -500.0f64..1500.0, ww in 1.0f64..4000.0) {
        vals.sort();
        let v: Volume = Grid::new([4, 4, 4], [1.0; 3], vals).unwrap();
        let y = apply_window(&v, WindowParams::new(wc, ww).unwrap());
        prop_assert!(y.data().windows(2).all(|p| p[0] <= p[1]));
        prop_assert_eq!(compute_histogram(&v, 10).unwrap().total(), 64);
    }
}
