use ccss_core::scan::{affine_scan, combine, scan_prefix, scan_sequential};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn prefix_matches_sequential_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        let dim = rng.random_range(1..5);
        let steps = rng.random_range(1..300);
        let a: Vec<f64> = (0..steps * dim).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..steps * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h0: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let s = scan_sequential(&h0, &a, &b, dim);
        let p = scan_prefix(&h0, &a, &b, dim);
        for (x, y) in s.iter().zip(&p) {
            // relative to the magnitude of the contributing terms
            let scale = x.abs().max(1.0);
            assert!((x - y).abs() <= 1e-12 * scale, "case {case}: {x} vs {y}");
        }
    }
}

#[test]
fn zero_input_scan_composes_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let steps = rng.random_range(2..200);
        let rates: Vec<f64> = (0..3).map(|_| rng.random_range(0.001..2.0)).collect();
        let dt: Vec<f64> = (0..steps).map(|_| rng.random_range(0.1..3.0)).collect();
        let h0: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let zeros = vec![0.0; steps * 3];
        let full = affine_scan(&h0, &rates, &dt, &zeros).unwrap();
        let split = rng.random_range(1..steps);
        let first = affine_scan(&h0, &rates, &dt[..split], &zeros[..split * 3]).unwrap();
        let mid = &first[(split - 1) * 3..split * 3];
        let second = affine_scan(mid, &rates, &dt[split..], &zeros[split * 3..]).unwrap();
        assert_eq!(&full[split * 3..], &second[..]);
    }
}

#[test]
fn zero_input_decay_matches_exponential_of_elapsed_time() {
    let dt = [0.5, 1.5, 2.0];
    let out = affine_scan(&[2.0], &[0.3], &dt, &[0.0; 3]).unwrap();
    let expect = 2.0 * (-0.3f64 * 4.0).exp();
    assert!(rel_close(out[2], expect, 1e-14));
}

#[test]
fn non_positive_step_is_rejected() {
    assert!(affine_scan(&[1.0], &[0.1], &[1.0, 0.0], &[0.0, 0.0]).is_err());
    assert!(affine_scan(&[1.0], &[0.1, 0.2], &[1.0], &[0.0]).is_err());
}

#[test]
fn single_step_and_identity() {
    assert_eq!(scan_sequential(&[3.0], &[0.5], &[1.0], 1), vec![2.5]);
    assert_eq!(scan_prefix(&[3.0], &[1.0, 1.0], &[0.0, 0.0], 1), vec![3.0, 3.0]);
}

proptest! {
    #[test]
    fn combine_is_associative(a in prop::array::uniform6(-2.0f64..2.0)) {
        let (x, y, z) = ((a[0], a[1]), (a[2], a[3]), (a[4], a[5]));
        let l = combine(combine(x, y), z);
        let r = combine(x, combine(y, z));
        prop_assert!((l.0 - r.0).abs() < 1e-12 && (l.1 - r.1).abs() < 1e-12);
    }

    #[test]
    fn prefix_equals_sequential(
        steps in 1usize..70,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..steps * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..steps * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = scan_sequential(&[0.3, -0.7], &a, &b, 2);
        let p = scan_prefix(&[0.3, -0.7], &a, &b, 2);
        for (x, y) in s.iter().zip(&p) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}
