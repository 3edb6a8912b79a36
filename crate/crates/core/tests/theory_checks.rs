//! Fisher trace, KL expansion, pullback identity and simplex minimizer.

use dmmia_core::data::synth_digits;
use dmmia_core::models::{Classifier, ClassifierSpec};
use dmmia_core::numerics::{Rng, Tensor};
use dmmia_core::theory::{self, PerturbationProbe};

fn setup() -> (Classifier, Tensor) {
    let clf = Classifier::new(&ClassifierSpec::target(5), &mut Rng::new(8)).unwrap();
    let digits = synth_digits(&mut Rng::new(9), 4, 5).unwrap();
    (clf, digits.flat_images())
}

#[test]
fn monte_carlo_trace_within_two_percent() {
    for p in [vec![0.1; 10], vec![0.5, 0.25, 0.25], vec![0.05, 0.15, 0.3, 0.5]] {
        let exact = theory::fisher_trace_softmax(&p).unwrap();
        let enumerated = theory::fisher_trace_enumerated(&p).unwrap();
        assert!((exact - enumerated).abs() <= 1e-12 * exact);
        let mc = theory::fisher_trace_mc(&p, 1_000_000, &mut Rng::new(1)).unwrap();
        assert!((mc - exact).abs() <= 0.02 * exact, "{mc} vs {exact}");
    }
}

#[test]
fn pullback_identity_at_random_probes() {
    let (clf, xs) = setup();
    let mut rng = Rng::new(10);
    for i in 0..20 {
        let x = xs.select_rows(&[i]).unwrap();
        let probe = PerturbationProbe::random(&x, 1e-3, &mut rng).unwrap();
        let (lhs, rhs) = theory::pullback_identity_check(&clf, &probe).unwrap();
        assert!((lhs - rhs).abs() <= 1e-8 * lhs.abs().max(1.0), "probe {i}: {lhs} vs {rhs}");

        let doubled = probe.scaled_direction(2.0);
        let (l2, r2) = theory::pullback_identity_along(&clf, &x, &doubled).unwrap();
        assert!((l2 - 4.0 * lhs).abs() <= 1e-10 * l2.max(1e-300));
        assert!((r2 - 4.0 * rhs).abs() <= 1e-10 * r2.max(1e-300));
    }
}

#[test]
fn null_space_direction_gives_zero() {
    let (clf, xs) = setup();
    let x = xs.select_rows(&[3]).unwrap();
    let mut r = Rng::new(11);
    let v: Vec<f64> = (0..x.numel()).map(|_| r.normal()).collect();
    let full = theory::pullback_identity_along(&clf, &x, &v).unwrap();
    let null = theory::jacobian_null_direction(&clf, &x, &v).unwrap();
    let (lhs, rhs) = theory::pullback_identity_along(&clf, &x, &null).unwrap();
    assert!(lhs.abs() <= 1e-20 * full.0.max(1.0) + 1e-24, "{lhs}");
    assert!(rhs.abs() <= 1e-20 * full.1.max(1.0) + 1e-24, "{rhs}");
}

#[test]
fn kl_gap_shrinks_with_scale() {
    let (clf, xs) = setup();
    let mut rng = Rng::new(12);
    for i in 0..20 {
        let x = xs.select_rows(&[i]).unwrap();
        let base = PerturbationProbe::random(&x, 1e-2, &mut rng).unwrap();
        let gaps: Vec<f64> = [1e-2, 5e-3, 2.5e-3]
            .iter()
            .map(|&e| theory::kl_taylor_probe(&clf, &base.with_eps(e).unwrap()).unwrap().relative_gap())
            .collect();
        for w in gaps.windows(2) {
            assert!(w[1] <= 0.75 * w[0], "probe {i}: gaps {gaps:?}");
        }
    }
}

#[test]
fn simplex_minimizer_is_uniform() {
    for k in [2usize, 5, 10] {
        for start in 0..3 {
            let p = theory::simplex_min_check(k, &mut Rng::derive(k as u64, start)).unwrap();
            let u = 1.0 / k as f64;
            assert!(p.iter().all(|v| (v - u).abs() <= 1e-6), "K={k}: {p:?}");
            let obj: f64 = p.iter().map(|v| 1.0 / v).sum();
            assert!((obj - (k * k) as f64).abs() <= 1e-6 * (k * k) as f64);
        }
    }
}
