use archsearch_core::analysis::*;
use archsearch_core::trainer::{curve_csv, CurvePoint};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn law(a: f64, k: f64, cs: &[f64]) -> Vec<(f64, f64)> {
    cs.iter().map(|&c| (c, a * c.powf(-k))).collect()
}

fn grid(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 * 10.0).collect()
}

#[test]
fn noiseless_power_law_is_recovered_exactly() {
    for method in [FitMethod::default(), FitMethod::LeastSquares] {
        let f = fit_power_law(&law(2.0, 0.5, &grid(20)), method).unwrap();
        assert!((f.a - 2.0).abs() < 1e-9 && (f.k - 0.5).abs() < 1e-9, "{f:?}");
        assert!(f.residual < 1e-12);
    }
}

#[test]
fn noisy_power_law_exponent_is_close() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let pts: Vec<(f64, f64)> =
            law(2.0, 0.5, &grid(30)).into_iter().map(|(c, l)| (c, l * (1.0 + rng.random_range(-0.01..0.01)))).collect();
        let f = fit_power_law(&pts, FitMethod::default()).unwrap();
        assert!((f.k - 0.5).abs() < 0.05, "{}", f.k);
    }
}

#[test]
fn huber_resists_an_outlier() {
    let mut pts = law(3.0, 0.3, &grid(12));
    pts[0].1 *= 3.0;
    let robust = fit_power_law(&pts, FitMethod::default()).unwrap();
    let plain = fit_power_law(&pts, FitMethod::LeastSquares).unwrap();
    assert!((robust.k - 0.3).abs() < (plain.k - 0.3).abs());
}

#[test]
fn fits_reject_bad_input() {
    assert!(matches!(fit_power_law(&[(1.0, 1.0), (2.0, 0.5)], FitMethod::default()), Err(AnalysisError::InvalidData(_))));
    assert!(matches!(
        fit_power_law(&[(1.0, 1.0), (2.0, -0.5), (3.0, 0.2)], FitMethod::default()),
        Err(AnalysisError::InvalidData(_))
    ));
    // Rising loss has a negative exponent, which is flagged.
    assert!(matches!(fit_power_law(&law(1.0, -0.5, &grid(5)), FitMethod::default()), Err(AnalysisError::FitFailed(_))));
}

#[test]
fn half_compute_shift_is_a_twofold_speedup() {
    let base = LossCurve::new("base", law(5.0, 0.3, &grid(16))).unwrap();
    let treat = LossCurve::new("treat", base.points.iter().map(|&(c, l)| (c / 2.0, l)).collect()).unwrap();
    assert_eq!(speedup_factor(&base, &treat).unwrap(), 2.0);
    assert_eq!(speedup_factor(&base, &base).unwrap(), 1.0);
}

#[test]
fn unreached_target_reports_best_loss() {
    let base = LossCurve::new("base", vec![(1.0, 3.0), (2.0, 2.0)]).unwrap();
    let slow = LossCurve::new("slow", vec![(1.0, 3.5), (2.0, 2.5), (3.0, 2.4)]).unwrap();
    assert_eq!(speedup_factor(&base, &slow), Err(AnalysisError::NotReached { target: 2.0, best_loss: 2.4 }));
}

#[test]
fn reference_curves_reproduce_their_speedups() {
    let refs = reference_curves();
    assert_eq!(refs.groups.len(), 3);
    let mut checked = 0;
    for g in &refs.groups {
        let base = g.baseline.curve();
        assert!((base.final_loss() - g.baseline.perplexity.ln()).abs() < 1e-9);
        for t in &g.treatments {
            let want = t.speedup.unwrap();
            match speedup_factor(&base, &t.curve()) {
                Ok(s) => {
                    assert!((s - want).abs() < 1e-6, "{} {}: {s} vs {want}", g.name, t.label);
                    checked += 1;
                }
                Err(AnalysisError::NotReached { .. }) => assert!(want < 1.0, "{} {}", g.name, t.label),
                Err(e) => panic!("{e}"),
            }
        }
    }
    assert_eq!(checked, 14);
    let primer = refs.groups.iter().find(|g| g.name == "t2t_tpuv2").unwrap();
    let p = primer.treatments.iter().find(|t| t.label == "Primer").unwrap();
    assert!((speedup_factor(&primer.baseline.curve(), &p.curve()).unwrap() - 2.12).abs() < 1e-6);
}

#[test]
fn savings_plug_in_example() {
    let fit = |a: f64, k: f64| PowerLawFit { a, k, residual: 0.0, method: FitMethod::LeastSquares };
    let s = savings_from_offset(&fit(4.0, 1.0), &fit(2.0, 1.0), 0.1).unwrap();
    assert!((s.b - 2.0).abs() < 1e-12);
    for l in [0.5, 0.1, 0.01] {
        let cb = s.baseline_compute(l);
        assert!((s.savings_at(l) - cb / 2.0).abs() < 1e-9 * cb);
        assert!((s.loss_at_savings(s.savings_at(l)) - l).abs() < 1e-12);
    }
    let same = savings_from_offset(&fit(4.0, 1.0), &fit(4.0, 1.0), 0.1).unwrap();
    assert_eq!(same.b, 1.0);
    assert!([0.5, 0.1].iter().all(|&l| same.savings_at(l) == 0.0));
    assert!(matches!(
        savings_from_offset(&fit(4.0, 0.5), &fit(2.0, 0.7), 0.1),
        Err(AnalysisError::AssumptionViolated { .. })
    ));
}

#[test]
fn savings_round_trip_through_fits() {
    let (a1, k, b): (f64, f64, f64) = (7.0, 0.35, 3.0);
    // Treatment needs c/b to reach the loss the baseline reaches at c.
    let a0 = a1 * b.powf(-k);
    let cs = grid(25);
    let base = fit_power_law(&law(a1, k, &cs), FitMethod::default()).unwrap();
    let treat = fit_power_law(&law(a0, k, &cs), FitMethod::default()).unwrap();
    let s = savings_from_offset(&base, &treat, 0.1).unwrap();
    assert!((s.b - b).abs() / b < 1e-6);
    for &(_, l) in &law(a1, k, &cs) {
        let (c1, c0) = (s.baseline_compute(l), s.treatment_compute(l));
        assert!((c0 * s.b - c1).abs() / c1 < 1e-6);
    }
}

#[test]
fn pareto_examples() {
    let p = |label: &str, seconds: f64, loss: f64| ParetoPoint { label: label.into(), seconds, loss };
    assert_eq!(pareto_front(&[p("a", 1.0, 1.0)]), vec![p("a", 1.0, 1.0)]);
    let both = pareto_front(&[p("fast", 1.0, 2.0), p("good", 2.0, 1.0)]);
    assert_eq!(both.len(), 2);
    let front = pareto_front(&[p("fast", 1.0, 2.0), p("good", 2.0, 1.0), p("bad", 2.5, 2.5)]);
    assert!(front.iter().all(|x| x.label != "bad"));
}

#[test]
fn curves_load_from_trainer_csv() {
    let pts = [(0u64, 4.0), (100, 3.0), (200, 2.5)]
        .map(|(step, l)| CurvePoint { step, wall_seconds: step as f64 / 10.0, train_loss: l, valid_loss: l });
    let c = LossCurve::from_csv("x", &curve_csv(&pts, true), ComputeAxis::Step).unwrap();
    assert_eq!(c.points, vec![(100.0, 3.0), (200.0, 2.5)]);
    let t = LossCurve::from_csv("x", &curve_csv(&pts, true), ComputeAxis::WallSeconds).unwrap();
    assert_eq!(t.points, vec![(10.0, 3.0), (20.0, 2.5)]);
    assert!(LossCurve::new("x", vec![(2.0, 1.0), (1.0, 0.5)]).is_err());
}

proptest! {
    #[test]
    fn fit_is_scale_equivariant(a in 0.5f64..10.0, k in 0.05f64..1.5, beta in 0.01f64..100.0, noise in prop::collection::vec(-0.02f64..0.02, 12)) {
        let pts: Vec<(f64, f64)> = law(a, k, &grid(12)).into_iter().zip(&noise).map(|((c, l), e)| (c, l * (1.0 + e))).collect();
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(c, l)| (c * beta, l)).collect();
        let f = fit_power_law(&pts, FitMethod::default()).unwrap();
        let g = fit_power_law(&scaled, FitMethod::default()).unwrap();
        prop_assert!((g.k - f.k).abs() < 1e-6);
        prop_assert!((g.a / (f.a * beta.powf(f.k)) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn speedup_is_unit_free(shift in 0.3f64..3.0, beta in 0.001f64..1000.0, k in 0.1f64..1.0) {
        let base = LossCurve::new("b", law(4.0, k, &grid(20))).unwrap();
        let treat = LossCurve::new("t", base.points.iter().map(|&(c, l)| (c / shift, l * 0.999)).collect()).unwrap();
        let plain = speedup_factor(&base, &treat);
        let scaled = speedup_factor(&base.rescaled(beta), &treat.rescaled(beta));
        match (plain, scaled) {
            (Ok(x), Ok(y)) => prop_assert!((x - y).abs() < 1e-9 * x),
            (Err(_), Err(_)) => {}
            (x, y) => prop_assert!(false, "{x:?} vs {y:?}"),
        }
    }

    #[test]
    fn pareto_matches_brute_force(pts in prop::collection::vec((0u8..20, 0u8..20), 1..30)) {
        let points: Vec<ParetoPoint> = pts.iter().enumerate()
            .map(|(i, &(s, l))| ParetoPoint { label: i.to_string(), seconds: f64::from(s), loss: f64::from(l) })
            .collect();
        let mut want: Vec<String> = points.iter()
            .filter(|p| !points.iter().any(|q| dominates(q, p)))
            .map(|p| p.label.clone())
            .collect();
        let mut got: Vec<String> = pareto_front(&points).into_iter().map(|p| p.label).collect();
        want.sort();
        got.sort();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn frontier_lies_below_every_point(pts in prop::collection::vec((1.0f64..1000.0, 0.1f64..10.0), 1..40)) {
        let hull = lower_frontier(&pts);
        prop_assert!(!hull.is_empty());
        for w in hull.windows(2) {
            prop_assert!(w[0].0 < w[1].0);
            for &(c, l) in &pts {
                if c >= w[0].0 && c <= w[1].0 {
                    let t = (c.ln() - w[0].0.ln()) / (w[1].0.ln() - w[0].0.ln());
                    let line = w[0].1.ln() + t * (w[1].1.ln() - w[0].1.ln());
                    prop_assert!(l.ln() >= line - 1e-9);
                }
            }
        }
    }
}
