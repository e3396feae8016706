use aisq_core::quantile::{quantile_estimate, tail_probability};
use aisq_core::{EcdfKind, NormalizationSpec, WeightedEcdf, WeightedSample};
use proptest::prelude::*;

fn samples() -> impl Strategy<Value = Vec<WeightedSample>> {
    // Values on a coarse grid so ties occur.
    prop::collection::vec((0i32..30, 0.05f64..3.0), 1..50)
        .prop_map(|v| v.into_iter().map(|(y, w)| WeightedSample::new(y as f64 * 0.5, w)).collect())
}

fn kinds() -> impl Strategy<Value = EcdfKind> {
    prop_oneof![Just(EcdfKind::Renorm), Just(EcdfKind::Left), Just(EcdfKind::Right)]
}

fn nu_for(kind: EcdfKind, n: usize) -> f64 {
    match kind {
        EcdfKind::Renorm => 1.0,
        _ => n as f64,
    }
}

/// The step function evaluated from scratch at `y`.
fn brute_eval(s: &[WeightedSample], kind: EcdfKind, nu: f64, y: f64) -> f64 {
    let total: f64 = s.iter().map(|p| p.w).sum();
    let below: f64 = s.iter().filter(|p| p.y <= y).map(|p| p.w).sum();
    let above: f64 = s.iter().filter(|p| p.y > y).map(|p| p.w).sum();
    match kind {
        EcdfKind::Renorm => below / total / nu,
        EcdfKind::Left => below / nu,
        EcdfKind::Right => 1.0 - above / nu,
    }
}

proptest! {
    #[test]
    fn inverse_is_smallest_value_reaching_the_level(s in samples(), kind in kinds(), alpha in 0.001f64..0.999) {
        let nu = nu_for(kind, s.len());
        let ecdf = WeightedEcdf::new(&s, kind, nu).unwrap();
        let mut ys: Vec<f64> = s.iter().map(|p| p.y).collect();
        ys.sort_by(f64::total_cmp);
        ys.dedup();
        // Tolerance absorbs the different summation order.
        let brute = ys.iter().copied().find(|&y| brute_eval(&s, kind, nu, y) >= alpha - 1e-12);
        match ecdf.generalized_inverse(alpha) {
            Ok(q) => {
                prop_assert!(ecdf.eval(q) >= alpha);
                if let Some(i) = ys.iter().position(|&y| y == q) {
                    if i > 0 {
                        prop_assert!(ecdf.eval(ys[i - 1]) < alpha);
                    }
                }
                let b = brute.unwrap();
                prop_assert!(b == q || (brute_eval(&s, kind, nu, b) - alpha).abs() < 1e-9);
            }
            Err(_) => prop_assert!(ecdf.eval(f64::INFINITY) < alpha),
        }
    }

    #[test]
    fn eval_matches_direct_sum(s in samples(), kind in kinds(), y in -1.0f64..16.0) {
        let nu = nu_for(kind, s.len());
        let ecdf = WeightedEcdf::new(&s, kind, nu).unwrap();
        prop_assert!((ecdf.eval(y) - brute_eval(&s, kind, nu, y)).abs() < 1e-9);
    }

    #[test]
    fn inverse_is_monotone_in_level(s in samples(), kind in kinds(), a in 0.001f64..0.999, b in 0.001f64..0.999) {
        let ecdf = WeightedEcdf::new(&s, kind, nu_for(kind, s.len())).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        if let (Ok(ql), Ok(qh)) = (ecdf.generalized_inverse(lo), ecdf.generalized_inverse(hi)) {
            prop_assert!(ql <= qh);
        }
    }

    #[test]
    fn unit_weights_make_the_kinds_agree(ys in prop::collection::vec(0i32..30, 1..50), alpha in 0.001f64..0.999) {
        let s: Vec<WeightedSample> = ys.iter().map(|&y| WeightedSample::unit(y as f64)).collect();
        let spec = NormalizationSpec::identity();
        let right = quantile_estimate(&s, alpha, EcdfKind::Right, &spec).unwrap();
        prop_assert_eq!(quantile_estimate(&s, alpha, EcdfKind::Renorm, &spec).unwrap(), right);
        prop_assert_eq!(quantile_estimate(&s, alpha, EcdfKind::Left, &spec).unwrap(), right);
    }

    #[test]
    fn unit_weight_tail_probability_is_a_count(ys in prop::collection::vec(0i32..30, 1..50), lambda in -1.0f64..16.0) {
        let s: Vec<WeightedSample> = ys.iter().map(|&y| WeightedSample::unit(y as f64 * 0.5)).collect();
        let count = s.iter().filter(|p| p.y <= lambda).count() as f64 / s.len() as f64;
        for kind in [EcdfKind::Renorm, EcdfKind::Left, EcdfKind::Right] {
            let f = tail_probability(&s, lambda, kind, &NormalizationSpec::identity()).unwrap();
            prop_assert!((f - count).abs() < 1e-12);
        }
    }
}
