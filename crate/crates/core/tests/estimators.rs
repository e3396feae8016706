mod common;

use aisq_core::credit::{synthetic_portfolio, Obligor, Portfolio, SectorModel, SyntheticSpec};
use aisq_core::martingale::moment_estimate;
use aisq_core::quantile::adaptive_mean;
use aisq_core::rng;
use aisq_core::sa::{hessian_estimate, run_sa, tail_gradient, Bridging, LossMap, StepMode, TailField};
use aisq_core::{GaussianFamily, GradientSpec, MeanShiftFamily, Parameter, SaConfig, StepSchedule};
use common::{mean_and_se, normal_sf, weighted_tail};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

fn p(xs: &[f64]) -> Parameter {
    Parameter::from_slice(xs).unwrap()
}

fn first(x: &DVector<f64>) -> f64 {
    x[0]
}

#[test]
fn shifted_sampling_estimates_a_tail_probability() {
    let fam = GaussianFamily::identity(1).unwrap();
    let theta = p(&[2.0]);
    let mut r = rng::from_seed(11);
    let pairs: Vec<(f64, f64)> = (0..200_000)
        .map(|_| {
            let x = fam.sample(&theta, &mut r).unwrap();
            let w = fam.likelihood_ratio(&x, &theta).unwrap();
            (if x[0] > 2.0 { 1.0 } else { 0.0 }, w)
        })
        .collect();
    let est = adaptive_mean(pairs.iter().copied()).unwrap();
    let (_, se) = mean_and_se(pairs.iter().map(|(f, w)| f * w));
    let exact = normal_sf(2.0);
    assert!((est - exact).abs() < 4.0 * se, "{est} vs {exact} (se {se})");
}

#[test]
fn second_moment_estimate_matches_quadrature() {
    let fam = GaussianFamily::identity(1).unwrap();
    let theta = p(&[1.0]);
    let mut r = rng::from_seed(12);
    let draws: Vec<(DVector<f64>, Parameter)> =
        (0..200_000).map(|_| (fam.sample(&theta, &mut r).unwrap(), theta.clone())).collect();
    let ind = |x: &DVector<f64>| if x[0] > 2.0 { 1.0 } else { 0.0 };
    let est = moment_estimate(&draws, &fam, ind, 2.0).unwrap();
    let terms = draws.iter().map(|(x, t)| (fam.likelihood_ratio(x, t).unwrap() * ind(x)).powi(2));
    let (_, se) = mean_and_se(terms);
    let exact = weighted_tail(|_| 1.0, 1.0, 2.0);
    assert!((est - exact).abs() < 4.0 * se, "{est} vs {exact} (se {se})");
}

#[test]
fn hessian_estimate_matches_quadrature() {
    let fam = GaussianFamily::identity(1).unwrap();
    let (t, q) = (0.0, 0.0);
    let mut r = rng::from_seed(13);
    let n = 1_000_000;
    let h = hessian_estimate(&fam, &first, q, &p(&[t]), n, &mut r).unwrap();
    let mut r = rng::from_seed(13);
    let terms = (0..n).map(|_| {
        let x = fam.sample(&p(&[t]), &mut r).unwrap()[0];
        if x > q {
            let w = fam.likelihood_ratio(&DVector::from_element(1, x), &p(&[t])).unwrap();
            w * w * (1.0 + (t - x).powi(2))
        } else {
            0.0
        }
    });
    let (_, se) = mean_and_se(terms);
    let exact = weighted_tail(|x| 1.0 + (t - x).powi(2), t, q);
    assert!((h.matrix[(0, 0)] - exact).abs() < 4.0 * se, "{} vs {exact} (se {se})", h.matrix[(0, 0)]);
}

#[test]
fn mean_tail_gradient_is_the_second_moment_slope() {
    // Under φ_θ the mean of the draw-wise gradient is m'(θ) in one dimension.
    let fam = GaussianFamily::identity(1).unwrap();
    let (t, q) = (1.5, 2.0);
    let theta = p(&[t]);
    let mut r = rng::from_seed(14);
    let g: Vec<f64> = (0..400_000)
        .map(|_| {
            let x = fam.sample(&theta, &mut r).unwrap();
            tail_gradient(&fam, &x, x[0], &theta, q).unwrap()[0]
        })
        .collect();
    let (mean, se) = mean_and_se(g.into_iter());
    let slope = weighted_tail(|x| t - x, t, q);
    assert!((mean - slope).abs() < 4.0 * se, "{mean} vs {slope} (se {se})");
}

#[test]
fn sa_moves_the_mean_towards_the_tail() {
    let fam = GaussianFamily::identity(1).unwrap();
    let spec = GradientSpec::new(1.0, 3.09, Bridging::Log).unwrap();
    let field = TailField::new(&fam, &first, spec);
    let cfg = SaConfig::new(StepSchedule::new(1.0, StepMode::Polyak).unwrap(), p(&[0.0]));
    for seed in 0..3 {
        let run = run_sa(&field, &cfg, 20_000, &mut rng::stream(21, seed)).unwrap();
        let t = run.averaged_theta.as_slice()[0];
        // The second-moment minimizer at 3.09 is about 3.24.
        assert!((t - 3.24).abs() < 0.25, "seed {seed}: θ̄ = {t}");
    }
}

#[test]
fn two_block_spectrum_has_the_closed_form() {
    let (a, b) = (0.8, 0.5);
    let m = SectorModel::two_block(6, a, b, vec![0.8; 6]).unwrap();
    // Block-constant vectors span the top two eigenvalues 1 + 2a ± 3b.
    let expected = (2.0 * (1.0 + 2.0 * a)) / 6.0;
    let got = m.family().reduce(2).unwrap().variance_explained();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    let top = m.family().eigenvalues().max();
    assert!((top - (1.0 + 2.0 * a + 3.0 * b)).abs() < 1e-12);
}

#[test]
fn default_synthetic_sectors_concentrate_in_two_components() {
    let port = synthetic_portfolio(&SyntheticSpec::default(), &mut rng::from_seed(1)).unwrap();
    // Blocks of 7: eigenvalues 1 + 6a ± 7b, the rest 1 − a.
    let (a, b) = (0.813, 0.66);
    let expected = 2.0 * (1.0 + 6.0 * a) / 14.0;
    let got = port.sectors().family().reduce(2).unwrap().variance_explained();
    assert!((got - expected).abs() < 1e-9 && (got - 0.84).abs() < 0.005, "{got}");
    let corr = port.sectors().correlation();
    assert_eq!(corr[(0, 1)], a);
    assert_eq!(corr[(0, 13)], b);
}

fn small_portfolio() -> Portfolio {
    let corr = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]);
    let sectors = SectorModel::new(corr, vec![0.7, 0.9]).unwrap();
    let obligors = vec![
        Obligor { exposure: 1.0, pd: 0.05, sector: 0 },
        Obligor { exposure: 2.0, pd: 0.2, sector: 1 },
        Obligor { exposure: 0.5, pd: 0.01, sector: 0 },
    ];
    Portfolio::new(obligors, sectors).unwrap()
}

#[test]
fn marginal_default_rates_match_probabilities() {
    let port = small_portfolio();
    let fam = port.sectors().family().clone();
    let zero = fam.reference();
    let mut r = rng::from_seed(31);
    let n = 200_000;
    let mut hits = [0usize; 3];
    for _ in 0..n {
        let x = fam.sample(&zero, &mut r).unwrap();
        for (i, h) in hits.iter_mut().enumerate() {
            let eps: f64 = r.sample(StandardNormal);
            if port.defaults(i, &x, eps) {
                *h += 1;
            }
        }
    }
    for (o, &h) in port.obligors().iter().zip(&hits) {
        let rate = h as f64 / n as f64;
        let se = (o.pd * (1.0 - o.pd) / n as f64).sqrt();
        assert!((rate - o.pd).abs() < 4.0 * se, "rate {rate} vs pd {}", o.pd);
    }
}

#[test]
fn weighted_mean_loss_under_a_shift_is_the_expected_loss() {
    let port = small_portfolio();
    let fam = port.sectors().family().clone();
    let theta = p(&[-1.0, -0.5]);
    let mut r = rng::from_seed(32);
    let terms: Vec<f64> = (0..200_000)
        .map(|_| {
            let (y, w) = port.simulate_loss(&theta, &fam, &mut r).unwrap();
            y * w
        })
        .collect();
    let (mean, se) = mean_and_se(terms.into_iter());
    let el = port.expected_loss();
    assert!((mean - el).abs() < 4.0 * se, "{mean} vs {el} (se {se})");
}

#[test]
fn portfolio_loss_map_uses_fresh_noise() {
    let port = small_portfolio();
    let x = DVector::from_vec(vec![-1.0, -1.0]);
    let mut r = rng::from_seed(33);
    let losses: Vec<f64> = (0..200).map(|_| port.loss(&x, &mut r)).collect();
    assert!(losses.iter().any(|&l| l != losses[0]));
    assert!(losses.iter().all(|&l| (0.0..=1.0).contains(&l)));
}
