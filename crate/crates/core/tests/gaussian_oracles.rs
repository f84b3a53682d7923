mod support;

use h3m::{expected_gauss_ll, gmm_bound, gmm_lower_bound, gmm_variational_estep, EtaMatrix, Gaussian, Gmm};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use support::*;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

fn mc_gauss(seed: u64, base: &Gaussian, reduced: &Gaussian, n: usize) -> (f64, f64) {
    let mut r = rng(seed);
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            let y = draw_gaussian(&mut r, base.mean(), base.cov());
            log_normal_pdf(&y, reduced.mean(), reduced.cov())
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[test]
fn standard_normal_self_expectation() {
    let g = Gaussian::univariate(0.0, 1.0).unwrap();
    let v = expected_gauss_ll(&g, &g).unwrap();
    assert!((v - (-HALF_LN_2PI - 0.5)).abs() < 1e-14);
    assert!((v + 1.418939).abs() < 1e-6);
}

#[test]
fn self_expectation_any_dimension() {
    let mut r = rng(3);
    for d in 1..=4 {
        let g = random_gaussian(&mut r, d, 2.0);
        let want = -(d as f64) * HALF_LN_2PI - 0.5 * g.cov().determinant().ln() - d as f64 / 2.0;
        let got = expected_gauss_ll(&g, &g).unwrap();
        assert!((got - want).abs() < 1e-10, "d={d}: {got} vs {want}");
    }
}

#[test]
fn closed_form_agrees_with_explicit_formula() {
    let mut r = rng(4);
    for _ in 0..20 {
        let d = 1 + r.random_range(0..4);
        let (b, q) = (random_gaussian(&mut r, d, 1.5), random_gaussian(&mut r, d, 1.5));
        let want = expected_log_normal(b.mean(), b.cov(), q.mean(), q.cov());
        let got = expected_gauss_ll(&b, &q).unwrap();
        assert!((got - want).abs() < 1e-10 * want.abs().max(1.0));
    }
}

#[test]
fn closed_form_matches_monte_carlo_scalar_case() {
    let b = Gaussian::univariate(1.0, 0.5).unwrap();
    let q = Gaussian::univariate(3.0, 2.0).unwrap();
    let got = expected_gauss_ll(&b, &q).unwrap();
    let (mc, se) = mc_gauss(11, &b, &q, 1_000_000);
    assert!((got - mc).abs() <= 3.0 * se, "{got} vs {mc} +- {se}");
}

#[test]
fn mean_is_stationary_at_base_mean() {
    let mut r = rng(5);
    for _ in 0..10 {
        let d = 1 + r.random_range(0..3);
        let b = random_gaussian(&mut r, d, 1.0);
        let cov = random_spd(&mut r, d);
        let at = |mu: DVector<f64>| expected_gauss_ll(&b, &Gaussian::new(mu, cov.clone()).unwrap()).unwrap();
        let centre = at(b.mean().clone());
        let h = 1e-5;
        for k in 0..d {
            let mut up = b.mean().clone();
            let mut dn = b.mean().clone();
            up[k] += h;
            dn[k] -= h;
            let grad = (at(up) - at(dn)) / (2.0 * h);
            assert!(grad.abs() < 1e-5 * centre.abs().max(1.0), "gradient {grad}");
        }
    }
}

#[test]
fn non_matching_dimensions_error() {
    let a = Gaussian::univariate(0.0, 1.0).unwrap();
    let b = Gaussian::diagonal(DVector::zeros(2), DVector::from_element(2, 1.0)).unwrap();
    assert!(expected_gauss_ll(&a, &b).is_err());
}

fn random_gmm<R: Rng>(r: &mut R, m: usize, d: usize) -> Gmm {
    Gmm::new(random_simplex(r, m), (0..m).map(|_| random_gaussian(r, d, 1.5)).collect()).unwrap()
}

#[test]
fn single_reduced_component_gives_unit_rows() {
    let mut r = rng(6);
    let base = random_gmm(&mut r, 3, 2);
    let reduced = random_gmm(&mut r, 1, 2);
    let eta = gmm_variational_estep(&base, &reduced).unwrap();
    assert!(eta.values.iter().all(|&v| v == 1.0));
}

#[test]
fn equidistant_components_split_evenly() {
    let base = Gmm::single(Gaussian::univariate(0.0, 1.0).unwrap());
    let reduced = Gmm::new(
        vec![0.5, 0.5],
        vec![Gaussian::univariate(-2.0, 1.5).unwrap(), Gaussian::univariate(2.0, 1.5).unwrap()],
    )
    .unwrap();
    let eta = gmm_variational_estep(&base, &reduced).unwrap();
    assert_eq!(eta.get(0, 0), 0.5);
    assert_eq!(eta.get(0, 1), 0.5);
}

#[test]
fn eta_matches_direct_softmax() {
    let mut r = rng(7);
    let base = random_gmm(&mut r, 2, 2);
    let reduced = random_gmm(&mut r, 2, 2);
    let eta = gmm_variational_estep(&base, &reduced).unwrap();
    for (m, gb) in base.components().iter().enumerate() {
        let un: Vec<f64> = reduced
            .components()
            .iter()
            .zip(reduced.weights())
            .map(|(gr, w)| w * expected_log_normal(gb.mean(), gb.cov(), gr.mean(), gr.cov()).exp())
            .collect();
        let z: f64 = un.iter().sum();
        for l in 0..2 {
            assert!((eta.get(m, l) - un[l] / z).abs() < 1e-12);
        }
    }
}

#[test]
fn self_bound_of_single_gaussian() {
    let g = Gmm::single(Gaussian::univariate(0.0, 1.0).unwrap());
    let b = gmm_bound(&g, &g).unwrap();
    assert!((b.value - (-HALF_LN_2PI - 0.5)).abs() < 1e-14);
}

#[test]
fn bound_at_optimum_equals_weighted_log_sum_exp() {
    let mut r = rng(8);
    let base = random_gmm(&mut r, 3, 2);
    let reduced = random_gmm(&mut r, 2, 2);
    let mut want = 0.0;
    for (gb, wb) in base.components().iter().zip(base.weights()) {
        let s: f64 = reduced
            .components()
            .iter()
            .zip(reduced.weights())
            .map(|(gr, w)| w * expected_log_normal(gb.mean(), gb.cov(), gr.mean(), gr.cov()).exp())
            .sum();
        want += wb * s.ln();
    }
    let b = gmm_bound(&base, &reduced).unwrap();
    assert!((b.value - want).abs() < 1e-10 * want.abs());
    let again = gmm_lower_bound(&base, &reduced, &b.eta).unwrap();
    assert!((again - b.value).abs() < 1e-10 * want.abs());
}

#[test]
fn optimal_eta_beats_random_eta() {
    let mut r = rng(9);
    let base = random_gmm(&mut r, 3, 2);
    let reduced = random_gmm(&mut r, 3, 2);
    let best = gmm_bound(&base, &reduced).unwrap().value;
    let uniform = gmm_lower_bound(&base, &reduced, &EtaMatrix::uniform(3, 3)).unwrap();
    assert!(uniform <= best);
    for _ in 0..100 {
        let rows: Vec<Vec<f64>> = (0..3).map(|_| random_simplex(&mut r, 3)).collect();
        let eta = EtaMatrix {
            values: DMatrix::from_fn(3, 3, |m, l| rows[m][l]),
        };
        assert!(gmm_lower_bound(&base, &reduced, &eta).unwrap() <= best + 1e-12 * best.abs());
    }
}

#[test]
fn gmm_bound_below_monte_carlo() {
    let mut r = rng(10);
    for _ in 0..5 {
        let base = random_gmm(&mut r, 2, 2);
        let reduced = random_gmm(&mut r, 3, 2);
        let bound = gmm_bound(&base, &reduced).unwrap().value;
        let n = 100_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let c = draw_index(&mut r, base.weights());
                let g = &base.components()[c];
                emission_density(&reduced, &draw_gaussian(&mut r, g.mean(), g.cov())).ln()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let se = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ((n - 1) as f64 * n as f64)).sqrt();
        assert!(bound <= mean + 3.0 * se, "{bound} vs {mean} +- {se}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eta_rows_sum_to_one(seed in any::<u64>(), mb in 1usize..4, mr in 1usize..4, d in 1usize..4) {
        let mut r = rng(seed);
        let base = random_gmm(&mut r, mb, d);
        let reduced = random_gmm(&mut r, mr, d);
        let eta = gmm_variational_estep(&base, &reduced).unwrap();
        for m in 0..mb {
            let s: f64 = eta.values.row(m).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
