use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tmbench_core::analysis::multinomial_resample;
use tmbench_core::click_counting::{
    exact_click_distribution, exact_moments, moments_from_histogram, oracle, ClickHistogram, SourceModel,
    SourceVariant, SymmetricMomentVector,
};

fn variant() -> impl Strategy<Value = SourceVariant> {
    prop_oneof![
        (0u32..40).prop_map(|photons| SourceVariant::Fock { photons }),
        (0.0f64..20.0).prop_map(|mean_photons| SourceVariant::Coherent { mean_photons }),
        (0.0f64..20.0, 0.5f64..50.0).prop_map(|(mean_photons, schmidt_modes)| SourceVariant::Thermal {
            mean_photons,
            schmidt_modes
        }),
    ]
}

fn model() -> impl Strategy<Value = SourceModel> {
    (variant(), 0.0f64..=1.0, 0.0f64..0.05)
        .prop_map(|(v, eta, bg)| SourceModel::new(v, eta, bg).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn distributions_are_complete(m in model(), d in 1usize..=128) {
        let dist = exact_click_distribution(&m, d).unwrap();
        let total: f64 = dist.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12, "sum {}", total);
        prop_assert!(dist.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn histogram_moments_are_nonincreasing(
        counts in prop::collection::vec(0u64..1000, 2..40),
    ) {
        prop_assume!(counts.iter().any(|&c| c > 0));
        let d = counts.len() - 1;
        let hist = ClickHistogram::from_counts(d, counts).unwrap();
        let g = moments_from_histogram(&hist, d).unwrap();
        for w in g.values().windows(2) {
            prop_assert!(w[0] >= w[1] - 1e-15 && w[1] >= 0.0, "{:?}", g.values());
        }
    }
}

#[test]
fn coherent_moments_follow_closed_form() {
    for &(mean, eta, d) in &[(0.3, 1.0, 8usize), (2.0, 0.7, 32), (15.0, 0.9, 128), (40.0, 0.5, 64)] {
        let m = SourceModel::new(SourceVariant::Coherent { mean_photons: mean }, eta, 0.0).unwrap();
        let dist = exact_click_distribution(&m, d).unwrap();
        let g = SymmetricMomentVector::from_distribution(&dist, d, 0).unwrap();
        let p = 1.0 - (-eta * mean / d as f64).exp();
        for (order, &v) in g.values().iter().enumerate() {
            assert!((v - p.powi(order as i32)).abs() <= 1e-12, "mean {mean} D {d} m {order}");
        }
    }
}

#[test]
fn exact_moments_match_moments_of_exact_distribution() {
    let m = SourceModel::new(
        SourceVariant::Thermal {
            mean_photons: 3.0,
            schmidt_modes: 2.5,
        },
        0.8,
        1e-3,
    )
    .unwrap();
    for d in [4usize, 16, 128] {
        let direct = exact_moments(&m, d, d).unwrap();
        let dist = exact_click_distribution(&m, d).unwrap();
        let via = SymmetricMomentVector::from_distribution(&dist, d, 0).unwrap();
        for (a, b) in direct.iter().zip(via.values()) {
            assert!((a - b).abs() <= 1e-12, "D {d}");
        }
    }
}

#[test]
fn thermal_distribution_matches_negative_binomial_mixture() {
    let m = SourceModel::new(
        SourceVariant::Thermal {
            mean_photons: 1.5,
            schmidt_modes: 10.0,
        },
        0.7,
        1e-4,
    )
    .unwrap();
    for d in [8usize, 64, 128] {
        let exact = exact_click_distribution(&m, d).unwrap();
        let reference = oracle::thermal_mixture(1.5, 10.0, 0.7, 1e-4, d);
        for (a, b) in exact.iter().zip(&reference) {
            assert!((a - b).abs() <= 1e-12, "D {d}");
        }
    }
}

#[test]
fn fock_states_approach_photoelectric_limit() {
    let photons = 5u32;
    let mut previous = f64::INFINITY;
    for d in [8usize, 32, 128] {
        let dist = exact_click_distribution(&SourceModel::fock(photons), d).unwrap();
        let tv = 1.0 - dist[photons as usize];
        assert!(tv < previous, "D {d}: distance {tv} did not decrease from {previous}");
        previous = tv;
    }
    assert!(previous < 0.1);
}

#[test]
fn estimator_is_consistent_with_sampling_error() {
    let m = SourceModel::new(
        SourceVariant::Thermal {
            mean_photons: 2.0,
            schmidt_modes: 4.0,
        },
        0.8,
        1e-3,
    )
    .unwrap();
    let d = 16;
    let trials = 20_000;
    let dist = exact_click_distribution(&m, d).unwrap();
    let truth = exact_moments(&m, d, d).unwrap();
    let expected = SymmetricMomentVector::from_distribution(&dist, d, trials).unwrap();
    let sigma: Vec<f64> = expected.covariance().diagonal().iter().map(|v| v.sqrt()).collect();
    let seeds = 200;
    let mut within = 0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts = multinomial_resample(&dist, trials, &mut rng);
        let hist = ClickHistogram::from_counts(d, counts).unwrap();
        let g = moments_from_histogram(&hist, d).unwrap();
        let ok = (1..=d).all(|k| sigma[k] == 0.0 || (g.get(k) - truth[k]).abs() <= 5.0 * sigma[k]);
        within += ok as usize;
    }
    assert!(within * 100 >= 99 * seeds as usize, "{within}/{seeds} seeds within 5σ");
}
