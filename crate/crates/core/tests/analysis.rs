use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use tmbench_core::analysis::{
    bootstrap_covariance, herald_condition, moment_covariance, multinomial_resample, relative_spread, witness,
};
use tmbench_core::click_counting::{
    exact_click_distribution, moments_from_histogram, Arm, ClickHistogram, JointClickHistogram, SourceModel,
    SourceVariant,
};
use tmbench_core::simulator::{simulate_trials, ExperimentConfig};

fn random_model(rng: &mut ChaCha8Rng) -> SourceModel {
    let variant = match rng.random_range(0..3) {
        0 => SourceVariant::Fock {
            photons: rng.random_range(1..12),
        },
        1 => SourceVariant::Coherent {
            mean_photons: rng.random_range(0.2..8.0),
        },
        _ => SourceVariant::Thermal {
            mean_photons: rng.random_range(0.2..8.0),
            schmidt_modes: rng.random_range(1.0..20.0),
        },
    };
    SourceModel::new(variant, rng.random_range(0.3..=1.0), rng.random_range(0.0..0.01)).unwrap()
}

#[test]
fn analytic_covariance_matches_bootstrap() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 16;
    let order = 8;
    for i in 0..20 {
        let model = random_model(&mut rng);
        let p = exact_click_distribution(&model, d).unwrap();
        let hist = ClickHistogram::from_counts(d, multinomial_resample(&p, 100_000, &mut rng)).unwrap();
        let analytic = moment_covariance(&hist, order).unwrap();
        let boot = bootstrap_covariance(&hist, order, 4_000, i).unwrap();
        let rel = (&analytic - &boot).norm() / analytic.norm();
        assert!(rel <= 0.10, "{model:?}: relative Frobenius distance {rel}");
    }
}

#[test]
fn herald_slices_partition_the_joint_histogram() {
    let config = ExperimentConfig {
        network_bins: 32,
        trials: 50_000,
        mean_pairs: 2.0,
        ..Default::default()
    };
    let (joint, _) = simulate_trials(&config).unwrap();
    for arm in [Arm::A, Arm::B] {
        let (herald_d, marginal) = match arm {
            Arm::A => (joint.detector_count_a(), joint.marginal_b()),
            Arm::B => (joint.detector_count_b(), joint.marginal_a()),
        };
        let mut rows = vec![vec![0u64; marginal.counts().len()]; herald_d + 1];
        let mut sum = vec![0u64; marginal.counts().len()];
        for (n, row) in rows.iter_mut().enumerate() {
            if let Ok(slice) = herald_condition(&joint, arm, n) {
                assert_eq!(slice.low_statistics, slice.histogram.trials() < 100);
                *row = slice.histogram.counts().to_vec();
            }
            for (s, c) in sum.iter_mut().zip(row.iter()) {
                *s += c;
            }
        }
        assert_eq!(sum, marginal.counts());
        let rebuilt = match arm {
            Arm::A => JointClickHistogram::from_rows(&rows).unwrap(),
            Arm::B => {
                let t: Vec<Vec<u64>> = (0..rows[0].len()).map(|m| rows.iter().map(|r| r[m]).collect()).collect();
                JointClickHistogram::from_rows(&t).unwrap()
            }
        };
        assert_eq!(rebuilt, joint);
    }
}

#[test]
fn significance_grows_with_square_root_of_trials() {
    let model = SourceModel::new(SourceVariant::Fock { photons: 3 }, 0.6, 1e-3).unwrap();
    let (k, d) = (8, 2);
    let p = exact_click_distribution(&model, k * d).unwrap();
    let mut sigmas = Vec::new();
    for trials in [10_000u64, 40_000, 160_000] {
        let counts: Vec<u64> = p.iter().map(|x| (x * trials as f64).round() as u64).collect();
        let hist = ClickHistogram::from_counts(k * d, counts).unwrap();
        let g = moments_from_histogram(&hist, k * d).unwrap();
        let (w, _) = witness(&g, k, d, 0.0).unwrap();
        assert!(w.min_eigenvalue < 0.0);
        sigmas.push(w.significance.value().unwrap());
    }
    for pair in sigmas.windows(2) {
        let ratio = pair[1] / pair[0];
        assert!((ratio - 2.0).abs() <= 0.05 * 2.0, "{sigmas:?}");
    }
}

#[test]
fn shot_noise_spread_follows_inverse_square_root() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for mean in [100.0, 1_000.0, 10_000.0] {
        let poisson = Poisson::new(mean).unwrap();
        let counts: Vec<u64> = (0..128).map(|_| poisson.sample(&mut rng) as u64).collect();
        let eps = relative_spread(&counts).unwrap();
        let expected = 2.0 / f64::sqrt(mean);
        assert!((eps - expected).abs() <= 0.15 * expected, "mean {mean}: {eps} vs {expected}");
    }
}
