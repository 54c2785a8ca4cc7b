use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmbench_core::click_counting::{exact_click_distribution, SourceModel, SourceVariant, SymmetricMomentVector};
use tmbench_core::moments_witness::{
    build_full_matrix_oracle, build_reduced_matrix, min_eigenpair, multiplicities, symmetric_min_eigenpair,
};

fn nonincreasing_moments(rng: &mut ChaCha8Rng, order: usize) -> SymmetricMomentVector {
    let mut g: Vec<f64> = (0..order).map(|_| rng.random::<f64>()).collect();
    g.sort_by(|a, b| b.total_cmp(a));
    g.insert(0, 1.0);
    SymmetricMomentVector::from_values(g).unwrap()
}

#[test]
fn full_spectrum_is_reduced_spectrum_plus_null_space() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 1..=3 {
        for d in [2usize, 4] {
            for _ in 0..200 {
                let g = nonincreasing_moments(&mut rng, k * d);
                let full = build_full_matrix_oracle(&g, k, d).unwrap();
                let reduced = build_reduced_matrix(&g, k, d).unwrap();
                let (lf, _) = symmetric_min_eigenpair(&full).unwrap();
                let (lr, _) = min_eigenpair(&reduced).unwrap();
                let expected = if full.nrows() > reduced.dimension() { lr.min(0.0) } else { lr };
                assert!((lf - expected).abs() <= 1e-9, "K={k} D={d}: {lf} vs {lr}");
                // Nonzero eigenvalues agree as multisets.
                let mut a: Vec<f64> = full.clone().symmetric_eigenvalues().iter().copied().collect();
                let mut b: Vec<f64> = reduced.entries().clone().symmetric_eigenvalues().iter().copied().collect();
                let scale = full.norm();
                a.retain(|v| v.abs() > 1e-9 * scale);
                b.retain(|v| v.abs() > 1e-9 * scale);
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                assert_eq!(a.len(), b.len());
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() <= 1e-9 * scale);
                }
            }
        }
    }
}

#[test]
fn coherent_mixtures_are_positive_semidefinite() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..40 {
        let k = rng.random_range(1..=64usize);
        let detectors = 2 * k;
        let parts = rng.random_range(1..=5usize);
        let mut dist = vec![0.0; detectors + 1];
        let weights: Vec<f64> = (0..parts).map(|_| rng.random::<f64>() + 0.01).collect();
        let total: f64 = weights.iter().sum();
        for w in weights {
            let mean = rng.random_range(0.0..6.0);
            let eta = rng.random_range(0.2..=1.0);
            let model = SourceModel::new(SourceVariant::Coherent { mean_photons: mean }, eta, 0.0).unwrap();
            for (acc, p) in dist.iter_mut().zip(exact_click_distribution(&model, detectors).unwrap()) {
                *acc += w / total * p;
            }
        }
        let g = SymmetricMomentVector::from_distribution(&dist, detectors, 0).unwrap();
        let (lambda, _) = min_eigenpair(&build_reduced_matrix(&g, k, 2).unwrap()).unwrap();
        assert!(lambda >= -1e-10, "K={k}: {lambda}");
    }
}

#[test]
fn fock_negativity_grows_with_modes() {
    let modes = 8;
    let d = 2;
    for photons in 1..=4 {
        let dist = exact_click_distribution(&SourceModel::fock(photons), modes * d).unwrap();
        let g = SymmetricMomentVector::from_distribution(&dist, modes * d, 0).unwrap();
        let mut previous = f64::INFINITY;
        for k in 1..=modes {
            let (lambda, _) = min_eigenpair(&build_reduced_matrix(&g, k, d).unwrap()).unwrap();
            assert!(lambda <= previous + 1e-12, "N={photons} K={k}: {lambda} > {previous}");
            previous = lambda;
        }
        assert!(previous < 0.0);
    }
}

proptest! {
    #[test]
    fn multiplicities_sum_to_full_dimension(k in 1usize..=40, half in 1usize..=4) {
        let d = 2 * half;
        let m = multiplicities(k, d).unwrap();
        let full = num_bigint::BigUint::from(half + 1).pow(k as u32);
        prop_assert_eq!(m.total(), full);
        let v = m.values();
        prop_assert!(v.iter().eq(v.iter().rev()));
    }

    #[test]
    fn two_bin_multiplicities_are_binomial(k in 1usize..=64) {
        let m = multiplicities(k, 2).unwrap();
        let mut c = num_bigint::BigUint::from(1u8);
        for (j, v) in m.values().iter().enumerate() {
            prop_assert_eq!(v, &c);
            c = c * (k - j) / (j + 1);
        }
    }

    #[test]
    fn eigenpairs_satisfy_residual_bound(seed in any::<u64>(), k in 1usize..=32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = nonincreasing_moments(&mut rng, 2 * k);
        let matrix = build_reduced_matrix(&g, k, 2).unwrap();
        let (lambda, v) = min_eigenpair(&matrix).unwrap();
        let a = matrix.entries();
        let residual = (a * &v - &v * lambda).norm();
        prop_assert!(residual <= 1e-8 * a.norm());
        prop_assert!((v.norm() - 1.0).abs() < 1e-12);
    }
}
