use num_rational::BigRational;
use proptest::prelude::*;
use tmbench_core::ideal_theory::oracle::ideal_correlation_oracle;
use tmbench_core::ideal_theory::{
    ideal_correlation, ideal_correlation_exact, occupation_patterns, output_probability, FockSplitConfig, MultiIndex,
};

fn indices(modes: usize, max: u32) -> Vec<MultiIndex> {
    let mut out = vec![Vec::new()];
    for _ in 0..modes {
        out = out
            .into_iter()
            .flat_map(|p: Vec<u32>| {
                (0..=max).map(move |v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    out.into_iter().map(MultiIndex).collect()
}

#[test]
fn probabilities_are_normalized() {
    for n in 0..=8 {
        for m in 1..=5 {
            let cfg = FockSplitConfig::new(n, m).unwrap();
            let total: f64 = occupation_patterns(&cfg)
                .iter()
                .map(|p| output_probability(&cfg, p).unwrap())
                .sum();
            assert!((total - 1.0).abs() <= 1e-12, "N={n} M={m}: {total}");
        }
    }
}

#[test]
fn closed_form_matches_enumeration_in_relative_error() {
    for n in 0..=6 {
        for m in 1..=4 {
            let cfg = FockSplitConfig::new(n, m).unwrap();
            for idx in indices(m as usize, n).into_iter().filter(|i| i.total_order() <= n as u64) {
                let closed = ideal_correlation(&cfg, &idx).unwrap();
                let brute = ideal_correlation_oracle(&cfg, &idx).unwrap();
                assert!((closed - brute).abs() <= 1e-12 * brute.abs(), "N={n} M={m} {idx:?}");
            }
        }
    }
}

#[test]
fn correlations_vanish_beyond_photon_number() {
    for n in 0..=5 {
        let cfg = FockSplitConfig::new(n, 3).unwrap();
        for idx in indices(3, n + 2).into_iter().filter(|i| i.total_order() > n as u64) {
            assert_eq!(ideal_correlation(&cfg, &idx).unwrap(), 0.0);
            assert_eq!(ideal_correlation_oracle(&cfg, &idx).unwrap(), 0.0);
        }
    }
}

#[test]
fn factorial_moment_recursion_is_exact() {
    for n in 1..=10u32 {
        for m in 1..=6u32 {
            let cfg = FockSplitConfig::new(n, m).unwrap();
            let mut idx = vec![0u32; m as usize];
            let mut previous = ideal_correlation_exact(&cfg, &MultiIndex(idx.clone())).unwrap();
            for k in 1..=n {
                idx[(k as usize - 1) % m as usize] += 1;
                let current = ideal_correlation_exact(&cfg, &MultiIndex(idx.clone())).unwrap();
                let factor = BigRational::new(((n - k + 1) as i64).into(), (m as i64).into());
                assert_eq!(current, previous * factor, "N={n} M={m} k={k}");
                previous = current;
            }
        }
    }
}

proptest! {
    #[test]
    fn correlation_is_permutation_invariant(
        n in 0u32..=30,
        entries in prop::collection::vec(0u32..6, 1..6),
        seed in any::<u64>(),
    ) {
        let cfg = FockSplitConfig::new(n, entries.len() as u32).unwrap();
        let mut shuffled = entries.clone();
        // deterministic permutation from the seed
        let len = shuffled.len();
        for i in (1..len).rev() {
            let j = (seed.rotate_left(i as u32) % (i as u64 + 1)) as usize;
            shuffled.swap(i, j);
        }
        let a = ideal_correlation(&cfg, &MultiIndex(entries)).unwrap();
        let b = ideal_correlation(&cfg, &MultiIndex(shuffled)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn probabilities_lie_in_unit_interval(n in 0u32..=7, m in 1u32..=4) {
        let cfg = FockSplitConfig::new(n, m).unwrap();
        for p in occupation_patterns(&cfg) {
            let v = output_probability(&cfg, &p).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
