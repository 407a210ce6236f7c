use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use strataft::correlation::CorrelationKind;
use strataft::data::{Cluster, ClusteredDataset, Observation, StratumCount};
use strataft::solver::{build_g, fit, PenaltySpec, Solver, SolverConfig};
use strataft::tuning::{self, make_folds, TuneConfig};
use strataft::variance::{resample_variance, ResampleConfig};

fn dataset(seed: u64, k: usize, p: usize, strata: usize, size: usize) -> ClusteredDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clusters = Vec::new();
    let mut counts = Vec::new();
    for s in 1..=strata {
        let sampled = rng.gen_range(size..3 * size);
        counts.push(StratumCount::new(s, sampled + rng.gen_range(0..30), sampled));
        for i in 0..sampled {
            let u: f64 = rng.sample(StandardNormal);
            let members = (0..k)
                .map(|_| {
                    let x: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
                    let t = x[0] - 0.5 * x[p - 1] + 0.5 * u + 0.7 * rng.sample::<f64, _>(StandardNormal);
                    let c = rng.gen_range(-1.0..2.5);
                    Observation::new(t.min(c), t <= c, x)
                })
                .collect();
            clusters.push(Cluster {
                id: format!("{s}-{i}"),
                stratum: s,
                sampled: true,
                members,
            });
        }
    }
    ClusteredDataset::new(clusters, ClusteredDataset::default_names(p), Some(counts)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The inner Newton solve ends at a zero of the penalized estimating
    /// function (nonzero coefficients) or inside the subgradient bound
    /// (collapsed ones), with the correlation re-estimated at the solution.
    #[test]
    fn inner_solution_is_stationary(seed in 0u64..10_000, lambda in 0.0f64..0.4, ex in any::<bool>()) {
        let ds = dataset(seed, 2, 4, 2, 8);
        let kind = if ex { CorrelationKind::Exchangeable } else { CorrelationKind::Independence };
        let config = SolverConfig { gamma: 1e-11, max_inner: 200, ..SolverConfig::default() };
        let solver = Solver::new(&ds, kind, &config).unwrap();
        let anchor = solver.wols().unwrap();
        let (_, imputed) = solver.impute(&anchor).unwrap();
        let spec = PenaltySpec::scad(4, lambda);
        let out = solver.inner(&imputed.values, &anchor, &spec, &config).unwrap();
        prop_assume!(out.converged);
        let inv = strataft::correlation::build_omega_inverse(&out.structure).unwrap();
        let u = solver.u(&imputed.values, &out.beta, &inv);
        let g = build_g(&out.beta, &spec, config.zeta);
        let scale = solver.h(&inv).amax();
        let n = solver.penalty_n();
        for j in 0..4 {
            if out.beta[j].abs() >= config.coef_cutoff {
                let r = u[j] - n * g[(j, j)] * out.beta[j];
                prop_assert!(r.abs() <= 1e-7 * scale, "component {} residual {}", j, r);
            } else {
                // collapsed coefficient: subgradient bound at zero
                prop_assert!(u[j].abs() <= n * lambda * (1.0 + 1e-6) + 1e-7 * scale, "component {} score {}", j, u[j]);
            }
        }
    }

    /// Folds partition the sampled clusters and balance every stratum.
    #[test]
    fn folds_partition_and_balance(seed in 0u64..10_000, m in 2usize..8, strata in 1usize..4) {
        let ds = dataset(seed, 1, 2, strata, 8);
        let plan = make_folds(&ds, m, seed).unwrap();
        let mut seen = vec![0usize; ds.n_clusters()];
        for f in 0..m {
            for i in plan.fold(f) {
                seen[i] += 1;
            }
            let mut all: Vec<usize> = plan.fold(f);
            all.extend(plan.complement(f));
            all.sort();
            prop_assert_eq!(all, ds.sampled_indices());
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        for s in 1..=strata {
            let sizes: Vec<usize> = (0..m)
                .map(|f| plan.fold(f).iter().filter(|&&i| ds.clusters[i].stratum == s).count())
                .collect();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "stratum {} sizes {:?}", s, sizes);
        }
        prop_assert_eq!(plan, make_folds(&ds, m, seed).unwrap());
    }

    /// Unsampled clusters never enter the fit once the strata counts are
    /// fixed.
    #[test]
    fn unsampled_clusters_are_inert(seed in 0u64..10_000) {
        let ds = dataset(seed, 2, 3, 2, 8);
        let mut with_extra = ds.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for s in 1..=2 {
            for i in 0..3 {
                with_extra.clusters.push(Cluster {
                    id: format!("u{s}-{i}"),
                    stratum: s,
                    sampled: false,
                    members: vec![Observation::new(rng.gen_range(-1.0..1.0), true, Vec::new())],
                });
            }
        }
        let with_extra = ClusteredDataset::new(with_extra.clusters, ds.covariate_names.clone(), Some(ds.strata_counts.clone())).unwrap();
        let spec = PenaltySpec::scad(3, 0.1);
        let cfg = SolverConfig::default();
        let a = fit(&ds, &spec, &cfg, CorrelationKind::Exchangeable, &[0.0; 3]).unwrap();
        let b = fit(&with_extra, &spec, &cfg, CorrelationKind::Exchangeable, &[0.0; 3]).unwrap();
        prop_assert_eq!(a.beta, b.beta);
    }
}

#[test]
fn tuning_and_resampling_are_reproducible() {
    let ds = dataset(3, 2, 4, 2, 40);
    let cfg = SolverConfig::default();
    let tune = TuneConfig {
        folds: 3,
        n_lambda: 10,
        lambda_min_ratio: 1e-2,
        seed: 17,
    };
    let spec = PenaltySpec::scad(4, 0.0);
    let a = tuning::select(&ds, &spec, &cfg, CorrelationKind::Exchangeable, &tune).unwrap();
    let b = tuning::select(&ds, &spec, &cfg, CorrelationKind::Exchangeable, &tune).unwrap();
    assert_eq!(a.curve.mu, b.curve.mu);
    assert_eq!(a.fit_cv.beta, b.fit_cv.beta);
    assert!(a.curve.lambdas.windows(2).all(|w| w[0] > w[1]));

    let r = ResampleConfig {
        replicates: 30,
        seed: 5,
        ..ResampleConfig::default()
    };
    let v1 = resample_variance(&ds, &a.fit_cv, &r, &cfg, CorrelationKind::Exchangeable).unwrap();
    let v2 = resample_variance(&ds, &a.fit_cv, &r, &cfg, CorrelationKind::Exchangeable).unwrap();
    assert_eq!(v1.se, v2.se);
    assert_eq!(v1.columns, a.fit_cv.active_set);
}

#[cfg(feature = "parallel")]
#[test]
fn parallel_and_sequential_maps_agree() {
    use strataft::par::{map_indexed_parallel, map_indexed_sequential};
    let f = |i: usize| {
        let ds = dataset(i as u64, 2, 3, 2, 8);
        fit(&ds, &PenaltySpec::scad(3, 0.05), &SolverConfig::default(), CorrelationKind::Exchangeable, &[0.0; 3])
            .unwrap()
            .beta
    };
    assert_eq!(map_indexed_parallel(12, f), map_indexed_sequential(12, f));
}
