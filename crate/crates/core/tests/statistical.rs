//! Monte Carlo properties of the estimator, the tests and the simulator.

use knntest::genotype::{compute_maf, filter_variants, VariantWeights};
use knntest::inference::{knn_test, KnnTestOptions};
use knntest::kernel::{build_basis, KernelConfig};
use knntest::minque::{iterate_minque, MinqueConfig, MinqueProblem};
use knntest::simulation::{
    run_scenario, simulate_genotypes, simulate_phenotype, simulate_replicate, GenotypeGenConfig, PhenotypeModel,
    SimulationScenario,
};
use knntest::stats::{ks_pvalue, ks_statistic, normal_cdf};
use nalgebra::{DMatrix, DVector};

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn null_scenario(n: usize, p: usize, reps: usize, seed: u64) -> SimulationScenario {
    SimulationScenario {
        geno: GenotypeGenConfig {
            n,
            p,
            seed,
            ..Default::default()
        },
        replicates: reps,
        ..Default::default()
    }
}

#[test]
fn null_z2_is_standard_normal() {
    let s = null_scenario(200, 50, 1000, 301);
    let z2: Vec<f64> = (0..s.replicates)
        .map(|i| {
            let (g, y) = simulate_replicate(&s, i).unwrap();
            let g = filter_variants(&compute_maf(&g), 0.0, 1.0).unwrap();
            knn_test(&y, &g, None, &KnnTestOptions::default()).unwrap().z2
        })
        .collect();
    let d = ks_statistic(&z2, normal_cdf);
    let p = ks_pvalue(d, z2.len());
    assert!(p > 0.01, "KS D = {d}, p = {p}");
}

#[test]
fn iterated_minque_recovers_noise_variance() {
    let s = null_scenario(200, 100, 500, 302);
    let mut est = [Vec::new(), Vec::new(), Vec::new()];
    for i in 0..s.replicates {
        let (g, y) = simulate_replicate(&s, i).unwrap();
        let g = filter_variants(&compute_maf(&g), 0.0, 1.0).unwrap();
        let basis = build_basis(&g, &VariantWeights::ones(g.n_variants()), None, KernelConfig::default()).unwrap();
        let problem = MinqueProblem::new(y, &basis).unwrap();
        let theta = iterate_minque(&problem, &MinqueConfig::default()).unwrap().theta;
        for (k, idx) in [1, 2, 3].into_iter().enumerate() {
            est[k].push(theta[idx]);
        }
    }
    let reps = s.replicates as f64;
    let (m4, sd4) = mean_sd(&est[2]);
    assert!((m4 - s.sigma_0_sq).abs() < 3.0 * sd4 / reps.sqrt(), "theta4 mean {m4}");
    for (k, truth) in [(0, 0.0), (1, 0.0)] {
        let (m, sd) = mean_sd(&est[k]);
        assert!((m - truth).abs() < 3.0 * sd / reps.sqrt(), "component {k}: mean {m}, sd {sd}");
    }
}

#[test]
fn null_overall_pvalues_protect_type_one_error() {
    let res = run_scenario(&null_scenario(150, 60, 300, 303)).unwrap();
    let ecdf = res.records.iter().filter(|r| r.p_overall <= 0.05).count() as f64 / res.completed as f64;
    assert!(ecdf <= 0.08, "empirical CDF at 0.05 = {ecdf}");
}

#[test]
fn phenotype_variance_matches_components() {
    let geno = GenotypeGenConfig {
        n: 200,
        p: 50,
        seed: 304,
        ..Default::default()
    };
    let linear = SimulationScenario {
        model: PhenotypeModel::Linear,
        sigma_g_sq: 0.5,
        sigma_0_sq: 2.0,
        geno,
        ..Default::default()
    };
    let null = SimulationScenario {
        model: PhenotypeModel::Null,
        ..linear.clone()
    };
    let g = simulate_genotypes(&geno).unwrap();
    let sample_var = |y: &DVector<f64>| y.variance() * y.len() as f64 / (y.len() - 1) as f64;
    let reps = 500;
    let v_lin: f64 = (0..reps)
        .map(|i| sample_var(&simulate_phenotype(&linear, &g, i).unwrap()))
        .sum::<f64>()
        / reps as f64;
    let v_null: f64 = (0..reps)
        .map(|i| sample_var(&simulate_phenotype(&null, &g, i).unwrap()))
        .sum::<f64>()
        / reps as f64;
    assert!((v_lin / 2.5 - 1.0).abs() < 0.10, "linear var {v_lin}");
    assert!((v_null / 2.0 - 1.0).abs() < 0.05, "null var {v_null}");
}

#[test]
fn rescaling_response_leaves_tests_unchanged() {
    let s = SimulationScenario {
        model: PhenotypeModel::Quadratic,
        sigma_g_sq: 2.0,
        geno: GenotypeGenConfig {
            n: 120,
            p: 40,
            seed: 306,
            ..Default::default()
        },
        ..Default::default()
    };
    let (g, y) = simulate_replicate(&s, 0).unwrap();
    let g = filter_variants(&compute_maf(&g), 0.0, 1.0).unwrap();
    let opts = KnnTestOptions::default();
    let a = knn_test(&y, &g, None, &opts).unwrap();
    let b = knn_test(&(&y * 7.5), &g, None, &opts).unwrap();
    for (x, y) in [(a.z1, b.z1), (a.z2, b.z2), (a.chi2, b.chi2), (a.p_overall, b.p_overall)] {
        assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs()), "{x} vs {y}");
    }
    for k in 1..4 {
        assert!((b.theta[k] - 56.25 * a.theta[k]).abs() <= 1e-6 * (1.0 + b.theta[k].abs()));
    }
}

#[test]
fn covariate_shift_leaves_report_unchanged() {
    let s = SimulationScenario {
        model: PhenotypeModel::Linear,
        sigma_g_sq: 1.0,
        geno: GenotypeGenConfig {
            n: 100,
            p: 30,
            seed: 307,
            ..Default::default()
        },
        ..Default::default()
    };
    let (g, y) = simulate_replicate(&s, 0).unwrap();
    let g = filter_variants(&compute_maf(&g), 0.0, 1.0).unwrap();
    let age = DMatrix::from_fn(100, 1, |i, _| 20.0 + (i % 37) as f64);
    let opts = KnnTestOptions::default();
    let a = knn_test(&y, &g, Some(&age), &opts).unwrap();
    let shifted = &y + age.column(0) * 0.3;
    let b = knn_test(&shifted, &g, Some(&age), &opts).unwrap();
    assert!((a.p_overall - b.p_overall).abs() < 1e-8);
    assert!((a.theta[1] - b.theta[1]).abs() < 1e-8 * (1.0 + a.theta[1].abs()));
}
