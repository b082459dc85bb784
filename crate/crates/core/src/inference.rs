//! Wald-type tests on the MINQUE estimates.
//!
//! At the iterated-MINQUE fixed point the estimates are asymptotically normal
//! with covariance `[½ tr(R Vᵢ R Vⱼ)]⁻¹`, evaluated at the fitted covariance
//! (see [`asymptotic_covariance`] for fits with negative components).
//! From it come a one-sided z-test for the linear component `θ₂`, one for the
//! non-linear component `θ₃`, and a 2-df chi-square for both with Follmann's
//! one-sided adjustment.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genotype::{compute_maf, compute_weights, GenotypeMatrix, WeightScheme};
use crate::kernel::{build_basis, ComponentBasis, KernelConfig};
use crate::minque::{
    condition_number, iterate_minque, projected_components, projection_inverse, trace_matrix,
    MinqueConfig, MinqueProblem, ThetaEstimate, WEAK_IDENTIFICATION,
};
use crate::stats::normal_sf;

const LINEAR: usize = 1;
const NONLINEAR: usize = 2;

/// Information matrices above this condition number are treated as singular.
pub const MAX_INFORMATION_CONDITION: f64 = 1e12;

/// How the covariance of `θ̂` was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMethod {
    /// Inverse of `½ tr(R Vᵢ R Vⱼ)` at the fitted covariance.
    Information,
    /// `S⁻¹ B S⁻¹` at the floored working weights, with the unfloored fit
    /// standing in for the true covariance inside `B`.
    Sandwich,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticCovariance {
    pub cov: Matrix4<f64>,
    /// `½ tr(R Vᵢ R Vⱼ)` at the floored working weights.
    pub information: Matrix4<f64>,
    /// Condition number of the identified block of the information matrix.
    pub condition_number: f64,
    /// Components dropped because they carry no information; their rows and
    /// columns of `cov` are zero.
    pub weakly_identified: [bool; 4],
    pub method: CovarianceMethod,
}

/// Covariance of the MINQUE estimate `θ̂`.
///
/// For Gaussian `y`, the estimate at working weights `a` has covariance
/// `S⁻¹ B S⁻¹` with `S = tr(R Vᵢ R Vⱼ)` and `Bᵢⱼ = 2 tr(R Vᵢ R Σ R Vⱼ R Σ)`.
/// The weights are `max(θ̂, 0)` and `Σ = Σ θ̂ᵢVᵢ`. With no negative
/// components this is exactly `[½ tr(R Vᵢ R Vⱼ)]⁻¹`, which is also the
/// fallback if the sandwich block for `(θ₂, θ₃)` is not positive definite.
pub fn asymptotic_covariance(
    basis: &ComponentBasis,
    theta_hat: &[f64; 4],
    ridge: f64,
) -> Result<AsymptoticCovariance> {
    let floored = theta_hat.map(|t| t.max(0.0));
    if floored.iter().all(|&t| t == 0.0) {
        return Err(Error::SingularCovariance);
    }
    let r = projection_inverse(basis, &floored, ridge)?;
    let rv = projected_components(basis, &r);
    let information = trace_matrix(&rv) * 0.5;
    let inverse = invert_information(&information)?;
    let mut out = AsymptoticCovariance {
        cov: inverse.cov,
        information,
        condition_number: inverse.condition,
        weakly_identified: inverse.weak,
        method: CovarianceMethod::Information,
    };
    if floored == *theta_hat {
        return Ok(out);
    }

    let r_sigma = &r * basis.combine(theta_hat);
    let keep: Vec<usize> = (0..4).filter(|&i| !inverse.weak[i]).collect();
    let a: Vec<DMatrix<f64>> = keep.iter().map(|&i| &rv[i] * &r_sigma).collect();
    let a_t: Vec<DMatrix<f64>> = a.iter().map(|m| m.transpose()).collect();
    let mut b = Matrix4::zeros();
    for (x, &i) in keep.iter().enumerate() {
        for (y, &j) in keep.iter().enumerate().skip(x) {
            let v = 2.0 * a[x].dot(&a_t[y]);
            b[(i, j)] = v;
            b[(j, i)] = v;
        }
    }
    // inverse.cov = 2 S⁻¹ on the identified block
    let sandwich = inverse.cov * b * inverse.cov * 0.25;
    let block = Matrix2::new(
        sandwich[(LINEAR, LINEAR)],
        sandwich[(LINEAR, NONLINEAR)],
        sandwich[(NONLINEAR, LINEAR)],
        sandwich[(NONLINEAR, NONLINEAR)],
    );
    if sandwich.iter().all(|v| v.is_finite()) && block.cholesky().is_some() {
        out.cov = (sandwich + sandwich.transpose()) * 0.5;
        out.method = CovarianceMethod::Sandwich;
    }
    Ok(out)
}

struct Inverse {
    cov: Matrix4<f64>,
    condition: f64,
    weak: [bool; 4],
}

fn invert_information(information: &Matrix4<f64>) -> Result<Inverse> {
    let max_diag = information.diagonal().amax();
    let weak: [bool; 4] = std::array::from_fn(|i| information[(i, i)] <= WEAK_IDENTIFICATION * max_diag);
    let keep: Vec<usize> = (0..4).filter(|&i| !weak[i]).collect();
    if keep.is_empty() {
        return Err(Error::SingularInformation {
            condition: f64::INFINITY,
        });
    }
    let block = DMatrix::from_fn(keep.len(), keep.len(), |a, b| information[(keep[a], keep[b])]);
    let sv = block.clone().singular_values();
    let condition = if sv.min() > 0.0 {
        sv.max() / sv.min()
    } else {
        f64::INFINITY
    };
    if !(condition <= MAX_INFORMATION_CONDITION) {
        return Err(Error::SingularInformation { condition });
    }
    let inv = block
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::SingularInformation { condition })?;
    let mut cov = Matrix4::zeros();
    for (a, &i) in keep.iter().enumerate() {
        for (b, &j) in keep.iter().enumerate() {
            cov[(i, j)] = 0.5 * (inv[(a, b)] + inv[(b, a)]);
        }
    }
    Ok(Inverse { cov, condition, weak })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZTests {
    pub z1: f64,
    pub p_linear: f64,
    pub z2: f64,
    pub p_nonlinear: f64,
}

/// One-sided upper-tail z-tests for `θ₂` and `θ₃`.
pub fn wald_z_tests(theta_hat: &[f64; 4], cov: &Matrix4<f64>) -> Result<ZTests> {
    let z1 = standardized(theta_hat, cov, LINEAR)?;
    let z2 = standardized(theta_hat, cov, NONLINEAR)?;
    Ok(ZTests {
        z1,
        p_linear: normal_sf(z1),
        z2,
        p_nonlinear: normal_sf(z2),
    })
}

fn standardized(theta_hat: &[f64; 4], cov: &Matrix4<f64>, i: usize) -> Result<f64> {
    let var = cov[(i, i)];
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::NonPositiveVariance { index: i + 1, value: var });
    }
    Ok(theta_hat[i] / var.sqrt())
}

/// `(θ̂₂, θ̂₃) B⁻¹ (θ̂₂, θ̂₃)ᵀ` with `B` the matching covariance block, and its
/// 2-df upper tail `exp(−χ²/2)`.
pub fn chi_square_overall(theta_hat: &[f64; 4], cov: &Matrix4<f64>) -> Result<(f64, f64)> {
    let block = Matrix2::new(
        cov[(LINEAR, LINEAR)],
        cov[(LINEAR, NONLINEAR)],
        cov[(NONLINEAR, LINEAR)],
        cov[(NONLINEAR, NONLINEAR)],
    );
    let inv = block
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::SingularInformation {
            condition: f64::INFINITY,
        })?;
    let t = Vector2::new(theta_hat[LINEAR], theta_hat[NONLINEAR]);
    let chi2 = (t.transpose() * inv * t)[(0, 0)].max(0.0);
    Ok((chi2, (-0.5 * chi2).exp()))
}

/// Follmann's one-sided chi-square: half the 2-df tail when the standardized
/// components sum positive, otherwise 1. `p ≤ α` exactly when χ² exceeds its
/// 2α critical value with the sign condition met.
pub fn follmann_adjust(chi2: f64, theta_hat: &[f64; 4], cov: &Matrix4<f64>) -> Result<f64> {
    let s = standardized(theta_hat, cov, LINEAR)? + standardized(theta_hat, cov, NONLINEAR)?;
    if s > 0.0 {
        Ok(0.5 * (-0.5 * chi2).exp())
    } else {
        Ok(1.0)
    }
}

/// Full KNN test output. Serialises to a flat JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnTestReport {
    pub theta: [f64; 4],
    /// Row-major 4×4 covariance of `theta`.
    pub cov: Vec<f64>,
    pub z1: f64,
    pub z2: f64,
    pub p_linear: f64,
    pub p_nonlinear: f64,
    pub chi2: f64,
    pub p_unadjusted: f64,
    pub p_overall: f64,
    pub converged: bool,
    pub iterations: usize,
    pub weakly_identified: [bool; 4],
    pub condition_number: f64,
    pub covariance_method: CovarianceMethod,
}

impl KnnTestReport {
    pub fn cov_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_row_slice(&self.cov)
    }

    pub fn summary_line(&self) -> String {
        format!(
            "overall p={:.6e}, linear p={:.6e}, nonlinear p={:.6e}",
            self.p_overall, self.p_linear, self.p_nonlinear
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KnnTestOptions {
    pub scheme: WeightScheme,
    pub kernel: KernelConfig,
    pub minque: MinqueConfig,
}

/// Tests derived from an iterated-MINQUE fit on a prepared basis.
pub fn test_from_estimate(basis: &ComponentBasis, est: &ThetaEstimate, ridge: f64) -> Result<KnnTestReport> {
    let ac = asymptotic_covariance(basis, &est.theta, ridge).map_err(Error::at("covariance"))?;
    let theta = est.theta;
    let z = wald_z_tests(&theta, &ac.cov).map_err(Error::at("z-tests"))?;
    let (chi2, p_unadjusted) = chi_square_overall(&theta, &ac.cov).map_err(Error::at("chi-square"))?;
    let p_overall = follmann_adjust(chi2, &theta, &ac.cov).map_err(Error::at("follmann"))?;
    let mut weak = est.weakly_identified;
    for (w, a) in weak.iter_mut().zip(ac.weakly_identified) {
        *w |= a;
    }
    Ok(KnnTestReport {
        theta,
        cov: ac.cov.transpose().as_slice().to_vec(),
        z1: z.z1,
        z2: z.z2,
        p_linear: z.p_linear,
        p_nonlinear: z.p_nonlinear,
        chi2,
        p_unadjusted,
        p_overall,
        converged: est.converged,
        iterations: est.iterations,
        weakly_identified: weak,
        condition_number: ac.condition_number,
        covariance_method: ac.method,
    })
}

pub fn knn_test_with_basis(y: &DVector<f64>, basis: &ComponentBasis, config: &MinqueConfig) -> Result<KnnTestReport> {
    let problem = MinqueProblem::new(y.clone(), basis).map_err(Error::at("minque"))?;
    let est = iterate_minque(&problem, config).map_err(Error::at("minque"))?;
    test_from_estimate(basis, &est, config.ridge)
}

/// Weights → basis → iterated MINQUE → covariance → tests.
pub fn knn_test(
    y: &DVector<f64>,
    g: &GenotypeMatrix,
    z: Option<&DMatrix<f64>>,
    options: &KnnTestOptions,
) -> Result<KnnTestReport> {
    if y.len() != g.n_samples() {
        return Err(Error::Dimension(format!(
            "response has {} entries, genotypes have {} samples",
            y.len(),
            g.n_samples()
        )));
    }
    let weights = weights_for(g, options.scheme).map_err(Error::at("weights"))?;
    let basis = build_basis(g, &weights, z, options.kernel).map_err(Error::at("basis"))?;
    knn_test_with_basis(y, &basis, &options.minque)
}

pub(crate) fn weights_for(g: &GenotypeMatrix, scheme: WeightScheme) -> Result<crate::genotype::VariantWeights> {
    if g.has_missing() {
        return Err(Error::MissingValues);
    }
    match &g.maf {
        Some(maf) => compute_weights(maf, scheme),
        None => compute_weights(compute_maf(g).maf.as_deref().unwrap_or_default(), scheme),
    }
}

/// Condition number of the MINQUE system at the given weights.
pub fn system_condition(basis: &ComponentBasis, y: &DVector<f64>, weights: &[f64; 4]) -> Result<f64> {
    let r = projection_inverse(basis, weights, 1e-8)?;
    let (s, _) = crate::minque::minque_system(&MinqueProblem::new(y.clone(), basis)?, &r);
    Ok(condition_number(&s))
}
