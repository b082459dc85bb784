//! Continuous-trait SKAT with a weighted linear kernel.
//!
//! Under the null `y = Zβ + ε`, the score statistic `Q = rᵀ K r` on the
//! least-squares residuals is distributed as `σ̂₀² Σ λⱼ χ²₁` with `λⱼ` the
//! eigenvalues of `P₀ K P₀`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genotype::{GenotypeMatrix, WeightScheme};
use crate::inference::weights_for;
use crate::kernel::{design_with_intercept, product_kernel, KernelMatrix};
use crate::quadform::{quadform_pvalue, PValueMethod};

#[derive(Debug, Clone)]
pub struct NullModel {
    pub residuals: DVector<f64>,
    pub sigma0_sq: f64,
    /// `I − Z(ZᵀZ)⁻¹Zᵀ`.
    pub projection: DMatrix<f64>,
}

/// Least-squares fit of `y` on the design `z` (which must include the intercept).
pub fn fit_null_model(y: &DVector<f64>, z: &DMatrix<f64>) -> Result<NullModel> {
    let n = y.len();
    if z.nrows() != n {
        return Err(Error::Dimension(format!("design has {} rows, response {n}", z.nrows())));
    }
    let c = z.ncols();
    if c >= n {
        return Err(Error::RankDeficientDesign);
    }
    let ztz = z.transpose() * z;
    let chol = ztz.cholesky().ok_or(Error::RankDeficientDesign)?;
    let sv = z.clone().singular_values();
    if sv.min() <= 1e-10 * sv.max() {
        return Err(Error::RankDeficientDesign);
    }
    let hat = z * chol.solve(&z.transpose());
    let mut projection = DMatrix::identity(n, n) - hat;
    let pt = projection.transpose();
    projection += pt;
    projection *= 0.5;
    let residuals = &projection * y;
    let sigma0_sq = residuals.norm_squared() / (n - c) as f64;
    Ok(NullModel {
        residuals,
        sigma0_sq,
        projection,
    })
}

/// `Q = rᵀ K r`.
pub fn skat_statistic(nm: &NullModel, k: &KernelMatrix) -> Result<f64> {
    let r = &nm.residuals;
    if k.dim() != r.len() {
        return Err(Error::Dimension(format!("kernel {} vs residuals {}", k.dim(), r.len())));
    }
    Ok(r.dot(&(k.matrix() * r)))
}

/// Eigenvalues of `σ̂₀² P₀ K P₀`, sorted descending with round-off negatives
/// clamped to zero.
pub fn eigen_lambdas(nm: &NullModel, k: &KernelMatrix) -> Result<Vec<f64>> {
    let p0 = &nm.projection;
    if k.dim() != p0.nrows() {
        return Err(Error::Dimension(format!("kernel {} vs projection {}", k.dim(), p0.nrows())));
    }
    let mut m = p0 * k.matrix() * p0;
    let mt = m.transpose();
    m += mt;
    m *= 0.5 * nm.sigma0_sq;
    let mut eig: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    if eig.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPsd(f64::NAN));
    }
    eig.sort_by(|a, b| b.total_cmp(a));
    let max = eig.first().copied().unwrap_or(0.0).max(0.0);
    if let Some(&min) = eig.last() {
        if min < -1e-8 * max.max(f64::MIN_POSITIVE) {
            return Err(Error::NotPsd(min));
        }
    }
    Ok(eig.into_iter().map(|v| v.max(0.0)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkatResult {
    pub q_stat: f64,
    pub lambdas: Vec<f64>,
    pub p_value: f64,
    pub method_used: PValueMethod,
}

/// SKAT p-value for a prepared null model and kernel.
pub fn skat_from_kernel(nm: &NullModel, k: &KernelMatrix) -> Result<SkatResult> {
    if !(nm.sigma0_sq > 0.0) {
        return Err(Error::DegenerateNullModel);
    }
    let q_stat = skat_statistic(nm, k).map_err(Error::at("statistic"))?;
    let lambdas = eigen_lambdas(nm, k).map_err(Error::at("eigenvalues"))?;
    let (p_value, method_used) = quadform_pvalue(q_stat, &lambdas).map_err(Error::at("p-value"))?;
    Ok(SkatResult {
        q_stat,
        lambdas,
        p_value,
        method_used,
    })
}

/// Null fit → weighted linear kernel → statistic → Davies (Liu fallback).
pub fn skat_test(
    y: &DVector<f64>,
    g: &GenotypeMatrix,
    z: Option<&DMatrix<f64>>,
    scheme: WeightScheme,
) -> Result<SkatResult> {
    if y.len() != g.n_samples() {
        return Err(Error::Dimension(format!(
            "response has {} entries, genotypes have {} samples",
            y.len(),
            g.n_samples()
        )));
    }
    let design = design_with_intercept(y.len(), z).map_err(Error::at("null model"))?;
    let nm = fit_null_model(y, &design).map_err(Error::at("null model"))?;
    let w = weights_for(g, scheme).map_err(Error::at("weights"))?;
    let k = product_kernel(g, &w, true).map_err(Error::at("kernel"))?;
    skat_from_kernel(&nm, &k)
}
