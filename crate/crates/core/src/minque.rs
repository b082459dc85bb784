//! MINQUE and iterated MINQUE for the four-component covariance model.
//!
//! Given a working covariance `H = Σ aᵢVᵢ` and fixed-effect design `Z`, the
//! covariate-adjusted inverse is `R = H⁻¹ − H⁻¹Z(ZᵀH⁻¹Z)⁻¹ZᵀH⁻¹` and the
//! estimating equations are `S θ = q` with
//!
//! ```text
//! S_ij = tr(R Vᵢ R Vⱼ)        q_i = yᵀ R Vᵢ R y
//! ```
//!
//! Iterating with `a ← max(θ̂, 0)` converges to the fixed point whose
//! limiting covariance no longer depends on the starting weights.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::ComponentBasis;

/// Condition number above which the MINQUE system is ridge-stabilised.
pub const RIDGE_CONDITION: f64 = 1e10;

/// Components whose diagonal in `S` falls below this fraction of the largest
/// diagonal carry no information (e.g. `J` once an intercept is projected out).
pub const WEAK_IDENTIFICATION: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct MinqueProblem<'a> {
    pub y: DVector<f64>,
    pub basis: &'a ComponentBasis,
}

impl<'a> MinqueProblem<'a> {
    pub fn new(y: DVector<f64>, basis: &'a ComponentBasis) -> Result<Self> {
        if y.len() != basis.dim() {
            return Err(Error::Dimension(format!(
                "response has length {}, basis is {}x{}",
                y.len(),
                basis.dim(),
                basis.dim()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("response contains non-finite values".into()));
        }
        Ok(Self { y, basis })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinqueConfig {
    pub initial_weights: [f64; 4],
    pub max_iterations: usize,
    /// Relative L2 change in θ̂ that counts as converged.
    pub tolerance: f64,
    /// Relative ridge for near-singular systems.
    pub ridge: f64,
}

impl Default for MinqueConfig {
    fn default() -> Self {
        Self {
            initial_weights: [1.0; 4],
            max_iterations: 50,
            tolerance: 1e-6,
            ridge: 1e-8,
        }
    }
}

impl MinqueConfig {
    pub fn single_pass(initial_weights: [f64; 4]) -> Self {
        Self {
            initial_weights,
            max_iterations: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if self.initial_weights.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("initial weights are all zero".into()));
        }
        if self.initial_weights.iter().any(|w| !w.is_finite()) || !(self.ridge >= 0.0) {
            return Err(Error::Config("initial weights and ridge must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ThetaEstimate {
    /// Unfloored estimates in basis order `(J, K, K⊙K, I)`.
    pub theta: [f64; 4],
    pub iterations: usize,
    pub converged: bool,
    /// `Σ θ̂ᵢ Vᵢ`.
    pub working_covariance: DMatrix<f64>,
    pub trace: Vec<[f64; 4]>,
    /// Components with no information after fixed-effect projection.
    pub weakly_identified: [bool; 4],
}

/// Covariate-adjusted inverse of `H = Σ aᵢVᵢ`. A relative ridge is added
/// to the diagonal if the Cholesky factorisation fails.
pub fn projection_inverse(basis: &ComponentBasis, a: &[f64; 4], ridge: f64) -> Result<DMatrix<f64>> {
    let h = basis.combine(a);
    let n = basis.dim();
    let chol = match h.clone().cholesky() {
        Some(c) => c,
        None => {
            let scale = h.trace() / n as f64;
            if !(scale > 0.0) {
                return Err(Error::SingularCovariance);
            }
            let mut repaired = h;
            for i in 0..n {
                repaired[(i, i)] += ridge.max(1e-12) * scale;
            }
            repaired.cholesky().ok_or(Error::SingularCovariance)?
        }
    };
    let h_inv = chol.inverse();
    let z = basis.design();
    let mut r = if z.ncols() == 0 {
        h_inv
    } else {
        let w = &h_inv * z;
        let m = z.transpose() * &w;
        let m_chol = m.cholesky().ok_or(Error::SingularCovariance)?;
        let m_inv_wt = m_chol.solve(&w.transpose());
        h_inv - w * m_inv_wt
    };
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularCovariance);
    }
    let rt = r.transpose();
    r += rt;
    r *= 0.5;
    Ok(r)
}

/// `R Vᵢ` for every component.
pub(crate) fn projected_components(basis: &ComponentBasis, r: &DMatrix<f64>) -> [DMatrix<f64>; 4] {
    let c = basis.components();
    [
        c[0].right_mul(r),
        c[1].right_mul(r),
        c[2].right_mul(r),
        c[3].right_mul(r),
    ]
}

/// `tr(R Vᵢ R Vⱼ)` for all pairs.
pub(crate) fn trace_matrix(rv: &[DMatrix<f64>; 4]) -> Matrix4<f64> {
    let rv_t: Vec<DMatrix<f64>> = rv.iter().map(|m| m.transpose()).collect();
    let mut s = Matrix4::zeros();
    for i in 0..4 {
        for j in i..4 {
            let v = rv[i].dot(&rv_t[j]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

pub fn minque_system(problem: &MinqueProblem<'_>, r: &DMatrix<f64>) -> (Matrix4<f64>, Vector4<f64>) {
    let rv = projected_components(problem.basis, r);
    let s = trace_matrix(&rv);
    let ry = r * &problem.y;
    let c = problem.basis.components();
    let q = Vector4::new(
        c[0].quad_form(&ry),
        c[1].quad_form(&ry),
        c[2].quad_form(&ry),
        c[3].quad_form(&ry),
    );
    (s, q)
}

/// Ratio of extreme singular values (infinite when singular).
pub fn condition_number(s: &Matrix4<f64>) -> f64 {
    let sv = s.singular_values();
    let (max, min) = (sv.max(), sv.min());
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `S θ = q`, switching to `(S + ridge·d·I)θ = q` (with `d` the
/// largest diagonal of `S`) when `S` is ill-conditioned.
pub fn solve_minque(s: &Matrix4<f64>, q: &Vector4<f64>, ridge: f64) -> Result<Vector4<f64>> {
    if condition_number(s) <= RIDGE_CONDITION {
        if let Some(theta) = s.lu().solve(q) {
            if theta.iter().all(|v| v.is_finite()) {
                return Ok(theta);
            }
        }
    }
    let scale = s.diagonal().amax().max(f64::MIN_POSITIVE);
    let ridged = s + Matrix4::identity() * (ridge.max(1e-14) * scale);
    match ridged.lu().solve(q) {
        Some(theta) if theta.iter().all(|v| v.is_finite()) => Ok(theta),
        _ => Err(Error::UnsolvableSystem),
    }
}

pub(crate) fn weakly_identified(s: &Matrix4<f64>) -> [bool; 4] {
    let max = s.diagonal().amax();
    std::array::from_fn(|i| s[(i, i)] <= WEAK_IDENTIFICATION * max)
}

pub fn iterate_minque(problem: &MinqueProblem<'_>, config: &MinqueConfig) -> Result<ThetaEstimate> {
    config.validate()?;
    let mut previous = config.initial_weights;
    let mut trace = Vec::with_capacity(config.max_iterations.min(64));
    let mut converged = false;
    let mut weak = [false; 4];

    for iteration in 1..=config.max_iterations {
        let weights = previous.map(|w| w.max(0.0));
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::SingularAtIteration(iteration));
        }
        let r = projection_inverse(problem.basis, &weights, config.ridge)
            .map_err(|_| Error::SingularAtIteration(iteration))?;
        let (s, q) = minque_system(problem, &r);
        weak = weakly_identified(&s);
        let theta: [f64; 4] = solve_minque(&s, &q, config.ridge)?.into();
        trace.push(theta);

        let step = norm(&sub(&theta, &previous));
        let base = norm(&previous).max(f64::MIN_POSITIVE);
        previous = theta;
        if step / base < config.tolerance {
            converged = true;
            break;
        }
    }

    let theta = previous;
    Ok(ThetaEstimate {
        theta,
        iterations: trace.len(),
        converged,
        working_covariance: problem.basis.combine(&theta),
        trace,
        weakly_identified: weak,
    })
}

fn sub(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    std::array::from_fn(|i| a[i] - b[i])
}

fn norm(a: &[f64; 4]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
