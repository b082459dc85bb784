//! Kernel-based neural network (KNN) association test for sets of genetic
//! variants.
//!
//! The phenotype covariance is decomposed as `θ₁J + θ₂K + θ₃K⊙K + θ₄I` over a
//! weighted product kernel `K`. Components are estimated by iterated MINQUE
//! and tested with one-sided Wald statistics: `θ₂` for linear effects, `θ₃`
//! for non-linear/interaction effects, and a Follmann-adjusted 2-df
//! chi-square for both. A standard SKAT implementation and a Monte Carlo
//! harness are included for calibration and power comparisons.

pub mod error;
pub mod genotype;
pub mod inference;
pub mod io;
pub mod kernel;
pub mod minque;
pub mod quadform;
pub mod simulation;
pub mod skat;
pub mod stats;

pub use error::{Error, Result};
pub use genotype::{GenotypeMatrix, VariantWeights, WeightScheme};
pub use inference::{knn_test, KnnTestOptions, KnnTestReport};
pub use kernel::{build_basis, ComponentBasis, KernelConfig, KernelMatrix};
pub use minque::{iterate_minque, MinqueConfig, MinqueProblem, ThetaEstimate};
pub use simulation::{run_scenario, MonteCarloResult, PhenotypeModel, SimulationScenario};
pub use skat::{skat_test, SkatResult};
