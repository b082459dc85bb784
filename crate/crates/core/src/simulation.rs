//! Synthetic genotypes, phenotype models and the Monte Carlo driver.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::error::{Error, Result};
use crate::genotype::{compute_maf, filter_variants, GenotypeMatrix, WeightScheme};
use crate::inference::{knn_test_with_basis, weights_for};
use crate::kernel::{build_basis, design_with_intercept, product_kernel, KernelConfig};
use crate::minque::MinqueConfig;
use crate::quadform::PValueMethod;
use crate::skat::{fit_null_model, skat_from_kernel};
use crate::stats::clopper_pearson;

/// Distribution of per-variant minor-allele frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MafLaw {
    Uniform { lo: f64, hi: f64 },
    /// A `common_frac` share of variants draws from `common`, the rest from `rare`.
    RareMixture {
        common_frac: f64,
        common: (f64, f64),
        rare: (f64, f64),
    },
}

impl MafLaw {
    /// Half the variants in `(0.005, 0.05)`, half in `(0.05, 0.5)`.
    pub const RARE_DEFAULT: MafLaw = MafLaw::RareMixture {
        common_frac: 0.5,
        common: (0.05, 0.5),
        rare: (0.005, 0.05),
    };

    fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi <= 0.5;
        match *self {
            MafLaw::Uniform { lo, hi } if range_ok((lo, hi)) => Ok(()),
            MafLaw::RareMixture {
                common_frac,
                common,
                rare,
            } if (0.0..=1.0).contains(&common_frac) && range_ok(common) && range_ok(rare) => Ok(()),
            _ => Err(Error::Config(format!("maf_law: invalid ranges in {self}"))),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let uniform = |rng: &mut R, (lo, hi): (f64, f64)| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        };
        match *self {
            MafLaw::Uniform { lo, hi } => uniform(rng, (lo, hi)),
            MafLaw::RareMixture {
                common_frac,
                common,
                rare,
            } => {
                if rng.random::<f64>() < common_frac {
                    uniform(rng, common)
                } else {
                    uniform(rng, rare)
                }
            }
        }
    }
}

impl fmt::Display for MafLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MafLaw::Uniform { lo, hi } => write!(f, "uniform({lo},{hi})"),
            MafLaw::RareMixture {
                common_frac,
                common,
                rare,
            } => write!(
                f,
                "rare({common_frac},{},{},{},{})",
                common.0, common.1, rare.0, rare.1
            ),
        }
    }
}

impl FromStr for MafLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("maf_law: cannot parse '{s}'"));
        let s = s.trim();
        let open = s.find('(').ok_or_else(bad)?;
        let inner = s[open + 1..].strip_suffix(')').ok_or_else(bad)?;
        let args: Vec<f64> = inner
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let law = match (&s[..open], args.as_slice()) {
            ("uniform", &[lo, hi]) => MafLaw::Uniform { lo, hi },
            ("rare", &[frac, clo, chi, rlo, rhi]) => MafLaw::RareMixture {
                common_frac: frac,
                common: (clo, chi),
                rare: (rlo, rhi),
            },
            _ => return Err(bad()),
        };
        law.validate()?;
        Ok(law)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenotypeGenConfig {
    pub n: usize,
    pub p: usize,
    pub maf_law: MafLaw,
    /// AR(1) correlation between adjacent latent haplotype scores.
    pub ld_rho: f64,
    pub seed: u64,
}

impl Default for GenotypeGenConfig {
    fn default() -> Self {
        Self {
            n: 200,
            p: 100,
            maf_law: MafLaw::Uniform { lo: 0.05, hi: 0.5 },
            ld_rho: 0.0,
            seed: 1,
        }
    }
}

impl GenotypeGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("n: need at least two samples".into()));
        }
        if self.p == 0 {
            return Err(Error::Config("p: need at least one variant".into()));
        }
        if !(0.0..1.0).contains(&self.ld_rho) {
            return Err(Error::Config(format!("ld_rho: {} outside [0, 1)", self.ld_rho)));
        }
        self.maf_law.validate()
    }
}

/// Hardy–Weinberg genotypes seeded from `cfg.seed`.
pub fn simulate_genotypes(cfg: &GenotypeGenConfig) -> Result<GenotypeMatrix> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    Ok(simulate_genotypes_with(cfg, &mut rng))
}

/// Each sample carries two haplotypes. A haplotype is an AR(1) Gaussian walk
/// across variants, and carries the minor allele at variant `j` when its score
/// falls below `Φ⁻¹(mafⱼ)`, so each margin is Binomial(2, mafⱼ).
pub fn simulate_genotypes_with<R: Rng + ?Sized>(cfg: &GenotypeGenConfig, rng: &mut R) -> GenotypeMatrix {
    let (n, p) = (cfg.n, cfg.p);
    let std_normal = NormalDist::new(0.0, 1.0).expect("standard normal");
    let thresholds: Vec<f64> = (0..p)
        .map(|_| std_normal.inverse_cdf(cfg.maf_law.draw(rng)))
        .collect();
    let rho = cfg.ld_rho;
    let innovation = (1.0 - rho * rho).sqrt();
    let mut values = vec![0.0; n * p];
    for row in values.chunks_mut(p) {
        for _ in 0..2 {
            let mut z: f64 = 0.0;
            for (j, (cell, &t)) in row.iter_mut().zip(&thresholds).enumerate() {
                let e: f64 = StandardNormal.sample(rng);
                z = if j == 0 { e } else { rho * z + innovation * e };
                if z < t {
                    *cell += 1.0;
                }
            }
        }
    }
    GenotypeMatrix::from_values(DMatrix::from_row_slice(n, p, &values)).expect("valid genotypes")
}

/// `a = G̃u` with `u ~ N(0, σ_g²/p_λ · I)`.
pub fn sample_random_effect<R: Rng + ?Sized>(g_causal: &DMatrix<f64>, sigma_g_sq: f64, rng: &mut R) -> DVector<f64> {
    let p = g_causal.ncols().max(1);
    let sd = (sigma_g_sq / p as f64).sqrt();
    let u = DVector::from_fn(g_causal.ncols(), |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        sd * z
    });
    g_causal * u
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhenotypeModel {
    Null,
    Linear,
    Quadratic,
    Cosh,
    Ricker,
    Mult2,
    Mult3,
    Thresh2,
    Thresh3,
}

impl PhenotypeModel {
    pub const ALL: [PhenotypeModel; 9] = [
        PhenotypeModel::Null,
        PhenotypeModel::Linear,
        PhenotypeModel::Quadratic,
        PhenotypeModel::Cosh,
        PhenotypeModel::Ricker,
        PhenotypeModel::Mult2,
        PhenotypeModel::Mult3,
        PhenotypeModel::Thresh2,
        PhenotypeModel::Thresh3,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PhenotypeModel::Null => "null",
            PhenotypeModel::Linear => "linear",
            PhenotypeModel::Quadratic => "quadratic",
            PhenotypeModel::Cosh => "cosh",
            PhenotypeModel::Ricker => "ricker",
            PhenotypeModel::Mult2 => "mult2",
            PhenotypeModel::Mult3 => "mult3",
            PhenotypeModel::Thresh2 => "thresh2",
            PhenotypeModel::Thresh3 => "thresh3",
        }
    }

    /// Order `k` of a k-way interaction model.
    pub fn interaction_order(&self) -> Option<usize> {
        match self {
            PhenotypeModel::Mult2 | PhenotypeModel::Thresh2 => Some(2),
            PhenotypeModel::Mult3 | PhenotypeModel::Thresh3 => Some(3),
            _ => None,
        }
    }

    pub fn is_random_effect(&self) -> bool {
        matches!(
            self,
            PhenotypeModel::Linear | PhenotypeModel::Quadratic | PhenotypeModel::Cosh | PhenotypeModel::Ricker
        )
    }
}

impl fmt::Display for PhenotypeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PhenotypeModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("model: unknown model '{s}'")))
    }
}

/// Input to [`apply_model`]: the random effect `a`, or the causal genotype columns.
#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    RandomEffect(&'a DVector<f64>),
    Causal(&'a DMatrix<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalParams {
    pub sigma_g_sq: f64,
    pub beta: f64,
    /// Rescale `f` to variance `σ_g²`. When false, random-effect signals are
    /// only centered and interaction signals are centered and multiplied by `σ_g`.
    pub standardize: bool,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise elementary symmetric polynomial of degree `k`: the sum over all
/// size-`k` column subsets of their product.
pub fn elementary_symmetric(g: &DMatrix<f64>, k: usize) -> DVector<f64> {
    DVector::from_fn(g.nrows(), |i, _| {
        let mut e = vec![0.0; k + 1];
        e[0] = 1.0;
        for &x in g.row(i).iter() {
            for m in (1..=k).rev() {
                e[m] += e[m - 1] * x;
            }
        }
        e[k]
    })
}

/// Uncentered signal for `model`.
pub fn raw_signal(model: PhenotypeModel, input: ModelInput<'_>, beta: f64) -> Result<DVector<f64>> {
    match (model, input) {
        (PhenotypeModel::Null, ModelInput::RandomEffect(a)) => Ok(DVector::zeros(a.len())),
        (PhenotypeModel::Null, ModelInput::Causal(g)) => Ok(DVector::zeros(g.nrows())),
        (PhenotypeModel::Linear, ModelInput::RandomEffect(a)) => Ok(a.clone()),
        (PhenotypeModel::Quadratic, ModelInput::RandomEffect(a)) => Ok(a.map(|x| x * x)),
        (PhenotypeModel::Cosh, ModelInput::RandomEffect(a)) => Ok(a.map(f64::cosh)),
        (PhenotypeModel::Ricker, ModelInput::RandomEffect(a)) => Ok(a.map(|x| {
            let r = softplus(x * x);
            beta * r * (-r).exp()
        })),
        (m, ModelInput::Causal(g)) if m.interaction_order().is_some() => {
            let k = m.interaction_order().unwrap_or(2);
            if g.ncols() < k {
                return Err(Error::Config(format!(
                    "causal_prop: {m} needs at least {k} causal variants, got {}",
                    g.ncols()
                )));
            }
            let f = elementary_symmetric(g, k);
            Ok(match m {
                PhenotypeModel::Thresh2 | PhenotypeModel::Thresh3 => f.map(|v| v.max(0.0)),
                _ => f,
            })
        }
        (m, _) => Err(Error::Config(format!("model: {m} does not accept this input"))),
    }
}

/// Mean signal `f`: the raw transform, centered and scaled.
pub fn apply_model(model: PhenotypeModel, input: ModelInput<'_>, params: &SignalParams) -> Result<DVector<f64>> {
    let raw = raw_signal(model, input, params.beta)?;
    let n = raw.len();
    if n == 0 {
        return Ok(raw);
    }
    let centered = raw.add_scalar(-raw.mean());
    let scale = params.sigma_g_sq.sqrt();
    if params.standardize {
        let sd = (centered.norm_squared() / n as f64).sqrt();
        if sd <= 1e-12 * (1.0 + raw.amax()) {
            return Ok(DVector::zeros(n));
        }
        Ok(centered * (scale / sd))
    } else if model.is_random_effect() {
        Ok(centered)
    } else {
        Ok(centered * scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationScenario {
    pub name: String,
    pub model: PhenotypeModel,
    pub sigma_g_sq: f64,
    pub sigma_0_sq: f64,
    pub beta: f64,
    pub causal_prop: f64,
    pub geno: GenotypeGenConfig,
    pub weight_scheme: WeightScheme,
    pub replicates: usize,
    pub alpha: f64,
    pub standardize: bool,
    /// Variants below this folded MAF are dropped before testing.
    pub min_maf: f64,
    #[serde(skip)]
    pub kernel: KernelConfig,
    #[serde(skip)]
    pub minque: MinqueConfig,
}

impl Default for SimulationScenario {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            model: PhenotypeModel::Null,
            sigma_g_sq: 0.0,
            sigma_0_sq: 2.0,
            beta: 0.0,
            causal_prop: 0.2,
            geno: GenotypeGenConfig::default(),
            weight_scheme: WeightScheme::Unweighted,
            replicates: 500,
            alpha: 0.05,
            standardize: true,
            min_maf: 0.0,
            kernel: KernelConfig::default(),
            minque: MinqueConfig::default(),
        }
    }
}

/// `(σ_g², σ₀², β)` from the n = 1000 parameter grid, keyed by variant count
/// 500, 2000 or 4000. The 2000-variant Ricker row is read as `(1, 2, 70)`.
pub fn full_scale_parameters(model: PhenotypeModel, snps: usize) -> Option<(f64, f64, f64)> {
    let col = match snps {
        500 => 0,
        2000 => 1,
        4000 => 2,
        _ => return None,
    };
    let (g, beta): ([f64; 3], [f64; 3]) = match model {
        PhenotypeModel::Null => ([0.0; 3], [0.0; 3]),
        PhenotypeModel::Linear => ([0.5, 0.9, 1.2], [0.0; 3]),
        PhenotypeModel::Quadratic => ([1.5, 5.0, 7.0], [0.0; 3]),
        PhenotypeModel::Cosh => ([2.0, 3.0, 3.0], [0.0; 3]),
        PhenotypeModel::Ricker => ([0.5, 1.0, 1.0], [30.0, 70.0, 150.0]),
        PhenotypeModel::Mult2 => ([8.0, 10.0, 20.0], [0.0; 3]),
        PhenotypeModel::Mult3 => ([10.0, 20.0, 20.0], [0.0; 3]),
        PhenotypeModel::Thresh2 => ([8.0, 10.0, 50.0], [0.0; 3]),
        PhenotypeModel::Thresh3 => ([5.0, 20.0, 20.0], [0.0; 3]),
    };
    Some((g[col], 2.0, beta[col]))
}

impl SimulationScenario {
    /// Full-scale preset: n = 1000, 1000 replicates.
    pub fn full_scale(model: PhenotypeModel, snps: usize) -> Result<Self> {
        let (sigma_g_sq, sigma_0_sq, beta) = full_scale_parameters(model, snps)
            .ok_or_else(|| Error::Config(format!("p: no full-scale row for {snps} variants")))?;
        Ok(Self {
            name: format!("{model}-{snps}"),
            model,
            sigma_g_sq,
            sigma_0_sq,
            beta,
            geno: GenotypeGenConfig {
                n: 1000,
                p: snps,
                ..GenotypeGenConfig::default()
            },
            replicates: 1000,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name}: must be a non-negative number, got {v}")))
            }
        };
        nonneg("sigma_g_sq", self.sigma_g_sq)?;
        nonneg("sigma_0_sq", self.sigma_0_sq)?;
        nonneg("beta", self.beta)?;
        nonneg("min_maf", self.min_maf)?;
        if !(self.causal_prop > 0.0 && self.causal_prop <= 1.0) {
            return Err(Error::Config(format!("causal_prop: {} outside (0, 1]", self.causal_prop)));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates: must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha: {} outside (0, 1)", self.alpha)));
        }
        self.geno.validate()?;
        self.minque.validate()?;
        if let Some(k) = self.model.interaction_order() {
            if self.causal_count() < k {
                return Err(Error::Config(format!(
                    "causal_prop: {} needs at least {k} causal variants",
                    self.model
                )));
            }
        }
        Ok(())
    }

    /// `round(causal_prop · p)`, at least one.
    pub fn causal_count(&self) -> usize {
        ((self.causal_prop * self.geno.p as f64).round() as usize).clamp(1, self.geno.p)
    }

    fn signal_params(&self) -> SignalParams {
        SignalParams {
            sigma_g_sq: self.sigma_g_sq,
            beta: self.beta,
            standardize: self.standardize,
        }
    }
}

/// `y = f + ε`, drawing causal columns, the random effect and noise from `seed`.
pub fn simulate_phenotype(scenario: &SimulationScenario, g: &GenotypeMatrix, seed: u64) -> Result<DVector<f64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    simulate_phenotype_with(scenario, g, &mut rng)
}

pub fn simulate_phenotype_with<R: Rng + ?Sized>(
    scenario: &SimulationScenario,
    g: &GenotypeMatrix,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let n = g.n_samples();
    let f = signal_with(scenario, g, rng)?;
    let noise = Normal::new(0.0, scenario.sigma_0_sq.sqrt())
        .map_err(|e| Error::Config(format!("sigma_0_sq: {e}")))?;
    Ok(DVector::from_fn(n, |i, _| f[i] + noise.sample(rng)))
}

/// The mean signal alone, computed from the column-centered causal genotypes.
/// Consumes the generator exactly as [`simulate_phenotype_with`] does before
/// it draws noise.
pub fn signal_with<R: Rng + ?Sized>(scenario: &SimulationScenario, g: &GenotypeMatrix, rng: &mut R) -> Result<DVector<f64>> {
    let n = g.n_samples();
    if scenario.model == PhenotypeModel::Null {
        return Ok(DVector::zeros(n));
    }
    let p = g.n_variants();
    let count = ((scenario.causal_prop * p as f64).round() as usize).clamp(1, p.max(1));
    let mut cols = sample(rng, p, count).into_vec();
    cols.sort_unstable();
    let mut causal = g.values.select_columns(&cols);
    for mut col in causal.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let params = scenario.signal_params();
    if scenario.model.is_random_effect() {
        let a = sample_random_effect(&causal, scenario.sigma_g_sq, rng);
        apply_model(scenario.model, ModelInput::RandomEffect(&a), &params)
    } else {
        apply_model(scenario.model, ModelInput::Causal(&causal), &params)
    }
}

/// P-values of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub p_overall: f64,
    pub p_linear: f64,
    pub p_nonlinear: f64,
    pub p_skat: f64,
    pub skat_method: PValueMethod,
    pub theta: [f64; 4],
    pub converged: bool,
    pub iterations: usize,
    pub variants_tested: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    Overall,
    Linear,
    Nonlinear,
    Skat,
}

impl TestKind {
    pub const ALL: [TestKind; 4] = [TestKind::Overall, TestKind::Linear, TestKind::Nonlinear, TestKind::Skat];

    pub fn as_str(&self) -> &'static str {
        match self {
            TestKind::Overall => "overall",
            TestKind::Linear => "linear",
            TestKind::Nonlinear => "nonlinear",
            TestKind::Skat => "skat",
        }
    }
}

impl ReplicateRecord {
    pub fn p_value(&self, test: TestKind) -> f64 {
        match test {
            TestKind::Overall => self.p_overall,
            TestKind::Linear => self.p_linear,
            TestKind::Nonlinear => self.p_nonlinear,
            TestKind::Skat => self.p_skat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionRate {
    pub test: TestKind,
    pub rejections: usize,
    pub rate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloResult {
    pub scenario: SimulationScenario,
    /// Replicates that produced p-values.
    pub completed: usize,
    /// `(index, message)` for replicates that failed.
    pub failures: Vec<(usize, String)>,
    pub rates: Vec<RejectionRate>,
    pub records: Vec<ReplicateRecord>,
    pub elapsed_secs: f64,
}

impl MonteCarloResult {
    pub fn rate(&self, test: TestKind) -> &RejectionRate {
        self.rates
            .iter()
            .find(|r| r.test == test)
            .expect("all tests summarised")
    }
}

/// Generator for replicate `index`: seeded with `seed + index`.
pub fn replicate_rng(seed: u64, index: usize) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed.wrapping_add(index as u64))
}

/// Simulated genotypes and response for one replicate.
pub fn simulate_replicate(scenario: &SimulationScenario, index: usize) -> Result<(GenotypeMatrix, DVector<f64>)> {
    let mut rng = replicate_rng(scenario.geno.seed, index);
    let g = simulate_genotypes_with(&scenario.geno, &mut rng);
    let y = simulate_phenotype_with(scenario, &g, &mut rng)?;
    Ok((g, y))
}

/// One replicate end to end: simulate, filter, KNN test and SKAT.
pub fn run_replicate(scenario: &SimulationScenario, index: usize) -> Result<ReplicateRecord> {
    let (g, y) = simulate_replicate(scenario, index)?;
    let g = filter_variants(&compute_maf(&g), scenario.min_maf, 1.0).map_err(Error::at("filter"))?;
    let w = weights_for(&g, scenario.weight_scheme).map_err(Error::at("weights"))?;
    let basis = build_basis(&g, &w, None, scenario.kernel).map_err(Error::at("basis"))?;
    let knn = knn_test_with_basis(&y, &basis, &scenario.minque)?;
    let design = design_with_intercept(y.len(), None)?;
    let null = fit_null_model(&y, &design).map_err(Error::at("null model"))?;
    let k = product_kernel(&g, &w, true).map_err(Error::at("kernel"))?;
    let skat = skat_from_kernel(&null, &k).map_err(Error::at("skat"))?;
    Ok(ReplicateRecord {
        index,
        p_overall: knn.p_overall,
        p_linear: knn.p_linear,
        p_nonlinear: knn.p_nonlinear,
        p_skat: skat.p_value,
        skat_method: skat.method_used,
        theta: knn.theta,
        converged: knn.converged,
        iterations: knn.iterations,
        variants_tested: g.n_variants(),
    })
}

/// Runs every replicate (in parallel) and aggregates rejection rates at
/// `scenario.alpha`. Fails when 1% or more of the replicates fail.
pub fn run_scenario(scenario: &SimulationScenario) -> Result<MonteCarloResult> {
    scenario.validate()?;
    let start = Instant::now();
    let outcomes: Vec<Result<ReplicateRecord>> = (0..scenario.replicates)
        .into_par_iter()
        .map(|i| run_replicate(scenario, i))
        .collect();
    let mut records = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    if failures.len() * 100 >= scenario.replicates && !failures.is_empty() {
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total: scenario.replicates,
        });
    }
    let rates = summarise(&records, scenario.alpha);
    Ok(MonteCarloResult {
        scenario: scenario.clone(),
        completed: records.len(),
        failures,
        rates,
        records,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Rejection counts at `alpha` with 95% Clopper–Pearson intervals.
pub fn summarise(records: &[ReplicateRecord], alpha: f64) -> Vec<RejectionRate> {
    let n = records.len();
    TestKind::ALL
        .into_iter()
        .map(|test| {
            let rejections = records.iter().filter(|r| r.p_value(test) < alpha).count();
            let (ci_lo, ci_hi) = clopper_pearson(rejections, n, 0.95);
            RejectionRate {
                test,
                rejections,
                rate: if n == 0 { 0.0 } else { rejections as f64 / n as f64 },
                ci_lo,
                ci_hi,
            }
        })
        .collect()
}

/// Scenario descriptors available as grouping columns in [`power_summary`].
pub const GROUP_KEYS: [&str; 9] = [
    "model",
    "n",
    "p",
    "causal_prop",
    "weights",
    "sigma_g_sq",
    "sigma_0_sq",
    "maf_law",
    "ld_rho",
];

fn group_value(s: &SimulationScenario, key: &str) -> Result<String> {
    Ok(match key {
        "model" => s.model.to_string(),
        "n" => s.geno.n.to_string(),
        "p" => s.geno.p.to_string(),
        "causal_prop" => s.causal_prop.to_string(),
        "weights" => s.weight_scheme.to_string(),
        "sigma_g_sq" => s.sigma_g_sq.to_string(),
        "sigma_0_sq" => s.sigma_0_sq.to_string(),
        "maf_law" => s.geno.maf_law.to_string(),
        "ld_rho" => s.geno.ld_rho.to_string(),
        other => return Err(Error::Config(format!("group key: unknown key '{other}'"))),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerRow {
    pub scenario: String,
    pub keys: Vec<String>,
    pub test: TestKind,
    pub rate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub replicates: usize,
}

/// Long-format power table: one row per scenario and test.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerTable {
    pub key_names: Vec<String>,
    pub rows: Vec<PowerRow>,
}

pub fn power_summary(results: &[MonteCarloResult], group_keys: &[&str]) -> Result<PowerTable> {
    let mut rows = Vec::with_capacity(results.len() * TestKind::ALL.len());
    for res in results {
        let keys = group_keys
            .iter()
            .map(|k| group_value(&res.scenario, k))
            .collect::<Result<Vec<_>>>()?;
        for r in &res.rates {
            rows.push(PowerRow {
                scenario: res.scenario.name.clone(),
                keys: keys.clone(),
                test: r.test,
                rate: r.rate,
                ci_lo: r.ci_lo,
                ci_hi: r.ci_hi,
                replicates: res.completed,
            });
        }
    }
    Ok(PowerTable {
        key_names: group_keys.iter().map(|k| k.to_string()).collect(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use itertools::Itertools;
    use proptest::prelude::*;

    fn geno(n: usize, p: usize, law: MafLaw, rho: f64, seed: u64) -> GenotypeGenConfig {
        GenotypeGenConfig {
            n,
            p,
            maf_law: law,
            ld_rho: rho,
            seed,
        }
    }

    #[test]
    fn half_frequency_means_are_one() {
        let g = simulate_genotypes(&geno(4000, 5, MafLaw::Uniform { lo: 0.5, hi: 0.5 }, 0.0, 3)).unwrap();
        for j in 0..5 {
            assert!((g.values.column(j).mean() - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn genotype_margins_follow_maf() {
        let g = simulate_genotypes(&geno(20_000, 3, MafLaw::Uniform { lo: 0.1, hi: 0.1 }, 0.6, 9)).unwrap();
        for j in 0..3 {
            let col = g.values.column(j);
            let mean = col.mean();
            let var = col.map(|v| (v - mean).powi(2)).mean();
            assert!((mean - 0.2).abs() < 0.02, "mean {mean}");
            assert!((var - 0.18).abs() < 0.02, "var {var}");
        }
    }

    fn adjacent_correlation(g: &GenotypeMatrix) -> f64 {
        let a = g.values.column(0).add_scalar(-g.values.column(0).mean());
        let b = g.values.column(1).add_scalar(-g.values.column(1).mean());
        a.dot(&b) / (a.norm() * b.norm())
    }

    #[test]
    fn independent_variants_are_uncorrelated() {
        let g = simulate_genotypes(&geno(2000, 2, MafLaw::Uniform { lo: 0.3, hi: 0.3 }, 0.0, 5)).unwrap();
        assert!(adjacent_correlation(&g).abs() < 0.1);
        let g = simulate_genotypes(&geno(2000, 2, MafLaw::Uniform { lo: 0.3, hi: 0.3 }, 0.9, 5)).unwrap();
        assert!(adjacent_correlation(&g) > 0.5);
    }

    #[test]
    fn genotypes_are_deterministic() {
        let cfg = geno(30, 10, MafLaw::RARE_DEFAULT, 0.3, 77);
        assert_eq!(simulate_genotypes(&cfg).unwrap(), simulate_genotypes(&cfg).unwrap());
        let other = GenotypeGenConfig { seed: 78, ..cfg };
        assert_ne!(simulate_genotypes(&cfg).unwrap(), simulate_genotypes(&other).unwrap());
    }

    #[test]
    fn rare_mixture_draws_from_both_ranges() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let draws: Vec<f64> = (0..2000).map(|_| MafLaw::RARE_DEFAULT.draw(&mut rng)).collect();
        let rare = draws.iter().filter(|&&m| m < 0.05).count() as f64 / 2000.0;
        assert!((rare - 0.5).abs() < 0.05);
        assert!(draws.iter().all(|&m| (0.005..=0.5).contains(&m)));
    }

    #[test]
    fn maf_law_round_trips() {
        for law in [MafLaw::Uniform { lo: 0.05, hi: 0.5 }, MafLaw::RARE_DEFAULT] {
            assert_eq!(law.to_string().parse::<MafLaw>().unwrap(), law);
        }
        assert!("uniform(0.3,0.1)".parse::<MafLaw>().is_err());
        assert!("gauss(1,2)".parse::<MafLaw>().is_err());
    }

    #[test]
    fn zero_variance_effect_is_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let g = DMatrix::from_element(4, 3, 1.0);
        assert_eq!(sample_random_effect(&g, 0.0, &mut rng), DVector::zeros(4));
    }

    #[test]
    fn identity_effect_variance() {
        let n = 5;
        let g = DMatrix::identity(n, n);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let draws = 20_000;
        let mut sum_sq = DVector::zeros(n);
        for _ in 0..draws {
            let a = sample_random_effect(&g, 2.0, &mut rng);
            sum_sq += a.map(|v| v * v);
        }
        for v in (sum_sq / draws as f64).iter() {
            assert!((v - 2.0 / n as f64).abs() < 0.02, "{v}");
        }
    }

    #[test]
    fn random_effect_covariance() {
        let g = DMatrix::from_row_slice(3, 4, &[0., 1., 2., 1., 1., 1., 0., 2., 2., 0., 1., 1.]);
        let target = &g * g.transpose() * (1.5 / 4.0);
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let draws = 2000;
        let mut acc = DMatrix::zeros(3, 3);
        for _ in 0..draws {
            let a = sample_random_effect(&g, 1.5, &mut rng);
            acc += &a * a.transpose();
        }
        acc /= draws as f64;
        let rel = (&acc - &target).norm() / target.norm();
        assert!(rel < 0.15, "relative error {rel}");
    }

    fn params(std: bool) -> SignalParams {
        SignalParams {
            sigma_g_sq: 1.0,
            beta: 1.0,
            standardize: std,
        }
    }

    #[test]
    fn constant_signals_center_to_zero() {
        let a = DVector::zeros(5);
        for model in [PhenotypeModel::Quadratic, PhenotypeModel::Cosh, PhenotypeModel::Ricker] {
            for std in [true, false] {
                let f = apply_model(model, ModelInput::RandomEffect(&a), &params(std)).unwrap();
                assert!(f.amax() < 1e-15, "{model}");
            }
        }
    }

    #[test]
    fn interaction_examples() {
        let g = DMatrix::from_column_slice(3, 2, &[1., 2., 0., 2., 0., 1.]);
        let raw = raw_signal(PhenotypeModel::Mult2, ModelInput::Causal(&g), 0.0).unwrap();
        assert_eq!(raw, DVector::from_vec(vec![2.0, 0.0, 0.0]));
        let raw = raw_signal(PhenotypeModel::Thresh2, ModelInput::Causal(&g), 0.0).unwrap();
        assert_eq!(raw, DVector::from_vec(vec![2.0, 0.0, 0.0]));
        let g = DMatrix::from_column_slice(3, 2, &[-1., 0., 1., 1., 5., 2.]);
        let raw = raw_signal(PhenotypeModel::Thresh2, ModelInput::Causal(&g), 0.0).unwrap();
        assert_eq!(raw, DVector::from_vec(vec![0.0, 0.0, 2.0]));
    }

    #[test]
    fn interaction_needs_enough_columns() {
        let g = DMatrix::from_element(3, 2, 1.0);
        assert!(raw_signal(PhenotypeModel::Mult3, ModelInput::Causal(&g), 0.0).is_err());
        let a = DVector::zeros(3);
        assert!(raw_signal(PhenotypeModel::Mult2, ModelInput::RandomEffect(&a), 0.0).is_err());
        assert!(raw_signal(PhenotypeModel::Linear, ModelInput::Causal(&g), 0.0).is_err());
    }

    #[test]
    fn ricker_matches_formula() {
        let a = DVector::from_vec(vec![0.0, 1.0, -2.0]);
        let raw = raw_signal(PhenotypeModel::Ricker, ModelInput::RandomEffect(&a), 30.0).unwrap();
        for (x, f) in a.iter().zip(raw.iter()) {
            let r = (1.0 + (x * x).exp()).ln();
            assert_relative_eq!(*f, 30.0 * r * (-r).exp(), max_relative = 1e-14);
        }
        assert_eq!(softplus(800.0), 800.0);
    }

    #[test]
    fn standardized_signal_has_target_variance() {
        let a = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.5, 1.1]);
        let p = SignalParams {
            sigma_g_sq: 3.0,
            beta: 0.0,
            standardize: true,
        };
        let f = apply_model(PhenotypeModel::Cosh, ModelInput::RandomEffect(&a), &p).unwrap();
        assert!(f.mean().abs() < 1e-14);
        assert_relative_eq!(f.norm_squared() / 5.0, 3.0, max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn elementary_symmetric_matches_subsets(
            vals in proptest::collection::vec(-2.0f64..2.0, 12),
            k in 1usize..4,
        ) {
            let g = DMatrix::from_row_slice(2, 6, &vals);
            let fast = elementary_symmetric(&g, k);
            for i in 0..2 {
                let brute: f64 = (0..6)
                    .combinations(k)
                    .map(|c| c.iter().map(|&j| g[(i, j)]).product::<f64>())
                    .sum();
                prop_assert!((fast[i] - brute).abs() < 1e-9 * (1.0 + brute.abs()));
            }
        }

        #[test]
        fn interaction_signal_commutes_with_permutation(seed in 0u64..1000, model_idx in 0usize..4) {
            let model = [PhenotypeModel::Mult2, PhenotypeModel::Mult3, PhenotypeModel::Thresh2, PhenotypeModel::Thresh3][model_idx];
            let cfg = geno(12, 8, MafLaw::Uniform { lo: 0.2, hi: 0.5 }, 0.0, seed);
            let g = simulate_genotypes(&cfg).unwrap();
            let scenario = SimulationScenario { model, sigma_g_sq: 2.0, causal_prop: 0.5, geno: cfg, ..Default::default() };
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let perm = sample(&mut rng, 12, 12).into_vec();
            let permuted = GenotypeMatrix::from_values(g.values.select_rows(&perm)).unwrap();
            let f = signal_with(&scenario, &g, &mut ChaCha20Rng::seed_from_u64(seed + 1)).unwrap();
            let fp = signal_with(&scenario, &permuted, &mut ChaCha20Rng::seed_from_u64(seed + 1)).unwrap();
            for (i, &src) in perm.iter().enumerate() {
                prop_assert!((fp[i] - f[src]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn phenotype_is_deterministic() {
        let scenario = SimulationScenario {
            model: PhenotypeModel::Linear,
            sigma_g_sq: 0.5,
            geno: geno(40, 10, MafLaw::Uniform { lo: 0.05, hi: 0.5 }, 0.0, 1),
            ..Default::default()
        };
        let g = simulate_genotypes(&scenario.geno).unwrap();
        assert_eq!(simulate_phenotype(&scenario, &g, 4).unwrap(), simulate_phenotype(&scenario, &g, 4).unwrap());
    }

    #[test]
    fn full_scale_rows() {
        assert_eq!(full_scale_parameters(PhenotypeModel::Linear, 500), Some((0.5, 2.0, 0.0)));
        assert_eq!(full_scale_parameters(PhenotypeModel::Ricker, 2000), Some((1.0, 2.0, 70.0)));
        assert_eq!(full_scale_parameters(PhenotypeModel::Thresh2, 4000), Some((50.0, 2.0, 0.0)));
        assert!(full_scale_parameters(PhenotypeModel::Linear, 100).is_none());
        let s = SimulationScenario::full_scale(PhenotypeModel::Quadratic, 500).unwrap();
        assert_eq!((s.geno.n, s.geno.p, s.replicates, s.sigma_g_sq), (1000, 500, 1000, 1.5));
    }

    #[test]
    fn scenario_validation_names_field() {
        let bad = SimulationScenario {
            causal_prop: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("causal_prop"));
        let bad = SimulationScenario {
            replicates: 0,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("replicates"));
        let bad = SimulationScenario {
            model: PhenotypeModel::Mult3,
            causal_prop: 0.01,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("causal_prop"));
    }

    fn small(model: PhenotypeModel, reps: usize) -> SimulationScenario {
        SimulationScenario {
            model,
            sigma_g_sq: 1.0,
            geno: geno(40, 15, MafLaw::Uniform { lo: 0.05, hi: 0.5 }, 0.0, 11),
            replicates: reps,
            ..Default::default()
        }
    }

    #[test]
    fn single_replicate_interval_is_wide() {
        let res = run_scenario(&small(PhenotypeModel::Null, 1)).unwrap();
        assert_eq!(res.completed, 1);
        for r in &res.rates {
            assert!(r.rejections <= 1);
            assert!(r.ci_hi - r.ci_lo > 0.95);
        }
    }

    #[test]
    fn scenario_is_deterministic_across_thread_counts() {
        let s = small(PhenotypeModel::Quadratic, 6);
        let a = run_scenario(&s).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| run_scenario(&s)).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.rates, b.rates);
    }

    #[test]
    fn rates_match_counts() {
        let res = run_scenario(&small(PhenotypeModel::Linear, 8)).unwrap();
        for r in &res.rates {
            assert_relative_eq!(r.rate, r.rejections as f64 / res.completed as f64);
            assert!(r.ci_lo <= r.rate && r.rate <= r.ci_hi);
        }
    }

    #[test]
    fn power_table_shape() {
        let mut results = Vec::new();
        for scheme in [WeightScheme::Unweighted, WeightScheme::Wss, WeightScheme::Log] {
            let mut s = small(PhenotypeModel::Linear, 2);
            s.weight_scheme = scheme;
            results.push(run_scenario(&s).unwrap());
        }
        let table = power_summary(&results, &["model", "weights"]).unwrap();
        assert_eq!(table.rows.len(), 12);
        assert_eq!(table.rows[4].keys, vec!["linear".to_string(), "wss".to_string()]);
        assert!(power_summary(&results, &["colour"]).is_err());
    }
}
