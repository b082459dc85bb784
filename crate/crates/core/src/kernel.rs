//! Variance-component basis built from a weighted product kernel.
//!
//! The marginal covariance of the phenotype is modelled as
//! `θ₁ J + θ₂ K + θ₃ K⊙K + θ₄ I` with `K = (1/p) X_w X_wᵀ`.
//! [`ComponentBasis`] stores the four matrices (with `J` and `I` kept
//! structural so products against them stay O(n²)) and the fixed-effect
//! design `Z`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::genotype::{GenotypeMatrix, VariantWeights};

/// Symmetric n×n kernel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix(DMatrix<f64>);

impl KernelMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension(format!(
                "kernel must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        if (&m - m.transpose()).amax() > 1e-10 * scale {
            return Err(Error::Dimension("kernel is not symmetric".into()));
        }
        Ok(KernelMatrix(m))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Smallest eigenvalue is at least `-1e-8` times the largest.
    pub fn is_psd(&self) -> bool {
        let eig = self.0.clone().symmetric_eigenvalues();
        let max = eig.max();
        let min = eig.min();
        min >= -1e-8 * max.abs().max(f64::MIN_POSITIVE)
    }
}

/// `(1/p) X_w X_wᵀ` where `X_w` is the (optionally column-centred) genotype
/// matrix with column `j` scaled by `w_j`.
pub fn product_kernel(g: &GenotypeMatrix, w: &VariantWeights, center: bool) -> Result<KernelMatrix> {
    let p = g.n_variants();
    if w.len() != p {
        return Err(Error::Dimension(format!("{} weights for {p} variants", w.len())));
    }
    if g.has_missing() {
        return Err(Error::MissingValues);
    }
    if !w.as_slice().iter().any(|&x| x > 0.0) {
        return Err(Error::DegenerateWeights);
    }
    let mut xw = g.values.clone();
    for (mut col, &wj) in xw.column_iter_mut().zip(w.as_slice()) {
        if center {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        col *= wj;
    }
    let mut k = &xw * xw.transpose();
    k /= p as f64;
    symmetrize(&mut k);
    Ok(KernelMatrix(k))
}

pub fn hadamard_square(k: &KernelMatrix) -> KernelMatrix {
    KernelMatrix(k.0.map(|x| x * x))
}

/// Rescales so that the trace equals n.
pub fn normalize_kernel(k: &KernelMatrix) -> Result<KernelMatrix> {
    let trace = k.trace();
    if !(trace > 0.0) {
        return Err(Error::NonPositiveTrace(trace));
    }
    Ok(KernelMatrix(&k.0 * (k.dim() as f64 / trace)))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// One covariance basis matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Component {
    /// The all-ones matrix `J`.
    Ones,
    Identity,
    Dense(DMatrix<f64>),
}

impl Component {
    pub fn to_dense(&self, n: usize) -> DMatrix<f64> {
        match self {
            Component::Ones => DMatrix::from_element(n, n, 1.0),
            Component::Identity => DMatrix::identity(n, n),
            Component::Dense(m) => m.clone(),
        }
    }

    /// `A · V` for a dense `A`.
    pub fn right_mul(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Component::Ones => {
                let row_sums = a.column_sum();
                let n = a.ncols();
                DMatrix::from_fn(a.nrows(), n, |i, _| row_sums[i])
            }
            Component::Identity => a.clone(),
            Component::Dense(m) => a * m,
        }
    }

    /// `vᵀ V v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        match self {
            Component::Ones => {
                let s = v.sum();
                s * s
            }
            Component::Identity => v.norm_squared(),
            Component::Dense(m) => v.dot(&(m * v)),
        }
    }

    /// `h += weight · V`.
    pub fn add_scaled_to(&self, h: &mut DMatrix<f64>, weight: f64) {
        if weight == 0.0 {
            return;
        }
        match self {
            Component::Ones => h.add_scalar_mut(weight),
            Component::Identity => {
                for i in 0..h.nrows() {
                    h[(i, i)] += weight;
                }
            }
            Component::Dense(m) => h.zip_apply(m, |a, b| *a += weight * b),
        }
    }
}

/// Four-component covariance basis plus fixed-effect design.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentBasis {
    n: usize,
    components: [Component; 4],
    z: DMatrix<f64>,
}

impl ComponentBasis {
    /// Assembles a basis from explicit components. `z` may have zero columns,
    /// in which case no fixed effects are projected out.
    pub fn new(n: usize, components: [Component; 4], z: DMatrix<f64>) -> Result<Self> {
        for (i, c) in components.iter().enumerate() {
            if let Component::Dense(m) = c {
                if m.nrows() != n || m.ncols() != n {
                    return Err(Error::Dimension(format!(
                        "component {} is {}x{}, expected {n}x{n}",
                        i + 1,
                        m.nrows(),
                        m.ncols()
                    )));
                }
                KernelMatrix::new(m.clone())?;
            }
        }
        if z.nrows() != n {
            return Err(Error::Dimension(format!("design has {} rows, expected {n}", z.nrows())));
        }
        if z.ncols() > 0 && !has_full_column_rank(&z) {
            return Err(Error::RankDeficientDesign);
        }
        Ok(Self { n, components, z })
    }

    /// Basis from explicit dense matrices and optional design.
    pub fn from_dense(v: [DMatrix<f64>; 4], z: DMatrix<f64>) -> Result<Self> {
        let n = v[0].nrows();
        let [a, b, c, d] = v;
        Self::new(
            n,
            [
                Component::Dense(a),
                Component::Dense(b),
                Component::Dense(c),
                Component::Dense(d),
            ],
            z,
        )
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn components(&self) -> &[Component; 4] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &Component {
        &self.components[i]
    }

    pub fn dense(&self, i: usize) -> DMatrix<f64> {
        self.components[i].to_dense(self.n)
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.z
    }

    /// `Σ aᵢ Vᵢ`.
    pub fn combine(&self, a: &[f64; 4]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.n, self.n);
        for (c, &w) in self.components.iter().zip(a) {
            c.add_scaled_to(&mut h, w);
        }
        h
    }

    /// Copy with a different design matrix.
    pub fn with_design(&self, z: DMatrix<f64>) -> Result<Self> {
        Self::new(self.n, self.components.clone(), z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelConfig {
    pub center: bool,
    pub normalize: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            center: true,
            normalize: false,
        }
    }
}

/// Builds `(J, K, K⊙K, I)` and the intercept-augmented design.
pub fn build_basis(
    g: &GenotypeMatrix,
    w: &VariantWeights,
    z: Option<&DMatrix<f64>>,
    config: KernelConfig,
) -> Result<ComponentBasis> {
    let n = g.n_samples();
    let design = design_with_intercept(n, z)?;
    let k = product_kernel(g, w, config.center)?;
    let k2 = hadamard_square(&k);
    let (k, k2) = if config.normalize {
        (normalize_kernel(&k)?, normalize_kernel(&k2)?)
    } else {
        (k, k2)
    };
    ComponentBasis::new(
        n,
        [
            Component::Ones,
            Component::Dense(k.into_inner()),
            Component::Dense(k2.into_inner()),
            Component::Identity,
        ],
        design,
    )
}

/// Prepends an intercept column, dropping constant columns from the supplied
/// covariates, and checks the result has full column rank.
pub fn design_with_intercept(n: usize, z: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
    let mut columns = vec![DVector::from_element(n, 1.0)];
    if let Some(z) = z {
        if z.nrows() != n {
            return Err(Error::Dimension(format!("covariates have {} rows, expected {n}", z.nrows())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("covariates contain missing or non-finite values".into()));
        }
        for col in z.column_iter() {
            let first = col[0];
            if col.iter().all(|&v| v == first) {
                continue;
            }
            columns.push(col.into_owned());
        }
    }
    let design = DMatrix::from_columns(&columns);
    if !has_full_column_rank(&design) {
        return Err(Error::RankDeficientDesign);
    }
    Ok(design)
}

fn has_full_column_rank(z: &DMatrix<f64>) -> bool {
    let sv = z.clone().singular_values();
    let max = sv.max();
    max > 0.0 && sv.min() > 1e-10 * max
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn geno(rows: usize, cols: usize, data: &[f64]) -> GenotypeMatrix {
        GenotypeMatrix::from_values(DMatrix::from_row_slice(rows, cols, data)).unwrap()
    }

    #[test]
    fn product_kernel_identity() {
        let g = geno(2, 2, &[1., 0., 0., 1.]);
        let k = product_kernel(&g, &VariantWeights::ones(2), false).unwrap();
        assert_eq!(k.matrix(), &DMatrix::from_row_slice(2, 2, &[0.5, 0., 0., 0.5]));
    }

    #[test]
    fn product_kernel_three_samples() {
        let g = geno(3, 2, &[1., 0., 0., 1., 1., 1.]);
        let k = product_kernel(&g, &VariantWeights::ones(2), false).unwrap();
        // hand multiply of X Xᵀ, halved
        let expected = DMatrix::from_row_slice(3, 3, &[1., 0., 1., 0., 1., 1., 1., 1., 2.]) * 0.5;
        assert_eq!(k.matrix(), &expected);
    }

    #[test]
    fn zero_weights_rejected() {
        let g = geno(2, 2, &[1., 0., 0., 1.]);
        assert!(matches!(
            product_kernel(&g, &VariantWeights(vec![0.0, 0.0]), false),
            Err(Error::DegenerateWeights)
        ));
        assert!(matches!(
            product_kernel(&g, &VariantWeights(vec![1.0]), false),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn hadamard_examples() {
        let k = KernelMatrix::new(DMatrix::from_row_slice(2, 2, &[2., 1., 1., 2.])).unwrap();
        assert_eq!(
            hadamard_square(&k).matrix(),
            &DMatrix::from_row_slice(2, 2, &[4., 1., 1., 4.])
        );
        let j = KernelMatrix::new(DMatrix::from_element(3, 3, 1.0)).unwrap();
        assert_eq!(hadamard_square(&j), j);
    }

    #[test]
    fn normalize_examples() {
        let i = KernelMatrix::new(DMatrix::identity(3, 3)).unwrap();
        assert_eq!(normalize_kernel(&i).unwrap(), i);
        let k = KernelMatrix::new(DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3])).unwrap();
        let nk = normalize_kernel(&k).unwrap();
        assert_relative_eq!(nk.matrix()[(0, 1)], 0.25, epsilon = 1e-15);
        assert_relative_eq!(nk.trace(), 2.0, epsilon = 1e-14);
        let zero = KernelMatrix::new(DMatrix::zeros(2, 2)).unwrap();
        assert!(matches!(normalize_kernel(&zero), Err(Error::NonPositiveTrace(_))));
    }

    #[test]
    fn basis_from_identity_genotypes() {
        let g = geno(2, 2, &[1., 0., 0., 1.]);
        let config = KernelConfig {
            center: false,
            normalize: false,
        };
        let b = build_basis(&g, &VariantWeights::ones(2), None, config).unwrap();
        assert_eq!(b.dense(0), DMatrix::from_element(2, 2, 1.0));
        assert_eq!(b.dense(1), DMatrix::identity(2, 2) * 0.5);
        assert_eq!(b.dense(2), DMatrix::identity(2, 2) * 0.25);
        assert_eq!(b.dense(3), DMatrix::identity(2, 2));
        assert_eq!(b.design(), &DMatrix::from_element(2, 1, 1.0));
    }

    #[test]
    fn basis_square_entry() {
        let g = geno(3, 2, &[1., 0., 0., 1., 1., 1.]);
        let config = KernelConfig {
            center: false,
            normalize: false,
        };
        let b = build_basis(&g, &VariantWeights::ones(2), None, config).unwrap();
        assert_eq!(b.dense(2)[(0, 2)], 0.25);
    }

    #[test]
    fn normalized_basis_traces() {
        let g = geno(3, 2, &[1., 0., 0., 1., 1., 2.]);
        let config = KernelConfig {
            center: true,
            normalize: true,
        };
        let b = build_basis(&g, &VariantWeights::ones(2), None, config).unwrap();
        assert_relative_eq!(b.dense(1).trace(), 3.0, epsilon = 1e-12);
        assert_relative_eq!(b.dense(2).trace(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn intercept_handling() {
        let z = DMatrix::from_row_slice(3, 2, &[1., 0.5, 1., 1.5, 1., 3.0]);
        let d = design_with_intercept(3, Some(&z)).unwrap();
        assert_eq!(d.ncols(), 2);
        assert_eq!(d.column(1).as_slice(), &[0.5, 1.5, 3.0]);
        let collinear = DMatrix::from_row_slice(3, 2, &[1., 2., 2., 4., 3., 6.]);
        assert!(matches!(
            design_with_intercept(3, Some(&collinear)),
            Err(Error::RankDeficientDesign)
        ));
    }

    #[test]
    fn structural_components_match_dense() {
        let a = DMatrix::from_fn(4, 4, |i, j| (i * 4 + j) as f64 * 0.1 - 0.3);
        let v = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.5]);
        for c in [Component::Ones, Component::Identity] {
            let dense = c.to_dense(4);
            assert_relative_eq!(c.right_mul(&a), &a * &dense, epsilon = 1e-14);
            assert_relative_eq!(c.quad_form(&v), v.dot(&(&dense * &v)), epsilon = 1e-14);
        }
    }

    fn arb_genotypes() -> impl Strategy<Value = GenotypeMatrix> {
        (2usize..7, 1usize..6).prop_flat_map(|(n, p)| {
            prop::collection::vec(0u8..3, n * p).prop_map(move |v| {
                let data: Vec<f64> = v.into_iter().map(f64::from).collect();
                GenotypeMatrix::from_values(DMatrix::from_row_slice(n, p, &data)).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn square_component_is_entrywise_square(g in arb_genotypes(), center in any::<bool>()) {
            let w = VariantWeights::ones(g.n_variants());
            let b = build_basis(&g, &w, None, KernelConfig { center, normalize: false }).unwrap();
            let v2 = b.dense(1);
            let v3 = b.dense(2);
            for (x, y) in v2.iter().zip(v3.iter()) {
                prop_assert!((x * x - y).abs() <= 1e-12);
            }
            prop_assert!(KernelMatrix::new(v2).unwrap().is_psd());
            prop_assert!(KernelMatrix::new(v3).unwrap().is_psd());
        }

        #[test]
        fn duplicating_columns_leaves_kernel_unchanged(g in arb_genotypes()) {
            let p = g.n_variants();
            let cols: Vec<usize> = (0..p).chain(0..p).collect();
            let doubled = g.select_variants(&cols);
            let k1 = product_kernel(&g, &VariantWeights::ones(p), false).unwrap();
            let k2 = product_kernel(&doubled, &VariantWeights::ones(2 * p), false).unwrap();
            prop_assert!((k1.matrix() - k2.matrix()).amax() <= 1e-12);
        }
    }
}
