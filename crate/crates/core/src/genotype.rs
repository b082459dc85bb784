//! Genotype matrices: loading, allele frequencies, QC filtering, imputation
//! and MAF-based variant weights.
//!
//! Missing genotypes are stored as `NaN` until [`impute_missing`] replaces
//! them with the column mean.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, Continuous};

use crate::error::{Error, Result};

/// An n×p dosage matrix with sample and variant identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct GenotypeMatrix {
    pub values: DMatrix<f64>,
    pub sample_ids: Vec<String>,
    pub variant_ids: Vec<String>,
    /// Folded minor-allele frequencies, populated by [`compute_maf`].
    pub maf: Option<Vec<f64>>,
}

impl GenotypeMatrix {
    pub fn new(
        values: DMatrix<f64>,
        sample_ids: Vec<String>,
        variant_ids: Vec<String>,
    ) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::EmptyMatrix);
        }
        if values.nrows() != sample_ids.len() || values.ncols() != variant_ids.len() {
            return Err(Error::Dimension(format!(
                "{}x{} matrix with {} sample ids and {} variant ids",
                values.nrows(),
                values.ncols(),
                sample_ids.len(),
                variant_ids.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_nan() && !(0.0..=2.0).contains(*v)) {
            return Err(Error::Parse {
                line: 0,
                message: format!("dosage {v} outside [0, 2]"),
            });
        }
        Ok(Self {
            values,
            sample_ids,
            variant_ids,
            maf: None,
        })
    }

    /// Wraps a complete matrix, generating `s{i}` / `v{j}` identifiers.
    pub fn from_values(values: DMatrix<f64>) -> Result<Self> {
        let sample_ids = (0..values.nrows()).map(|i| format!("s{}", i + 1)).collect();
        let variant_ids = (0..values.ncols()).map(|j| format!("v{}", j + 1)).collect();
        Self::new(values, sample_ids, variant_ids)
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_variants(&self) -> usize {
        self.values.ncols()
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    /// Keeps the listed columns, in the given order.
    pub fn select_variants(&self, columns: &[usize]) -> Self {
        let values = self.values.select_columns(columns);
        Self {
            values,
            sample_ids: self.sample_ids.clone(),
            variant_ids: columns.iter().map(|&j| self.variant_ids[j].clone()).collect(),
            maf: self
                .maf
                .as_ref()
                .map(|m| columns.iter().map(|&j| m[j]).collect()),
        }
    }
}

/// On-disk genotype layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenotypeFormat {
    /// Comma separated, header `sample_id,<variant_id>...`.
    CsvMatrix,
    /// Tab separated with the same layout, decimal dosages.
    DosageTsv,
}

impl GenotypeFormat {
    pub fn delimiter(self) -> u8 {
        match self {
            GenotypeFormat::CsvMatrix => b',',
            GenotypeFormat::DosageTsv => b'\t',
        }
    }

    /// Picks the format from a file extension (`.tsv`/`.txt` are tab separated).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => GenotypeFormat::DosageTsv,
            _ => GenotypeFormat::CsvMatrix,
        }
    }
}

/// A parsed numeric table with a leading identifier column.
#[derive(Debug, Clone)]
pub struct Table {
    pub columns: Vec<String>,
    pub row_ids: Vec<String>,
    pub values: DMatrix<f64>,
}

/// Reads a delimited table whose first column holds row identifiers.
/// Empty fields and `NA` become `NaN`.
pub fn read_table(path: &Path, delimiter: u8) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_table(&text, delimiter)
}

pub fn parse_table(text: &str, delimiter: u8) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            message: "header needs an id column and at least one value column".into(),
        });
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let width = header.len();

    let mut row_ids = Vec::new();
    let mut data = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != width {
            return Err(Error::Parse {
                line,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        row_ids.push(record[0].to_owned());
        for (field, column) in record.iter().skip(1).zip(&columns) {
            let value = if field.is_empty() || field.eq_ignore_ascii_case("na") {
                f64::NAN
            } else {
                field.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("non-numeric value {field:?} in column {column}"),
                })?
            };
            if value.is_infinite() {
                return Err(Error::Parse {
                    line,
                    message: format!("infinite value in column {column}"),
                });
            }
            data.push((line, value));
        }
    }
    if row_ids.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    let values = DMatrix::from_row_iterator(
        row_ids.len(),
        columns.len(),
        data.iter().map(|&(_, v)| v),
    );
    Ok(Table {
        columns,
        row_ids,
        values,
    })
}

/// Loads a genotype file. Entries must lie in `[0, 2]`; missing values are kept as `NaN`.
pub fn load_genotypes(path: &Path, format: GenotypeFormat) -> Result<GenotypeMatrix> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_genotypes(&text, format)
}

pub fn parse_genotypes(text: &str, format: GenotypeFormat) -> Result<GenotypeMatrix> {
    let table = parse_table(text, format.delimiter())?;
    for (i, row) in table.values.row_iter().enumerate() {
        if let Some(v) = row.iter().find(|v| !v.is_nan() && !(0.0..=2.0).contains(*v)) {
            // header occupies line 1
            return Err(Error::Parse {
                line: i + 2,
                message: format!("dosage {v} outside [0, 2] for sample {}", table.row_ids[i]),
            });
        }
    }
    GenotypeMatrix::new(table.values, table.row_ids, table.columns)
}

/// Folded minor-allele frequency of every column over its observed entries.
pub fn compute_maf(g: &GenotypeMatrix) -> GenotypeMatrix {
    let maf = g
        .values
        .column_iter()
        .map(|col| {
            let (sum, count) = col
                .iter()
                .filter(|v| !v.is_nan())
                .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            if count == 0 {
                return 0.0;
            }
            let freq = sum / (2.0 * count as f64);
            freq.min(1.0 - freq)
        })
        .collect();
    GenotypeMatrix {
        maf: Some(maf),
        ..g.clone()
    }
}

/// Drops rare/monomorphic and poorly called variants, preserving column order.
pub fn filter_variants(
    g: &GenotypeMatrix,
    min_maf: f64,
    max_missing_rate: f64,
) -> Result<GenotypeMatrix> {
    let g = match g.maf {
        Some(_) => g.clone(),
        None => compute_maf(g),
    };
    let maf = g.maf.as_deref().unwrap_or_default();
    let n = g.n_samples() as f64;
    let keep: Vec<usize> = (0..g.n_variants())
        .filter(|&j| {
            let missing = g.values.column(j).iter().filter(|v| v.is_nan()).count() as f64;
            maf[j] >= min_maf && maf[j] > 0.0 && missing / n <= max_missing_rate
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::NoVariantsRemain);
    }
    Ok(g.select_variants(&keep))
}

/// Replaces missing entries with the mean of the observed entries in the same column.
pub fn impute_missing(g: &GenotypeMatrix) -> Result<GenotypeMatrix> {
    let mut out = g.clone();
    for (j, mut col) in out.values.column_iter_mut().enumerate() {
        let (sum, count) = col
            .iter()
            .filter(|v| !v.is_nan())
            .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
        if count == 0 {
            return Err(Error::AllMissing(g.variant_ids[j].clone()));
        }
        let mean = sum / count as f64;
        col.iter_mut().filter(|v| v.is_nan()).for_each(|v| *v = mean);
    }
    Ok(out)
}

/// MAF-based variant weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WeightScheme {
    /// All weights one.
    Unweighted,
    /// Beta density evaluated at the MAF.
    Beta { a: f64, b: f64 },
    /// `1 / sqrt(maf (1 - maf))`.
    Wss,
    /// `-log10(maf)`.
    Log,
}

impl Default for WeightScheme {
    fn default() -> Self {
        WeightScheme::Unweighted
    }
}

impl WeightScheme {
    pub const DEFAULT_BETA: WeightScheme = WeightScheme::Beta { a: 1.0, b: 25.0 };

    pub fn tag(&self) -> &'static str {
        match self {
            WeightScheme::Unweighted => "uw",
            WeightScheme::Beta { .. } => "beta",
            WeightScheme::Wss => "wss",
            WeightScheme::Log => "log",
        }
    }

    /// Parses a tag, with optional beta shape `a,b`.
    pub fn from_tag(tag: &str, beta_params: Option<(f64, f64)>) -> Result<Self> {
        match tag.to_ascii_lowercase().as_str() {
            "uw" | "unweighted" => Ok(WeightScheme::Unweighted),
            "beta" => {
                let (a, b) = beta_params.unwrap_or((1.0, 25.0));
                if !(a > 0.0 && b > 0.0) {
                    return Err(Error::Config(format!("beta parameters must be positive, got {a},{b}")));
                }
                Ok(WeightScheme::Beta { a, b })
            }
            "wss" => Ok(WeightScheme::Wss),
            "log" => Ok(WeightScheme::Log),
            other => Err(Error::Config(format!("unknown weight scheme {other:?}"))),
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightScheme::Beta { a, b } => write!(f, "beta({a},{b})"),
            other => f.write_str(other.tag()),
        }
    }
}

impl FromStr for WeightScheme {
    type Err = Error;

    /// Accepts `uw`, `wss`, `log`, `beta` or `beta(a,b)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(inner) = s
            .strip_prefix("beta(")
            .and_then(|rest| rest.strip_suffix(')'))
        {
            let params = parse_pair(inner)?;
            return WeightScheme::from_tag("beta", Some(params));
        }
        WeightScheme::from_tag(s, None)
    }
}

pub fn parse_pair(s: &str) -> Result<(f64, f64)> {
    let mut parts = s.split(',').map(|x| x.trim().parse::<f64>());
    match (parts.next(), parts.next(), parts.next()) {
        (Some(Ok(a)), Some(Ok(b)), None) => Ok((a, b)),
        _ => Err(Error::Config(format!("expected two comma-separated numbers, got {s:?}"))),
    }
}

/// Non-negative per-variant weights.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantWeights(pub Vec<f64>);

impl VariantWeights {
    pub fn ones(p: usize) -> Self {
        VariantWeights(vec![1.0; p])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn compute_weights(maf: &[f64], scheme: WeightScheme) -> Result<VariantWeights> {
    if let Some((variant, &m)) = maf
        .iter()
        .enumerate()
        .find(|(_, &m)| !(m > 0.0 && m <= 0.5))
    {
        return Err(Error::InvalidMaf { variant, maf: m });
    }
    let w: Vec<f64> = match scheme {
        WeightScheme::Unweighted => vec![1.0; maf.len()],
        WeightScheme::Beta { a, b } => {
            let density = Beta::new(a, b)
                .map_err(|e| Error::Config(format!("beta weights: {e}")))?;
            maf.iter().map(|&m| density.pdf(m)).collect()
        }
        WeightScheme::Wss => maf.iter().map(|&m| 1.0 / (m * (1.0 - m)).sqrt()).collect(),
        WeightScheme::Log => maf.iter().map(|&m| -m.log10()).collect(),
    };
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::DegenerateWeights);
    }
    if !w.iter().any(|&x| x > 0.0) {
        return Err(Error::DegenerateWeights);
    }
    Ok(VariantWeights(w))
}
