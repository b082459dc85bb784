//! Flat key/value documents (scenario configs, run manifests) and CSV output.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::genotype::{parse_pair, GenotypeMatrix, Table, WeightScheme};
use crate::simulation::{MonteCarloResult, PhenotypeModel, PowerTable, SimulationScenario, TestKind};

/// Format tag written into every manifest.
pub const FORMAT_VERSION: &str = "1";

/// Manifest key holding the wall-clock time of the run; ignored by replay
/// and excluded from any reproducibility comparison.
pub const TIMESTAMP_KEY: &str = "created_unix";

/// Floats in CSV output: 17 significant digits, enough to round-trip.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Ordered `key = value` pairs. Blank lines and `#` comments are skipped;
/// duplicate keys are rejected.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected 'key = value', got '{line}'"),
        })?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        if out.iter().any(|(existing, _)| *existing == k) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("duplicate key '{k}'"),
            });
        }
        out.push((k, v));
    }
    Ok(out)
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: invalid value '{value}'")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{value}'"))),
    }
}

/// Scenario from a flat key/value document. Unset keys keep their defaults;
/// `full_scale = <variants>` loads the matching preset before other keys apply.
pub fn parse_scenario(text: &str) -> Result<SimulationScenario> {
    let pairs = parse_key_values(text)?;
    let get = |k: &str| pairs.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
    let model: PhenotypeModel = match get("model") {
        Some(v) => v.parse().map_err(|_| Error::Config(format!("model: unknown model '{v}'")))?,
        None => PhenotypeModel::Null,
    };
    let mut s = match get("full_scale") {
        Some(v) => SimulationScenario::full_scale(model, field("full_scale", v)?)
            .map_err(|_| Error::Config(format!("full_scale: no preset for '{v}'")))?,
        None => SimulationScenario {
            model,
            ..SimulationScenario::default()
        },
    };
    let beta_params = get("beta_params").map(parse_pair).transpose().map_err(|_| {
        Error::Config(format!("beta_params: expected 'a,b', got '{}'", get("beta_params").unwrap_or("")))
    })?;
    for (k, v) in &pairs {
        let v = v.as_str();
        match k.as_str() {
            "model" | "full_scale" | "beta_params" => {}
            "name" => s.name = v.to_string(),
            "sigma_g_sq" => s.sigma_g_sq = field(k, v)?,
            "sigma_0_sq" => s.sigma_0_sq = field(k, v)?,
            "beta" => s.beta = field(k, v)?,
            "causal_prop" => s.causal_prop = field(k, v)?,
            "n" => s.geno.n = field(k, v)?,
            "p" => s.geno.p = field(k, v)?,
            "maf_law" => s.geno.maf_law = field(k, v)?,
            "ld_rho" => s.geno.ld_rho = field(k, v)?,
            "seed" => s.geno.seed = field(k, v)?,
            "weights" => {
                s.weight_scheme = if v.contains('(') {
                    field(k, v)?
                } else {
                    WeightScheme::from_tag(v, beta_params)
                        .map_err(|_| Error::Config(format!("weights: unknown scheme '{v}'")))?
                }
            }
            "replicates" => s.replicates = field(k, v)?,
            "alpha" => s.alpha = field(k, v)?,
            "standardize" => s.standardize = flag(k, v)?,
            "min_maf" => s.min_maf = field(k, v)?,
            "center" => s.kernel.center = flag(k, v)?,
            "normalize" => s.kernel.normalize = flag(k, v)?,
            "max_iterations" => s.minque.max_iterations = field(k, v)?,
            "tolerance" => s.minque.tolerance = field(k, v)?,
            other => return Err(Error::Config(format!("{other}: unknown field"))),
        }
    }
    if beta_params.is_some() && get("weights").is_none() {
        return Err(Error::Config("beta_params: only valid with weights = beta".into()));
    }
    s.validate()?;
    Ok(s)
}

/// Key/value pairs that [`parse_scenario`] reads back to an identical scenario.
pub fn scenario_pairs(s: &SimulationScenario) -> Vec<(String, String)> {
    let pairs: Vec<(&str, String)> = vec![
        ("name", s.name.clone()),
        ("model", s.model.to_string()),
        ("sigma_g_sq", s.sigma_g_sq.to_string()),
        ("sigma_0_sq", s.sigma_0_sq.to_string()),
        ("beta", s.beta.to_string()),
        ("causal_prop", s.causal_prop.to_string()),
        ("n", s.geno.n.to_string()),
        ("p", s.geno.p.to_string()),
        ("maf_law", s.geno.maf_law.to_string()),
        ("ld_rho", s.geno.ld_rho.to_string()),
        ("seed", s.geno.seed.to_string()),
        ("weights", s.weight_scheme.to_string()),
        ("replicates", s.replicates.to_string()),
        ("alpha", s.alpha.to_string()),
        ("standardize", s.standardize.to_string()),
        ("min_maf", s.min_maf.to_string()),
        ("center", s.kernel.center.to_string()),
        ("normalize", s.kernel.normalize.to_string()),
        ("max_iterations", s.minque.max_iterations.to_string()),
        ("tolerance", s.minque.tolerance.to_string()),
    ];
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn scenario_to_text(s: &SimulationScenario) -> String {
    pairs_to_text(&scenario_pairs(s))
}

pub fn pairs_to_text(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

fn csv_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).expect("writing to memory");
    let bytes = w.into_inner().expect("flushing to memory");
    String::from_utf8(bytes).expect("utf-8 csv")
}

/// One row per replicate per test.
pub fn replicates_csv(results: &[MonteCarloResult]) -> String {
    csv_string(|w| {
        w.write_record(["scenario", "replicate", "test", "p_value", "rejected", "method"])?;
        for res in results {
            let alpha = res.scenario.alpha;
            for r in &res.records {
                for test in TestKind::ALL {
                    let p = r.p_value(test);
                    let method = match test {
                        TestKind::Skat => r.skat_method.as_str(),
                        _ => "minque",
                    };
                    w.write_record([
                        res.scenario.name.as_str(),
                        &r.index.to_string(),
                        test.as_str(),
                        &fmt_float(p),
                        if p < alpha { "1" } else { "0" },
                        method,
                    ])?;
                }
            }
        }
        Ok(())
    })
}

/// Rejection rates with 95% intervals, one row per scenario and test.
pub fn summary_csv(results: &[MonteCarloResult]) -> String {
    csv_string(|w| {
        w.write_record([
            "scenario", "model", "n", "p", "weights", "test", "alpha", "completed", "failed", "rejections", "rate",
            "ci_lo", "ci_hi",
        ])?;
        for res in results {
            let s = &res.scenario;
            for r in &res.rates {
                w.write_record([
                    s.name.clone(),
                    s.model.to_string(),
                    s.geno.n.to_string(),
                    s.geno.p.to_string(),
                    s.weight_scheme.to_string(),
                    r.test.as_str().to_string(),
                    fmt_float(s.alpha),
                    res.completed.to_string(),
                    res.failures.len().to_string(),
                    r.rejections.to_string(),
                    fmt_float(r.rate),
                    fmt_float(r.ci_lo),
                    fmt_float(r.ci_hi),
                ])?;
            }
        }
        Ok(())
    })
}

pub fn power_csv(table: &PowerTable) -> String {
    csv_string(|w| {
        let mut header = vec!["scenario".to_string()];
        header.extend(table.key_names.iter().cloned());
        header.extend(["test", "rate", "ci_lo", "ci_hi", "replicates"].map(String::from));
        w.write_record(&header)?;
        for row in &table.rows {
            let mut rec = vec![row.scenario.clone()];
            rec.extend(row.keys.iter().cloned());
            rec.extend([
                row.test.as_str().to_string(),
                fmt_float(row.rate),
                fmt_float(row.ci_lo),
                fmt_float(row.ci_hi),
                row.replicates.to_string(),
            ]);
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

/// Rows of `table` reordered to follow `sample_ids`. Every sample must be
/// present and fully observed; extra rows in `table` are ignored.
pub fn align_rows(table: &Table, sample_ids: &[String], what: &str) -> Result<DMatrix<f64>> {
    let index: std::collections::HashMap<&str, usize> = table
        .row_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    if index.len() != table.row_ids.len() {
        return Err(Error::Dimension(format!("{what} file has duplicate sample ids")));
    }
    let mut out = DMatrix::zeros(sample_ids.len(), table.values.ncols());
    for (i, id) in sample_ids.iter().enumerate() {
        let &row = index
            .get(id.as_str())
            .ok_or_else(|| Error::Dimension(format!("sample {id} missing from {what} file")))?;
        for j in 0..table.values.ncols() {
            let v = table.values[(row, j)];
            if v.is_nan() {
                return Err(Error::Dimension(format!(
                    "{what} value for sample {id}, column {} is missing",
                    table.columns[j]
                )));
            }
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

/// First value column of a phenotype table, aligned to `sample_ids`.
pub fn align_phenotype(table: &Table, sample_ids: &[String]) -> Result<DVector<f64>> {
    let m = align_rows(table, sample_ids, "phenotype")?;
    Ok(m.column(0).into_owned())
}

/// Genotypes as `sample_id,<variant>...` CSV, dosages written exactly.
pub fn genotypes_csv(g: &GenotypeMatrix) -> String {
    csv_string(|w| {
        let mut header = vec!["sample_id".to_string()];
        header.extend(g.variant_ids.iter().cloned());
        w.write_record(&header)?;
        for (i, id) in g.sample_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(g.values.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

pub fn phenotype_csv(sample_ids: &[String], y: &DVector<f64>) -> String {
    csv_string(|w| {
        w.write_record(["sample_id", "trait"])?;
        for (id, v) in sample_ids.iter().zip(y.iter()) {
            w.write_record([id.clone(), fmt_float(*v)])?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Test,
    Skat,
    Simulate,
    Compare,
}

impl Command {
    pub fn as_str(&self) -> &'static str {
        match self {
            Command::Test => "test",
            Command::Skat => "skat",
            Command::Simulate => "simulate",
            Command::Compare => "compare",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "test" => Command::Test,
            "skat" => Command::Skat,
            "simulate" => Command::Simulate,
            "compare" => Command::Compare,
            _ => return Err(Error::Config(format!("command: unknown command '{s}'"))),
        })
    }
}

/// Everything needed to rerun a command: its effective arguments, plus the
/// full effective scenario of every simulated config under `scenario.<i>.<key>`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: Command,
    pub entries: Vec<(String, String)>,
    pub created_unix: Option<u64>,
}

impl RunManifest {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            entries: Vec::new(),
            created_unix: None,
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn add_scenario(&mut self, index: usize, s: &SimulationScenario) {
        for (k, v) in scenario_pairs(s) {
            self.set(&format!("scenario.{index}.{k}"), v);
        }
    }

    /// Scenarios recorded with [`add_scenario`](Self::add_scenario), in index order.
    pub fn scenarios(&self) -> Result<Vec<SimulationScenario>> {
        let mut out = Vec::new();
        loop {
            let prefix = format!("scenario.{}.", out.len());
            let text: String = self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|k| format!("{k} = {v}\n")))
                .collect();
            if text.is_empty() {
                return Ok(out);
            }
            out.push(parse_scenario(&text)?);
        }
    }

    pub fn to_text(&self) -> String {
        let mut pairs = vec![
            ("format_version".to_string(), FORMAT_VERSION.to_string()),
            ("command".to_string(), self.command.as_str().to_string()),
        ];
        pairs.extend(self.entries.iter().cloned());
        if let Some(t) = self.created_unix {
            pairs.push((TIMESTAMP_KEY.to_string(), t.to_string()));
        }
        pairs_to_text(&pairs)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_key_values(text)?;
        let mut command = None;
        let mut created_unix = None;
        let mut entries = Vec::new();
        for (k, v) in pairs {
            match k.as_str() {
                "format_version" if v == FORMAT_VERSION => {}
                "format_version" => {
                    return Err(Error::Config(format!("format_version: unsupported version '{v}'")))
                }
                "command" => command = Some(Command::parse(&v)?),
                TIMESTAMP_KEY => created_unix = Some(field(TIMESTAMP_KEY, &v)?),
                _ => entries.push((k, v)),
            }
        }
        Ok(Self {
            command: command.ok_or_else(|| Error::Config("command: missing".into()))?,
            entries,
            created_unix,
        })
    }
}
