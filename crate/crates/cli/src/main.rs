use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use knntest::error::{Error, Result};
use knntest::genotype::{
    compute_maf, filter_variants, impute_missing, load_genotypes, parse_pair, read_table, GenotypeFormat,
    GenotypeMatrix, WeightScheme,
};
use knntest::inference::{knn_test, KnnTestOptions};
use knntest::io::{
    align_phenotype, align_rows, genotypes_csv, parse_scenario, phenotype_csv, power_csv, read_text,
    replicates_csv, summary_csv, write_text, Command, RunManifest,
};
use knntest::kernel::KernelConfig;
use knntest::simulation::{power_summary, run_scenario, simulate_replicate, MonteCarloResult, SimulationScenario};
use knntest::skat::skat_test;

#[derive(Parser)]
#[command(name = "knntest", version, about = "Kernel-based neural network association test")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the KNN test on one variant set.
    Test(TestArgs),
    /// Run SKAT on one variant set.
    Skat(TestArgs),
    /// Run a Monte Carlo scenario.
    Simulate(SimArgs),
    /// Run several scenarios and emit a long-format power table.
    Compare(CompareArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
    /// Write one simulated dataset (genotypes and phenotype) to disk.
    Generate(GenerateArgs),
}

#[derive(Args, Clone)]
struct TestArgs {
    /// Genotype matrix: `sample_id,<variant>...` (CSV) or tab separated (.tsv/.txt).
    #[arg(long)]
    genotypes: PathBuf,
    /// CSV `sample_id,<trait>`; the first value column is used.
    #[arg(long)]
    phenotype: PathBuf,
    /// CSV `sample_id,<covariate>...`; an intercept is always added.
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// uw, beta, wss or log.
    #[arg(long, default_value = "uw")]
    weights: String,
    /// Beta weight parameters as `a,b`.
    #[arg(long)]
    beta_params: Option<String>,
    #[arg(long, overrides_with = "no_center")]
    center: bool,
    #[arg(long)]
    no_center: bool,
    #[arg(long, overrides_with = "no_normalize")]
    normalize: bool,
    #[arg(long)]
    no_normalize: bool,
    /// Variants with folded MAF below this are dropped.
    #[arg(long, default_value_t = 0.01)]
    min_maf: f64,
    /// Variants missing in more than this share of samples are dropped.
    #[arg(long, default_value_t = 0.1)]
    max_missing: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Scenario configs; repeat the flag or pass several paths.
    #[arg(long, num_args = 1..)]
    config: Vec<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Scenario descriptors to emit as columns of the power table.
    #[arg(long, value_delimiter = ',', default_value = "model,n,p,causal_prop,weights")]
    group_by: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory; defaults to the one recorded in the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replicate index of the scenario to write.
    #[arg(long, default_value_t = 0)]
    replicate: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Cmd::Test(a) => cmd_test(&a),
        Cmd::Skat(a) => cmd_skat(&a),
        Cmd::Simulate(a) => cmd_simulate(&a),
        Cmd::Compare(a) => cmd_compare(&a),
        Cmd::Replay(a) => cmd_replay(&a),
        Cmd::Generate(a) => cmd_generate(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}

fn now_unix() -> Option<u64> {
    SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs())
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })
}

fn write_manifest(dir: &Path, mut manifest: RunManifest) -> Result<()> {
    manifest.set("out", dir.display());
    manifest.created_unix = now_unix();
    write_text(&dir.join("manifest.txt"), &manifest.to_text())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(format!("json: {e}")))?;
    write_text(path, &(text + "\n"))
}

struct Inputs {
    g: GenotypeMatrix,
    y: DVector<f64>,
    z: Option<DMatrix<f64>>,
}

impl TestArgs {
    fn scheme(&self) -> Result<WeightScheme> {
        let params = self.beta_params.as_deref().map(parse_pair).transpose()?;
        WeightScheme::from_tag(&self.weights, params)
    }

    fn kernel(&self) -> KernelConfig {
        KernelConfig {
            center: !self.no_center,
            normalize: !self.no_normalize,
        }
    }

    fn load(&self) -> Result<Inputs> {
        let format = GenotypeFormat::from_path(&self.genotypes);
        let g = load_genotypes(&self.genotypes, format).map_err(stage("genotypes"))?;
        let pheno = read_table(&self.phenotype, b',').map_err(stage("phenotype"))?;
        let y = align_phenotype(&pheno, &g.sample_ids).map_err(stage("phenotype"))?;
        let z = match &self.covariates {
            Some(path) => {
                let table = read_table(path, b',').map_err(stage("covariates"))?;
                Some(align_rows(&table, &g.sample_ids, "covariate").map_err(stage("covariates"))?)
            }
            None => None,
        };
        let g = filter_variants(&compute_maf(&g), self.min_maf, self.max_missing).map_err(stage("filter"))?;
        let g = compute_maf(&impute_missing(&g).map_err(stage("impute"))?);
        Ok(Inputs { g, y, z })
    }

    fn manifest(&self, command: Command) -> Result<RunManifest> {
        let mut m = RunManifest::new(command);
        m.set("genotypes", self.genotypes.display());
        m.set("phenotype", self.phenotype.display());
        if let Some(c) = &self.covariates {
            m.set("covariates", c.display());
        }
        m.set("weights", self.scheme()?);
        m.set("center", self.kernel().center);
        m.set("normalize", self.kernel().normalize);
        m.set("min_maf", self.min_maf);
        m.set("max_missing", self.max_missing);
        Ok(m)
    }

    fn from_manifest(m: &RunManifest, out: PathBuf) -> Result<Self> {
        let need = |k: &str| {
            m.get(k)
                .map(str::to_owned)
                .ok_or_else(|| Error::Config(format!("{k}: missing from manifest")))
        };
        let number = |k: &str| -> Result<f64> {
            need(k)?
                .parse()
                .map_err(|_| Error::Config(format!("{k}: invalid value in manifest")))
        };
        let scheme: WeightScheme = need("weights")?.parse()?;
        let (weights, beta_params) = match scheme {
            WeightScheme::Beta { a, b } => ("beta".to_string(), Some(format!("{a},{b}"))),
            other => (other.tag().to_string(), None),
        };
        Ok(Self {
            genotypes: need("genotypes")?.into(),
            phenotype: need("phenotype")?.into(),
            covariates: m.get("covariates").map(PathBuf::from),
            weights,
            beta_params,
            center: false,
            no_center: need("center")? == "false",
            normalize: false,
            no_normalize: need("normalize")? == "false",
            min_maf: number("min_maf")?,
            max_missing: number("max_missing")?,
            out,
        })
    }
}

fn stage(name: &'static str) -> impl FnOnce(Error) -> Error {
    move |source| Error::Stage {
        stage: name,
        source: Box::new(source),
    }
}

fn cmd_test(a: &TestArgs) -> Result<()> {
    let options = KnnTestOptions {
        scheme: a.scheme()?,
        kernel: a.kernel(),
        ..KnnTestOptions::default()
    };
    let manifest = a.manifest(Command::Test)?;
    let inputs = a.load()?;
    let report = knn_test(&inputs.y, &inputs.g, inputs.z.as_ref(), &options)?;
    prepare_out(&a.out)?;
    write_json(&a.out.join("report.json"), &report)?;
    write_manifest(&a.out, manifest)?;
    println!("{}", report.summary_line());
    Ok(())
}

fn cmd_skat(a: &TestArgs) -> Result<()> {
    let scheme = a.scheme()?;
    let manifest = a.manifest(Command::Skat)?;
    let inputs = a.load()?;
    let result = skat_test(&inputs.y, &inputs.g, inputs.z.as_ref(), scheme)?;
    prepare_out(&a.out)?;
    write_json(&a.out.join("skat.json"), &result)?;
    write_manifest(&a.out, manifest)?;
    println!("skat p={:.6e} ({})", result.p_value, result.method_used.as_str());
    Ok(())
}

fn load_scenario(path: &Path, reps: Option<usize>, seed: Option<u64>, alpha: Option<f64>) -> Result<SimulationScenario> {
    let mut s = parse_scenario(&read_text(path)?)?;
    if let Some(r) = reps {
        s.replicates = r;
    }
    if let Some(seed) = seed {
        s.geno.seed = seed;
    }
    if let Some(alpha) = alpha {
        s.alpha = alpha;
    }
    s.validate()?;
    Ok(s)
}

fn write_results(dir: &Path, results: &[MonteCarloResult]) -> Result<()> {
    write_text(&dir.join("replicates.csv"), &replicates_csv(results))?;
    write_text(&dir.join("summary.csv"), &summary_csv(results))
}

fn print_rates(res: &MonteCarloResult) {
    let rates: Vec<String> = res
        .rates
        .iter()
        .map(|r| format!("{}={:.4}", r.test.as_str(), r.rate))
        .collect();
    println!(
        "{}: {} of {} replicates, {} ({:.1}s)",
        res.scenario.name,
        res.completed,
        res.scenario.replicates,
        rates.join(" "),
        res.elapsed_secs
    );
}

fn run_simulate(scenario: &SimulationScenario, out: &Path) -> Result<()> {
    let result = run_scenario(scenario)?;
    prepare_out(out)?;
    let results = [result];
    write_results(out, &results)?;
    let mut m = RunManifest::new(Command::Simulate);
    m.set("reps", scenario.replicates);
    m.set("seed", scenario.geno.seed);
    m.set("alpha", scenario.alpha);
    m.add_scenario(0, scenario);
    write_manifest(out, m)?;
    print_rates(&results[0]);
    Ok(())
}

fn cmd_simulate(a: &SimArgs) -> Result<()> {
    let scenario = load_scenario(&a.config, a.reps, a.seed, a.alpha)?;
    run_simulate(&scenario, &a.out)
}

fn run_compare(scenarios: &[SimulationScenario], group_by: &[String], out: &Path) -> Result<()> {
    let first = scenarios
        .first()
        .ok_or_else(|| Error::Config("config: at least one scenario is required".into()))?;
    if let Some(odd) = scenarios.iter().find(|s| s.alpha != first.alpha) {
        return Err(Error::Config(format!(
            "alpha: scenarios disagree ({} has {}, {} has {})",
            first.name, first.alpha, odd.name, odd.alpha
        )));
    }
    let keys: Vec<&str> = group_by.iter().map(String::as_str).collect();
    let results = scenarios.iter().map(run_scenario).collect::<Result<Vec<_>>>()?;
    let table = power_summary(&results, &keys)?;
    prepare_out(out)?;
    write_results(out, &results)?;
    write_text(&out.join("power.csv"), &power_csv(&table))?;
    let mut m = RunManifest::new(Command::Compare);
    m.set("group_by", group_by.join(","));
    for (i, s) in scenarios.iter().enumerate() {
        m.add_scenario(i, s);
    }
    write_manifest(out, m)?;
    results.iter().for_each(print_rates);
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let scenarios = a
        .config
        .iter()
        .map(|p| load_scenario(p, a.reps, a.seed, None))
        .collect::<Result<Vec<_>>>()?;
    run_compare(&scenarios, &a.group_by, &a.out)
}

fn cmd_replay(a: &ReplayArgs) -> Result<()> {
    let m = RunManifest::parse(&read_text(&a.manifest)?)?;
    let out = match &a.out {
        Some(o) => o.clone(),
        None => m
            .get("out")
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config("out: missing from manifest".into()))?,
    };
    match m.command {
        Command::Test => cmd_test(&TestArgs::from_manifest(&m, out)?),
        Command::Skat => cmd_skat(&TestArgs::from_manifest(&m, out)?),
        Command::Simulate => {
            let scenarios = m.scenarios()?;
            let [scenario] = scenarios.as_slice() else {
                return Err(Error::Config("scenario: simulate manifest needs exactly one".into()));
            };
            run_simulate(scenario, &out)
        }
        Command::Compare => {
            let group_by: Vec<String> = m
                .get("group_by")
                .unwrap_or_default()
                .split(',')
                .filter(|s| !s.is_empty())
                .map(str::to_owned)
                .collect();
            run_compare(&m.scenarios()?, &group_by, &out)
        }
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let scenario = load_scenario(&a.config, None, a.seed, None)?;
    let (g, y) = simulate_replicate(&scenario, a.replicate)?;
    prepare_out(&a.out)?;
    write_text(&a.out.join("genotypes.csv"), &genotypes_csv(&g))?;
    write_text(&a.out.join("phenotype.csv"), &phenotype_csv(&g.sample_ids, &y))?;
    println!(
        "wrote {} samples x {} variants to {}",
        g.n_samples(),
        g.n_variants(),
        a.out.display()
    );
    Ok(())
}
