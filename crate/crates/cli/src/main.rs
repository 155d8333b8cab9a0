use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use covadj::data::{load_csv, ColumnSpec, CsvSchema, TrialDataset};
use covadj::estimators::{
    check_exact_balance, estimate, fit_treatment_ps, Assumption, EstimateResult, EstimatorKind, MethodSpec,
    OutcomeRoster, VarianceKind, WlsWeighting,
};
use covadj::inference::{bootstrap_variance, BootstrapPlan, CiMethod};
use covadj::missing::{impute, ImputationSpec, Term};
use covadj::simlab::{
    self, csv_escape, efficiency_probe, preset, probe_base_dataset, run_monte_carlo, ComparisonRow,
    ProbeConfig, ProbeMechanism, ProbeVariance, Scenario, SimMethod,
};
use covadj::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "covadj", version, about = "Covariate adjustment for randomized trials with missing data")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file (default: stdout).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the treatment effect on a dataset.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo study.
    Simulate(SimulateArgs),
    /// Covariate balance before and after overlap weighting.
    Balance(BalanceArgs),
    /// Rerun a published table or the efficiency figure.
    Reproduce(ReproduceArgs),
    /// Efficiency of a pseudo covariate over a correlation and missingness grid.
    Probe(ProbeArgs),
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Analysis configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV dataset; overrides the configuration.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Treatment column.
    #[arg(long, default_value = "z")]
    treatment: String,
    /// Outcome column.
    #[arg(long, default_value = "y")]
    outcome: String,
    #[arg(long)]
    binary_outcome: bool,
    /// Continuous covariate columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Binary covariate columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    binary_covariates: Vec<String>,
}

#[derive(Args, Clone)]
struct MethodArgs {
    /// Estimators, comma separated.
    #[arg(long, value_delimiter = ',')]
    estimator: Vec<String>,
    /// Imputation, e.g. `median`, `constant:0`, `median;model:x1~x2`.
    #[arg(long)]
    impute: Option<String>,
    /// Leave the missing indicators out.
    #[arg(long)]
    no_msi: bool,
    #[arg(long, value_parser = parse_assumption)]
    assumption: Option<Assumption>,
    /// Outcome-missingness roster: `main` or `interacted`.
    #[arg(long, value_parser = parse_roster)]
    roster: Option<OutcomeRoster>,
    /// Estimator used after a complete-case selection.
    #[arg(long)]
    adjustment: Option<String>,
    /// WLS weights: `p` or `inverse`.
    #[arg(long, value_parser = parse_wls)]
    wls_weights: Option<WlsWeighting>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    method: MethodArgs,
    /// Bootstrap replicates (0 disables).
    #[arg(long)]
    boot: Option<usize>,
    #[arg(long, value_enum)]
    ci: Option<CiArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CiArg {
    Percentile,
    Normal,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario file (JSON).
    #[arg(long, conflicts_with = "preset")]
    scenario: Option<PathBuf>,
    /// Bundled scenario name, e.g. `table1_mcar30_n100`.
    #[arg(long)]
    preset: Option<String>,
    /// Methods: estimator names (comma separated) or `@file.json`.
    #[arg(long)]
    methods: Option<String>,
    /// Label of the efficiency reference method.
    #[arg(long)]
    reference: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    /// List bundled scenarios and exit.
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct BalanceArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    impute: Option<String>,
    #[arg(long)]
    no_msi: bool,
    /// ASD above which a covariate is marked imbalanced.
    #[arg(long, default_value_t = 0.1)]
    threshold: f64,
}

#[derive(Args)]
struct ReproduceArgs {
    #[arg(long, conflicts_with = "figure", required_unless_present = "figure")]
    table: Option<u8>,
    #[arg(long)]
    figure: Option<u8>,
    #[arg(long, default_value_t = 5000)]
    reps: usize,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',')]
    rhos: Vec<f64>,
    /// Missing proportions, comma separated.
    #[arg(long, value_delimiter = ',')]
    missing: Vec<f64>,
    #[arg(long, value_enum, default_value = "mcar")]
    mechanism: MechArg,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    /// Bootstrap replicates per fit instead of the robust variance.
    #[arg(long)]
    boot: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MechArg {
    Mcar,
    Mnar,
}

fn parse_assumption(s: &str) -> std::result::Result<Assumption, String> {
    match s.to_ascii_uppercase().as_str() {
        "A1" => Ok(Assumption::A1),
        "A2" => Ok(Assumption::A2),
        _ => Err(format!("unknown assumption '{s}' (A1 or A2)")),
    }
}

fn parse_roster(s: &str) -> std::result::Result<OutcomeRoster, String> {
    match s {
        "main" | "main_effects" => Ok(OutcomeRoster::MainEffects),
        "interacted" | "treatment_interacted" => Ok(OutcomeRoster::TreatmentInteracted),
        _ => Err(format!("unknown roster '{s}' (main or interacted)")),
    }
}

fn parse_wls(s: &str) -> std::result::Result<WlsWeighting, String> {
    match s {
        "p" | "probability" => Ok(WlsWeighting::Probability),
        "inverse" | "inverse_probability" => Ok(WlsWeighting::InverseProbability),
        _ => Err(format!("unknown WLS weighting '{s}' (p or inverse)")),
    }
}

/// Analysis configuration file.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct AnalysisConfig {
    data: Option<PathBuf>,
    #[serde(default)]
    schema: Option<CsvSchema>,
    #[serde(default)]
    methods: Vec<MethodSpec>,
    #[serde(default)]
    bootstrap: Option<BootstrapPlan>,
    #[serde(default)]
    ci: Option<CiMethod>,
    #[serde(default)]
    output: Option<PathBuf>,
    #[serde(default)]
    format: Option<Format>,
}

fn read_config(path: &Path) -> Result<AnalysisConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg: AnalysisConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    // data paths are relative to the configuration file
    if let (Some(d), Some(dir)) = (&cfg.data, path.parent()) {
        if d.is_relative() {
            cfg.data = Some(dir.join(d));
        }
    }
    Ok(cfg)
}

struct Loaded {
    config: AnalysisConfig,
    dataset: TrialDataset,
}

fn load(args: &DataArgs) -> Result<Loaded> {
    let mut config = match &args.config {
        Some(p) => read_config(p)?,
        None => AnalysisConfig::default(),
    };
    if let Some(d) = &args.data {
        config.data = Some(d.clone());
    }
    let flag_schema = !args.covariates.is_empty() || !args.binary_covariates.is_empty() || config.schema.is_none();
    if flag_schema {
        let mut schema = CsvSchema::new()
            .column(&args.treatment, ColumnSpec::Treatment)
            .column(&args.outcome, if args.binary_outcome { ColumnSpec::BinaryOutcome } else { ColumnSpec::Outcome });
        for c in &args.covariates {
            schema = schema.column(c, ColumnSpec::Continuous);
        }
        for c in &args.binary_covariates {
            schema = schema.column(c, ColumnSpec::Binary);
        }
        config.schema = Some(schema);
    }
    let path = config
        .data
        .clone()
        .ok_or_else(|| Error::Config("no dataset given (use --data or a configuration with \"data\")".into()))?;
    let schema = config.schema.as_ref().unwrap();
    let dataset = load_csv(&path, schema)?;
    Ok(Loaded { config, dataset })
}

fn imputation_columns(spec: &ImputationSpec) -> Vec<String> {
    let mut cols: Vec<String> = spec.overrides.keys().cloned().collect();
    for s in std::iter::once(&spec.default).chain(spec.overrides.values()) {
        if let covadj::missing::ImputationStrategy::Model(f) = s {
            cols.push(f.response.clone());
            cols.extend(f.terms.iter().map(|t: &Term| t.predictor().to_string()));
        }
    }
    cols
}

/// Every column a method names must be a covariate of the dataset.
fn check_columns(spec: &MethodSpec, ds: &TrialDataset, index: usize) -> Result<()> {
    let known = ds.covariate_names();
    let mut named = imputation_columns(&spec.imputation);
    if let Some(c) = &spec.covariates {
        named.extend(c.iter().cloned());
    }
    for c in named {
        if !known.contains(&c) {
            return Err(Error::Config(format!(
                "method {} ({}): column '{c}' is not a covariate; covariates are [{}]",
                index + 1,
                spec.estimator,
                known.join(", ")
            )));
        }
    }
    Ok(())
}

fn methods_from(args: &MethodArgs, config: &AnalysisConfig) -> Result<Vec<MethodSpec>> {
    let mut methods = if args.estimator.is_empty() {
        config.methods.clone()
    } else {
        args.estimator
            .iter()
            .map(|s| s.parse().map(MethodSpec::new))
            .collect::<Result<Vec<_>>>()?
    };
    if methods.is_empty() {
        methods.push(MethodSpec::new(EstimatorKind::Ancova));
    }
    let impute: Option<ImputationSpec> = args.impute.as_deref().map(str::parse).transpose()?;
    let adjustment: Option<EstimatorKind> = args.adjustment.as_deref().map(str::parse).transpose()?;
    for m in &mut methods {
        if let Some(i) = &impute {
            m.imputation = i.clone();
        }
        if args.no_msi {
            m.include_msi = false;
        }
        if let Some(a) = args.assumption {
            m.assumption = a;
        }
        if let Some(r) = args.roster {
            m.roster = r;
        }
        if let Some(a) = adjustment {
            m.adjustment = Some(a);
        }
        if let Some(w) = args.wls_weights {
            m.wls_weights = w;
        }
        m.validate()?;
    }
    Ok(methods)
}

struct Output {
    path: Option<PathBuf>,
    format: Format,
}

impl Output {
    fn emit(&self, text: &str) -> Result<()> {
        match &self.path {
            Some(p) => std::fs::write(p, text)?,
            None => print!("{text}"),
        }
        Ok(())
    }
}

fn output_for(global: &Global, config: Option<&AnalysisConfig>, default: Format) -> Output {
    Output {
        path: global.out.clone().or_else(|| config.and_then(|c| c.output.clone())),
        format: global.format.or_else(|| config.and_then(|c| c.format)).unwrap_or(default),
    }
}

fn cmd_estimate(global: &Global, args: &EstimateArgs) -> Result<()> {
    let loaded = load(&args.data)?;
    let methods = methods_from(&args.method, &loaded.config)?;
    for (i, m) in methods.iter().enumerate() {
        check_columns(m, &loaded.dataset, i)?;
    }
    let mut plan = loaded.config.bootstrap.unwrap_or(BootstrapPlan::new(0, global.seed));
    if let Some(b) = args.boot {
        plan.replicates = b;
        plan.seed = global.seed;
    }
    let ci = match args.ci {
        Some(CiArg::Normal) => CiMethod::Normal,
        Some(CiArg::Percentile) => CiMethod::Percentile,
        None => loaded.config.ci.unwrap_or_default(),
    };
    let mut results = Vec::with_capacity(methods.len());
    for m in &methods {
        let mut res = estimate(&loaded.dataset, m)?;
        if plan.replicates > 0 {
            bootstrap_variance(&loaded.dataset, m, &plan)?.attach(&mut res);
        }
        for w in &res.warnings {
            log::warn!("{}: {w}", m.estimator);
        }
        results.push(res);
    }
    let out = output_for(global, Some(&loaded.config), Format::Json);
    let text = match out.format {
        Format::Json => serde_json::to_string_pretty(&results)? + "\n",
        Format::Csv => estimates_csv(&results, ci),
    };
    out.emit(&text)
}

fn estimates_csv(results: &[EstimateResult], ci: CiMethod) -> String {
    let key = match ci {
        CiMethod::Percentile => "percentile",
        CiMethod::Normal => "normal",
    };
    let mut out = String::from(
        "estimator,tau_hat,var_hc_robust,var_sandwich,var_bootstrap,ci_lower,ci_upper,n_used,warnings\n",
    );
    let opt = |v: Option<&f64>| v.map_or(String::new(), |x| x.to_string());
    for r in results {
        let interval = r.intervals.get(key);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.method.estimator,
            r.tau_hat,
            opt(r.variance.get(&VarianceKind::HcRobust)),
            opt(r.variance.get(&VarianceKind::Sandwich)),
            opt(r.variance.get(&VarianceKind::Bootstrap)),
            interval.map_or(String::new(), |i| i.0.to_string()),
            interval.map_or(String::new(), |i| i.1.to_string()),
            r.n_used,
            csv_escape(&r.warnings.join("; "))
        ));
    }
    out
}

fn parse_methods(arg: &str) -> Result<Vec<SimMethod>> {
    if let Some(path) = arg.strip_prefix('@') {
        let text = std::fs::read_to_string(path)?;
        let methods: Vec<SimMethod> =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path}: {e}")))?;
        return Ok(methods);
    }
    arg.split(',')
        .map(|name| {
            let kind: EstimatorKind = name.trim().parse()?;
            Ok(SimMethod::new(kind.name(), MethodSpec::new(kind)))
        })
        .collect()
}

fn cmd_simulate(global: &Global, args: &SimulateArgs) -> Result<()> {
    if args.list {
        let out = output_for(global, None, Format::Csv);
        return out.emit(&(simlab::preset_names().join("\n") + "\n"));
    }
    let (mut scenario, mut methods, mut reference) = match (&args.scenario, &args.preset) {
        (Some(path), _) => {
            let sc = Scenario::from_json_file(path)?;
            let methods = if sc.outcome_missingness.is_some() {
                simlab::outcome_table_methods()
            } else {
                simlab::covariate_table_methods()
            };
            let reference = if sc.outcome_missingness.is_some() {
                simlab::IPW_REFERENCE_LABEL
            } else {
                simlab::UNADJUSTED_LABEL
            };
            (sc, methods, reference.to_string())
        }
        (None, Some(name)) => {
            let p = preset(name)?;
            (p.scenario, p.methods, p.reference)
        }
        (None, None) => return Err(Error::Config("give --scenario or --preset".into())),
    };
    if let Some(m) = &args.methods {
        methods = parse_methods(m)?;
        reference = methods
            .first()
            .map(|m| m.label.clone())
            .ok_or_else(|| Error::Config("empty method list".into()))?;
    }
    if let Some(r) = &args.reference {
        reference = r.clone();
    }
    if let Some(r) = args.reps {
        scenario.replications = r;
    }
    scenario.seed = global.seed;
    let report = run_monte_carlo(&scenario, &methods, &reference)?;
    let out = output_for(global, None, Format::Csv);
    let text = match out.format {
        Format::Csv => report.to_csv(),
        Format::Json => report.to_json()? + "\n",
    };
    out.emit(&text)
}

fn cmd_balance(global: &Global, args: &BalanceArgs) -> Result<()> {
    let loaded = load(&args.data)?;
    if !(args.threshold > 0.0) {
        return Err(Error::Config("threshold must be positive".into()));
    }
    let spec: ImputationSpec = match &args.impute {
        Some(s) => s.parse()?,
        None => loaded
            .config
            .methods
            .first()
            .map(|m| m.imputation.clone())
            .unwrap_or_default(),
    };
    let probe = MethodSpec::new(EstimatorKind::Ow).imputation(spec.clone());
    check_columns(&probe, &loaded.dataset, 0)?;
    let cd = impute(&loaded.dataset, &spec)?;
    let ps = fit_treatment_ps(&cd, !args.no_msi)?;
    let report = check_exact_balance(&ps, &cd);
    let out = output_for(global, Some(&loaded.config), Format::Csv);
    let text = match out.format {
        Format::Json => serde_json::to_string_pretty(&report)? + "\n",
        Format::Csv => {
            let mut s = String::from(
                "column,in_roster,treated_mean,control_mean,discrepancy,asd_unweighted,asd_weighted,imbalanced_unweighted,imbalanced_weighted\n",
            );
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
            let over = |v: Option<f64>| v.is_some_and(|x| x > args.threshold);
            for r in &report.rows {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    csv_escape(&r.column),
                    r.in_roster,
                    r.treated_mean,
                    r.control_mean,
                    r.discrepancy,
                    opt(r.asd_unweighted),
                    opt(r.asd_weighted),
                    over(r.asd_unweighted),
                    over(r.asd_weighted)
                ));
            }
            s
        }
    };
    if !report.converged {
        log::warn!("treatment propensity model did not converge; balance is not exact");
    }
    out.emit(&text)
}

fn cmd_reproduce(global: &Global, args: &ReproduceArgs) -> Result<()> {
    let out = output_for(global, None, Format::Csv);
    if let Some(fig) = args.figure {
        if fig != 1 {
            return Err(Error::Config(format!("no figure {fig}; only figure 1 is bundled")));
        }
        let base = probe_base_dataset(global.seed);
        let mut grids = Vec::new();
        for mechanism in [ProbeMechanism::Mcar, ProbeMechanism::Mnar] {
            let cfg = ProbeConfig {
                mechanism,
                repetitions: args.reps,
                seed: global.seed,
                ..ProbeConfig::default()
            };
            grids.push(efficiency_probe(&base, &cfg)?);
        }
        let text = match out.format {
            Format::Json => serde_json::to_string_pretty(&grids)? + "\n",
            Format::Csv => {
                let mut s = grids[0].to_csv();
                s.push_str(grids[1].to_csv().split_once('\n').map_or("", |x| x.1));
                s
            }
        };
        return out.emit(&text);
    }
    let table = args.table.unwrap();
    let (rows, _) = simlab::reproduce_table(table, args.reps, global.seed)?;
    let text = match out.format {
        Format::Json => serde_json::to_string_pretty(&rows)? + "\n",
        Format::Csv => {
            let mut s = format!("{}\n", ComparisonRow::csv_header());
            for r in &rows {
                s.push_str(&r.csv_line());
                s.push('\n');
            }
            s
        }
    };
    out.emit(&text)
}

fn cmd_probe(global: &Global, args: &ProbeArgs) -> Result<()> {
    let base = if args.data.data.is_some() || args.data.config.is_some() {
        let loaded = load(&args.data)?;
        loaded.dataset.select_covariates(&[])?
    } else {
        probe_base_dataset(global.seed)
    };
    let defaults = ProbeConfig::default();
    let cfg = ProbeConfig {
        rhos: if args.rhos.is_empty() { defaults.rhos } else { args.rhos.clone() },
        missing: if args.missing.is_empty() { defaults.missing } else { args.missing.clone() },
        mechanism: match args.mechanism {
            MechArg::Mcar => ProbeMechanism::Mcar,
            MechArg::Mnar => ProbeMechanism::Mnar,
        },
        repetitions: args.reps,
        seed: global.seed,
        variance: match args.boot {
            Some(b) => ProbeVariance::Bootstrap { replicates: b },
            None => ProbeVariance::Robust,
        },
    };
    let grid = efficiency_probe(&base, &cfg)?;
    let out = output_for(global, None, Format::Csv);
    let text = match out.format {
        Format::Csv => grid.to_csv(),
        Format::Json => serde_json::to_string_pretty(&grid)? + "\n",
    };
    out.emit(&text)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(t) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Estimate(a) => cmd_estimate(&cli.global, a),
        Command::Simulate(a) => cmd_simulate(&cli.global, a),
        Command::Balance(a) => cmd_balance(&cli.global, a),
        Command::Reproduce(a) => cmd_reproduce(&cli.global, a),
        Command::Probe(a) => cmd_probe(&cli.global, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            })
        }
    }
}
