//! Batch front end: describe datasets, fit GEE/WGEE/GLMM under a chosen
//! data-handling strategy, run endpoint comparisons, quadrature scans and
//! simulation studies. All tabular output is CSV on stdout (and optionally
//! a file via --out); exit codes are 0 on success, 1 for usage problems
//! and 2 for numerical failures.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use longit::{
    build_contrasts, complete_case, endpoint_analysis, fisher_exact, fit_dropout_model, fit_gee,
    fit_glmm, fit_wgee, load_long_csv, locf_impute, occasion_weights, parse_formula,
    pattern_table, pearson_chi2, person_period_expand, prepare_for_wgee, quadrature_scan,
    replicate_study, subject_weights, ContrastKind, CorrelationStructure, CovariateKind,
    CovariateSchema, CovariateSpec, EndpointStrategy, EndpointView, Estimator, GeeFit, GlmmSpec,
    LongDataset, Optimizer, Pattern, QuadratureMode, QuadratureSpec, SimSpec,
};

#[derive(Parser)]
#[command(
    name = "longit",
    version,
    about = "Treatment-effect estimation for incomplete longitudinal binary outcomes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Missingness pattern table for a dataset
    Describe(DescribeArgs),
    /// Fit a marginal or random-intercept model
    Fit(FitArgs),
    /// Single-time-point treatment comparison
    Endpoint(EndpointArgs),
    /// Quadrature sensitivity scan for the mixed model
    Scan(ScanArgs),
    /// Simulation study: bias and coverage over replicates
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Long-format CSV with id, occasion, outcome columns
    #[arg(long)]
    data: PathBuf,
    /// Treatment column name (used when present in the header)
    #[arg(long, default_value = "trt")]
    treatment: String,
    /// Reference arm label
    #[arg(long)]
    reference: Option<String>,
    /// Covariates to treat as categorical (comma separated)
    #[arg(long, value_delimiter = ',')]
    categorical: Vec<String>,
    /// Covariates to treat as continuous (comma separated)
    #[arg(long, value_delimiter = ',')]
    continuous: Vec<String>,
    /// Covariates measured per occasion rather than per subject
    #[arg(long, value_delimiter = ',')]
    time_varying: Vec<String>,
}

#[derive(Args)]
struct DescribeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Also write the table to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Gee,
    Wgee,
    Glmm,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Cc,
    Locf,
    Observed,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CorrArg {
    Ind,
    Exch,
    Ar1,
    Un,
}

impl CorrArg {
    fn structure(self) -> CorrelationStructure {
        match self {
            CorrArg::Ind => CorrelationStructure::Independence,
            CorrArg::Exch => CorrelationStructure::Exchangeable,
            CorrArg::Ar1 => CorrelationStructure::Ar1,
            CorrArg::Un => CorrelationStructure::Unstructured,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum QuadArg {
    Adaptive,
    Nonadaptive,
}

impl QuadArg {
    fn mode(self) -> QuadratureMode {
        match self {
            QuadArg::Adaptive => QuadratureMode::Adaptive,
            QuadArg::Nonadaptive => QuadratureMode::Nonadaptive,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WeightArg {
    Occasion,
    Subject,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OptimizerArg {
    QuasiNewton,
    NewtonRaphson,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: ModelArg,
    #[arg(long, default_value = "observed")]
    strategy: StrategyArg,
    /// Model formula, e.g. "outcome ~ 0 + visit + visit:trt"
    #[arg(long)]
    formula: String,
    /// Working correlation for GEE/WGEE (ignored by the mixed model)
    #[arg(long)]
    corr: Option<CorrArg>,
    /// Quadrature flavor for the mixed model
    #[arg(long, default_value = "adaptive")]
    quadrature: QuadArg,
    /// Number of quadrature points (defaults: 20 adaptive, 50 nonadaptive)
    #[arg(long = "Q")]
    q: Option<usize>,
    /// Weight granularity for WGEE
    #[arg(long, default_value = "occasion")]
    weights: WeightArg,
    /// Covariates of the dropout model besides the previous outcome
    #[arg(long, value_delimiter = ',')]
    dropout_covariates: Vec<String>,
    /// Clamp dropout weights above this quantile
    #[arg(long)]
    truncate_weights: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ViewArg {
    LastPlanned,
    LastObserved,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EndpointStrategyArg {
    Cc,
    Locf,
}

#[derive(Args)]
struct EndpointArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    view: ViewArg,
    #[arg(long)]
    strategy: EndpointStrategyArg,
    /// Longitudinal formula behind the model-based row
    #[arg(long, default_value = "outcome ~ 0 + visit + visit:trt")]
    formula: String,
    #[arg(long = "Q", default_value_t = 20)]
    q: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScanArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "outcome ~ 0 + visit + visit:trt")]
    formula: String,
    /// Quadrature point counts to scan
    #[arg(long = "Q-list", value_delimiter = ',', default_value = "2,3,5,10,20,50")]
    q_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "adaptive,nonadaptive")]
    modes: Vec<QuadArg>,
    #[arg(long, value_delimiter = ',', default_value = "quasi-newton,newton-raphson")]
    optimizers: Vec<OptimizerArg>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON simulation spec
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 100)]
    replicates: usize,
    /// Estimator labels, e.g. oracle,gee:observed:exch,wgee:occasion:exch
    #[arg(long, value_delimiter = ',')]
    estimators: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<longit::Error> for Failure {
    fn from(e: longit::Error) -> Self {
        use longit::Error as E;
        match e {
            E::NonConvergence { .. }
            | E::Singular(_)
            | E::Separation { .. }
            | E::DegenerateProbability(_)
            | E::InvalidAlpha { .. } => Failure::Numerical(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("LONGIT_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Describe(args) => describe(args),
        Command::Fit(args) => fit(args),
        Command::Endpoint(args) => endpoint(args),
        Command::Scan(args) => scan(args),
        Command::Simulate(args) => simulate(args),
    }
}

/// Build a covariate schema from the header, inferring kinds from the
/// values unless a flag forces them.
fn load_dataset(args: &DataArgs) -> CliResult<LongDataset> {
    let text = std::fs::read_to_string(&args.data)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Failure::Usage(format!("{} is empty", args.data.display())))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    for required in ["id", "occasion", "outcome"] {
        if !columns.contains(&required) {
            return Err(Failure::Usage(format!("missing column `{required}`")));
        }
    }
    let treatment = columns
        .iter()
        .any(|c| *c == args.treatment.as_str())
        .then(|| args.treatment.clone());

    // Kind inference: a column is continuous when every non-missing cell
    // parses as a number.
    let mut numeric: Vec<bool> = vec![true; columns.len()];
    for line in lines {
        for (j, cell) in line.split(',').enumerate() {
            let cell = cell.trim();
            if j < columns.len() && !cell.is_empty() && cell != "NA" {
                numeric[j] = numeric[j] && cell.parse::<f64>().is_ok();
            }
        }
    }
    let special: BTreeSet<&str> = ["id", "occasion", "outcome", args.treatment.as_str()]
        .into_iter()
        .collect();
    let mut covariates = Vec::new();
    for (j, name) in columns.iter().enumerate() {
        if special.contains(name) {
            continue;
        }
        let kind = if args.categorical.iter().any(|c| c == name) {
            CovariateKind::Categorical
        } else if args.continuous.iter().any(|c| c == name) {
            CovariateKind::Continuous
        } else if numeric[j] {
            CovariateKind::Continuous
        } else {
            CovariateKind::Categorical
        };
        covariates.push(CovariateSpec {
            name: name.to_string(),
            kind,
            reference: None,
            time_varying: args.time_varying.iter().any(|c| c == name),
        });
    }
    let schema = CovariateSchema {
        treatment,
        treatment_reference: args.reference.clone(),
        covariates,
        occasions: None,
    };
    Ok(load_long_csv(text.as_bytes(), &schema)?)
}

fn emit(table: &str, out: &Option<PathBuf>) -> CliResult<()> {
    print!("{table}");
    if let Some(path) = out {
        std::fs::write(path, table)?;
    }
    Ok(())
}

fn describe(args: DescribeArgs) -> CliResult<()> {
    let ds = load_dataset(&args.data)?;
    if ds.n_subjects() == 0 {
        return Err(Failure::Usage("dataset has no subjects".into()));
    }
    let rows = pattern_table(&ds);
    let mut table = String::from("pattern,category,count,percent\n");
    for r in &rows {
        let category = match r.class {
            Pattern::Complete => "complete",
            Pattern::MonotoneDropout | Pattern::AllMissing => "dropout",
            Pattern::Intermittent => "intermittent",
        };
        table.push_str(&format!(
            "{},{},{},{:.2}\n",
            r.pattern, category, r.count, r.percent
        ));
    }
    let pct: f64 = rows.iter().map(|r| r.percent).sum();
    table.push_str(&format!("total,,{},{:.2}\n", ds.n_subjects(), pct));
    emit(&table, &args.out)
}

/// Table-style effect labels for the saturated per-occasion design.
fn effect_label(meta: &longit::design::ColumnMeta, arms: usize) -> String {
    match (meta.visit_level(), meta.treatment_level(), meta.parts.len()) {
        (Some(v), None, 1) => format!("Int. {v}"),
        (Some(v), Some(a), 2) => {
            if arms <= 2 {
                format!("Trt. {v}")
            } else {
                format!("Trt. {v} [{a}]")
            }
        }
        _ => meta.name.clone(),
    }
}

fn gee_table(fit: &GeeFit) -> String {
    let mut table = String::from("effect,param,estimate,model_se,robust_se\n");
    let model_se = fit.model_se();
    let robust_se = fit.robust_se();
    for (j, meta) in fit.info.columns.iter().enumerate() {
        table.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            effect_label(meta, fit.info.arms.len()),
            meta.name,
            fit.beta[j],
            model_se[j],
            robust_se[j]
        ));
    }
    match &fit.correlation.alpha {
        longit::Alpha::Scalar(a) => {
            table.push_str(&format!("Corr.,alpha,{a:.6},,\n"));
        }
        longit::Alpha::Matrix(m) => {
            for j in 0..m.nrows() {
                for k in (j + 1)..m.ncols() {
                    table.push_str(&format!(
                        "Corr.,alpha[{};{}],{:.6},,\n",
                        fit.info.visit_levels[j],
                        fit.info.visit_levels[k],
                        m[[j, k]]
                    ));
                }
            }
        }
        longit::Alpha::None => {}
    }
    table
}

fn fit(args: FitArgs) -> CliResult<()> {
    // Flag validation happens before any data work.
    match (args.model, args.strategy) {
        (ModelArg::Wgee, StrategyArg::Locf) => {
            return Err(Failure::Usage(
                "--model wgee cannot use --strategy locf: weights are meaningless after imputation"
                    .into(),
            ))
        }
        (ModelArg::Wgee, StrategyArg::Cc) => {
            return Err(Failure::Usage(
                "--model wgee requires --strategy observed: completers carry no dropout process"
                    .into(),
            ))
        }
        _ => {}
    }
    if args.model == ModelArg::Glmm && args.corr.is_some() {
        eprintln!("note: --corr is ignored by the mixed model");
    }
    let corr = args.corr.unwrap_or(CorrArg::Exch).structure();
    let formula = parse_formula(&args.formula)?;
    let ds = load_dataset(&args.data)?;
    let prepared = match args.strategy {
        StrategyArg::Cc => complete_case(&ds)?,
        StrategyArg::Locf => {
            let (filled, dropped) = locf_impute(&ds);
            if dropped > 0 {
                eprintln!("note: dropped {dropped} subject(s) without any observed outcome");
            }
            filled
        }
        StrategyArg::Observed => ds,
    };

    match args.model {
        ModelArg::Gee => {
            let fit = fit_gee(&prepared, &formula, corr)?;
            for note in &fit.notes {
                eprintln!("note: {note}");
            }
            emit(&gee_table(&fit), &args.out)?;
            if !fit.converged {
                return Err(Failure::Numerical("GEE did not converge".into()));
            }
            Ok(())
        }
        ModelArg::Wgee => {
            let (mono, report) = prepare_for_wgee(&prepared);
            if report.truncated_observations > 0 || report.excluded_subjects > 0 {
                eprintln!(
                    "note: monotonized {} observation(s); excluded {} subject(s) without occasion 1",
                    report.truncated_observations, report.excluded_subjects
                );
            }
            let mut dropout_covs = args.dropout_covariates.clone();
            if dropout_covs.is_empty() {
                if let Some(t) = &mono.schema.treatment {
                    dropout_covs.push(t.clone());
                }
            }
            let table = person_period_expand(&mono, &dropout_covs)?;
            let model = fit_dropout_model(&table)?;
            eprintln!("note: dropout model over {} at-risk records", table.rows.len());
            let mut weights = match args.weights {
                WeightArg::Occasion => occasion_weights(&model, &mono)?,
                WeightArg::Subject => subject_weights(&model, &mono)?,
            };
            if let Some(q) = args.truncate_weights {
                weights.truncate(q)?;
            }
            let fit = fit_wgee(&mono, &formula, corr, &weights)?;
            for note in &fit.notes {
                eprintln!("note: {note}");
            }
            emit(&gee_table(&fit), &args.out)?;
            if !fit.converged {
                return Err(Failure::Numerical("WGEE did not converge".into()));
            }
            Ok(())
        }
        ModelArg::Glmm => {
            let mut spec = GlmmSpec::new(formula);
            spec.quadrature = match args.q {
                Some(q) => QuadratureSpec {
                    mode: args.quadrature.mode(),
                    q,
                },
                None => QuadratureSpec::default_for(args.quadrature.mode()),
            };
            let fit = fit_glmm(&prepared, &spec)?;
            let se = fit.standard_errors();
            let mut table = String::from("effect,param,estimate,se\n");
            for (j, meta) in fit.info.columns.iter().enumerate() {
                let se_txt = se
                    .as_ref()
                    .map(|s| format!("{:.6}", s[j]))
                    .unwrap_or_default();
                table.push_str(&format!(
                    "{},{},{:.6},{}\n",
                    effect_label(meta, fit.info.arms.len()),
                    meta.name,
                    fit.beta[j],
                    se_txt
                ));
            }
            let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            table.push_str(&format!(
                "R.I. s.d.,sigma,{:.6},{}\n",
                fit.sigma,
                fmt_opt(fit.sigma_se)
            ));
            table.push_str(&format!(
                "R.I. var.,sigma2,{:.6},{}\n",
                fit.sigma2,
                fmt_opt(fit.sigma2_se)
            ));
            emit(&table, &args.out)?;
            let d = &fit.diagnostics;
            eprintln!(
                "note: loglik {:.6}; {} iterations; gradient max-norm {:.2e}",
                fit.loglik, d.iterations, d.grad_norm
            );
            if d.boundary_sigma {
                eprintln!("note: sigma collapsed to the boundary of its parameter space");
            }
            if d.seemingly_converged {
                eprintln!("note: indefinite Hessian; the optimizer has only seemingly converged");
            }
            if !d.converged {
                return Err(Failure::Numerical(format!(
                    "GLMM did not converge (gradient max-norm {:.2e})",
                    d.grad_norm
                )));
            }
            Ok(())
        }
    }
}

fn endpoint(args: EndpointArgs) -> CliResult<()> {
    let view = match args.view {
        ViewArg::LastPlanned => EndpointView::LastPlanned,
        ViewArg::LastObserved => EndpointView::LastObserved,
    };
    if view == EndpointView::LastObserved && args.strategy == EndpointStrategyArg::Cc {
        return Err(Failure::Usage(
            "complete case is not an option under the last-observed view".into(),
        ));
    }
    let strategy = match args.strategy {
        EndpointStrategyArg::Cc => EndpointStrategy::CompleteCase,
        EndpointStrategyArg::Locf => EndpointStrategy::Locf,
    };
    let ds = load_dataset(&args.data)?;
    let analysis = endpoint_analysis(&ds, view, strategy)?;

    // Model-based assessment of the last-visit contrast from a
    // random-intercept fit on the strategy-prepared data.
    let prepared = match strategy {
        EndpointStrategy::CompleteCase => complete_case(&ds)?,
        EndpointStrategy::Locf => locf_impute(&ds).0,
    };
    let formula = parse_formula(&args.formula)?;
    let mut spec = GlmmSpec::new(formula);
    spec.quadrature = QuadratureSpec::adaptive(args.q);
    let mixed = fit_glmm(&prepared, &spec)?;
    let cov = mixed.covariance.as_ref().ok_or_else(|| {
        Failure::Numerical("mixed-model information matrix is not positive definite".into())
    })?;
    let l = build_contrasts(&mixed.info, &ContrastKind::LastOccasion)?;
    let p = mixed.beta.len();
    let beta_cov = cov.slice(ndarray::s![0..p, 0..p]);
    let wald = longit::wald_test(l.view(), mixed.beta.view(), beta_cov)?;

    let strategy_name = match args.strategy {
        EndpointStrategyArg::Cc => "cc",
        EndpointStrategyArg::Locf => "locf",
    };
    let chi2 = pearson_chi2(&analysis.table)?;
    let fisher_p = fisher_exact(&analysis.table)?;
    let mut table = String::from("method,test,statistic,df,p\n");
    table.push_str(&format!(
        "{strategy_name},mixed,{:.6},{},{:.6}\n",
        wald.statistic, wald.df, wald.p_value
    ));
    table.push_str(&format!(
        "{strategy_name},pearson,{:.6},{},{:.6}\n",
        chi2.statistic, chi2.df, chi2.p_value
    ));
    table.push_str(&format!("{strategy_name},fisher,,,{fisher_p:.6}\n"));
    emit(&table, &args.out)?;
    for (j, label) in analysis.table.labels.iter().enumerate() {
        eprintln!(
            "note: arm {label}: {} successes / {} failures",
            analysis.table.successes[j], analysis.table.failures[j]
        );
    }
    Ok(())
}

fn scan(args: ScanArgs) -> CliResult<()> {
    let ds = load_dataset(&args.data)?;
    let formula = parse_formula(&args.formula)?;
    let spec = GlmmSpec::new(formula);
    let modes: Vec<QuadratureMode> = args.modes.iter().map(|m| m.mode()).collect();
    let optimizers: Vec<Optimizer> = args
        .optimizers
        .iter()
        .map(|o| match o {
            OptimizerArg::QuasiNewton => Optimizer::QuasiNewton,
            OptimizerArg::NewtonRaphson => Optimizer::NewtonRaphson,
        })
        .collect();
    let table = quadrature_scan(&ds, &spec, &args.q_list, &modes, &optimizers)?;
    emit(&table.to_csv(), &args.out)?;
    for flag in table.stability_flags() {
        eprintln!(
            "note: stability {} {} {}: |est(Q={}) - est(Q={})| = {:.2e} -> {}",
            flag.mode.name(),
            flag.optimizer.name(),
            flag.param,
            flag.q_max,
            flag.q_ref,
            flag.delta,
            if flag.stable { "stable" } else { "unstable" }
        );
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> CliResult<()> {
    if args.replicates == 0 {
        return Err(Failure::Usage("--replicates must be at least 1".into()));
    }
    let text = std::fs::read_to_string(&args.spec)?;
    let spec: SimSpec = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("cannot parse simulation spec: {e}")))?;
    if args.estimators.is_empty() {
        return Err(Failure::Usage("no --estimators given".into()));
    }
    let estimators: Vec<Estimator> = args
        .estimators
        .iter()
        .map(|s| s.parse::<Estimator>())
        .collect::<longit::Result<_>>()?;
    let report = replicate_study(&spec, &estimators, args.replicates)?;
    emit(&report.to_csv(), &args.out)
}
