use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use sfa::bayes::{default_hyperparameters, psi_hat, run_chain, ChainConfig};
use sfa::cv::{cross_validate, CvConfig, CvModel};
use sfa::diagnostics::residual_diagnostics;
use sfa::famodel::SfaModel;
use sfa::io::{load_long_csv, numbered_levels, write_long_csv, Dataset, DatasetSchema, Role};
use sfa::meanmodel::{build_pp_design, Constraint, Design};
use sfa::mle::{fit_mle, MleConfig, MleFitRecord};
use sfa::ranksel::{select_ranks, Adjustment, RankSelectionConfig};
use sfa::simulate::{simulate_sfa, SimulateOptions};
use sfa::tensor::MaskedTensor;
use sfa::SfaError;

#[derive(Parser)]
#[command(name = "sfa", version, about = "Separable factor analysis for multiway arrays")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw an array from a random separable model.
    Simulate(SimulateArgs),
    /// Maximum likelihood fit of a complete array.
    FitMle(FitMleArgs),
    /// Posterior sampling; writes traces, imputations and a summary.
    FitBayes(FitBayesArgs),
    /// Sequential likelihood-ratio selection of the rank vector.
    RankSelect(RankSelectArgs),
    /// Posterior imputation of missing cells.
    Impute(ImputeArgs),
    /// Hold-out comparison of mean and covariance models.
    CrossValidate(CrossValidateArgs),
    /// Residual correlation summaries per mode.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    ranks: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    loading_scale: f64,
    /// Data CSV; the schema is written alongside as `<stem>.schema.json`.
    #[arg(long)]
    out: PathBuf,
    /// Also write the generating model as JSON.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MeanKind {
    None,
    /// Piecewise polynomial in age with country, period and sex effects.
    Pp,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConstraintArg {
    Corner,
    SumToZero,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long, value_enum, default_value = "none")]
    mean: MeanKind,
    #[arg(long, value_enum, default_value = "corner")]
    constraint: ConstraintArg,
}

#[derive(Args)]
struct ChainArgs {
    #[arg(long, default_value_t = 20_000)]
    iters: usize,
    #[arg(long, default_value_t = 5_000)]
    burnin: usize,
    #[arg(long, default_value_t = 10)]
    thin: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the default prior degrees of freedom.
    #[arg(long)]
    nu0: Option<f64>,
    /// Override the default prior uniqueness scale.
    #[arg(long)]
    d0sq: Option<f64>,
}

#[derive(Args)]
struct FitMleArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    ranks: Vec<usize>,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_sweeps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitBayesArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    ranks: Vec<usize>,
    #[command(flatten)]
    chain: ChainArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AdjustmentArg {
    AlphaPower,
    Bonferroni,
    None,
}

#[derive(Args)]
struct RankSelectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "alpha-power")]
    adjustment: AdjustmentArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ImputeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    ranks: Vec<usize>,
    #[command(flatten)]
    chain: ChainArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CrossValidateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated: iid, time, mode:<i>, sfa:<k1>,<k2>,...
    #[arg(long, default_value = "iid")]
    models: String,
    #[arg(long, default_value_t = 50)]
    reps: usize,
    #[arg(long, default_value_t = 0.25)]
    frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 600)]
    iters: usize,
    #[arg(long, default_value_t = 100)]
    burnin: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Fit JSON from `fit-mle`; residuals are then whitened by its covariances.
    #[arg(long)]
    fit: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

struct Loaded {
    schema: DatasetSchema,
    dataset: Dataset<f64>,
    design: Option<Design<f64>>,
}

fn load(args: &DataArgs) -> anyhow::Result<Loaded> {
    let schema = DatasetSchema::from_json_file(&args.schema)
        .with_context(|| format!("reading schema {}", args.schema.display()))?;
    let dataset = load_long_csv::<f64>(&args.data, &schema)
        .with_context(|| format!("reading data {}", args.data.display()))?;
    info!(
        "loaded {:?} array, {} of {} cells observed",
        dataset.data.dims(),
        dataset.data.n_observed(),
        dataset.data.mask().len()
    );
    let design = match args.mean {
        MeanKind::None => None,
        MeanKind::Pp => {
            let levels = schema.pp_levels(&dataset.levels)?;
            let constraint = match args.constraint {
                ConstraintArg::Corner => Constraint::Corner,
                ConstraintArg::SumToZero => Constraint::SumToZero,
            };
            Some(build_pp_design::<f64>(&levels, constraint)?.design)
        }
    };
    Ok(Loaded { schema, dataset, design })
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    serde_json::to_writer_pretty(create(path)?, value)?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let opts = SimulateOptions::<f64> {
        loading_scale: a.loading_scale,
        ..Default::default()
    };
    let sim = simulate_sfa(&a.dims, &a.ranks, a.seed, &opts)?;
    let schema = DatasetSchema::generic(a.dims.len());
    let levels = numbered_levels(&a.dims);
    write_long_csv(create(&a.out)?, &MaskedTensor::fully_observed(sim.data), &levels, &schema)?;
    let schema_path = a.out.with_extension("schema.json");
    schema.write_json_file(&schema_path)?;
    if let Some(t) = &a.truth {
        write_json(t, &serde_json::to_value(sim.truth.to_record())?)?;
    }
    info!("wrote {} and {}", a.out.display(), schema_path.display());
    Ok(())
}

fn fit_mle_cmd(a: FitMleArgs) -> anyhow::Result<()> {
    let l = load(&a.data)?;
    if !l.dataset.data.is_complete() {
        bail!(
            "{} cells are missing; maximum likelihood needs a complete array (see `impute`)",
            l.dataset.data.n_missing()
        );
    }
    let cfg = MleConfig {
        tol: a.tol,
        max_sweeps: a.max_sweeps,
        seed: a.seed,
        ..Default::default()
    };
    let fit = fit_mle(l.dataset.data.tensor(), &a.ranks, l.design.as_ref(), &cfg)?;
    if fit.diverged {
        return Err(SfaError::Diverged { sweeps: fit.sweeps }.into());
    }
    if !fit.converged {
        log::warn!("no convergence after {} sweeps", fit.sweeps);
    }
    info!("log-likelihood {:.6} after {} sweeps", fit.log_lik(), fit.sweeps);
    let labels = l.design.as_ref().map(|d| d.labels().to_vec());
    let mut record = serde_json::to_value(fit.to_record(labels.as_deref()))?;
    record["mode_names"] = json!(l.schema.mode_names());
    write_json(&a.out, &record)
}

fn chain_config(c: &ChainArgs) -> ChainConfig {
    ChainConfig {
        iters: c.iters,
        burnin: c.burnin,
        thin: c.thin,
        seed: c.seed,
        ..Default::default()
    }
}

fn posterior(
    l: &Loaded,
    ranks: &[usize],
    c: &ChainArgs,
) -> anyhow::Result<(sfa::Chain, sfa::bayes::PriorSpec, ChainConfig)> {
    let y = &l.dataset.data;
    let mut prior = default_hyperparameters(psi_hat(y, l.design.as_ref())?, y.dims(), ranks)?;
    if let Some(v) = c.nu0 {
        prior.nu0 = v;
    }
    if let Some(v) = c.d0sq {
        prior.d0sq = v;
    }
    let cfg = chain_config(c);
    let chain = run_chain(y, ranks, l.design.as_ref(), &prior, &cfg)?;
    info!("kept {} draws", chain.n_draws());
    Ok((chain, prior, cfg))
}

fn fit_bayes(a: FitBayesArgs) -> anyhow::Result<()> {
    let l = load(&a.data)?;
    let (chain, prior, cfg) = posterior(&l, &a.ranks, &a.chain)?;
    fs::create_dir_all(&a.out)?;
    chain.write_traces_csv(create(&a.out.join("traces.csv"))?)?;
    let names = l.schema.mode_names();
    if !chain.missing_cells.is_empty() {
        chain.write_imputations_csv(
            create(&a.out.join("imputations.csv"))?,
            Some(&names),
            Some(&l.dataset.levels),
        )?;
    }
    let n = chain.n_draws().max(1) as f64;
    let psi_mean = chain.psi.iter().sum::<f64>() / n;
    let covs: Vec<Vec<Vec<f64>>> = chain
        .posterior_mean_covariances()
        .iter()
        .map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect())
        .collect();
    let beta_mean: Option<Vec<f64>> = chain.beta.first().map(|b0| {
        (0..b0.len())
            .map(|c| chain.beta.iter().map(|b| b[c]).sum::<f64>() / n)
            .collect()
    });
    let summary = json!({
        "dims": chain.dims,
        "ranks": chain.ranks,
        "mode_names": names,
        "draws": chain.n_draws(),
        "prior": prior,
        "chain": cfg,
        "psi_mean": psi_mean,
        "covariance_means": covs,
        "coefficient_labels": chain.coefficient_labels,
        "coefficient_means": beta_mean,
    });
    write_json(&a.out.join("summary.json"), &summary)
}

fn rank_select(a: RankSelectArgs) -> anyhow::Result<()> {
    let l = load(&a.data)?;
    if !l.dataset.data.is_complete() {
        bail!("rank selection needs a complete array");
    }
    let cfg = RankSelectionConfig {
        adjustment: match a.adjustment {
            AdjustmentArg::AlphaPower => Adjustment::AlphaPower,
            AdjustmentArg::Bonferroni => Adjustment::Bonferroni,
            AdjustmentArg::None => Adjustment::None,
        },
        ..Default::default()
    };
    let report = select_ranks(l.dataset.data.tensor(), a.alpha, l.design.as_ref(), &cfg)?;
    report.write_csv(create(&a.out)?, Some(&l.schema.mode_names()))?;
    println!(
        "{}",
        report.final_ranks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
    );
    Ok(())
}

fn impute(a: ImputeArgs) -> anyhow::Result<()> {
    let l = load(&a.data)?;
    if l.dataset.data.is_complete() {
        log::warn!("no missing cells; writing an empty table");
    }
    let (chain, _, _) = posterior(&l, &a.ranks, &a.chain)?;
    chain.write_imputations_csv(create(&a.out)?, Some(&l.schema.mode_names()), Some(&l.dataset.levels))?;
    Ok(())
}

fn cross_validate_cmd(a: CrossValidateArgs) -> anyhow::Result<()> {
    let l = load(&a.data)?;
    let order = l.dataset.data.dims().len();
    let time_mode = l
        .schema
        .modes
        .iter()
        .position(|m| m.role == Some(Role::Period))
        .unwrap_or(1.min(order - 1));
    let defaults = CvConfig::default();
    let cfg = CvConfig {
        replications: a.reps,
        holdout_fraction: a.frac,
        seed: a.seed,
        models: CvModel::parse_list(&a.models, time_mode)?,
        chain: ChainConfig {
            iters: a.iters,
            burnin: a.burnin,
            ..defaults.chain
        },
    };
    let res = cross_validate(&l.dataset.data, l.design.as_ref(), &cfg)?;
    res.write_csv(create(&a.out)?)?;
    for (m, (mean, sd)) in res.models.iter().zip(res.mean().iter().zip(res.sd())) {
        println!("{}\t{:.6}\t{:.6}", m, mean, sd);
    }
    Ok(())
}

fn diagnose(a: DiagnoseArgs) -> anyhow::Result<()> {
    let l = load(&a.data)?;
    let fit = match &a.fit {
        Some(p) => {
            let rec: MleFitRecord = serde_json::from_reader(File::open(p).with_context(|| format!("reading {}", p.display()))?)?;
            Some(SfaModel::<f64>::from_record(&rec.model)?)
        }
        None => None,
    };
    let diag = residual_diagnostics(&l.dataset.data, l.design.as_ref(), fit.as_ref())?;
    diag.write_dir(&a.out, &l.schema.mode_names(), &l.dataset.levels)?;
    for (md, name) in diag.modes.iter().zip(l.schema.mode_names()) {
        println!("{}\t{:.3}", name, md.fraction_significant);
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::FitMle(a) => fit_mle_cmd(a),
        Command::FitBayes(a) => fit_bayes(a),
        Command::RankSelect(a) => rank_select(a),
        Command::Impute(a) => impute(a),
        Command::CrossValidate(a) => cross_validate_cmd(a),
        Command::Diagnose(a) => diagnose(a),
    }
}

fn error_kind(e: &SfaError) -> &'static str {
    match e {
        SfaError::Singular { .. } => "singular",
        SfaError::IllDefinedUpdate { .. } => "ill_defined_update",
        SfaError::RankDeficient(_) => "rank_deficient",
        SfaError::Diverged { .. } => "diverged",
        SfaError::Parse { .. } => "parse",
        SfaError::Schema(_) => "schema",
        SfaError::Io(_) => "io",
        _ => "invalid_input",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let core = err.chain().find_map(|c| c.downcast_ref::<SfaError>());
            let numerical = core.is_some_and(|e| e.is_numerical());
            let detail = json!({
                "error": core.map_or("invalid_input", error_kind),
                "message": format!("{:#}", err),
            });
            eprintln!("{}", detail);
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}
