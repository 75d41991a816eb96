//! Command-line surface for the splinetrial library: fitting, contrasts,
//! AIC tables, basis inspection, trial simulation, and power studies.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use splinetrial::cov::CovSpec;
use splinetrial::data::{load_csv, write_csv, CsvSchema, TrialData, Version};
use splinetrial::fit::{fit_gls_ml, fit_proportional, FitResult};
use splinetrial::harness::{
    run_study, write_summary_csv, EffectArm, Scenario, StudyConfig, SummaryTable,
};
use splinetrial::infer::{emm_contrast, prop_contrast, Averaging, Contrast, SeMethod};
use splinetrial::mean::{MeanKind, MeanSpec};
use splinetrial::ncs::SplineBasis;
use splinetrial::padsim::{simulate, GeneratorModel, PadConfig};

#[derive(Parser)]
#[command(
    name = "splinetrial",
    version,
    about = "Longitudinal trial analysis with spline mean models and GLS/ML fitting"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit one model and write the result JSON plus mean/contrast curves.
    Fit(FitArgs),
    /// Fit one model and report arm contrasts at chosen months.
    Contrast(ContrastArgs),
    /// Fit a list of models and print an AIC-ranked table.
    AicTable(AicArgs),
    /// Print natural-cubic-spline basis values on a time grid.
    Basis(BasisArgs),
    /// Generate a simulated trial CSV.
    Simulate(SimArgs),
    /// Run a Monte Carlo power / Type-I-error study.
    Power(PowerArgs),
}

/// Model selection flags shared by fit-like subcommands.
#[derive(Args, Clone)]
struct ModelArgs {
    /// Mean structure: cat | linear | ncs:DF | prop
    #[arg(long, default_value = "ncs:2")]
    mean: String,
    /// Covariance structure: un | har1 | car1cp | car1exp | ri | rs
    #[arg(long, default_value = "un")]
    cov: String,
    /// Comma-separated baseline covariate columns.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Include test-version indicator columns.
    #[arg(long)]
    version_effect: bool,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Directory for fit.json, mean_curve.csv, contrast_curve.csv.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ContrastArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Months at which to evaluate the arm contrast.
    #[arg(long, value_delimiter = ',', default_value = "54")]
    at: Vec<f64>,
    /// model | sandwich
    #[arg(long, default_value = "model")]
    se_method: String,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AicArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated model specs `mean:cov[:+version]`,
    /// e.g. `cat:un,ncs:2:rs:+version,linear:ri`.
    #[arg(long, value_delimiter = ',', required = true)]
    models: Vec<String>,
    /// Comma-separated baseline covariate columns applied to every model.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
}

#[derive(Args)]
struct BasisArgs {
    /// Comma-separated interior knots.
    #[arg(long, value_delimiter = ',', required = true)]
    knots: Vec<f64>,
    /// Boundary knots `lo,hi`.
    #[arg(long, value_delimiter = ',', required = true)]
    boundary: Vec<f64>,
    /// Evaluation grid `start,stop,step`.
    #[arg(long, value_delimiter = ',', default_value = "0,54,1")]
    grid: Vec<f64>,
}

#[derive(Args)]
struct SimArgs {
    /// pad | pad-covid
    #[arg(long, default_value = "pad")]
    scenario: String,
    #[arg(long, default_value_t = 1000)]
    subjects: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Treatment effect at the final visit.
    #[arg(long, default_value_t = 1.4)]
    delta: f64,
    /// Generate under the null (no treatment effect).
    #[arg(long)]
    null: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PowerArgs {
    /// pad | pad-covid
    #[arg(long, default_value = "pad")]
    scenario: String,
    /// power | type1 | both
    #[arg(long, default_value = "both")]
    arm: String,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    replicates: u64,
    #[arg(long, default_value_t = 20211128)]
    seed: u64,
    #[arg(long, default_value_t = 1.4)]
    delta: f64,
    #[arg(long, default_value_t = 1000)]
    subjects: usize,
    /// Worker threads (default: SPLINETRIAL_WORKERS, else cores minus 2).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory for records and summaries.
    #[arg(long)]
    out: PathBuf,
}

/// Usage-level failure: wrong flag values rather than runtime errors.
fn usage(msg: &str) -> ! {
    eprintln!("error: {msg}");
    std::process::exit(2);
}

fn parse_mean(s: &str, k: usize) -> MeanKind {
    match s {
        "cat" => MeanKind::CategoricalTime(k),
        "linear" => MeanKind::LinearTime,
        "prop" => MeanKind::ProportionalStep(k),
        _ => {
            if let Some(df) = s.strip_prefix("ncs:") {
                match df.parse::<usize>() {
                    Ok(df) if df >= 1 => return MeanKind::NaturalSpline(df),
                    _ => usage(&format!("invalid spline df in --mean {s}")),
                }
            }
            usage(&format!(
                "unknown mean `{s}` (expected cat | linear | ncs:DF | prop)"
            ))
        }
    }
}

fn parse_cov(s: &str, k: usize) -> CovSpec {
    match s {
        "un" => CovSpec::Unstructured { k },
        "har1" => CovSpec::HetAr1 { k },
        "car1cp" => CovSpec::Car1ConstProp,
        "car1exp" => CovSpec::Car1Exp,
        "ri" => CovSpec::RandomIntercept,
        "rs" => CovSpec::RandomSlope,
        _ => usage(&format!(
            "unknown cov `{s}` (expected un | har1 | car1cp | car1exp | ri | rs)"
        )),
    }
}

/// Parse the `mean:cov[:+version]` mini-grammar used by --models lists.
fn parse_model_spec(s: &str, k: usize) -> (MeanKind, CovSpec, bool) {
    let mut parts: Vec<&str> = s.split(':').collect();
    let version = parts.last() == Some(&"+version");
    if version {
        parts.pop();
    }
    let (mean, cov) = match parts.as_slice() {
        [m, c] => (parse_mean(m, k), parse_cov(c, k)),
        [m, df, c] if *m == "ncs" => (parse_mean(&format!("ncs:{df}"), k), parse_cov(c, k)),
        _ => usage(&format!("cannot parse model spec `{s}` as mean:cov[:+version]")),
    };
    (mean, cov, version)
}

fn parse_scenario(s: &str) -> Scenario {
    match s {
        "pad" => Scenario::Pad,
        "pad-covid" => Scenario::PadCovid,
        _ => usage(&format!("unknown scenario `{s}` (expected pad | pad-covid)")),
    }
}

/// Echo the fully resolved configuration so runs are reproducible from
/// their output alone.
fn echo_config(cmd: &str, config: serde_json::Value) {
    println!("# splinetrial {cmd} config: {config}");
}

fn fit_any(mean: MeanSpec, cov: CovSpec, data: &TrialData) -> anyhow::Result<FitResult> {
    if let MeanKind::ProportionalStep(k) = mean.kind {
        Ok(fit_proportional(k, mean, data)?)
    } else {
        Ok(fit_gls_ml(mean, cov, data)?)
    }
}

fn build_spec(model: &ModelArgs, data: &TrialData) -> (MeanSpec, CovSpec) {
    let k = data.max_visit() as usize;
    let kind = parse_mean(&model.mean, k);
    let cov = parse_cov(&model.cov, k);
    if matches!(kind, MeanKind::CategoricalTime(_)) {
        let off_grid = data
            .observations()
            .iter()
            .any(|o| (o.actual_month - o.target_month).abs() > 1e-9);
        if off_grid {
            eprintln!(
                "note: categorical-time mean groups off-schedule visits by visit number"
            );
        }
    }
    let spec = MeanSpec {
        kind,
        clda_constraint: true,
        covariates: model.covariates.clone(),
        version_effect: model.version_effect,
    };
    (spec, cov)
}

fn contrast_csv_row(model: &str, time: f64, c: &Contrast) -> String {
    format!(
        "{model},{time},{:.10},{:.10},{:.4},{:.6},{:.8e},{:?},{}",
        c.estimate,
        c.se,
        c.df,
        c.t_ratio,
        c.p_value,
        c.se_method,
        c.warnings.join(";")
    )
}

fn cmd_fit(args: FitArgs) -> anyhow::Result<()> {
    let data = load_csv(&args.data, &CsvSchema::default())?;
    let (spec, cov) = build_spec(&args.model, &data);
    echo_config(
        "fit",
        serde_json::json!({
            "data": args.data, "mean": args.model.mean, "cov": args.model.cov,
            "covariates": args.model.covariates,
            "version_effect": args.model.version_effect, "out_dir": args.out_dir,
        }),
    );
    let fit = fit_any(spec, cov, &data)?;
    std::fs::create_dir_all(&args.out_dir)?;

    let json_path = args.out_dir.join("fit.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&fit)?)?;

    // mean curves per arm, covariates at zero, averaged over versions
    let months: Vec<f64> = curve_months(&fit, &data);
    let zeros = vec![0.0; fit.model.spec.covariates.len()];
    let mut mean_csv = String::from("month,arm0,arm1\n");
    for &t in &months {
        let mut row = format!("{t}");
        for arm in 0..2u8 {
            let mut avg = 0.0;
            for version in [Version::A, Version::B, Version::C] {
                avg += fit.model.predict_mean(&fit.beta, arm, t, &zeros, version)?;
            }
            row.push_str(&format!(",{:.10}", avg / 3.0));
        }
        mean_csv.push_str(&row);
        mean_csv.push('\n');
    }
    std::fs::write(args.out_dir.join("mean_curve.csv"), mean_csv)?;

    let mut con_csv = String::from("model,time,estimate,se,df,t,p,se_method,warnings\n");
    if fit.prop_effect.is_some() {
        let c = prop_contrast(&fit)?;
        con_csv.push_str(&contrast_csv_row("prop", f64::NAN, &c));
        con_csv.push('\n');
    } else {
        for &t in &months {
            let c = emm_contrast(&fit, &data, t, SeMethod::Model, Averaging::default())?;
            con_csv.push_str(&contrast_csv_row(&args.model.mean, t, &c));
            con_csv.push('\n');
        }
    }
    std::fs::write(args.out_dir.join("contrast_curve.csv"), con_csv)?;
    println!(
        "loglik {:.6}  aic {:.4}  converged {}  -> {}",
        fit.loglik,
        fit.aic,
        fit.converged,
        json_path.display()
    );
    Ok(())
}

/// Curve evaluation grid: scheduled months for visit-indexed means, a
/// fine grid over the observed span otherwise.
fn curve_months(fit: &FitResult, data: &TrialData) -> Vec<f64> {
    match fit.model.spec.kind {
        MeanKind::CategoricalTime(_) | MeanKind::ProportionalStep(_) => {
            data.target_months().iter().map(|&(_, m)| m).collect()
        }
        _ => {
            let max = data
                .target_months()
                .iter()
                .map(|&(_, m)| m)
                .fold(0.0f64, f64::max);
            let steps = 37;
            (0..=steps).map(|i| max * i as f64 / steps as f64).collect()
        }
    }
}

fn cmd_contrast(args: ContrastArgs) -> anyhow::Result<()> {
    let data = load_csv(&args.data, &CsvSchema::default())?;
    let (spec, cov) = build_spec(&args.model, &data);
    let se_method = match args.se_method.as_str() {
        "model" => SeMethod::Model,
        "sandwich" => SeMethod::Sandwich,
        other => usage(&format!("unknown se-method `{other}`")),
    };
    echo_config(
        "contrast",
        serde_json::json!({
            "data": args.data, "mean": args.model.mean, "cov": args.model.cov,
            "covariates": args.model.covariates,
            "version_effect": args.model.version_effect,
            "at": args.at, "se_method": args.se_method,
        }),
    );
    let fit = fit_any(spec, cov, &data)?;
    let mut out = String::from("model,time,estimate,se,df,t,p,se_method,warnings\n");
    if fit.prop_effect.is_some() {
        let c = prop_contrast(&fit)?;
        out.push_str(&contrast_csv_row(&args.model.mean, f64::NAN, &c));
        out.push('\n');
    } else {
        for &t in &args.at {
            let c = emm_contrast(&fit, &data, t, se_method, Averaging::default())?;
            out.push_str(&contrast_csv_row(&args.model.mean, t, &c));
            out.push('\n');
        }
    }
    match args.out {
        Some(path) => std::fs::write(path, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

fn cmd_aic_table(args: AicArgs) -> anyhow::Result<()> {
    if args.models.is_empty() {
        usage("--models requires at least one model spec");
    }
    let data = load_csv(&args.data, &CsvSchema::default())?;
    let k = data.max_visit() as usize;
    echo_config(
        "aic-table",
        serde_json::json!({
            "data": args.data, "models": args.models, "covariates": args.covariates,
        }),
    );
    let mut rows: Vec<(String, Result<FitResult, String>)> = Vec::new();
    for spec_str in &args.models {
        let (kind, cov, version) = parse_model_spec(spec_str, k);
        let spec = MeanSpec {
            kind,
            clda_constraint: true,
            covariates: args.covariates.clone(),
            version_effect: version,
        };
        let fit = fit_any(spec, cov, &data).map_err(|e| e.to_string());
        rows.push((spec_str.clone(), fit));
    }
    let best = rows
        .iter()
        .filter_map(|(_, r)| r.as_ref().ok().map(|f| f.aic))
        .fold(f64::INFINITY, f64::min);
    rows.sort_by(|a, b| {
        let aic = |r: &Result<FitResult, String>| r.as_ref().map_or(f64::INFINITY, |f| f.aic);
        aic(&a.1).total_cmp(&aic(&b.1))
    });
    println!(
        "{:<26} {:>12} {:>10} {:>10} {:>8}",
        "model", "loglik", "AIC", "dAIC", "params"
    );
    for (label, fit) in &rows {
        match fit {
            Ok(f) => println!(
                "{:<26} {:>12.4} {:>10.4} {:>10.4} {:>8}",
                label,
                f.loglik,
                f.aic,
                f.aic - best,
                f.n_params
            ),
            Err(e) => println!("{label:<26} ERROR: {e}"),
        }
    }
    Ok(())
}

fn cmd_basis(args: BasisArgs) -> anyhow::Result<()> {
    if args.boundary.len() != 2 {
        usage("--boundary takes exactly two values: lo,hi");
    }
    if args.grid.len() != 3 {
        usage("--grid takes exactly three values: start,stop,step");
    }
    let basis = SplineBasis::with_knots((args.boundary[0], args.boundary[1]), args.knots.clone())?;
    echo_config(
        "basis",
        serde_json::json!({
            "knots": args.knots, "boundary": args.boundary, "grid": args.grid,
        }),
    );
    let m = basis.m();
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=m).map(|j| format!("ns{j}")))
        .collect();
    println!("{}", header.join(","));
    let (start, stop, step) = (args.grid[0], args.grid[1], args.grid[2]);
    if step <= 0.0 {
        usage("grid step must be positive");
    }
    let mut t = start;
    while t <= stop + 1e-12 {
        let b: DVector<f64> = basis.eval(t);
        let row: Vec<String> = std::iter::once(format!("{t}"))
            .chain(b.iter().map(|v| format!("{v:.10}")))
            .collect();
        println!("{}", row.join(","));
        t += step;
    }
    Ok(())
}

fn cmd_simulate(args: SimArgs) -> anyhow::Result<()> {
    let scenario = parse_scenario(&args.scenario);
    echo_config(
        "simulate",
        serde_json::json!({
            "scenario": args.scenario, "subjects": args.subjects, "seed": args.seed,
            "delta": args.delta, "null": args.null, "out": args.out,
        }),
    );
    let config = PadConfig {
        n_subjects: args.subjects,
        covid: scenario == Scenario::PadCovid,
        delta: args.delta,
        seed: args.seed,
        ..PadConfig::default()
    };
    let data = simulate(&config, &GeneratorModel::standard(), !args.null)?;
    write_csv(&data, &args.out)?;
    println!(
        "wrote {} observations on {} subjects to {}",
        data.n_obs(),
        data.n_subjects(),
        args.out.display()
    );
    Ok(())
}

fn cmd_power(args: PowerArgs) -> anyhow::Result<()> {
    let scenario = parse_scenario(&args.scenario);
    let arms: Vec<EffectArm> = match args.arm.as_str() {
        "power" => vec![EffectArm::Power],
        "type1" => vec![EffectArm::Type1],
        "both" => vec![EffectArm::Power, EffectArm::Type1],
        other => usage(&format!("unknown arm `{other}` (expected power | type1 | both)")),
    };
    let workers = args.workers.unwrap_or_else(|| {
        std::env::var("SPLINETRIAL_WORKERS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    });
    echo_config(
        "power",
        serde_json::json!({
            "scenario": args.scenario, "arm": args.arm,
            "replicates": args.replicates, "seed": args.seed, "delta": args.delta,
            "subjects": args.subjects, "workers": workers, "out": args.out,
        }),
    );
    std::fs::create_dir_all(&args.out)?;
    for arm in arms {
        let config = StudyConfig {
            scenario,
            arm,
            replicates: args.replicates as usize,
            master_seed: args.seed,
            n_subjects: args.subjects,
            delta: args.delta,
            workers,
        };
        let stem = format!("{}-{}", scenario.label(), arm.label());
        let records = args.out.join(format!("{stem}-records.csv"));
        let summaries = run_study(&config, &records)?;
        write_summary_csv(&args.out.join(format!("{stem}-summary.csv")), &summaries)?;
        let table = SummaryTable(&summaries).to_string();
        std::fs::write(args.out.join(format!("{stem}-summary.txt")), &table)?;
        print!("{table}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Fit(a) => cmd_fit(a),
        Cmd::Contrast(a) => cmd_contrast(a),
        Cmd::AicTable(a) => cmd_aic_table(a),
        Cmd::Basis(a) => cmd_basis(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Power(a) => cmd_power(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
