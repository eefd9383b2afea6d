//! Command-line front end for sequential causal inference in the point
//! parametrization: estimate net effects from panel CSVs, contrast treatment
//! regimes, run coverage simulations, and validate the numerical identities
//! on synthesized designs.
//!
//! Exit codes: 0 success, 2 input/validation error, 3 estimation error,
//! 4 identity-check failure. Set `SEQCAUSAL_LOG=info` (or `debug`) for
//! progress messages on stderr.

mod manifest;

use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use manifest::{ManifestBuilder, RunManifest};
use seqcausal::gformula::{
    evaluate_gformula, q_coefficients, sce_from_gformula, sce_from_net_effects, Regime, SceEstimate,
};
use seqcausal::net_effects::{
    assign_classes, fit_net_effects, fitted_residual_test, Mode, NetEffectFit, PatternSpec,
    Sigma2Spec,
};
use seqcausal::oracle::run_identity_suite_perturbed;
use seqcausal::panel::{load_panel, PanelData};
use seqcausal::point_params::saturated_means;
use seqcausal::sim::{confidence_interval, run_replicates, CoverageReport, SimConfig};
use seqcausal::{Error, ErrorKind};

#[derive(Parser)]
#[command(
    name = "seqcausal",
    version,
    about = "Sequential causal inference via point-parametrized net effects"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate net effects of treatments from a panel under a pattern.
    Estimate(EstimateArgs),
    /// Estimate the sequential causal effect of one regime versus another.
    Sce(SceArgs),
    /// Run a Monte-Carlo coverage study from a simulation config.
    Simulate(SimulateArgs),
    /// Run the brute-force identity suite on a synthesized design.
    Validate(ValidateArgs),
    /// Evaluate the G-formula value of a regime against a means table.
    Gformula(GformulaArgs),
}

#[derive(Args)]
struct EstimateArgs {
    /// Panel CSV (header: unit_id, z1..zT, x{t}_{j}, y).
    #[arg(long)]
    panel: PathBuf,
    /// Pattern JSON declaring the net-effect classes.
    #[arg(long)]
    pattern: PathBuf,
    /// Which point effects to regress: full-history or markov-collapsed.
    #[arg(long, value_enum, default_value = "markov")]
    mode: CliMode,
    /// Outcome variance: a positive number, or `estimate` for the pooled
    /// within-cell variance of the saturated model.
    #[arg(long, default_value = "estimate")]
    sigma2: String,
    /// Output report path (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SceArgs {
    #[arg(long)]
    panel: PathBuf,
    #[arg(long)]
    pattern: PathBuf,
    /// Regime JSON for the treatment arm of the contrast.
    #[arg(long)]
    regime_a: PathBuf,
    /// Regime JSON for the reference arm of the contrast.
    #[arg(long)]
    regime_b: PathBuf,
    #[arg(long, value_enum, default_value = "markov")]
    mode: CliMode,
    #[arg(long, default_value = "estimate")]
    sigma2: String,
    /// Confidence level for the interval on the effect.
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation config JSON: a single scenario object or
    /// {"scenarios": [...]}.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for replicates (results are independent of this).
    #[arg(long)]
    jobs: Option<usize>,
    /// Replace every scenario's base seed.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Also write one CSV row per replicate to this path.
    #[arg(long)]
    replicates_csv: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    /// Simulation config JSON; replicate settings are ignored.
    #[arg(long)]
    config: PathBuf,
    /// Add this to one synthesized point effect before checking; nonzero
    /// values verify that the identity checks detect violations.
    #[arg(long, default_value_t = 0.0)]
    perturb_theta: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GformulaArgs {
    #[arg(long)]
    panel: PathBuf,
    /// Regime JSON to evaluate.
    #[arg(long)]
    regime: PathBuf,
    /// Optional means-table JSON; defaults to the panel's saturated cell
    /// means.
    #[arg(long)]
    means: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CliMode {
    Full,
    Markov,
}

impl From<CliMode> for Mode {
    fn from(m: CliMode) -> Mode {
        match m {
            CliMode::Full => Mode::Full,
            CliMode::Markov => Mode::Markov,
        }
    }
}

// --- logging -----------------------------------------------------------------

fn log_level() -> u8 {
    static LEVEL: OnceLock<u8> = OnceLock::new();
    *LEVEL.get_or_init(|| match std::env::var("SEQCAUSAL_LOG").as_deref() {
        Ok("debug") => 3,
        Ok("info") => 2,
        Ok("warn") => 1,
        _ => 0,
    })
}

macro_rules! info {
    ($($arg:tt)*) => {
        if log_level() >= 2 { eprintln!("[info] {}", format!($($arg)*)); }
    };
}

macro_rules! warn_log {
    ($($arg:tt)*) => {
        if log_level() >= 1 { eprintln!("[warn] {}", format!($($arg)*)); }
    };
}

// --- report types -------------------------------------------------------------

#[derive(Serialize)]
struct EstimateRow {
    stratum: String,
    theta_hat: f64,
    variance: f64,
    n_active: u64,
    n_control: u64,
    coefficients: Vec<f64>,
    fitted: f64,
}

#[derive(Serialize)]
struct FitSection {
    rss: f64,
    dof: usize,
    /// Chi-square upper-tail probability; absent for saturated patterns.
    #[serde(skip_serializing_if = "Option::is_none")]
    p_value: Option<f64>,
    testable: bool,
}

#[derive(Serialize)]
struct EstimateReport {
    manifest: RunManifest,
    mode: Mode,
    sigma2: f64,
    k: usize,
    n_units: u64,
    phi: Vec<f64>,
    covariance: Vec<Vec<f64>>,
    rows: Vec<EstimateRow>,
    fit: FitSection,
    positivity_exclusions: Vec<seqcausal::net_effects::Exclusion>,
    dropped_zero_rows: usize,
}

#[derive(Serialize)]
struct SceReport {
    manifest: RunManifest,
    mode: Mode,
    sigma2: f64,
    phi: Vec<f64>,
    covariance: Vec<Vec<f64>>,
    q_a: Vec<f64>,
    q_b: Vec<f64>,
    sce: f64,
    variance: f64,
    ci_level: f64,
    ci: (f64, f64),
    /// Direct G-formula contrast on the saturated panel means, when every
    /// regime path is observed.
    #[serde(skip_serializing_if = "Option::is_none")]
    gformula_crosscheck: Option<f64>,
}

#[derive(Serialize)]
struct SimulateReport {
    manifest: RunManifest,
    #[serde(flatten)]
    coverage: CoverageReport,
}

#[derive(Serialize)]
struct ValidateScenarioReport {
    scenario: usize,
    phi: Vec<f64>,
    report: seqcausal::oracle::IdentityReport,
}

#[derive(Serialize)]
struct ValidateReport {
    manifest: RunManifest,
    pass: bool,
    max_violation: f64,
    scenarios: Vec<ValidateScenarioReport>,
}

#[derive(Serialize)]
struct GformulaReport {
    manifest: RunManifest,
    value: f64,
    means_source: String,
}

// --- helpers ------------------------------------------------------------------

fn parse_sigma2(raw: &str) -> Result<Sigma2Spec, Error> {
    if raw == "estimate" {
        return Ok(Sigma2Spec::PooledWithinCell);
    }
    raw.parse::<f64>()
        .ok()
        .filter(|v| *v > 0.0 && v.is_finite())
        .map(Sigma2Spec::Declared)
        .ok_or_else(|| {
            Error::InvalidConfig(format!(
                "--sigma2 must be a positive number or `estimate`, got `{raw}`"
            ))
        })
}

fn load_panel_input(builder: &mut ManifestBuilder, path: &Path) -> Result<PanelData, Error> {
    let contents = builder.read_input(path)?;
    let panel = load_panel(BufReader::new(contents.as_bytes()))?;
    info!(
        "loaded panel {}: {} units, horizon {}, {} occupied cells",
        path.display(),
        panel.n_units(),
        panel.horizon(),
        panel.occupied_cells().len()
    );
    Ok(panel)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, body)?;
    Ok(())
}

fn fit_from_files(
    builder: &mut ManifestBuilder,
    panel_path: &Path,
    pattern_path: &Path,
    mode: Mode,
    sigma2: &str,
) -> Result<(PanelData, PatternSpec, NetEffectFit), Error> {
    let panel = load_panel_input(builder, panel_path)?;
    let pattern = PatternSpec::from_json(&builder.read_input(pattern_path)?)?;
    let sigma2 = parse_sigma2(sigma2)?;
    let fit = fit_net_effects(&panel, &pattern, mode, sigma2)?;
    for excl in &fit.excluded {
        warn_log!("skipping stratum {}: {}", excl.stratum, excl.reason);
    }
    if fit.estimate.dropped_zero_rows > 0 {
        warn_log!(
            "dropped {} rows with all-zero coefficient vectors",
            fit.estimate.dropped_zero_rows
        );
    }
    Ok((panel, pattern, fit))
}

fn estimate_rows(fit: &NetEffectFit) -> Vec<EstimateRow> {
    let mut rows = Vec::new();
    for block in &fit.blocks {
        for (est, row) in &block.rows {
            let fitted = row
                .c
                .iter()
                .zip(&fit.estimate.phi)
                .map(|(c, p)| c * p)
                .sum();
            rows.push(EstimateRow {
                stratum: row.stratum.key_string(),
                theta_hat: est.value,
                variance: est.variance,
                n_active: est.n_active,
                n_control: est.n_control,
                coefficients: row.c.clone(),
                fitted,
            });
        }
    }
    rows
}

fn fit_section(fit: &NetEffectFit) -> FitSection {
    match fitted_residual_test(&fit.estimate) {
        Ok(diag) => FitSection {
            rss: diag.rss,
            dof: diag.dof,
            p_value: Some(diag.p_value),
            testable: true,
        },
        Err(_) => FitSection {
            rss: fit.estimate.rss,
            dof: fit.estimate.dof,
            p_value: None,
            testable: false,
        },
    }
}

// --- commands ------------------------------------------------------------------

fn cmd_estimate(args: &EstimateArgs) -> Result<(), Error> {
    let mut builder = ManifestBuilder::new("estimate");
    let (panel, _pattern, fit) = fit_from_files(
        &mut builder,
        &args.panel,
        &args.pattern,
        args.mode.into(),
        &args.sigma2,
    )?;
    let report = EstimateReport {
        mode: fit.mode,
        sigma2: fit.sigma2,
        k: fit.estimate.k(),
        n_units: panel.n_units(),
        phi: fit.estimate.phi.clone(),
        covariance: fit.estimate.covariance.clone(),
        rows: estimate_rows(&fit),
        fit: fit_section(&fit),
        positivity_exclusions: fit.excluded.clone(),
        dropped_zero_rows: fit.estimate.dropped_zero_rows,
        manifest: builder.finish(),
    };
    write_json(&args.out, &report)
}

fn cmd_sce(args: &SceArgs) -> Result<(), Error> {
    let mut builder = ManifestBuilder::new("sce");
    let (panel, pattern, fit) = fit_from_files(
        &mut builder,
        &args.panel,
        &args.pattern,
        args.mode.into(),
        &args.sigma2,
    )?;
    let regime_a = Regime::from_json(&builder.read_input(&args.regime_a)?)?;
    let regime_b = Regime::from_json(&builder.read_input(&args.regime_b)?)?;
    regime_a.validate(panel.table())?;
    regime_b.validate(panel.table())?;
    let assign = assign_classes(&pattern, panel.table())?;
    let q_a = q_coefficients(panel.table(), &assign, &regime_a)?;
    let q_b = q_coefficients(panel.table(), &assign, &regime_b)?;
    let sce: SceEstimate = sce_from_net_effects(&fit.estimate, &q_a, &q_b)?;
    let ci = confidence_interval(sce.value, sce.variance, args.ci_level)?;
    let crosscheck = {
        let means = saturated_means(&panel);
        match sce_from_gformula(&means, panel.table(), &regime_a, &regime_b) {
            Ok(v) => Some(v),
            Err(e) => {
                warn_log!("g-formula crosscheck unavailable: {e}");
                None
            }
        }
    };
    let report = SceReport {
        mode: fit.mode,
        sigma2: fit.sigma2,
        phi: fit.estimate.phi.clone(),
        covariance: fit.estimate.covariance.clone(),
        q_a,
        q_b,
        sce: sce.value,
        variance: sce.variance,
        ci_level: args.ci_level,
        ci,
        gformula_crosscheck: crosscheck,
        manifest: builder.finish(),
    };
    write_json(&args.out, &report)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SimConfigFile {
    Multi { scenarios: Vec<SimConfig> },
    Single(Box<SimConfig>),
}

fn load_scenarios(
    builder: &mut ManifestBuilder,
    path: &Path,
    seed_override: Option<u64>,
) -> Result<Vec<SimConfig>, Error> {
    let contents = builder.read_input(path)?;
    let file: SimConfigFile = serde_json::from_str(&contents)?;
    let mut scenarios = match file {
        SimConfigFile::Multi { scenarios } => scenarios,
        SimConfigFile::Single(one) => vec![*one],
    };
    if let Some(seed) = seed_override {
        for s in &mut scenarios {
            s.base_seed = seed;
        }
    }
    Ok(scenarios)
}

fn coverage_csv(report: &CoverageReport) -> String {
    let mut out = String::from(
        "scenario,class,phi_true,mean_phi_hat,empirical_variance,mean_reported_variance,\
         coverage,replicates,failures,n_units,sigma,ci_level,base_seed\n",
    );
    for (idx, s) in report.scenarios.iter().enumerate() {
        for k in 0..s.phi_true.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                idx,
                k + 1,
                s.phi_true[k],
                s.mean_phi_hat[k],
                s.empirical_variance[k],
                s.mean_reported_variance[k],
                s.coverage[k],
                s.replicates,
                s.failures,
                s.n_units,
                s.sigma,
                s.ci_level,
                s.base_seed,
            ));
        }
    }
    out
}

fn replicates_csv(report: &CoverageReport) -> String {
    let mut out = String::from(
        "scenario,replicate,class,phi_hat,reported_variance,ci_lo,ci_hi,covered,error\n",
    );
    for (idx, s) in report.scenarios.iter().enumerate() {
        let Some(records) = &s.per_replicate else {
            continue;
        };
        for rec in records {
            if let Some(err) = &rec.error {
                out.push_str(&format!(
                    "{},{},,,,,,,\"{}\"\n",
                    idx,
                    rec.replicate,
                    err.replace('"', "'")
                ));
                continue;
            }
            for k in 0..rec.phi_hat.len() {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},\n",
                    idx,
                    rec.replicate,
                    k + 1,
                    rec.phi_hat[k],
                    rec.reported_variance[k],
                    rec.ci[k].0,
                    rec.ci[k].1,
                    rec.covered[k],
                ));
            }
        }
    }
    out
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), Error> {
    let mut builder = ManifestBuilder::new("simulate");
    builder.seed_override(args.seed_override);
    let scenarios = load_scenarios(&mut builder, &args.config, args.seed_override)?;
    let keep = args.replicates_csv.is_some();
    let mut reports = Vec::with_capacity(scenarios.len());
    for (idx, config) in scenarios.iter().enumerate() {
        info!(
            "scenario {idx}: phi={:?}, {} replicates, n={}",
            config.phi, config.replicates, config.design.n_units
        );
        reports.push(run_replicates(config, keep, args.jobs)?);
    }
    let mut coverage = CoverageReport { scenarios: reports };
    if let Some(path) = &args.replicates_csv {
        std::fs::write(path, replicates_csv(&coverage))?;
    }
    // per-replicate records stay out of the JSON report; the CSV carries them
    for s in &mut coverage.scenarios {
        s.per_replicate = None;
    }
    let csv_path = args.out.with_extension("csv");
    std::fs::write(&csv_path, coverage_csv(&coverage))?;
    let report = SimulateReport {
        coverage,
        manifest: builder.finish(),
    };
    write_json(&args.out, &report)
}

fn cmd_validate(args: &ValidateArgs) -> Result<bool, Error> {
    let mut builder = ManifestBuilder::new("validate");
    let scenarios = load_scenarios(&mut builder, &args.config, None)?;
    let mut out = Vec::with_capacity(scenarios.len());
    for (idx, config) in scenarios.iter().enumerate() {
        let skeleton = seqcausal::sim::synthesize_design(
            &config.design,
            seqcausal::sim::replicate_seed(config.base_seed, u64::MAX),
        )?;
        let report = run_identity_suite_perturbed(
            skeleton.table(),
            &config.pattern,
            &config.phi,
            &config.gamma,
            config.grand_mean,
            args.perturb_theta,
        )?;
        for check in &report.checks {
            info!(
                "scenario {idx} {}: max violation {:.3e} (tol {:.1e}) {}",
                check.name,
                check.max_abs_violation,
                check.tol,
                if check.pass { "ok" } else { "FAILED" }
            );
        }
        out.push(ValidateScenarioReport {
            scenario: idx,
            phi: config.phi.clone(),
            report,
        });
    }
    let pass = out.iter().all(|s| s.report.pass);
    let max_violation = out
        .iter()
        .map(|s| s.report.max_violation)
        .fold(0.0, f64::max);
    let report = ValidateReport {
        pass,
        max_violation,
        scenarios: out,
        manifest: builder.finish(),
    };
    write_json(&args.out, &report)?;
    Ok(pass)
}

fn cmd_gformula(args: &GformulaArgs) -> Result<(), Error> {
    let mut builder = ManifestBuilder::new("gformula");
    let panel = load_panel_input(&mut builder, &args.panel)?;
    let regime = Regime::from_json(&builder.read_input(&args.regime)?)?;
    let (means, source) = match &args.means {
        Some(path) => {
            let means = serde_json::from_str(&builder.read_input(path)?)?;
            (means, path.display().to_string())
        }
        None => (saturated_means(&panel), "panel cell means".to_string()),
    };
    let value = evaluate_gformula(&means, panel.table(), &regime)?;
    let report = GformulaReport {
        value,
        means_source: source,
        manifest: builder.finish(),
    };
    write_json(&args.out, &report)
}

fn run(cli: Cli) -> Result<bool, Error> {
    match &cli.command {
        Command::Estimate(args) => cmd_estimate(args).map(|_| true),
        Command::Sce(args) => cmd_sce(args).map(|_| true),
        Command::Simulate(args) => cmd_simulate(args).map(|_| true),
        Command::Validate(args) => cmd_validate(args),
        Command::Gformula(args) => cmd_gformula(args).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("identity checks failed; see the report for the worst violations");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e.kind() {
                ErrorKind::Input => ExitCode::from(2),
                ErrorKind::Estimation => ExitCode::from(3),
            }
        }
    }
}
