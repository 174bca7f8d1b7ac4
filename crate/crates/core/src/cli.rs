//! Command-line driver.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::effects::{FitReport, Structure};
use crate::error::{Error, ErrorKind, Result};
use crate::estimand::bootstrap_ci;
use crate::gest::{fit_gest, GestFlavor};
use crate::iv::{check_identifiable, fit_iv, PartialOut, SigmaSpec};
use crate::mc::{run_design, write_outputs, Estimator, McOptions};
use crate::msm::{fit_msm_all, fit_msm_decay};
use crate::panel::{load_panel, long_to_wide, write_panel, ColumnSpec, PanelData};
use crate::simgen::{scenario_preset, simulate_panel, ScenarioConfig};
use crate::weights::{
    balance_table, fit_weights_balanced, fit_weights_gaussian, flagged_covariates, weight_diagnostics, WeightSet,
};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("LONGICAUSAL_BUILD_HASH"), ")");

#[derive(Debug, Parser)]
#[command(name = "longicausal", version = VERSION, about = "Causal effects of continuous time-varying exposures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a panel from a named design.
    Simulate(SimulateArgs),
    /// Fit one estimator to a panel.
    Fit(FitArgs),
    /// Bootstrap regime contrasts from a saved fit.
    Contrast(ContrastArgs),
    /// Weight diagnostics and covariate balance.
    Diagnose(DiagnoseArgs),
    /// Monte Carlo replication of a design.
    Mc(McArgs),
    /// Pivot a long CSV into the wide panel layout.
    LongToWide(LongToWideArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub preset: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the number of individuals.
    #[arg(long)]
    pub n: Option<usize>,
    /// Scenario override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Iptw,
    Gest,
    Iv,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Balanced,
    Gaussian,
}

#[derive(Debug, Args, Serialize)]
pub struct PanelArgs {
    #[arg(long)]
    pub panel: PathBuf,
    /// JSON column mapping; the standard layout is inferred when absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Baseline or history columns to leave out of every adjustment set.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: PanelArgs,
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long, default_value = "efficient")]
    pub flavor: String,
    #[arg(long, value_enum, default_value = "balanced")]
    pub weights: WeightKind,
    #[arg(long, default_value = "saturated")]
    pub structure: String,
    /// Percentile pair for weight truncation, e.g. `0.1,99.9`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub truncate: Option<Vec<f64>>,
    #[arg(long, default_value = "identity")]
    pub sigma: String,
    /// `baseline`, `baseline+tv` or `none`.
    #[arg(long = "partial-out", default_value = "baseline")]
    pub partial_out: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ContrastArgs {
    /// A `fit.json` written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// Outcome times; all available when absent.
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    #[arg(long = "a-high", default_value_t = 1.0)]
    pub a_high: f64,
    #[arg(long = "a-low", default_value_t = 0.0)]
    pub a_low: f64,
    #[arg(long, default_value_t = 1000)]
    pub draws: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub input: PanelArgs,
    #[arg(long, value_enum, default_value = "balanced")]
    pub weights: WeightKind,
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub truncate: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct McArgs {
    #[arg(long)]
    pub design: String,
    /// Comma-separated: iptw, iptw-gaussian, gest-sequential, gest-basic, gest-efficient, iv.
    #[arg(long, value_delimiter = ',', default_value = "iptw,gest-basic,gest-efficient,iv")]
    pub estimators: Vec<String>,
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, default_value = "identity")]
    pub sigma: String,
    /// Skip the baseline partial-out before IV fits.
    #[arg(long = "no-partial-out")]
    pub no_partial_out: bool,
    /// Do not add balance-flagged covariates to IPTW outcome models.
    #[arg(long = "no-flag-adjust")]
    pub no_flag_adjust: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct LongToWideArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub id: String,
    #[arg(long)]
    pub time: String,
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    #[arg(long = "static", value_delimiter = ',')]
    pub static_cols: Vec<String>,
}

/// Write through a temporary sibling file and rename into place.
pub fn write_atomic<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::InvalidConfig(format!("bad output path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        f(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
        Ok(())
    })();
    match result {
        Ok(()) => Ok(std::fs::rename(&tmp, path)?),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

fn resolve_scenario(preset: &str, n: Option<usize>, overrides: &[String]) -> Result<ScenarioConfig> {
    let mut cfg = scenario_preset(preset)?;
    if let Some(n) = n {
        cfg.n = n;
    }
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override `{kv}` is not key=value")))?;
        cfg.apply_override(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Standard layout guessed from the header: `A1..AK`, `Y1..YK`, optional
/// `t*`, `V*`, `G`; everything else besides `id` is a baseline covariate.
pub fn infer_spec(path: &Path) -> Result<ColumnSpec> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let indexed = |prefix: &str, h: &str| h.strip_prefix(prefix).is_some_and(|r| !r.is_empty() && r.chars().all(|c| c.is_ascii_digit()));
    let k = headers.iter().filter(|h| indexed("A", h)).count();
    if k == 0 {
        return Err(Error::MissingColumn("A1".into()));
    }
    if !headers.iter().any(|h| h == "id") {
        return Err(Error::MissingColumn("id".into()));
    }
    let has = |name: &str| headers.iter().any(|h| h == name);
    let l0: Vec<String> = headers
        .iter()
        .filter(|h| *h != "id" && *h != "G" && !["A", "Y", "t", "V"].iter().any(|p| indexed(p, h)))
        .cloned()
        .collect();
    let mut spec = ColumnSpec::standard(k, &l0, has("V1"), has("G"));
    if !has("t1") {
        spec.t = None;
    }
    Ok(spec)
}

fn load(input: &PanelArgs) -> Result<(PanelData, HashSet<String>)> {
    let spec = match &input.spec {
        Some(p) => ColumnSpec::from_json_file(p)?,
        None => infer_spec(&input.panel)?,
    };
    let panel = load_panel(&input.panel, &spec)?;
    Ok((panel, input.exclude.iter().cloned().collect()))
}

fn weights_for(panel: &PanelData, kind: WeightKind, truncate: &Option<Vec<f64>>, exclude: &HashSet<String>) -> Result<WeightSet> {
    let (_, ws) = match kind {
        WeightKind::Balanced => fit_weights_balanced(panel, exclude)?,
        WeightKind::Gaussian => fit_weights_gaussian(panel, exclude)?,
    };
    match truncate.as_deref() {
        Some([lo, hi]) => ws.truncated(*lo, *hi),
        _ => Ok(ws),
    }
}

fn write_coefficients(path: &Path, fit: &FitReport) -> Result<()> {
    let se = fit.se_sandwich();
    let se_naive = fit.se_naive();
    write_atomic(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["parameter", "estimate", "se_sandwich", "se_naive"])?;
        for (i, name) in fit.names.iter().enumerate() {
            let naive = se_naive.as_ref().map(|s| s[i].to_string()).unwrap_or_default();
            out.write_record([name.clone(), fit.coef[i].to_string(), se[i].to_string(), naive])?;
        }
        out.flush()?;
        Ok(())
    })
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let cfg = resolve_scenario(&args.preset, args.n, &args.overrides)?;
    let panel = simulate_panel(&cfg, args.seed)?;
    write_atomic(&args.out, |w| {
        let mut out = csv::Writer::from_writer(w);
        write_panel(&panel, &mut out)?;
        out.flush()?;
        Ok(())
    })?;
    let config_path = args.out.with_extension("config.json");
    write_json(&config_path, &serde_json::json!({ "command": "simulate", "args": args, "scenario": cfg }))
}

pub fn fit_from_args(args: &FitArgs, panel: &PanelData, exclude: &HashSet<String>) -> Result<(FitReport, Option<crate::iv::IvFit>)> {
    let structure: Structure = args.structure.parse()?;
    match args.method {
        Method::Iptw => {
            let ws = weights_for(panel, args.weights, &args.truncate, exclude)?;
            let fit = match structure {
                Structure::Saturated => {
                    let cells = balance_table(panel, &ws, exclude)?;
                    let extra: Vec<Vec<String>> = (1..=panel.k()).map(|k| flagged_covariates(&cells, k)).collect();
                    fit_msm_all(panel, &ws, Some(&extra))?
                }
                Structure::Decay => fit_msm_decay(panel, &ws, panel.k())?,
            };
            Ok((fit, None))
        }
        Method::Gest => {
            let flavor: GestFlavor = args.flavor.parse()?;
            Ok((fit_gest(panel, flavor, structure, exclude)?, None))
        }
        Method::Iv => {
            check_identifiable(panel.k(), structure)?;
            let sigma: SigmaSpec = args.sigma.parse()?;
            let partial = match args.partial_out.as_str() {
                "none" => None,
                other => Some(other.parse::<PartialOut>()?),
            };
            let iv = fit_iv(panel, sigma, partial, exclude, args.seed)?;
            Ok((iv.to_report(), Some(iv)))
        }
    }
}

fn run_fit(args: &FitArgs) -> Result<()> {
    let (panel, exclude) = load(&args.input)?;
    let (fit, iv) = fit_from_args(args, &panel, &exclude)?;
    std::fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("fit.json"), &fit)?;
    if let Some(iv) = &iv {
        write_json(&args.out.join("iv.json"), iv)?;
    }
    write_coefficients(&args.out.join("coefficients.csv"), &fit)?;
    write_json(&args.out.join("config.json"), &serde_json::json!({ "command": "fit", "args": args }))
}

fn run_contrast(args: &ContrastArgs) -> Result<()> {
    let fit: FitReport = serde_json::from_str(&std::fs::read_to_string(&args.fit)?)?;
    let ks: Vec<usize> = if args.k.is_empty() {
        let kmax = match fit.structure {
            Structure::Saturated => fit.index.iter().map(|p| p.0).max().unwrap_or(0),
            Structure::Decay => fit.times.len(),
        };
        (1..=kmax).collect()
    } else {
        args.k.clone()
    };
    let rows = ks
        .iter()
        .map(|&k| bootstrap_ci(&fit, k, args.a_high, args.a_low, args.draws, args.level, args.seed))
        .collect::<Result<Vec<_>>>()?;
    write_atomic(&args.out, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["method", "k", "a_high", "a_low", "delta", "ci_lo", "ci_hi", "draw_mean", "draw_sd", "level", "n_draws", "seed"])?;
        for r in &rows {
            out.write_record([
                fit.estimator.clone(),
                r.k.to_string(),
                r.a_high.to_string(),
                r.a_low.to_string(),
                r.delta.to_string(),
                r.ci_lo.to_string(),
                r.ci_hi.to_string(),
                r.draw_mean.to_string(),
                r.draw_sd.to_string(),
                r.level.to_string(),
                r.n_draws.to_string(),
                r.seed.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    })?;
    write_json(&args.out.with_extension("config.json"), &serde_json::json!({ "command": "contrast", "args": args }))
}

fn run_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let (panel, exclude) = load(&args.input)?;
    let ws = weights_for(&panel, args.weights, &args.truncate, &exclude)?;
    let diag = weight_diagnostics(&ws);
    let cells = balance_table(&panel, &ws, &exclude)?;
    std::fs::create_dir_all(&args.out)?;
    write_atomic(&args.out.join("weights.csv"), |w| {
        let mut out = csv::Writer::from_writer(w);
        for d in &diag {
            out.serialize(d)?;
        }
        out.flush()?;
        Ok(())
    })?;
    write_atomic(&args.out.join("balance.csv"), |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["time", "column", "abs_pearson", "abs_spearman", "flagged"])?;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
        for c in &cells {
            out.write_record([c.time.to_string(), c.column.clone(), cell(c.pearson), cell(c.spearman), c.flagged.to_string()])?;
        }
        out.flush()?;
        Ok(())
    })?;
    let fallback = ws.fallback;
    write_json(
        &args.out.join("config.json"),
        &serde_json::json!({ "command": "diagnose", "args": args, "balance_fallback": fallback }),
    )
}

fn run_mc(args: &McArgs) -> Result<()> {
    let cfg = resolve_scenario(&args.design, args.n, &args.overrides)?;
    let estimators = args.estimators.iter().map(|e| e.parse()).collect::<Result<Vec<Estimator>>>()?;
    let opts = McOptions {
        iv_sigma: args.sigma.parse()?,
        iv_partial_out: !args.no_partial_out,
        iptw_adjust_flagged: !args.no_flag_adjust,
        ..McOptions::default()
    };
    let mc = run_design(&args.design, &cfg, &estimators, args.reps, args.seed, &opts)?;
    write_outputs(&mc, &args.out)?;
    write_json(
        &args.out.join("config.json"),
        &serde_json::json!({ "command": "mc", "args": args, "scenario": cfg, "options": opts }),
    )
}

fn run_long_to_wide(args: &LongToWideArgs) -> Result<()> {
    let n = long_to_wide(&args.input, &args.output, &args.id, &args.time, &args.values, &args.static_cols)?;
    log::info!("wrote {n} individuals to {}", args.output.display());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Fit(a) => run_fit(a),
        Command::Contrast(a) => run_contrast(a),
        Command::Diagnose(a) => run_diagnose(a),
        Command::Mc(a) => run_mc(a),
        Command::LongToWide(a) => run_long_to_wide(a),
    }
}

pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

/// Parse arguments, run, and map the outcome onto a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(e.kind())
        }
    }
}
