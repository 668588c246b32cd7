//! The `msdmf` command line: simulate datasets, fit models, forecast, evaluate and summarize.

pub mod io;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use msdmf_core::forecast::{rolling_eval, ForecastConfig, ForecastMethod};
use msdmf_core::{
    evaluate_parts, fit, Dims, ErrorDist, FitConfig, InitStrategy, ModelVariant, SimConfig, SimOutput,
};

use crate::io::Format;

#[derive(Debug, Parser)]
#[command(name = "msdmf", version, about = "Markov-switching dynamic matrix factor models")]
pub struct Cli {
    /// Worker threads for parallel sections (0 uses all cores).
    #[arg(long, global = true, env = "MSDMF_THREADS", default_value_t = 0)]
    pub threads: usize,
    /// Print failures as a JSON object on stderr.
    #[arg(long, global = true)]
    pub json_errors: bool,
    /// Format of written datasets and factor files.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset together with its true parameters, factors and regimes.
    Simulate(SimulateArgs),
    /// Fit a model by EM and write parameters, regimes, factors and diagnostics.
    Fit(FitArgs),
    /// Rolling one-step forecast comparison.
    Forecast(ForecastArgs),
    /// Score a fit against the simulation that produced its data.
    Eval(EvalArgs),
    /// Average several evaluation files.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 10×10 observations, 2×2 factors, two regimes staying with probability 0.95.
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    FullSwitching,
    StateOnly,
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ErrorArg {
    Gaussian,
    Chisq1,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Built-in design, used unless --config is given.
    #[arg(long, value_enum, default_value_t = Preset::Reference)]
    pub preset: Preset,
    /// Simulation config JSON; overrides --preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Series length [default: 200, or the config's value].
    #[arg(long)]
    pub n: Option<usize>,
    /// Random seed [default: 0, or the config's value].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the model variant.
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Override the error distribution.
    #[arg(long, value_enum)]
    pub errors: Option<ErrorArg>,
    /// Output prefix: writes PREFIX.csv, PREFIX.truth.json, PREFIX.factors.csv, PREFIX.states.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DimsArgs {
    /// Row factor count.
    #[arg(long)]
    pub k1: usize,
    /// Column factor count.
    #[arg(long)]
    pub k2: usize,
    /// Number of regimes.
    #[arg(long)]
    pub regimes: usize,
}

#[derive(Debug, Args)]
pub struct EmArgs {
    /// Convergence threshold on the squared parameter change.
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    /// Maximum EM iterations.
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    /// Seed for automatic initialization.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Target number of initialization segments (default chosen from the series length).
    #[arg(long)]
    pub segments: Option<usize>,
    /// Keep iterating when the log-likelihood drops.
    #[arg(long)]
    pub no_loglik_guard: bool,
}

impl EmArgs {
    fn config(&self) -> FitConfig {
        FitConfig {
            eps: self.eps,
            max_iter: self.max_iter,
            seed: self.seed,
            segments: self.segments,
            track_loglik: !self.no_loglik_guard,
            ..FitConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Dataset file (.csv or .json).
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub dims: DimsArgs,
    #[command(flatten)]
    pub em: EmArgs,
    /// Starting parameters JSON instead of automatic initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// One-based regime whose loadings fix the rotation, as placed in the output.
    #[arg(long, default_value_t = 1)]
    pub anchor: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    /// Dataset file (.csv or .json).
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub dims: DimsArgs,
    #[command(flatten)]
    pub em: EmArgs,
    /// Training length before every origin.
    #[arg(long)]
    pub window: usize,
    /// First one-based time to forecast (default window + 1).
    #[arg(long)]
    pub from: Option<usize>,
    /// Last one-based time to forecast (default n).
    #[arg(long)]
    pub to: Option<usize>,
    /// Comma-separated methods to compare.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "msdmf,mfm-var,ar1")]
    pub methods: Vec<MethodArg>,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Msdmf,
    MfmVar,
    Ar1,
}

impl From<MethodArg> for ForecastMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Msdmf => ForecastMethod::Msdmf,
            MethodArg::MfmVar => ForecastMethod::MfmVar,
            MethodArg::Ar1 => ForecastMethod::Ar1,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// Prefix written by `simulate`.
    #[arg(long)]
    pub truth: PathBuf,
    /// Output CSV (one header and one data row).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation CSVs written by `eval`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output CSV; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let json_errors = args.iter().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            if json_errors {
                eprintln!("{}", serde_json::json!({ "error": { "kind": "usage", "message": e.to_string() } }));
            } else {
                let _ = e.print();
            }
            return 2;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            if cli.json_errors {
                let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
                eprintln!("{}", serde_json::json!({ "error": { "kind": "runtime", "message": format!("{e:#}"), "causes": chain } }));
            } else {
                eprintln!("error: {e:#}");
            }
            1
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build().context("cannot start worker threads")?;
    pool.install(|| match &cli.command {
        Command::Simulate(a) => simulate_cmd(a, cli.format),
        Command::Fit(a) => fit_cmd(a, cli.format),
        Command::Forecast(a) => forecast_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Report(a) => report_cmd(a),
    })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// First existing file among `PREFIX.csv` / `PREFIX.json` style candidates.
fn find_tensor(prefix: &Path, stem_suffix: &str) -> Result<PathBuf> {
    for ext in ["csv", "json"] {
        let p = with_suffix(prefix, &format!("{stem_suffix}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    bail!("no {}{stem_suffix}.csv or .json found", prefix.display())
}

fn simulate_cmd(a: &SimulateArgs, format: Format) -> Result<()> {
    let mut config = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            serde_json::from_str::<SimConfig>(&text).with_context(|| format!("{} is not a valid simulation config", path.display()))?
        }
        None => match a.preset {
            Preset::Reference => SimConfig::reference(200, 0),
        },
    };
    if let Some(n) = a.n {
        config.n = n;
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(v) = a.variant {
        config.variant = match v {
            VariantArg::FullSwitching => ModelVariant::FullSwitching,
            VariantArg::StateOnly => ModelVariant::StateOnly,
            VariantArg::Static => ModelVariant::Static,
        };
    }
    if let Some(e) = a.errors {
        config.error_dist = match e {
            ErrorArg::Gaussian => ErrorDist::Gaussian,
            ErrorArg::Chisq1 => ErrorDist::Chisq1,
        };
    }
    let sim = msdmf_core::simulate(&config)?;
    let ext = format.extension();
    io::save_dataset(&with_suffix(&a.out, &format!(".{ext}")), &sim.series)?;
    io::save_params(&with_suffix(&a.out, ".truth.json"), &sim.truth)?;
    io::save_tensor(&with_suffix(&a.out, &format!(".factors.{ext}")), &sim.factors)?;
    io::write(&with_suffix(&a.out, ".states.csv"), &io::render_states(&sim.states))?;
    Ok(())
}

fn fit_cmd(a: &FitArgs, format: Format) -> Result<()> {
    let series = io::load_dataset(&a.data)?;
    let dims = Dims::new(series.rows(), series.cols(), a.dims.k1, a.dims.k2, a.dims.regimes);
    if a.anchor == 0 || a.anchor > dims.regimes {
        bail!("--anchor must be between 1 and {}", dims.regimes);
    }
    let mut config = a.em.config();
    config.anchor = a.anchor - 1;
    if let Some(path) = &a.init {
        config.init = InitStrategy::Provided { params: io::load_params(path)? };
    }
    let res = fit(&series, dims, &config)?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    io::save_params(&a.out.join("params.json"), &res.theta)?;
    io::save_params(&a.out.join("params_raw.json"), &res.theta_raw)?;
    io::write(&a.out.join("states.csv"), &io::render_states(&res.states))?;
    io::save_tensor(&a.out.join(format!("factors.{}", format.extension())), &res.factors)?;

    let mut header = vec!["t".to_string()];
    header.extend((1..=dims.regimes).map(|k| format!("w{k}")));
    let rows: Vec<Vec<String>> = res
        .weights
        .row_iter()
        .enumerate()
        .map(|(t, w)| std::iter::once((t + 1).to_string()).chain(w.iter().map(f64::to_string)).collect())
        .collect();
    io::write(&a.out.join("weights.csv"), &io::render_table(&header, &rows)?)?;

    let rows: Vec<Vec<String>> =
        res.loglik_trace.iter().enumerate().map(|(i, ll)| vec![(i + 1).to_string(), ll.to_string()]).collect();
    io::write(&a.out.join("loglik.csv"), &io::render_table(&["iteration".into(), "loglik".into()], &rows)?)?;

    let summary = serde_json::json!({
        "iterations": res.iterations,
        "converged": res.converged,
        "stop": res.stop,
        "loglik": res.loglik,
    });
    io::write(&a.out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!(
        "{} after {} iterations, log-likelihood {:.6}",
        if res.converged { "converged" } else { "stopped" },
        res.iterations,
        res.loglik
    );
    Ok(())
}

fn forecast_cmd(a: &ForecastArgs) -> Result<()> {
    let series = io::load_dataset(&a.data)?;
    let n = series.len();
    let from = a.from.unwrap_or(a.window + 1);
    let to = a.to.unwrap_or(n);
    if from == 0 || from > to || to > n {
        bail!("forecast times {from}..={to} must lie within 1..={n}");
    }
    let mut methods: Vec<ForecastMethod> = a.methods.iter().map(|&m| m.into()).collect();
    methods.dedup();
    let config = ForecastConfig {
        window: a.window,
        origins: (from - 1..to).collect(),
        methods,
        dims: Dims::new(series.rows(), series.cols(), a.dims.k1, a.dims.k2, a.dims.regimes),
        fit: a.em.config(),
    };
    let report = rolling_eval(&series, &config)?;
    let header: Vec<String> =
        ["origin", "method", "mae", "mape", "converged", "error"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                (r.origin + 1).to_string(),
                r.method.name().to_string(),
                r.mae.to_string(),
                r.mape.to_string(),
                r.converged.to_string(),
                r.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    io::write(&a.out, &io::render_table(&header, &rows)?)?;
    for &m in &config.methods {
        if let Some(v) = report.mean_mae(m) {
            println!("{}: mean MAE {v:.6}", m.name());
        }
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let truth = SimOutput {
        series: io::load_dataset(&find_tensor(&a.truth, "")?)?,
        factors: io::load_tensor(&find_tensor(&a.truth, ".factors")?)?,
        states: io::load_states(&with_suffix(&a.truth, ".states.csv"))?,
        truth: io::load_params(&with_suffix(&a.truth, ".truth.json"))?,
    };
    let theta = io::load_params(&a.fit.join("params.json"))?;
    let factors = io::load_tensor(&find_tensor(&a.fit.join("factors"), "")?)?;
    let states = io::load_states(&a.fit.join("states.csv"))?;
    let report = evaluate_parts(&theta, &factors, &states, &truth)?;
    let (header, values): (Vec<String>, Vec<String>) =
        report.columns().into_iter().map(|(k, v)| (k, v.to_string())).unzip();
    io::write(&a.out, &io::render_table(&header, &[values])?)
}

/// Column means over rows of all inputs, skipping NaN entries.
pub fn summarize(tables: &[(Vec<String>, Vec<Vec<f64>>)]) -> Result<(Vec<String>, Vec<f64>, usize)> {
    let Some((header, _)) = tables.first() else { bail!("no evaluation files given") };
    let mut sums = vec![0.0; header.len()];
    let mut counts = vec![0usize; header.len()];
    let mut replicates = 0;
    for (h, rows) in tables {
        if h != header {
            bail!("evaluation files have different columns");
        }
        for row in rows {
            replicates += 1;
            for (k, v) in row.iter().enumerate() {
                if !v.is_nan() {
                    sums[k] += v;
                    counts[k] += 1;
                }
            }
        }
    }
    let means = sums.iter().zip(&counts).map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 }).collect();
    Ok((header.clone(), means, replicates))
}

fn report_cmd(a: &ReportArgs) -> Result<()> {
    let tables = a.inputs.iter().map(|p| io::load_table(p)).collect::<Result<Vec<_>>>()?;
    let (header, means, replicates) = summarize(&tables)?;
    let mut full_header = vec!["replicates".to_string()];
    full_header.extend(header);
    let mut row = vec![replicates.to_string()];
    row.extend(means.iter().map(f64::to_string));
    let text = io::render_table(&full_header, &[row])?;
    match &a.out {
        Some(path) => io::write(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn summarize_skips_missing_values() {
        let header = vec!["a".to_string(), "b".to_string()];
        let tables = vec![(header.clone(), vec![vec![1.0, f64::NAN]]), (header.clone(), vec![vec![3.0, 4.0]])];
        let (_, means, reps) = summarize(&tables).unwrap();
        assert_eq!(reps, 2);
        assert_eq!(means, vec![2.0, 4.0]);
        assert!(summarize(&[(header, vec![]), (vec!["c".into()], vec![])]).is_err());
    }
}
