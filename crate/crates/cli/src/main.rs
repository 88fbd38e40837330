mod output;

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use gapflow_core::approx::{approx_invert, ApproxOptions, QuantileTable, SampledLaw};
use gapflow_core::chain::{build_chain, law_at, ForwardOptions, DEFAULT_FORWARD_TOL, RATE_CONVENTION};
use gapflow_core::finance::{calibrate_calls, CallCurve};
use gapflow_core::invert::{invert_discrete, InitialGuess, InvertOptions};
use gapflow_core::martingale::{classify_true, TailDeclarations, TailMoment};
use gapflow_core::measure::{validate_measure, RawLaw, RawMeasure, SpeedMeasure, TargetLaw};
use gapflow_core::simulate::{simulate_jump, simulate_timechange, TimeChangeOptions};
use gapflow_core::GapError;

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (rate convention 0.5: up/down rates 1/(2 b Δ))");

const EXIT_INVALID: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "gapflow", version = VERSION, about = "Gap diffusions from speed measures")]
struct Cli {
    /// Omit the run metadata block (timestamp, timing, thread count).
    #[arg(long, global = true)]
    no_meta: bool,
    /// Write the JSON result here instead of stdout.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// Log filter for stderr (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Law of X_t for an atomic speed measure.
    Forward {
        #[arg(long)]
        measure: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        x0: f64,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        #[arg(long, default_value_t = DEFAULT_FORWARD_TOL)]
        tol: f64,
    },
    /// Speed measure whose diffusion has the target law at time 1.
    Invert {
        #[arg(long)]
        target: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        x0: f64,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
        #[arg(long, value_enum, default_value_t = Guess::LocalTime)]
        initial_guess: Guess,
    },
    /// Discretize a quantile table and invert the result.
    Approx {
        /// CSV with columns u,quantile.
        #[arg(long)]
        law: PathBuf,
        /// Start point; also the declared mean of the law.
        #[arg(long, allow_negative_numbers = true)]
        x0: f64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        /// Declared variance; defaults to the variance of the table.
        #[arg(long)]
        variance: Option<f64>,
        /// Estimate E A_1 with this many time-change paths.
        #[arg(long)]
        ea1_paths: Option<usize>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Monte Carlo samples of X_t.
    Simulate {
        #[arg(long)]
        measure: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        x0: f64,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        #[arg(long, value_enum, default_value_t = EngineArg::Jump)]
        engine: EngineArg,
        #[arg(long, default_value_t = 100_000)]
        paths: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Euler step of the time-change engine.
        #[arg(long)]
        step: Option<f64>,
        /// Local-time band half-width of the time-change engine.
        #[arg(long)]
        bandwidth: Option<f64>,
        /// Include every sample in the output.
        #[arg(long)]
        dump_samples: bool,
    },
    /// Local-martingale and martingale verdict.
    Classify {
        #[arg(long)]
        measure: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        x0: f64,
        #[arg(long)]
        left_tail: Option<TailArg>,
        #[arg(long)]
        right_tail: Option<TailArg>,
    },
    /// Calibrate to call prices at one maturity.
    CalibrateCalls {
        /// CSV with columns strike,price.
        #[arg(long)]
        curve: PathBuf,
        #[arg(long = "T", visible_alias = "maturity")]
        maturity: f64,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Guess {
    LocalTime,
    GapWeighted,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EngineArg {
    Jump,
    Timechange,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TailArg {
    Finite,
    Infinite,
}

impl From<TailArg> for TailMoment {
    fn from(t: TailArg) -> Self {
        match t {
            TailArg::Finite => TailMoment::Finite,
            TailArg::Infinite => TailMoment::Infinite,
        }
    }
}

/// Failure of a command together with its exit status.
enum Failure {
    Gap(GapError),
    Io { path: PathBuf, message: String },
}

impl From<GapError> for Failure {
    fn from(e: GapError) -> Self {
        Failure::Gap(e)
    }
}

impl Failure {
    fn code(&self) -> &'static str {
        match self {
            Failure::Gap(e) => e.code(),
            Failure::Io { .. } => "E_IO",
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Gap(e) => e.to_string(),
            Failure::Io { path, message } => format!("{}: {message}", path.display()),
        }
    }

    fn exit(&self) -> u8 {
        match self {
            Failure::Gap(GapError::NotConverged { .. }) => EXIT_NOT_CONVERGED,
            _ => EXIT_INVALID,
        }
    }
}

/// A command's JSON payload and whether it met its own success criterion.
struct Outcome {
    result: serde_json::Value,
    converged: bool,
}

impl Outcome {
    fn ok<T: Serialize>(value: &T) -> Result<Self, Failure> {
        Ok(Outcome { result: to_value(value)?, converged: true })
    }
}

fn to_value<T: Serialize>(value: &T) -> Result<serde_json::Value, Failure> {
    serde_json::to_value(value).map_err(|e| Failure::Gap(GapError::Parse(e.to_string())))
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::Io { path: path.to_path_buf(), message: e.to_string() })
}

fn read_measure(path: &Path) -> Result<SpeedMeasure, Failure> {
    let raw: RawMeasure =
        serde_json::from_reader(open(path)?).map_err(|e| GapError::Parse(format!("{}: {e}", path.display())))?;
    Ok(validate_measure(raw)?)
}

fn read_law(path: &Path) -> Result<TargetLaw, Failure> {
    let raw: RawLaw =
        serde_json::from_reader(open(path)?).map_err(|e| GapError::Parse(format!("{}: {e}", path.display())))?;
    Ok(TargetLaw::new(raw.points)?)
}

fn run(command: &Command) -> Result<Outcome, Failure> {
    match command {
        Command::Forward { measure, x0, t, tol } => {
            let nu = read_measure(measure)?;
            let law = law_at(&build_chain(&nu, *x0)?, *t, &ForwardOptions::with_tol(*tol))?;
            Outcome::ok(&law)
        }
        Command::Invert { target, x0, tol, max_iter, initial_guess } => {
            let target = read_law(target)?;
            let opts = InvertOptions {
                max_iter: *max_iter,
                initial_guess: match initial_guess {
                    Guess::LocalTime => InitialGuess::LocalTime,
                    Guess::GapWeighted => InitialGuess::GapWeighted,
                },
                ..InvertOptions::with_tol(*tol)
            };
            let result = invert_discrete(&target, *x0, &opts)?;
            if !result.converged {
                warn!("not converged: residual {:e} after {} iterations", result.residual, result.iterations);
            }
            Ok(Outcome { converged: result.converged, result: to_value(&result)? })
        }
        Command::Approx { law, x0, n, tol, variance, ea1_paths, seed } => {
            let table = QuantileTable::from_csv(open(law)?)?;
            let declared_variance = Some(variance.unwrap_or_else(|| table.variance()));
            let mu = SampledLaw::from_table(table).with_declared(*x0, declared_variance);
            let opts = ApproxOptions {
                invert: InvertOptions::with_tol(*tol),
                ea1_paths: *ea1_paths,
                seed: *seed,
                ..Default::default()
            };
            let result = approx_invert(&mu, *x0, *n, &opts)?;
            Ok(Outcome { converged: result.calibration.converged, result: to_value(&result)? })
        }
        Command::Simulate { measure, x0, t, engine, paths, seed, step, bandwidth, dump_samples } => {
            let nu = read_measure(measure)?;
            let bundle = match engine {
                EngineArg::Jump => simulate_jump(&nu, *x0, *t, *paths, *seed)?,
                EngineArg::Timechange => {
                    let defaults = TimeChangeOptions::default();
                    let step = step.unwrap_or(defaults.step);
                    let bandwidth = bandwidth.unwrap_or(2.0 * step.sqrt() * 5.0);
                    let opts = TimeChangeOptions { step, bandwidth, ..defaults };
                    simulate_timechange(&nu, *x0, *t, *paths, *seed, &opts)?
                }
            };
            let mut result = to_value(&bundle.summary())?;
            if *dump_samples {
                result["samples_x1"] = to_value(&bundle.samples_x1)?;
                result["samples_a1"] = to_value(&bundle.samples_a1)?;
            }
            Ok(Outcome { result, converged: true })
        }
        Command::Classify { measure, x0, left_tail, right_tail } => {
            let nu = read_measure(measure)?;
            let tails = TailDeclarations::new(left_tail.map(Into::into), right_tail.map(Into::into));
            Outcome::ok(&classify_true(&nu, *x0, &tails)?)
        }
        Command::CalibrateCalls { curve, maturity, tol } => {
            let curve = CallCurve::from_csv(open(curve)?, *maturity)?;
            let result = calibrate_calls(&curve, &InvertOptions::with_tol(*tol))?;
            let converged = result.calibration.converged && result.report.within_tolerance;
            Ok(Outcome { converged, result: to_value(&result)? })
        }
    }
}

fn configure_threads() -> usize {
    if let Ok(v) = std::env::var("GAPFLOW_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    warn!("could not size thread pool: {e}");
                }
            }
            _ => warn!("ignoring GAPFLOW_THREADS={v:?}: expected a positive integer"),
        }
    }
    rayon::current_num_threads()
}

fn emit(cli: &Cli, document: &serde_json::Value) -> std::io::Result<()> {
    let text = output::to_json(document).map_err(std::io::Error::other)?;
    match &cli.output {
        Some(path) => std::fs::write(path, text),
        None => std::io::stdout().lock().write_all(text.as_bytes()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).target(env_logger::Target::Stderr).init();
    let threads = configure_threads();
    let started = Instant::now();
    let outcome = run(&cli.command);
    let meta = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "rate_convention": RATE_CONVENTION,
        "threads": threads,
        "timestamp": SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        "elapsed_seconds": started.elapsed().as_secs_f64(),
    });
    let (mut document, status) = match outcome {
        Ok(Outcome { result, converged }) => {
            let status = if converged { 0 } else { EXIT_NOT_CONVERGED };
            info!("done in {:.3}s", started.elapsed().as_secs_f64());
            (json!({ "result": result }), status)
        }
        Err(failure) => {
            eprintln!("error [{}]: {}", failure.code(), failure.message());
            (json!({ "error": { "code": failure.code(), "message": failure.message() } }), failure.exit())
        }
    };
    if !cli.no_meta {
        document["meta"] = meta;
    }
    if let Err(e) = emit(&cli, &document) {
        eprintln!("error [E_IO]: cannot write output: {e}");
        return ExitCode::from(EXIT_INVALID);
    }
    ExitCode::from(status)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_names_the_rate_constant() {
        assert!(VERSION.contains(&format!("rate convention {RATE_CONVENTION}")));
    }

    #[test]
    fn args_parse() {
        let cli = Cli::try_parse_from(["gapflow", "--no-meta", "forward", "--measure", "m.json", "--x0", "-0.5"]).unwrap();
        assert!(cli.no_meta);
        assert!(matches!(cli.command, Command::Forward { x0, .. } if x0 == -0.5));
    }
}
