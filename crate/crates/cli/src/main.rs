use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use weldloop_core::Error;

mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "weldloop", version, about = "Simulate, identify and tune the short-circuit welding current loop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the switched plant in open or closed loop and write the waveform.
    Simulate(SimulateArgs),
    /// Fit the per-phase parameters to a recorded waveform.
    Identify(IdentifyArgs),
    /// Check the closed-loop pole locations and settling specs of a gain set.
    VerifyTuning(VerifyArgs),
    /// Compute cycle metrics for one or more waveforms and compare them.
    Metrics(MetricsArgs),
    /// Re-run the command recorded in a manifest and check its outputs.
    Replay(ReplayArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Open,
    Closed,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Sc,
    Ea,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum FitPhase {
    Sc,
    Ea,
    Both,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum InitCurrent {
    Fitted,
    First,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Plant parameters (`key = value`); built-in reference values if omitted.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Controller gains; required in closed mode.
    #[arg(long)]
    pub gains: Option<PathBuf>,
    /// Constant source voltage in open mode (V).
    #[arg(long, default_value_t = 21.1)]
    pub ew: f64,
    /// Record length (s).
    #[arg(long, default_value_t = 0.1)]
    pub duration: f64,
    /// Integration and sampling step (s).
    #[arg(long, default_value_t = 1e-6)]
    pub dt: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Std of the current measurement noise (A).
    #[arg(long, default_value_t = 0.0)]
    pub noise_current: f64,
    /// Std of the arc-voltage measurement noise (V).
    #[arg(long, default_value_t = 0.0)]
    pub noise_voltage: f64,
    /// Relative std of the phase durations.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    /// Initial inductor current (A); 0 in open mode, 400 in closed mode.
    #[arg(long)]
    pub i0: Option<f64>,
    #[arg(long, value_enum, default_value_t = PhaseArg::Sc)]
    pub initial_phase: PhaseArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct IdentifyArgs {
    /// Waveform CSV (`t_s,I_W_A,U_arc_V,E_W_V,phase`).
    pub waveform: PathBuf,
    #[arg(long, value_enum, default_value_t = FitPhase::Both)]
    pub phase: FitPhase,
    /// Known `L`, `R_L` and default starting values; reference values if omitted.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Starting values for any of `R_1`, `R_2`, `C`, `R_sum`, `E_ac`.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub segmentation: SegmentationArgs,
    /// How each segment's predictor is started.
    #[arg(long, value_enum, default_value_t = InitCurrent::Fitted)]
    pub init_current: InitCurrent,
    #[arg(long, default_value_t = 500)]
    pub max_iterations: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub gains: PathBuf,
    /// Settling band as a fraction of the reference excursion.
    #[arg(long, default_value_t = 0.05)]
    pub band: f64,
    /// Multiplies both phases' `K_p`.
    #[arg(long, default_value_t = 1.0)]
    pub kp_scale: f64,
    /// Allowed ratio of SC settling time to its target.
    #[arg(long, default_value_t = 1.5)]
    pub sc_tolerance: f64,
    /// Bound on the late-phase ramp tracking error (A).
    #[arg(long, default_value_t = 30.0)]
    pub ramp_error_limit: f64,
    /// Number of `K_p` values in the root-locus sweep; 0 disables it.
    #[arg(long, default_value_t = 0)]
    pub sweep: usize,
    /// Sweep range as multiples of the nominal `K_p`.
    #[arg(long, default_value_t = 0.1)]
    pub sweep_min: f64,
    #[arg(long, default_value_t = 10.0)]
    pub sweep_max: f64,
    /// Write reports here instead of printing them.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    /// Also compare every file against the reference slopes.
    #[arg(long)]
    pub target: bool,
    /// Reference SC slope (A/s).
    #[arg(long, default_value_t = 60e3, allow_negative_numbers = true)]
    pub alpha_sc: f64,
    /// Reference EA slope (A/s).
    #[arg(long, default_value_t = -20e3, allow_negative_numbers = true)]
    pub alpha_ea: f64,
    #[command(flatten)]
    pub segmentation: SegmentationArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SegmentationArgs {
    /// Ignore the phase column and segment from current and voltage.
    #[arg(long)]
    pub resegment: bool,
    /// Arc voltage below which a short circuit may start (V).
    #[arg(long, default_value_t = 14.4)]
    pub v_threshold: f64,
    /// Gradient above which a short circuit may start (A/s).
    #[arg(long, default_value_t = 5e3)]
    pub slope_threshold: f64,
    /// Regression window of the smoothed gradient (s); widen it for noisy records.
    #[arg(long, default_value_t = 50e-6)]
    pub gradient_window: f64,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Where the replayed outputs go.
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure classes, each with its own exit code.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Category {
    Validation,
    Convergence,
    DataShape,
}

impl Category {
    fn code(self) -> u8 {
        match self {
            Category::Validation => 2,
            Category::Convergence => 3,
            Category::DataShape => 4,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Category::Validation => "validation",
            Category::Convergence => "convergence",
            Category::DataShape => "data-shape",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let category = match &e {
            Error::InvalidParameter { .. }
            | Error::Degenerate(_)
            | Error::Parse { .. }
            | Error::MissingKey(_)
            | Error::Io(_) => Category::Validation,
            Error::Diverged { .. } | Error::NeverSettles { .. } => Category::Convergence,
            Error::NoSegments { .. } | Error::InsufficientCycles { .. } | Error::Shape(_) => Category::DataShape,
        };
        Self::new(category, e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Annotate an error with the file it came from.
pub fn at_path<T>(path: &Path, r: weldloop_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        let mut c = CliError::from(e);
        c.message = format!("{}: {}", path.display(), c.message);
        c
    })
}

/// Parse and run one command line (without the program name).
pub fn run(argv: Vec<String>) -> CliResult<()> {
    let cli = Cli::try_parse_from(std::iter::once("weldloop".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| CliError::new(Category::Validation, clap_message(&e)))?;
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a, argv),
        Command::Identify(a) => commands::identify(&a, argv),
        Command::VerifyTuning(a) => commands::verify_tuning(&a, argv),
        Command::Metrics(a) => commands::metrics(&a, argv),
        Command::Replay(a) => commands::replay(&a),
    }
}

fn clap_message(e: &clap::Error) -> String {
    let text = e.to_string();
    text.lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("invalid arguments")
        .trim_start_matches("error: ")
        .to_string()
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    // help and version go through clap's normal path
    if let Err(e) = Cli::try_parse_from(std::iter::once("weldloop".to_string()).chain(argv.iter().cloned())) {
        if !e.use_stderr() {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    }
    match run(argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.message.replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {message}", e.category.tag());
            ExitCode::from(e.category.code())
        }
    }
}
