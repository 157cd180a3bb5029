mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::CliError;

/// Ion-implanted emitter simulation and analysis.
#[derive(Parser)]
#[command(name = "emitterforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lay out an implantation pattern and write it as CSV.
    Pattern(PatternArgs),
    /// Simulate time tags for every site of a pattern.
    Simulate(SimulateArgs),
    /// Correlate two channels of a TTG1 file and fit the antibunching model.
    G2(G2Args),
    /// Occurrence statistics of emitter counts with an optional μ fit.
    Stats(StatsArgs),
    /// Fit a saturation curve from `power_uw,rate_cps[,sigma_cps]`.
    Saturation(SaturationArgs),
    /// Fit a bi-exponential decay from `t_ns,counts`.
    Decay(DecayArgs),
    /// Debye–Waller factor from `wavelength_nm,intensity`.
    Dw(DwArgs),
    /// Calibrate the single-emitter rate and count emitters in a spot table.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
pub struct PatternArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// fib, mask or frame.
    #[arg(long)]
    pub kind: Option<String>,
    /// Ions per cm².
    #[arg(long)]
    pub fluence: Option<String>,
    #[arg(long)]
    pub pitch: Option<String>,
}

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Overrides `run.seed`; EMITTERFORGE_SEED is used when neither is set.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub duration: Option<String>,
    #[arg(long)]
    pub power: Option<String>,
}

#[derive(Args)]
pub struct G2Args {
    pub tagfile: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bin: Option<String>,
    #[arg(long)]
    pub window: Option<String>,
    /// Signal fraction (I − B)/I for background correction.
    #[arg(long, conflicts_with = "background_rate")]
    pub rho: Option<f64>,
    /// Background rate; ρ is then computed from the file's total rate.
    #[arg(long)]
    pub background_rate: Option<String>,
    /// Acquisition length if longer than the last tag.
    #[arg(long)]
    pub duration: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub channel_a: u8,
    #[arg(long, default_value_t = 1)]
    pub channel_b: u8,
    /// Histogram CSV `tau_ns,g2,sigma,raw`.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Background-corrected histogram CSV.
    #[arg(long)]
    pub corrected_csv: Option<PathBuf>,
    /// Fit report; printed to stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct StatsArgs {
    /// Simulation manifest; the `n_true` column is used.
    #[arg(long, conflicts_with = "counts", required_unless_present = "counts")]
    pub manifest: Option<PathBuf>,
    /// CSV with an `N` column of per-site counts.
    #[arg(long)]
    pub counts: Option<PathBuf>,
    /// Restrict manifest sites to one row number.
    #[arg(long)]
    pub row: Option<u64>,
    #[arg(long, default_value_t = 3)]
    pub k: u32,
    #[arg(long)]
    pub fit_mu: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SaturationArgs {
    pub input: PathBuf,
    /// Integration time behind each point, for Poisson sigmas.
    #[arg(long, default_value = "1 s")]
    pub integration_time: String,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct DecayArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct DwArgs {
    pub input: PathBuf,
    #[arg(long, default_value = "1278 nm")]
    pub zpl: String,
    #[arg(long, default_value = "3 nm")]
    pub halfwidth: String,
    #[arg(long, default_value_t = 3)]
    pub components: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct CalibrateArgs {
    /// Spot table `label,rate_cps,background_cps,n_g2,n_estimated`.
    pub spots: PathBuf,
    /// Background rate; defaults to the mean of the table's background column.
    #[arg(long)]
    pub background: Option<String>,
    /// Spot table with `n_estimated` filled in.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<(), CliError> = match cli.command {
        Command::Pattern(a) => commands::pattern(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::G2(a) => commands::g2(a),
        Command::Stats(a) => commands::stats(a),
        Command::Saturation(a) => commands::saturation(a),
        Command::Decay(a) => commands::decay(a),
        Command::Dw(a) => commands::dw(a),
        Command::Calibrate(a) => commands::calibrate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("emitterforge: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
