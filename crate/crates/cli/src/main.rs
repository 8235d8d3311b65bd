//! `clamsim` — command-line front end of the sensing simulator.
//!
//! Subcommands cover the full workflow: validating scene files, building and
//! querying clutter angle maps, running a single estimation pipeline or a
//! Monte Carlo experiment, printing the complexity comparison, demonstrating
//! the MTI canceller, and reshaping experiment output into figure-ready CSV
//! and SVG files.
//!
//! Every failed precondition exits with status 2 and a message naming the
//! violated constraint on stderr.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use clamsim::metrics::{Method, RunnerConfig};
use clamsim::synth::OfdmParams;

use artifacts::{parse_snr, resolve_out_dir};

/// SNR argument: a dB value, or `off` for noiseless synthesis.
#[derive(Clone, Copy)]
struct SnrArg(Option<f64>);

impl std::str::FromStr for SnrArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_snr(s).map(SnrArg)
    }
}

/// Error statistic column of the aggregated CSV.
#[derive(Clone, Copy, ValueEnum)]
enum StatisticArg {
    Rmse,
    Median,
}

impl From<StatisticArg> for commands::Statistic {
    fn from(value: StatisticArg) -> Self {
        match value {
            StatisticArg::Rmse => commands::Statistic::Rmse,
            StatisticArg::Median => commands::Statistic::Median,
        }
    }
}

#[derive(Parser)]
#[command(name = "clamsim", version, about = "Bistatic OFDM sensing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect scene files.
    #[command(subcommand)]
    Scene(SceneCommand),
    /// Build and query clutter angle maps.
    #[command(subcommand)]
    Clam(ClamCommand),
    /// Run one estimation method on one realization.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Run Monte Carlo experiments from a spec file.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// Print complex-multiplication counts.
    #[command(subcommand)]
    Complexity(ComplexityCommand),
    /// Demonstrate the moving-target-indication canceller.
    #[command(subcommand)]
    Mti(MtiCommand),
    /// Reshape experiment output into figure-ready artifacts.
    #[command(subcommand)]
    Plotdata(PlotdataCommand),
}

/// OFDM and runner scale.
#[derive(Clone, Copy, Default, ValueEnum)]
enum Profile {
    /// 128 subcarriers x 32 symbols; sized for 8x8 arrays.
    #[default]
    Desk,
    /// 1024 subcarriers x 100 symbols; sized for 32x32 arrays.
    Full,
}

impl Profile {
    fn runner(self) -> RunnerConfig {
        match self {
            Profile::Desk => RunnerConfig::desk(),
            Profile::Full => RunnerConfig::full(),
        }
    }

    fn ofdm(self) -> OfdmParams {
        self.runner().ofdm
    }
}

#[derive(Subcommand)]
enum SceneCommand {
    /// Check a scene file against the model preconditions.
    Validate {
        /// Scene JSON file.
        scene: PathBuf,
        #[arg(long, value_enum, default_value_t = Profile::Desk)]
        profile: Profile,
    },
}

#[derive(Subcommand)]
enum ClamCommand {
    /// Build a map from a scene and write it as JSON.
    Build(ClamBuildCli),
    /// Print the DoA list stored for a position.
    Lookup {
        /// Map JSON file.
        #[arg(long)]
        map: PathBuf,
        /// Query x coordinate, meters.
        #[arg(long, allow_negative_numbers = true)]
        x: f64,
        /// Query y coordinate, meters.
        #[arg(long, allow_negative_numbers = true)]
        y: f64,
    },
}

#[derive(Args)]
struct ClamBuildCli {
    /// Scene JSON file.
    #[arg(long)]
    scene: PathBuf,
    /// Output map path.
    #[arg(long)]
    out: PathBuf,
    /// Estimate per-cell DoAs from synthesized clutter returns instead of
    /// ranking the scene geometry.
    #[arg(long)]
    estimated: bool,
    /// Grid origin x, meters.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    origin_x: f64,
    /// Grid origin y, meters.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    origin_y: f64,
    /// Cell edge length, meters.
    #[arg(long, default_value_t = 50.0)]
    cell_size: f64,
    /// Cells along x.
    #[arg(long, default_value_t = 5)]
    nx: usize,
    /// Cells along y.
    #[arg(long, default_value_t = 5)]
    ny: usize,
    /// DoAs kept per cell.
    #[arg(long, default_value_t = 3)]
    max_doas: usize,
    /// OFDM profile of the estimated builder.
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    /// Estimated-builder SNR in dB, or `off` for noiseless.
    #[arg(long, default_value = "off", allow_hyphen_values = true)]
    snr: SnrArg,
    /// Estimated-builder base seed (cell i uses seed + i).
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Estimated-builder MUSIC scan step, degrees.
    #[arg(long, default_value_t = 1.0)]
    grid_step: f64,
}

#[derive(Subcommand)]
enum PipelineCommand {
    /// Synthesize one realization, run one method, write estimates.csv and
    /// (for single-scan methods) spectrum.csv.
    Run(PipelineCli),
}

#[derive(Args)]
struct PipelineCli {
    /// Scene JSON file.
    #[arg(long)]
    scene: PathBuf,
    /// Clutter angle map; the scene's true clutter DoAs are used when absent.
    #[arg(long)]
    clam: Option<PathBuf>,
    /// Estimation method tag.
    #[arg(long)]
    method: Method,
    /// SNR in dB, or `off` for noiseless.
    #[arg(long, default_value = "off", allow_hyphen_values = true)]
    snr: SnrArg,
    /// Noise seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    /// MUSIC scan step override, degrees.
    #[arg(long)]
    grid_step: Option<f64>,
    /// Artifact directory (default: $CLAMSIM_OUT_DIR, else the working directory).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Also write the method's clutter-angle projector in the binary matrix
    /// format to this path.
    #[arg(long)]
    dump_projector: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Run the Monte Carlo harness described by a JSON spec file.
    Run {
        /// Experiment spec JSON file.
        spec: PathBuf,
        /// Artifact directory (default: $CLAMSIM_OUT_DIR, else the working directory).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ComplexityCommand {
    /// Print per-algorithm multiplication counts at the reference parameters.
    Table {
        /// Array sizes (total elements) as columns.
        #[arg(long, value_delimiter = ',', default_values_t = [16u64, 64, 256, 1024])]
        m: Vec<u64>,
        /// Shorthand for the reference four-column comparison.
        #[arg(long, conflicts_with = "m")]
        fig6: bool,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum MtiCommand {
    /// Write the pulse-train canceller demonstration series.
    Demo {
        /// Canceller order (cascaded two-pulse stages).
        #[arg(long, default_value_t = 1)]
        order: usize,
        /// Artifact directory (default: $CLAMSIM_OUT_DIR, else the working directory).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PlotdataCommand {
    /// Error-vs-SNR series from two single-target experiments.
    Fig7 {
        /// Aggregated CSV of the fast-target experiment.
        #[arg(long)]
        fast: PathBuf,
        /// Aggregated CSV of the slow-target experiment.
        #[arg(long)]
        slow: PathBuf,
        /// Error quantity column to plot.
        #[arg(long, default_value = "azimuth_deg")]
        quantity: String,
        /// Error statistic column to plot.
        #[arg(long, value_enum, default_value_t = StatisticArg::Rmse)]
        statistic: StatisticArg,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Error-vs-SNR series from one experiment, one series per method.
    Fig8 {
        /// Aggregated experiment CSV.
        #[arg(long)]
        experiment: PathBuf,
        /// Error quantity column to plot.
        #[arg(long, default_value = "azimuth_deg")]
        quantity: String,
        /// Error statistic column to plot.
        #[arg(long, value_enum, default_value_t = StatisticArg::Rmse)]
        statistic: StatisticArg,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Polar delay-azimuth scatter of the two-step pipeline against the
    /// plain 2D-FFT baseline over repeated runs.
    Fig10 {
        /// Scene JSON file.
        #[arg(long)]
        scene: PathBuf,
        /// Clutter angle map; the scene's true clutter DoAs are used when absent.
        #[arg(long)]
        clam: Option<PathBuf>,
        /// SNR in dB, or `off` for noiseless.
        #[arg(long, default_value = "-30", allow_hyphen_values = true)]
        snr: SnrArg,
        /// Independent noise realizations.
        #[arg(long, default_value_t = 10)]
        runs: usize,
        /// Base seed (run i uses seed + i).
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Profile::Desk)]
        profile: Profile,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> clamsim::error::Result<()> {
    match cli.command {
        Command::Scene(SceneCommand::Validate { scene, profile }) => {
            commands::scene_validate(&scene, &profile.ofdm())
        }
        Command::Clam(ClamCommand::Build(a)) => commands::clam_build(&commands::ClamBuildArgs {
            scene: a.scene,
            out: a.out,
            estimated: a.estimated,
            origin_m: [a.origin_x, a.origin_y],
            cell_size_m: a.cell_size,
            nx: a.nx,
            ny: a.ny,
            max_doas: a.max_doas,
            ofdm: a.profile.ofdm(),
            snr_db: a.snr.0,
            seed: a.seed,
            grid_step_deg: a.grid_step,
        }),
        Command::Clam(ClamCommand::Lookup { map, x, y }) => commands::clam_lookup(&map, x, y),
        Command::Pipeline(PipelineCommand::Run(a)) => {
            let mut runner = a.profile.runner();
            if let Some(step) = a.grid_step {
                runner.grid_step_deg = step;
            }
            commands::pipeline_run(&commands::PipelineArgs {
                scene: a.scene,
                clam: a.clam,
                method: a.method,
                snr_db: a.snr.0,
                seed: a.seed,
                runner,
                out_dir: resolve_out_dir(a.out_dir),
                dump_projector: a.dump_projector,
            })
        }
        Command::Experiment(ExperimentCommand::Run { spec, out_dir }) => {
            commands::experiment_run(&spec, &resolve_out_dir(out_dir))
        }
        Command::Complexity(ComplexityCommand::Table { m, fig6, out }) => {
            let sizes = if fig6 { vec![16, 64, 256, 1024] } else { m };
            commands::complexity_table(&sizes, out.as_deref()).map(|_| ())
        }
        Command::Mti(MtiCommand::Demo { order, out_dir }) => {
            commands::mti_demo(order, &resolve_out_dir(out_dir))
        }
        Command::Plotdata(PlotdataCommand::Fig7 { fast, slow, quantity, statistic, out_dir }) => {
            commands::plotdata_fig7(&fast, &slow, &quantity, statistic.into(), &resolve_out_dir(out_dir))
        }
        Command::Plotdata(PlotdataCommand::Fig8 { experiment, quantity, statistic, out_dir }) => {
            commands::plotdata_fig8(&experiment, &quantity, statistic.into(), &resolve_out_dir(out_dir))
        }
        Command::Plotdata(PlotdataCommand::Fig10 {
            scene,
            clam,
            snr,
            runs,
            seed,
            profile,
            out_dir,
        }) => commands::plotdata_fig10(&commands::Fig10Args {
            scene,
            clam,
            snr_db: snr.0,
            runs,
            seed,
            runner: profile.runner(),
            out_dir: resolve_out_dir(out_dir),
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
