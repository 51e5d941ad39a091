use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use timebin::commands::{self, AnalysisOverrides, Common, RunOutput, SyncOverrides};
use timebin::io::TagFormat;
use timebin::Error;
use timebin_core::analysis::Weighting;

#[derive(Parser)]
#[command(name = "timebin", version, about = "Simulate, synchronize and analyze high-dimensional time-bin entanglement distribution")]
struct Cli {
    /// Master seed; overrides `session.seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory to create (must not exist). Defaults to runs/<command>-seed<seed>-<n>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for block-parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Tag file format for written streams.
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Binary)]
    format: FormatArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Binary,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Uniform,
    Coincidences,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate Alice's and Bob's tag streams from a scenario config.
    Simulate {
        config: PathBuf,
        /// Session length in seconds; overrides `session.duration_s`.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Recover Bob's clock offset and drift and map his tags onto Alice's clock.
    Sync {
        alice: PathBuf,
        bob: PathBuf,
        /// Take `[sync]` defaults from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        params: SyncArgs,
    },
    /// Discretize synchronized streams and compute witness and key rate per block and dimension.
    Analyze {
        alice: PathBuf,
        bob: PathBuf,
        /// Take `[analysis]` defaults from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        params: AnalysisArgs,
        /// Write every correlation matrix as CSV under matrices/.
        #[arg(long)]
        export_matrices: bool,
    },
    /// Simulate and analyze one session per added background level.
    Sweep {
        config: PathBuf,
        /// Dimensions to evaluate, comma separated.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        /// Added Bob background, in multiples of his signal singles rate, comma separated.
        #[arg(long, value_delimiter = ',')]
        noise: Option<Vec<f64>>,
    },
    /// Run simulate, sync, analyze and report in one run directory.
    Pipeline { config: PathBuf },
    /// Best dimension per block from a report.csv, sweep.csv or run directory.
    Report { input: PathBuf },
}

#[derive(Args)]
struct SyncArgs {
    /// Tracking block length in seconds.
    #[arg(long)]
    block_len: Option<f64>,
    #[arg(long)]
    coarse_bin_ps: Option<i64>,
    #[arg(long)]
    coarse_half_window_ps: Option<i64>,
    /// Half-width of the initial offset search.
    #[arg(long)]
    acquire_half_window_ps: Option<i64>,
    /// Centre of the initial offset search.
    #[arg(long, allow_negative_numbers = true)]
    initial_offset_ps: Option<i64>,
    #[arg(long)]
    fine_bin_ps: Option<i64>,
    #[arg(long)]
    fine_half_window_ps: Option<i64>,
    /// Minimum peak significance for a lock.
    #[arg(long)]
    significance: Option<f64>,
}

#[derive(Args)]
struct AnalysisArgs {
    /// Dimensions to evaluate, comma separated.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// Analysis block length in seconds.
    #[arg(long)]
    block_len: Option<f64>,
    /// Interferometer imbalance; the frame is twice this.
    #[arg(long)]
    tau_mzi_ps: Option<i64>,
    #[arg(long, value_enum)]
    weighting: Option<WeightingArg>,
    /// Grid phases scanned during calibration.
    #[arg(long)]
    phase_steps: Option<usize>,
}

fn summarize(out: &RunOutput) {
    eprintln!("wrote {}", out.dir.display());
    for t in &out.manifest.timings {
        eprintln!("{:>10}: {:.2} s", t.stage, t.seconds);
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot start {n} worker threads: {e}")))?;
    }
    let common = Common {
        seed: cli.seed,
        out: cli.out,
        format: match cli.format {
            FormatArg::Binary => TagFormat::Binary,
            FormatArg::Csv => TagFormat::Csv,
        },
    };
    let output = match cli.command {
        Command::Simulate { config, duration } => commands::simulate(&config, duration, &common)?,
        Command::Sync {
            alice,
            bob,
            config,
            params,
        } => {
            let o = SyncOverrides {
                block_len_s: params.block_len,
                coarse_bin_ps: params.coarse_bin_ps,
                coarse_half_window_ps: params.coarse_half_window_ps,
                acquire_half_window_ps: params.acquire_half_window_ps,
                initial_offset_ps: params.initial_offset_ps,
                fine_bin_ps: params.fine_bin_ps,
                fine_half_window_ps: params.fine_half_window_ps,
                significance_threshold: params.significance,
            };
            commands::sync(&alice, &bob, config.as_deref(), &o, &common)?
        }
        Command::Analyze {
            alice,
            bob,
            config,
            params,
            export_matrices,
        } => {
            let o = AnalysisOverrides {
                dimensions: params.dims,
                block_len_s: params.block_len,
                tau_mzi_ps: params.tau_mzi_ps,
                weighting: params.weighting.map(|w| match w {
                    WeightingArg::Uniform => Weighting::Uniform,
                    WeightingArg::Coincidences => Weighting::Coincidences,
                }),
                phase_steps: params.phase_steps,
            };
            commands::analyze(&alice, &bob, config.as_deref(), &o, export_matrices, &common)?
        }
        Command::Sweep { config, dims, noise } => {
            commands::sweep(&config, dims, noise, &common, |n| eprintln!("noise level {n} done"))?
        }
        Command::Pipeline { config } => commands::pipeline(&config, &common)?,
        Command::Report { input } => {
            match commands::report(&input, &common, &mut std::io::stdout().lock())? {
                Some(m) => m,
                None => return Ok(()),
            }
        }
    };
    summarize(&output);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
