use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfmimo::harness::{self, ExperimentSpec, FronthaulParams, FronthaulScheme};
use clap::{Parser, Subcommand};

/// Uplink cell-free massive MIMO simulator.
#[derive(Parser)]
#[command(name = "cfmimo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment spec (TOML or JSON).
    Run {
        spec: PathBuf,
        /// Worker threads; overrides CFMIMO_THREADS.
        #[arg(long)]
        threads: Option<usize>,
        /// Override the CSV output path.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Override the JSON sidecar path.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Fronthaul complex-scalar count per location realization.
    Fronthaul {
        #[arg(long)]
        scheme: String,
        #[arg(short = 'm', long)]
        aps: u64,
        #[arg(short = 'k', long)]
        ues: u64,
        #[arg(short = 'l', long)]
        ap_antennas: u64,
        #[arg(short = 'n', long)]
        ue_antennas: u64,
        #[arg(long, default_value_t = 200)]
        tau_c: u64,
        /// Defaults to N·ceil(K/2).
        #[arg(long)]
        tau_p: Option<u64>,
        #[arg(long, default_value_t = 1)]
        n_r: u64,
        /// Count the precoder feedback and fourth-moment statistics.
        #[arg(long)]
        precoding: bool,
    },
    /// Parse and check a spec without running it.
    Validate { spec: PathBuf },
}

const EXIT_INVALID: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn load(path: &Path) -> Result<ExperimentSpec, ExitCode> {
    ExperimentSpec::load(path).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(EXIT_INVALID)
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { spec } => match load(&spec) {
            Ok(s) => {
                let points = s.sweep_points().len();
                println!(
                    "ok: {} ({} sweep point(s), {} location(s))",
                    s.name, points, s.n_locations
                );
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Command::Run {
            spec,
            threads,
            csv,
            json,
        } => {
            let mut s = match load(&spec) {
                Ok(s) => s,
                Err(code) => return code,
            };
            if csv.is_some() {
                s.output.csv = csv;
            }
            if json.is_some() {
                s.output.json = json;
            }
            let report = match harness::run_experiment_with(&s, threads) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(if e.is_numerical() {
                        EXIT_NUMERICAL
                    } else {
                        EXIT_INVALID
                    });
                }
            };
            if let Err(e) = report.write_outputs() {
                eprintln!("error: writing outputs: {e}");
                return ExitCode::FAILURE;
            }
            for g in &report.summaries {
                println!(
                    "{:<11} {:<8} value={:<4} n={:<4} median_sum_se={:.4} mean_sum_se={:.4}",
                    g.scheme.to_string(),
                    g.precoding.to_string(),
                    g.sweep_value,
                    g.count,
                    g.median_sum_se,
                    g.mean_sum_se
                );
            }
            for i in &report.improvements {
                println!(
                    "improvement {} value={}: {:+.2}%",
                    i.scheme,
                    i.sweep_value,
                    100.0 * i.median_ratio_minus_one
                );
            }
            let failed = report.failures();
            if failed > 0 {
                eprintln!("{failed} record(s) failed");
                return ExitCode::from(EXIT_NUMERICAL);
            }
            ExitCode::SUCCESS
        }
        Command::Fronthaul {
            scheme,
            aps,
            ues,
            ap_antennas,
            ue_antennas,
            tau_c,
            tau_p,
            n_r,
            precoding,
        } => {
            let scheme: FronthaulScheme = match scheme.parse() {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_INVALID);
                }
            };
            let params = FronthaulParams {
                aps,
                ues,
                ap_antennas,
                ue_antennas,
                tau_c,
                tau_p: tau_p.unwrap_or(ue_antennas * ues.div_ceil(2)),
                n_r,
            };
            match harness::fronthaul_accounting(params, scheme, precoding) {
                Ok(c) => {
                    println!(
                        "uplink={} feedback={} total={}",
                        c.uplink, c.feedback, c.total
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_INVALID)
                }
            }
        }
    }
}
