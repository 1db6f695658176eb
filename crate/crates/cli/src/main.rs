use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use nuv_doa::harness::{
    aggregates_csv, calibrate_epsilon, calibrate_sigma2, default_sigma2_candidates, rows_to_csv,
    run_sweep, run_trial_methods, trial_fine_spectrum, trial_spectrum, write_sweep, Method,
    ScenarioConfig, Sigma2Entry,
};
use nuv_doa::hierarchical::ErrorStdEntry;
use nuv_doa::DoaError;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_OTHER: u8 = 1;

#[derive(Parser)]
#[command(
    name = "nuv-doa",
    version,
    about = "Direction-of-arrival simulation and benchmarking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configuration's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    /// Progress and summaries on stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the simulated snapshot batch of every trial as JSON lines.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spectrum of trial 0 as `angle_deg,magnitude` CSV.
    Spectrum {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimates of every configured method on trial 0, one JSON record per line.
    Estimate {
        #[command(flatten)]
        common: Common,
    },
    /// Monte-Carlo sweep: one report per (method, SNR) plus `aggregates.csv`.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Epsilon table for the refinement window or per-SNR sigma2 choices.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: CalibrationMode,
        /// `.json` writes JSON, anything else TOML ready to paste into a config.
        #[arg(long)]
        out: PathBuf,
        /// sigma2 candidates, comma separated.
        #[arg(long, value_delimiter = ',')]
        candidates: Option<Vec<f64>>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CalibrationMode {
    Epsilon,
    Sigma2,
}

fn load_config(common: &Common) -> Result<ScenarioConfig, DoaError> {
    let mut cfg = ScenarioConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    if common.verbose {
        eprintln!(
            "config: N={} K={} L={} methods={:?} snr={:?} trials={} seed={}",
            cfg.n_sensors,
            cfg.n_sources,
            cfg.n_snapshots,
            cfg.methods.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
            cfg.snr_points(),
            cfg.trials,
            cfg.seed
        );
    }
    Ok(cfg)
}

fn parent_dir(path: &Path) -> Result<(), DoaError> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BatchRecord {
    trial_index: usize,
    seed: u64,
    snr_db: f64,
    true_doas_deg: Vec<f64>,
    /// Row-major N x L.
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

fn simulate(common: &Common, out: &Path) -> Result<(), DoaError> {
    let cfg = load_config(common)?;
    fs::create_dir_all(out)?;
    let mut text = String::new();
    for snr in cfg.snr_points() {
        for t in 0..cfg.trials {
            let (doas, batch) = cfg.trial_batch(snr, t)?;
            let m = batch.matrix();
            let rows = |f: fn(&nuv_doa::array::C64) -> f64| {
                (0..m.nrows())
                    .map(|i| m.row(i).iter().map(f).collect())
                    .collect()
            };
            text.push_str(&serde_json::to_string(&BatchRecord {
                trial_index: t,
                seed: cfg.trial_seed(t),
                snr_db: snr,
                true_doas_deg: doas,
                re: rows(|c| c.re),
                im: rows(|c| c.im),
            })?);
            text.push('\n');
        }
    }
    fs::write(out.join("batches.jsonl"), text)?;
    Ok(())
}

fn spectrum(common: &Common, method: &str, out: &Path) -> Result<(), DoaError> {
    let cfg = load_config(common)?;
    let method: Method = method.parse()?;
    let rows = match method {
        Method::NuvDoa => trial_fine_spectrum(&cfg)?,
        _ => {
            let spec = trial_spectrum(&cfg, method)?;
            spec.grid()
                .values()
                .iter()
                .map(|a| a.to_degrees())
                .zip(spec.values().iter().copied())
                .collect()
        }
    };
    parent_dir(out)?;
    fs::write(out, rows_to_csv(&rows))?;
    if common.verbose {
        eprintln!("wrote {} rows to {}", rows.len(), out.display());
    }
    Ok(())
}

fn estimate(common: &Common) -> Result<(), DoaError> {
    let cfg = load_config(common)?;
    for rec in run_trial_methods(&cfg, cfg.snr_db, 0)? {
        println!("{}", serde_json::to_string(&rec)?);
    }
    Ok(())
}

fn sweep(common: &Common, out: &Path) -> Result<(), DoaError> {
    let cfg = load_config(common)?;
    let reports = run_sweep(&cfg)?;
    write_sweep(out, &reports)?;
    if common.verbose {
        eprint!("{}", aggregates_csv(&reports));
    }
    Ok(())
}

#[derive(Serialize)]
struct EpsilonToml {
    error_table: Vec<ErrorStdEntry>,
}

#[derive(Serialize)]
struct Sigma2Toml {
    sigma2_by_snr: Vec<Sigma2Entry>,
}

fn write_structured<T: Serialize, U: Serialize>(
    out: &Path,
    json_value: &T,
    toml_value: &U,
) -> Result<(), DoaError> {
    parent_dir(out)?;
    let text = if out.extension().is_some_and(|e| e == "json") {
        serde_json::to_string_pretty(json_value)? + "\n"
    } else {
        toml::to_string(toml_value).map_err(|e| DoaError::Config(e.to_string()))?
    };
    fs::write(out, text)?;
    Ok(())
}

fn calibrate(
    common: &Common,
    mode: CalibrationMode,
    out: &Path,
    candidates: Option<Vec<f64>>,
) -> Result<(), DoaError> {
    let cfg = load_config(common)?;
    match mode {
        CalibrationMode::Epsilon => {
            let table = calibrate_epsilon(&cfg)?;
            if common.verbose {
                for e in table.entries() {
                    eprintln!(
                        "snr {:>6} dB  eps {:.5} deg  trials {:?}",
                        e.snr_db, e.epsilon_deg, e.trials
                    );
                }
            }
            let entries = table.entries().to_vec();
            write_structured(
                out,
                &entries,
                &EpsilonToml {
                    error_table: entries.clone(),
                },
            )
        }
        CalibrationMode::Sigma2 => {
            let cands = candidates.unwrap_or_else(default_sigma2_candidates);
            let table = calibrate_sigma2(&cfg, &cands)?;
            if common.verbose {
                for e in &table {
                    eprintln!("snr {:>6} dB  sigma2 {}", e.snr_db, e.sigma2);
                }
            }
            write_structured(
                out,
                &table,
                &Sigma2Toml {
                    sigma2_by_snr: table.clone(),
                },
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { common, out } => simulate(common, out),
        Command::Spectrum {
            common,
            method,
            out,
        } => spectrum(common, method, out),
        Command::Estimate { common } => estimate(common),
        Command::Sweep { common, out } => sweep(common, out),
        Command::Calibrate {
            common,
            mode,
            out,
            candidates,
        } => calibrate(common, *mode, out, candidates.clone()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() {
                EXIT_CONFIG
            } else if e.is_numerical_error() {
                EXIT_NUMERICAL
            } else {
                EXIT_OTHER
            })
        }
    }
}
