use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use restec::harness::{
    emit_report, generate_synthetic, load_bold_csv, recompute_metrics, run_cells, study_fir_prior, write_bold_csv,
    ExperimentConfig, Report,
};
use restec::hemo::FirPrior;
use restec::inference::{estimate, ModelKind};
use restec::Error;

#[derive(Parser)]
#[command(name = "restec", version, about = "Effective connectivity from resting-state BOLD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic estimation/test datasets and their ground truth.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Only this run (default: every run of the configuration).
        #[arg(long)]
        run: Option<usize>,
    },
    /// Estimate one dataset and write the result as JSON.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// BOLD CSV: header of region names, one row per scan.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "w")]
        assumption: ModelKind,
        /// Cached FIR prior; built from the configuration when absent.
        #[arg(long)]
        fir_prior: Option<PathBuf>,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full Monte-Carlo study and write the report.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long)]
        fir_prior: Option<PathBuf>,
    },
    /// Recompute the metrics of a stored report and compare them.
    Metrics {
        /// `report.json` written by `montecarlo`.
        #[arg(long)]
        report: PathBuf,
        /// Where to write the recomputed metrics (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the FIR prior for the configuration and cache it.
    FirPrior {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn fir_prior(path: Option<&Path>, cfg: &ExperimentConfig) -> Result<FirPrior, Error> {
    match path {
        Some(p) => FirPrior::load(p),
        None => study_fir_prior(cfg),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn simulate(cfg: &ExperimentConfig, out: &Path, run: Option<usize>) -> Result<(), Error> {
    fs::create_dir_all(out)?;
    let runs: Vec<usize> = match run {
        Some(r) => vec![r],
        None => (0..cfg.runs).collect(),
    };
    for r in runs {
        let data = generate_synthetic(cfg, r)?;
        write_bold_csv(&data.estimation, &out.join(format!("run{r:03}_estimation.csv")))?;
        write_bold_csv(&data.test, &out.join(format!("run{r:03}_test.csv")))?;
        fs::write(out.join(format!("run{r:03}_truth.json")), serde_json::to_string_pretty(&data.truth)?)?;
    }
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

fn metrics(report_path: &Path, out: Option<&Path>) -> Result<(), Error> {
    let report = Report::from_json(&fs::read_to_string(report_path)?)?;
    let recomputed = recompute_metrics(&report)?;
    let mut worst = 0.0f64;
    for (run, kind, m) in &recomputed {
        let stored = report.cell(*run, *kind).and_then(|c| c.metrics.as_ref());
        if let Some(s) = stored {
            for name in restec::harness::CELL_METRICS {
                match (s.get(name), m.get(name)) {
                    (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                    (None, None) => {}
                    _ => worst = f64::INFINITY,
                }
            }
        }
    }
    let rows: Vec<_> = recomputed
        .iter()
        .map(|(run, kind, m)| serde_json::json!({"run": run, "assumption": kind, "metrics": m}))
        .collect();
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "schema": restec::harness::SCHEMA_VERSION,
        "max_abs_difference": worst,
        "records": rows,
    }))?;
    write_or_print(out, &text)?;
    eprintln!("recomputed {} cells, max |difference| {worst:e}", recomputed.len());
    if worst > 1e-12 {
        return Err(Error::Data(format!("recomputed metrics differ by {worst:e}")));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { common, out, run } => simulate(&common.load()?, &out, run),
        Command::Estimate {
            common,
            data,
            assumption,
            fir_prior: prior,
            out,
        } => {
            let cfg = common.load()?;
            let dataset = load_bold_csv(&data, cfg.t_r)?;
            let fir = fir_prior(prior.as_deref(), &cfg)?;
            let result = estimate(&dataset.y, &fir, &cfg.estimation_config(assumption))?;
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            write_or_print(out.as_deref(), &serde_json::to_string_pretty(&result)?)
        }
        Command::Montecarlo {
            common,
            out,
            jobs,
            fir_prior: prior,
        } => {
            let cfg = common.load()?;
            let fir = fir_prior(prior.as_deref(), &cfg)?;
            let report = run_cells(&cfg, &fir, jobs)?;
            emit_report(&report, &out)?;
            for row in &report.summary {
                eprintln!("{:<22} {:<8} median {:.4}", row.metric, row.group, row.stats.median);
            }
            report.check_failures()
        }
        Command::Metrics { report, out } => metrics(&report, out.as_deref()),
        Command::FirPrior { common, out } => study_fir_prior(&common.load()?)?.save(&out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Batch { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
