//! `transynth` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use transynth_core::simulation::Scenario;

use crate::config::{AnalysisConfig, ScenarioFile};
use crate::error::{Error, Result};
use crate::output::{self, fmt_num, Format};
use crate::{analysis, parallel, report, truth};

#[derive(Debug, Parser)]
#[command(name = "transynth", version, about = "Synthesis estimators for transporting causal effects under structural positivity violations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a Monte Carlo study from a scenario file and write the metrics CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<usize>,
        /// Metrics CSV; stdout when omitted and not set in the file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// CSV of failed repetitions.
        #[arg(long)]
        failures: Option<PathBuf>,
    },
    /// Run one estimator on a CSV dataset.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        estimator: Option<String>,
        /// wald, bootstrap or bounds.
        #[arg(long)]
        inference: Option<String>,
        /// Shorthand for `--inference bounds`.
        #[arg(long, conflicts_with = "inference")]
        bounds: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// csv or text.
        #[arg(long, default_value = "csv")]
        format: Format,
    },
    /// Approximate the true average effect of a simulation scenario.
    Truth {
        #[arg(long)]
        scenario: u8,
        #[arg(long, default_value_t = 2_000_000)]
        m: usize,
        #[arg(long, default_value_t = 20240101)]
        seed: u64,
        /// Truth cache file.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Write plot-ready CSVs (estimates, effect curve, densities) for an analysis.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn emit(out: &mut dyn Write, bytes: &[u8]) -> Result<()> {
    out.write_all(bytes).map_err(|e| Error::io("<stdout>", e))
}

fn analysis_config(config: &Path, data: Option<PathBuf>) -> Result<AnalysisConfig> {
    let mut cfg = AnalysisConfig::load(config)?;
    if let Some(d) = data {
        cfg.data = d;
    }
    Ok(cfg)
}

fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut warn = |msg: &str| {
        let _ = writeln!(err, "warning: {msg}");
    };
    match command {
        Command::Simulate { config, seed, reps, out: path, failures } => {
            let mut file = ScenarioFile::load(&config)?;
            if let Some(s) = seed {
                file.seed = s;
            }
            if let Some(r) = reps {
                file.reps = r;
            }
            let cfg = file.to_config()?;
            let truth = match cfg.truth {
                Some(t) => t,
                None => truth::cached(file.truth_cache.as_deref(), cfg.scenario, cfg.truth_m, cfg.seed)?,
            };
            let report = parallel::in_pool(|| parallel::run_simulation(&cfg, truth))??;
            if !report.failures.is_empty() {
                warn(&format!("{} estimator run(s) failed and were excluded", report.failures.len()));
            }
            if let Some(p) = failures {
                output::with_file(&p, |w| output::write_failures(&report.failures, w))?;
            }
            match path.or(file.output) {
                Some(p) => output::with_file(&p, |w| output::write_metrics(&report.rows, w))?,
                None => {
                    let mut buf = Vec::new();
                    output::write_metrics(&report.rows, &mut buf).map_err(|e| Error::io("<stdout>", e))?;
                    emit(out, &buf)?;
                }
            }
            Ok(())
        }
        Command::Analyze { config, data, estimator, inference, bounds, seed, out: path, format } => {
            let mut cfg = analysis_config(&config, data)?;
            if let Some(e) = estimator {
                cfg.estimator = e;
            }
            if let Some(i) = inference {
                cfg.inference = i;
            }
            if bounds {
                cfg.inference = "bounds".into();
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let loaded = analysis::load(&cfg)?;
            loaded.warnings.iter().for_each(|w| warn(w));
            let result = parallel::in_pool(|| analysis::run(&cfg, &loaded.dataset))??;
            match path.or(cfg.output.clone()) {
                Some(p) => output::write_results(&result, &p, format)?,
                None => {
                    let mut buf = Vec::new();
                    match format {
                        Format::Csv => output::write_estimate_csv(&result, &mut buf),
                        Format::Text => output::write_estimate_text(&result, &mut buf),
                    }
                    .map_err(|e| Error::io("<stdout>", e))?;
                    emit(out, &buf)?;
                }
            }
            Ok(())
        }
        Command::Truth { scenario, m, seed, cache } => {
            let scenario = Scenario::from_number(scenario)?;
            let psi = truth::cached(cache.as_deref(), scenario, m, seed)?;
            emit(out, format!("{}\n", fmt_num(psi)).as_bytes())
        }
        Command::Report { config, data, out_dir } => {
            let cfg = analysis_config(&config, data)?;
            let loaded = analysis::load(&cfg)?;
            loaded.warnings.iter().for_each(|w| warn(w));
            let r = parallel::in_pool(|| report::write_report(&cfg, &loaded.dataset, &out_dir))??;
            r.warnings.iter().for_each(|w| warn(w));
            for f in &r.files {
                emit(out, format!("{}\n", f.display()).as_bytes())?;
            }
            Ok(())
        }
    }
}

/// Parses `argv` and runs the command; returns the process exit status.
pub fn run_cli<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let text = e.render().to_string();
            if code == 0 {
                let _ = out.write_all(text.as_bytes());
            } else {
                let first = text.lines().next().unwrap_or("invalid arguments");
                let _ = writeln!(err, "{first}");
            }
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}
