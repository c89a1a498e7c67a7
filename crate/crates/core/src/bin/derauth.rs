use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand};

use derauth::net::adversary::AdversaryMode;
use derauth::net::config::ExperimentConfig;
use derauth::net::dataset::export_crseq_dataset;
use derauth::net::session::{run_session, SessionReport};
use derauth::net::sweep::{run_reliability_sweep, write_sweep_csv};

#[derive(Parser)]
#[command(name = "derauth", version, about = "Battery-entropy challenge/reply authentication")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, String> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p).map_err(|e| e.to_string()),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Verb {
    /// Enroll a master and an outstation and compare their tables.
    Enroll {
        #[command(flatten)]
        common: Common,
        /// Write the JSON-lines event log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run authentication rounds under the configured adversary.
    Authenticate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rounds: Option<u64>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Reliability against update interval and tolerance, as CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        measurements: Option<u64>,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write accepted challenge/reply pairs as `challenge_hex16,reply_hex16`.
    ExportDataset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hand an exported dataset to the external modeling-attack evaluator.
    AttackEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "modeling_attack/attack_eval.py")]
        script: PathBuf,
        #[arg(long, default_value = "python3")]
        python: String,
        /// Extra arguments passed through to the evaluator.
        #[arg(last = true)]
        rest: Vec<String>,
    },
    /// Short walk-through: honest rounds, then a replayed reply.
    Demo {
        #[command(flatten)]
        common: Common,
    },
}

fn write_log(path: Option<&Path>, report: &SessionReport) -> Result<(), String> {
    if let Some(p) = path {
        fs::write(p, report.events_jsonl()).map_err(|e| format!("cannot write log {}: {e}", p.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.verb {
        Verb::Enroll { common, log } => {
            let mut config = common.load()?;
            config.protocol.rounds = 0;
            let report = run_session(&config, common.seed).map_err(|e| e.to_string())?;
            write_log(log.as_deref(), &report)?;
            match (&report.master_crt, report.lockstep()) {
                (Some(crt), true) => {
                    println!("enrolled: {} cells, tables identical", crt.len());
                    Ok(())
                }
                _ => Err(format!("enrollment failed after {} attempts", report.enroll_attempts)),
            }
        }
        Verb::Authenticate { common, rounds, log } => {
            let mut config = common.load()?;
            if let Some(r) = rounds {
                config.protocol.rounds = r;
            }
            let report = run_session(&config, common.seed).map_err(|e| e.to_string())?;
            write_log(log.as_deref(), &report)?;
            println!("{}", report.summary());
            Ok(())
        }
        Verb::Sweep {
            common,
            seeds,
            measurements,
            out,
        } => {
            let mut config = common.load()?;
            if let Some(s) = seeds {
                config.sweep.n_seeds = s;
            }
            if let Some(m) = measurements {
                config.sweep.n_measurements = m;
            }
            let points = run_reliability_sweep(
                &config.sweep,
                common.seed,
                config.protocol.n_cells,
                &config.pack,
                &config.gauge,
                &config.ducm,
            )
            .map_err(|e| e.to_string())?;
            match out {
                Some(p) => {
                    let f = fs::File::create(&p).map_err(|e| format!("cannot write {}: {e}", p.display()))?;
                    write_sweep_csv(io::BufWriter::new(f), &points)
                        .map_err(|e| format!("cannot write {}: {e}", p.display()))
                }
                None => write_sweep_csv(io::stdout().lock(), &points).map_err(|e| e.to_string()),
            }
        }
        Verb::ExportDataset { common, n, out } => {
            let config = common.load()?;
            let n = n.unwrap_or(config.dataset.n_records);
            let written = export_crseq_dataset(&config, common.seed, n, &out).map_err(|e| e.to_string())?;
            println!("wrote {written} records to {}", out.display());
            Ok(())
        }
        Verb::AttackEval {
            common,
            dataset,
            script,
            python,
            rest,
        } => {
            if !dataset.is_file() {
                return Err(format!(
                    "dataset {} not found; create it with `derauth export-dataset --out {}`",
                    dataset.display(),
                    dataset.display()
                ));
            }
            if !script.is_file() {
                return Err(format!(
                    "modeling-attack evaluator {} is not installed; pass --script to point at it",
                    script.display()
                ));
            }
            let status = Command::new(&python)
                .arg(&script)
                .arg("--dataset")
                .arg(&dataset)
                .arg("--seed")
                .arg(common.seed.to_string())
                .args(&rest)
                .status()
                .map_err(|e| format!("cannot start {python}: {e}"))?;
            if status.success() {
                Ok(())
            } else {
                Err(format!("evaluator exited with {status}"))
            }
        }
        Verb::Demo { common } => {
            let mut config = common.load()?;
            config.protocol.rounds = 5;
            config.adversary = AdversaryMode::Passive;
            let honest = run_session(&config, common.seed).map_err(|e| e.to_string())?;
            let mut out = io::stdout().lock();
            let _ = write!(out, "{}", honest.events_jsonl());
            let _ = writeln!(out, "honest: {}", honest.summary());
            config.adversary = AdversaryMode::Replay;
            let replay = run_session(&config, common.seed).map_err(|e| e.to_string())?;
            let _ = writeln!(out, "replay: {}", replay.summary());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("derauth: {e}");
            ExitCode::FAILURE
        }
    }
}
