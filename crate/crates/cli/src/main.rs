use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ttalab::harness::{self, ExperimentConfig};
use ttalab::{selftest, Error};

/// Night-time color/thermal test-time adaptation lab.
#[derive(Parser)]
#[command(name = "ttalab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON); defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set adapt.temp=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic day/night dataset.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train the three branches on day scenes.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Adapt a pretrained checkpoint on the night split.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run the ablation matrix and write one CSV per table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Checkpoint without the attention module (pretrained on the fly if absent).
        #[arg(long)]
        no_cmsa_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Cells run concurrently (overrides ablation.jobs).
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Merge adaptation runs into one JSON/CSV report.
    Report {
        /// Run directories written by `adapt`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Dump this many test scenes per run as PPM/PGM.
        #[arg(long, default_value_t = 0)]
        images: usize,
        #[arg(long)]
        force: bool,
    },
    /// Run the invariant suite.
    Selftest {
        /// Print the summary as JSON.
        #[arg(long)]
        json: bool,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_SELFTEST: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Exists(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn load(cfg: &ConfigArgs) -> Result<ExperimentConfig, u8> {
    ExperimentConfig::load(cfg.config.as_deref(), &cfg.set).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })
}

fn run(cli: Cli) -> Result<(), u8> {
    let fail = |e: Error| {
        eprintln!("error: {e}");
        exit_code(&e)
    };
    match cli.command {
        Command::Gen { cfg, out, force } => {
            let c = load(&cfg)?;
            let m = harness::cmd_gen(&c, &out, force).map_err(fail)?;
            let counts: Vec<String> = m
                .splits
                .iter()
                .map(|(s, v)| format!("{s:?}={}", v.len()))
                .collect();
            println!("wrote {} ({})", out.display(), counts.join(", "));
        }
        Command::Pretrain {
            cfg,
            dataset,
            out,
            force,
        } => {
            let c = load(&cfg)?;
            let r = harness::cmd_pretrain(&c, &dataset, &out, force).map_err(fail)?;
            println!(
                "day-val teacher mIoU {:.2}, night source-only teacher mIoU {:.2}",
                100.0 * r.day_val.miou(),
                100.0 * r.night_source_only.miou()
            );
        }
        Command::Adapt {
            cfg,
            dataset,
            checkpoint,
            out,
            force,
        } => {
            let c = load(&cfg)?;
            let r = harness::cmd_adapt(&c, &dataset, &checkpoint, &out, force).map_err(fail)?;
            let m = &r.metrics;
            println!(
                "teacher mIoU: source-only {:.2}, pre-adapt {:.2}, post-adapt {:.2} ({} steps)",
                100.0 * m.source_only.miou(),
                100.0 * m.pre_adapt.miou(),
                100.0 * m.post_adapt.miou(),
                m.steps
            );
        }
        Command::Ablate {
            cfg,
            dataset,
            checkpoint,
            no_cmsa_checkpoint,
            out,
            jobs,
            force,
        } => {
            let mut c = load(&cfg)?;
            if let Some(j) = jobs {
                if j == 0 {
                    eprintln!("error: --jobs must be >= 1");
                    return Err(EXIT_USAGE);
                }
                c.ablation.jobs = j;
            }
            let r = harness::cmd_ablate(
                &c,
                &dataset,
                &checkpoint,
                no_cmsa_checkpoint.as_deref(),
                &out,
                force,
            )
            .map_err(fail)?;
            for t in &r.tables {
                for (row, _) in &t.rows {
                    match r.row_miou(&t.name, row) {
                        Some(v) => println!("{:<13} {:<20} {:.2}", t.name, row, 100.0 * v),
                        None => println!("{:<13} {:<20} failed", t.name, row),
                    }
                }
            }
        }
        Command::Report {
            runs,
            out,
            images,
            force,
        } => {
            let r = harness::cmd_report(&runs, &out, images, force).map_err(fail)?;
            println!("merged {} runs into {}", r.runs.len(), out.display());
        }
        Command::Selftest { json } => {
            let s = selftest::run().map_err(|e| {
                eprintln!("error: {e}");
                EXIT_SELFTEST
            })?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&s).expect("summary serializes")
                );
            } else {
                print!("{}", s.render());
            }
            if !s.passed() {
                return Err(EXIT_SELFTEST);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}
