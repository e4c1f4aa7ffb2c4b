use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use wdlab::harness::{self, GridSpec};
use wdlab::plot::{self, PlotKind};
use wdlab::{precision, salab};

/// Weight-decay laboratory.
#[derive(Parser)]
#[command(name = "wdlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config and write a run directory.
    Run {
        config: PathBuf,
        /// Output directory (default: runs/<config stem>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid of configs and write a CSV table.
    Sweep {
        config: PathBuf,
        /// `lr=0.1,0.2;lambda_wd=0,0.1;precision=full,bf16;seed=0,1`, a JSON object, or a file holding either.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Fine-tune every snapshot of a run directory and measure the trace.
    Finetune {
        run_dir: PathBuf,
        /// Overrides `finetune.steps` of the run config.
        #[arg(long)]
        steps: Option<usize>,
        /// Overrides `finetune.lr` of the run config.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Exact and sampled risk curves on a quadratic.
    SaLab {
        config: PathBuf,
        #[arg(long, default_value = "sa-lab")]
        out: PathBuf,
    },
    /// Print the bf16/fp16 conformance table.
    Bf16Check,
    /// Draw an SVG chart.
    Plot {
        input: PathBuf,
        #[arg(long)]
        kind: PlotKind,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit status of a run that ended on the divergence detector.
struct Diverged;

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("run diverged")
    }
}

impl std::fmt::Debug for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Display::fmt(self, f)
    }
}

impl std::error::Error for Diverged {}

fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Run { config, out } => {
            let cfg = harness::parse_config(&read(&config)?)?;
            let out = out.unwrap_or_else(|| {
                let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
                Path::new("runs").join(stem)
            });
            let record = harness::run(&cfg)?;
            harness::write_run_dir(&out, &cfg, &record)?;
            let s = &record.summary;
            println!(
                "{} steps, train loss {:.6}, test metric {:.4}, |w| {:.4} -> {}",
                s.steps_completed,
                s.final_train_loss,
                s.final_test_metric,
                s.final_param_norm,
                out.display()
            );
            if s.diverged {
                eprintln!("diverged at step {}", s.divergence_onset.unwrap_or(s.steps_completed));
                return Err(Diverged.into());
            }
        }
        Command::Sweep { config, grid, out } => {
            let cfg = harness::parse_config(&read(&config)?)?;
            let grid_text = if Path::new(&grid).is_file() { read(Path::new(&grid))? } else { grid };
            let grid = GridSpec::parse(&grid_text)?;
            let rows = harness::sweep(&cfg, &grid)?;
            let table = harness::sweep_csv(&rows);
            std::fs::write(&out, &table).with_context(|| format!("writing {}", out.display()))?;
            print!("{table}");
        }
        Command::Finetune { run_dir, steps, lr } => {
            let cfg = harness::parse_config(&read(&run_dir.join("config.json"))?)?;
            let defaults = cfg.finetune;
            let (Some(steps), Some(lr)) = (steps.or(defaults.map(|f| f.steps)), lr.or(defaults.map(|f| f.lr))) else {
                bail!(wdlab::Error::Config("no finetune section in the config; pass --steps and --lr".into()));
            };
            let snapshots = harness::read_snapshots(&run_dir)?;
            let report = harness::finetune_along_trajectory(&cfg, &snapshots, steps, lr)?;
            std::fs::write(run_dir.join("finetune.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            println!("step,train_loss,test_metric,trace,trace_stderr");
            for r in &report.rows {
                println!("{},{:?},{:?},{:?},{:?}", r.step, r.train_loss, r.test_metric, r.trace.value, r.trace.stderr);
            }
            if let Some(rho) = report.trace_step_spearman {
                println!("spearman(step, trace) = {rho:.4}");
            }
        }
        Command::SaLab { config, out } => {
            let cfg = salab::parse_sa_config(&read(&config)?)?;
            let output = salab::run_sa_lab(&cfg, &out)?;
            let last = output.exact.steps.len() - 1;
            println!(
                "exact risk after {} steps: {:.6e} (bias {:.3e}, variance {:.3e}) -> {}",
                output.exact.steps[last],
                output.exact.expected_error[last],
                output.exact.bias_part[last],
                output.exact.variance_part[last],
                out.join("risk.csv").display()
            );
            if let Some(e) = &output.empirical {
                println!("sampled: {:.6e} +- {:.2e} over {} replicas", e.mean[last], e.stderr[last], e.replicas);
            }
            if let Some(r) = &output.equivalence {
                println!(
                    "{}\nterminal risk a={:.6e} b={:.6e} c={:.6e}; applies={} holds={}",
                    r.note, r.terminal_a, r.terminal_b, r.terminal_c, r.contract_applies, r.contract_holds
                );
            }
        }
        Command::Bf16Check => {
            let checks = precision::conformance_checks();
            let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
            let mut failed = 0;
            for c in &checks {
                let status = if c.pass { "ok" } else { "FAIL" };
                println!("{status:4}  {:width$}  expected {}  got {}", c.name, c.expected, c.got);
                failed += usize::from(!c.pass);
            }
            if failed > 0 {
                bail!("{failed} conformance checks failed");
            }
        }
        Command::Plot { input, kind, out } => {
            plot::plot(&input, kind, &out)?;
            println!("{} -> {}", kind.name(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.is::<Diverged>() {
                return ExitCode::from(3);
            }
            eprintln!("error: {e:#}");
            match e.downcast_ref::<wdlab::Error>() {
                Some(wdlab::Error::Config(_) | wdlab::Error::Json(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
