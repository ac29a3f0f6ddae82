use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use mflo_core::checkpoint;
use mflo_core::config::{EnvKind, Mode, RunConfig};
use mflo_core::controller::{Controller, RunState, Stage};
use mflo_core::oracles::{correlation_ladder, SyntheticEnv};
use mflo_core::report::{emit_report, write_summary, RunReport};
use mflo_core::Error;

const CHECKPOINT: &str = "checkpoint.bin";
/// Wall-clock times per step. Kept apart from the report files, which must
/// be byte-identical across reruns.
const TIMING: &str = "timing.csv";

#[derive(Parser)]
#[command(name = "mflo", version, about = "Multi-fidelity latent-space active learning for sequence design")]
struct Cli {
    /// Suppress per-step progress on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Overrides {
    /// TOML run configuration; keys it leaves out take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// full, no_likelihood, single_fidelity or drop_fidelity_<j>.
    #[arg(long)]
    mode: Option<Mode>,
    /// Oracle cost units available to active learning, seeding included.
    #[arg(long)]
    budget: Option<f64>,
}

impl Overrides {
    fn load(&self) -> mflo_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(b) = self.budget {
            cfg.budget.max_cost = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment, checkpointing into the output directory.
    Run {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Stop after this many active learning steps, leaving a checkpoint.
        #[arg(long, hide = true)]
        halt_after: Option<usize>,
    },
    /// Continue a run from its checkpoint.
    Resume {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, hide = true)]
        halt_after: Option<usize>,
    },
    /// Re-emit report files from a checkpoint.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every comparison mode for each seed and tabulate them together.
    Ablate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
        /// Seeds to run (comma-separated); defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Modes to run (comma-separated); defaults to the full matrix.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<Mode>,
    },
    /// Print how well each synthetic fidelity tracks the top one.
    OracleCheck {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
    },
}

fn progress(quiet: bool) -> impl FnMut(&RunState) -> mflo_core::Result<()> {
    move |s: &RunState| {
        if !quiet {
            if let Some(r) = s.records.last() {
                eprintln!(
                    "step {:>4}  level {}  fidelity {}  spent {:>8}  score {}",
                    s.step,
                    s.level,
                    r.fidelity,
                    s.ledger.spent(),
                    r.score.map_or_else(|| "failed".to_string(), |v| format!("{v:.4}")),
                );
            }
        }
        Ok(())
    }
}

fn log_time(out: &Path, s: &RunState, event: &str) -> mflo_core::Result<()> {
    let path = out.join(TIMING);
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
    if fresh {
        writeln!(f, "unix_seconds,event,step,level,spent")?;
    }
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    writeln!(f, "{now:.3},{event},{},{},{}", s.step, s.level, s.ledger.spent())?;
    Ok(())
}

/// Drives `c` to completion (or `halt_after`), checkpointing every step.
fn drive(mut c: Controller, out: &Path, halt_after: Option<usize>, quiet: bool) -> mflo_core::Result<Option<RunReport>> {
    let ckpt = out.join(CHECKPOINT);
    checkpoint::save(c.state(), &ckpt)?;
    log_time(out, c.state(), "start")?;
    let mut log = progress(quiet);
    let finished = c.run_active(halt_after, |s| {
        log(s)?;
        log_time(out, s, "step")?;
        checkpoint::save(s, &ckpt)
    })?;
    if !finished {
        if !quiet {
            eprintln!("halted after step {}; checkpoint in {}", c.state().step, ckpt.display());
        }
        return Ok(None);
    }
    c.finish()?;
    log_time(out, c.state(), "finish")?;
    checkpoint::save(c.state(), &ckpt)?;
    emit_report(c.state(), out).map(Some)
}

fn print_summary(r: &RunReport) {
    let top: Vec<String> = r.summary.top.iter().map(|v| format!("{v:.3}")).collect();
    println!(
        "{} seed {}: {:.3} ± {:.3} (top {}) over {} finals, similarity {:.3}, spent {}",
        r.mode,
        r.seed,
        r.summary.mean,
        r.summary.sd,
        top.join(", "),
        r.summary.n,
        r.final_similarity,
        r.spent
    );
}

fn run_one(cfg: RunConfig, out: &Path, halt_after: Option<usize>, quiet: bool) -> mflo_core::Result<Option<RunReport>> {
    std::fs::create_dir_all(out)?;
    let t = Instant::now();
    let c = Controller::start(cfg)?;
    let report = drive(c, out, halt_after, quiet)?;
    if !quiet {
        eprintln!("wall time {:.1}s", t.elapsed().as_secs_f64());
    }
    Ok(report)
}

fn execute(cli: Cli) -> mflo_core::Result<()> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Run { overrides, out, halt_after } => {
            if let Some(r) = run_one(overrides.load()?, &out, halt_after, quiet)? {
                print_summary(&r);
            }
        }
        Command::Resume { out, halt_after } => {
            let state = checkpoint::load(&out.join(CHECKPOINT))?;
            let report = if state.stage == Stage::Done {
                Some(emit_report(&state, &out)?)
            } else {
                drive(Controller::resume(state)?, &out, halt_after, quiet)?
            };
            if let Some(r) = report {
                print_summary(&r);
            }
        }
        Command::Report { out } => {
            let state = checkpoint::load(&out.join(CHECKPOINT))?;
            print_summary(&emit_report(&state, &out)?);
        }
        Command::Ablate { overrides, out, seeds, modes } => {
            let base = overrides.load()?;
            let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds };
            let modes = if modes.is_empty() {
                let k = base.env.fidelities();
                let mut m = vec![Mode::Full, Mode::NoLikelihood, Mode::SingleFidelity];
                m.extend((1..k).map(Mode::DropFidelity));
                m
            } else {
                modes
            };
            let mut reports = Vec::new();
            for &seed in &seeds {
                for &mode in &modes {
                    let cfg = RunConfig { seed, mode, ..base.clone() };
                    cfg.validate()?;
                    let dir = out.join(format!("{mode}-seed{seed}"));
                    if let Some(r) = run_one(cfg, &dir, None, quiet)? {
                        print_summary(&r);
                        reports.push(r);
                    }
                }
            }
            std::fs::create_dir_all(&out)?;
            write_summary(&reports, &out.join("summary.csv"))?;
        }
        Command::OracleCheck { overrides, samples } => {
            let cfg = overrides.load()?;
            if cfg.env.kind != EnvKind::Synthetic {
                return Err(Error::config("env.kind", "oracle-check needs the synthetic environment"));
            }
            let env = SyntheticEnv::new(cfg.env.synthetic(cfg.seed))?;
            let ladder = correlation_ladder(&env, samples, cfg.seed)?;
            println!("fidelity,cost,correlation_with_top");
            for (k, r) in ladder.iter().enumerate() {
                println!("{},{},{:.4}", k + 1, cfg.env.costs[k], r);
            }
            let (x, v) = env.optimum();
            println!("# optimum {} = {v:.4}", x.render(&env.alphabet()));
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
