use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use grit_core::experiment::{compare, run, ExperimentError, ExperimentPlan, RunOptions};
use grit_core::format::{load_schedule, save_corpus, save_schedule, FormatError};
use grit_core::toymodel::{CorpusSpec, SyntheticCorpus, ToyError, TrainState};
use grit_core::GritConfig;

#[derive(Parser)]
#[command(name = "grit", version, about = "Grouped mini-batch scheduling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (arm, seed) cell of a plan.
    Run {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train one cell of a plan and write the schedule used by a given epoch.
    DumpSchedule {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        arm: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        epoch: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a schedule file and print its shape.
    ShowSchedule { path: PathBuf },
    /// Per-arm medians, IQRs and deltas across finished runs.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Generate a synthetic corpus from a spec file.
    GenCorpus {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Io(_) => Failure::Runtime(e.to_string()),
            other => Failure::Validation(other.to_string()),
        }
    }
}

impl From<ToyError> for Failure {
    fn from(e: ToyError) -> Self {
        match e {
            ToyError::SpecInfeasible(_) | ToyError::ScheduleMismatch(_) => Failure::Validation(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load_plan(path: &Path) -> Result<ExperimentPlan, Failure> {
    let mut plan = ExperimentPlan::load(path)?;
    plan.apply_env()?;
    Ok(plan)
}

fn dump_schedule(plan: &Path, arm: &str, seed: u64, epoch: u32, out: &Path) -> Result<(), Failure> {
    let plan = load_plan(plan)?;
    let arms = plan.resolve()?;
    let arm = arms
        .iter()
        .find(|a| a.name == arm)
        .ok_or_else(|| Failure::Validation(format!("no arm named {arm:?}")))?;
    let cell_seed = plan.cell_seed(seed);
    let corpus = SyntheticCorpus::from_spec(&CorpusSpec { seed: cell_seed, ..plan.corpus.clone() })?;
    let cfg = GritConfig { master_seed: cell_seed, ..(*arm.config).clone() }
        .validate()
        .map_err(|e| Failure::Validation(e.to_string()))?;
    let mut state = TrainState::new(&corpus, cfg, arm.train.clone())?;
    if let Some(p) = &plan.initial_schedule {
        state.set_next_schedule(load_schedule(p)?);
    }
    loop {
        let done = state.run_epoch()?;
        if done.schedule.epoch == epoch || state.epoch() > epoch {
            save_schedule(&done.schedule, out)?;
            println!("wrote epoch {} schedule ({} examples) to {}", epoch, done.schedule.dataset_size(), out.display());
            return Ok(());
        }
    }
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { plan, out, jobs } => {
            let plan = load_plan(&plan)?;
            let cells = run(&plan, &out, RunOptions { jobs })?;
            println!("{} cells complete in {}", cells.len(), out.display());
            print!("{}", compare(&[out])?.to_text());
        }
        Command::DumpSchedule { plan, arm, seed, epoch, out } => dump_schedule(&plan, &arm, seed, epoch, &out)?,
        Command::ShowSchedule { path } => {
            let s = load_schedule(&path)?;
            println!("examples   {}", s.dataset_size());
            println!("batch size {}", s.batch_size);
            println!("batches    {}", s.num_batches());
            if let Some(b) = s.batches.first() {
                let ids: Vec<String> = b.iter().map(|i| i.to_string()).collect();
                println!("first      [{}]", ids.join(", "));
            }
        }
        Command::Compare { dirs, csv } => {
            let table = compare(&dirs)?;
            print!("{}", table.to_text());
            if let Some(path) = csv {
                std::fs::write(&path, table.to_csv()).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            }
        }
        Command::GenCorpus { spec, out } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Failure::Runtime(format!("{}: {e}", spec.display())))?;
            let spec: CorpusSpec = serde_json::from_str(&text).map_err(|e| Failure::Validation(e.to_string()))?;
            let corpus = SyntheticCorpus::from_spec(&spec)?;
            save_corpus(&corpus, &out)?;
            println!("wrote {} examples ({} held out) to {}", corpus.total(), spec.eval_size, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
