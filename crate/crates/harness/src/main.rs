use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use noticetree::Config;
use noticetree_harness::bench::run_bench;
use noticetree_harness::script::{run_script, Script};
use noticetree_harness::workload::{KeyDist, WorkloadSpec};
use noticetree_harness::HarnessError;

#[derive(Parser)]
#[command(name = "notice-tree", version, about = "Drive, check and inspect a noticetree store")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a generated workload and report counters.
    Bench {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 100_000)]
        ops: u64,
        #[arg(long, default_value_t = 0.5)]
        read_fraction: f64,
        #[arg(long, default_value_t = 10_000)]
        key_space: u64,
        #[arg(long, default_value_t = 32)]
        value_bytes: usize,
        /// `uniform` or `zipf:S`
        #[arg(long, default_value = "uniform")]
        dist: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Poison reclaimed nodes and count reads of them.
        #[arg(long)]
        poison: bool,
    },
    /// Run a scripted interleaving and compare with the oracle.
    Schedule {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        script: PathBuf,
    },
    /// Check the structure of a closed store.
    Fsck {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Delete segments that hold no current page image.
    Compact {
        #[arg(long)]
        dir: PathBuf,
    },
}

/// Outcome of a command that ran to completion.
enum Status {
    Ok,
    Violation,
}

fn fresh_dir(dir: &Path) -> anyhow::Result<()> {
    if dir.exists() && std::fs::read_dir(dir)?.next().is_some() {
        return Err(HarnessError::Usage(format!("{} is not empty", dir.display())).into());
    }
    Ok(())
}

fn existing_dir(dir: &Path) -> anyhow::Result<()> {
    if !dir.is_dir() {
        let e = std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} is not a directory", dir.display()));
        return Err(HarnessError::Io(e).into());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    match cli.cmd {
        Cmd::Bench { dir, threads, ops, read_fraction, key_space, value_bytes, dist, seed, format, poison } => {
            fresh_dir(&dir)?;
            let dist: KeyDist = dist.parse()?;
            let spec = WorkloadSpec { threads, total_ops: ops, read_fraction, key_space, value_bytes, dist, seed };
            let mut cfg = Config::new(&dir);
            cfg.poison_on_reclaim = poison;
            let report = run_bench(&spec, cfg)?;
            match format {
                Format::Json => println!("{}", report.stats.to_json()),
                Format::Csv => print!("{}", report.stats.to_csv()),
            }
            for p in &report.problems {
                eprintln!("violation: {p}");
            }
            Ok(if report.ok() { Status::Ok } else { Status::Violation })
        }
        Cmd::Schedule { dir, script } => {
            fresh_dir(&dir)?;
            let script = Script::load(&script).with_context(|| format!("loading {}", script.display()))?;
            let verdict = run_script(&script, &dir)?;
            print!("{verdict}");
            Ok(if verdict.passed { Status::Ok } else { Status::Violation })
        }
        Cmd::Fsck { dir } => {
            existing_dir(&dir)?;
            let rep = noticetree::fsck::check_dir(&dir).map_err(HarnessError::from)?;
            println!("{rep}");
            Ok(if rep.is_ok() { Status::Ok } else { Status::Violation })
        }
        Cmd::Compact { dir } => {
            existing_dir(&dir)?;
            let before = noticetree::fsck::check_dir(&dir).map_err(HarnessError::from)?;
            if !before.is_ok() {
                println!("{before}");
                bail!(HarnessError::Invariant("refusing to compact a store that fails fsck".into()));
            }
            let removed = noticetree::lss::compact_dir(&dir).map_err(HarnessError::from)?;
            println!("removed {} segment(s): {removed:?}", removed.len());
            let after = noticetree::fsck::check_dir(&dir).map_err(HarnessError::from)?;
            if !after.is_ok() {
                println!("{after}");
                return Ok(Status::Violation);
            }
            Ok(Status::Ok)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(h) = e.downcast_ref::<HarnessError>() {
        return h.exit_code() as u8;
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return 3;
    }
    if let Some(HarnessError::Io(_)) = e.root_cause().downcast_ref::<HarnessError>() {
        return 3;
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Violation) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
