//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use codi_core::analytics::identity_suite;
use codi_core::harness::{run_episode, Method, Planner, RunConfig};
use codi_core::rng::seeded;

use crate::error::{Error, Result};
use crate::pipeline::{self, Layout, Needs};
use crate::{config, persist, records};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "codi", version, about = "Coordinated diffusion policies for two-arm hand-off")]
pub struct Cli {
    /// TOML run configuration; keys mirror the run config field names.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// codi, codi-indep, cg-joint, cg-product, dpmd, sdac, expo or unguided.
    #[arg(long, global = true)]
    pub method: Option<String>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Run episodes on a single worker.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate single-agent and joint demonstration sets.
    GenDemos,
    /// Train the networks the selected method needs.
    Train {
        /// Train every network regardless of the method.
        #[arg(long)]
        all: bool,
    },
    /// Fine-tune the joint policy (dpmd, sdac or expo).
    Finetune,
    /// Run a single episode and write its trace.
    Rollout {
        #[arg(long, default_value_t = 0)]
        episode: usize,
    },
    /// Evaluate the method over the configured episodes.
    Eval {
        /// Override the episode count.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run the exact identity and oracle checks.
    Verify {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Print the header of a checkpoint or dataset file.
    Inspect { path: PathBuf },
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut run = match &cli.config {
        Some(p) => config::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        run.seed = s;
    }
    if let Some(m) = &cli.method {
        run.method = m.parse::<Method>().map_err(|e| Error::Config(e.to_string()))?;
    }
    run.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(run)
}

fn save_config(run: &RunConfig, layout: &Layout) -> Result<()> {
    std::fs::create_dir_all(&layout.dir).map_err(crate::error::io_err(&layout.dir))?;
    let path = layout.config();
    std::fs::write(&path, config::to_toml(run)?).map_err(crate::error::io_err(path))
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let layout = Layout::new(&cli.out);
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(crate::error::io_err("<stdout>"));
    match &cli.command {
        Command::Inspect { path } => {
            write!(out, "{}", persist::inspect(path)?).map_err(crate::error::io_err("<stdout>"))?;
        }
        Command::Verify { instances } => {
            let run = run_config(cli)?;
            let results = identity_suite(*instances, &mut seeded(run.seed))?;
            let mut ok = true;
            for r in &results {
                ok &= r.passed;
                let verdict = if r.passed { "PASS" } else { "FAIL" };
                w(out, format!("{verdict} {:<34} {:.3e} (tolerance {:.0e})", r.name, r.measured, r.tolerance))?;
            }
            return Ok(if ok { EXIT_OK } else { EXIT_CHECK_FAILED });
        }
        Command::GenDemos => {
            let run = run_config(cli)?;
            save_config(&run, &layout)?;
            let (single, joint) = pipeline::gen_demos_stage(&run, &layout)?;
            w(out, format!("{single} single-agent records, {joint} joint records in {}", layout.dir.display()))?;
        }
        Command::Train { all } => {
            let run = run_config(cli)?;
            save_config(&run, &layout)?;
            let needs = if *all { Needs::ALL } else { Needs::of(run.method) };
            pipeline::train_stage(&run, &layout, needs)?;
            w(out, format!("trained {needs:?} into {}", layout.dir.display()))?;
        }
        Command::Finetune => {
            let run = run_config(cli)?;
            pipeline::finetune_kind(&run).map_err(|e| Error::Config(e.to_string()))?;
            pipeline::finetune_stage(&run, &layout)?;
            w(out, format!("wrote {}", layout.finetuned(run.method).display()))?;
        }
        Command::Rollout { episode } => {
            let run = run_config(cli)?;
            let artifacts = pipeline::load_artifacts(&layout, run.method)?;
            let planner = Planner::build(&run, &artifacts)?;
            let result = run_episode(&planner, &run, *episode);
            let path = layout.dir.join(format!("rollout-{}-{episode}.jsonl", pipeline::row_name(&run)));
            records::write_lines(&path, records::trace_records(*episode, &result))?;
            w(
                out,
                format!(
                    "episode {episode}: success {} in {:.1} s, min distance {:.3}, crashed {}, trace {}",
                    result.success,
                    result.completion_time,
                    result.min_goal_distance,
                    result.crashed,
                    path.display()
                ),
            )?;
            if let Some(e) = result.error {
                return Err(Error::Malformed(format!("sampler failed: {e}")));
            }
        }
        Command::Eval { episodes } => {
            let mut run = run_config(cli)?;
            if let Some(n) = episodes {
                run.episodes = *n;
            }
            run.validate().map_err(|e| Error::Config(e.to_string()))?;
            let artifacts = pipeline::load_artifacts(&layout, run.method)?;
            let (row, results) = pipeline::evaluate(&run, &artifacts, !cli.deterministic)?;
            records::write_traces(&layout.traces(&row.method), &results)?;
            records::upsert_metrics(&layout.metrics(), row.clone())?;
            w(out, serde_json::to_string(&row)?)?;
        }
    }
    Ok(EXIT_OK)
}

/// Parse `args` (including the program name), run the command and return
/// the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}
