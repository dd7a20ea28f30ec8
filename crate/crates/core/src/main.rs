use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use usersim::harness::{cmd_evaluate, cmd_goals, cmd_simulate, ExperimentConfig, HarnessError, SimulatorKind};
use usersim::model::RenderMode;
use usersim::world::World;

/// Like `println!` but a closed stdout (e.g. piped into `head`) is not fatal.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "usersim", version, about = "Simulate and evaluate task-oriented dialogues")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write logs to the output directory.
    Simulate {
        /// TOML experiment config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        simulator: Option<SimulatorKind>,
        #[arg(long)]
        dialogues: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        max_user_turns: Option<usize>,
        #[arg(long)]
        max_iterations: Option<u32>,
        #[arg(long, value_parser = parse_render_mode)]
        render_mode: Option<RenderMode>,
        #[arg(long)]
        omit_goal: bool,
        #[arg(long)]
        omit_history: bool,
    },
    /// Score one or more log files.
    Evaluate {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        world: Option<PathBuf>,
        /// Also write the report as JSON to this path.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print generated user goals.
    Goals {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        count: usize,
        #[arg(long)]
        world: Option<PathBuf>,
    },
}

fn parse_render_mode(s: &str) -> Result<RenderMode, String> {
    match s {
        "utterances" => Ok(RenderMode::Utterances),
        "acts" => Ok(RenderMode::Acts),
        other => Err(format!("unknown render mode {other:?} (expected utterances or acts)")),
    }
}

fn load_world(path: Option<PathBuf>) -> Result<World, HarnessError> {
    Ok(match path {
        Some(p) => World::load(&p)?,
        None => World::bundled(),
    })
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Simulate {
            config,
            simulator,
            dialogues,
            seed,
            output_dir,
            world,
            parallelism,
            max_user_turns,
            max_iterations,
            render_mode,
            omit_goal,
            omit_history,
        } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(v) = simulator {
                cfg.simulator = v;
            }
            if let Some(v) = dialogues {
                cfg.dialogues = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = output_dir {
                cfg.output_dir = v;
            }
            if world.is_some() {
                cfg.world = world;
            }
            if let Some(v) = parallelism {
                cfg.parallelism = v;
            }
            if let Some(v) = max_user_turns {
                cfg.max_user_turns = v;
            }
            if let Some(v) = max_iterations {
                cfg.loop_config.max_iterations = v;
            }
            if let Some(v) = render_mode {
                cfg.render_mode = v;
            }
            cfg.omit_goal |= omit_goal;
            cfg.omit_history |= omit_history;
            let summary = cmd_simulate(cfg)?;
            say!(
                "wrote {} dialogues ({} with errors) to {}",
                summary.dialogues,
                summary.errors,
                summary.dir.display()
            );
            say!("log digest {}", summary.log_digest);
        }
        Command::Evaluate { logs, world, json } => {
            let world = load_world(world)?;
            let report = cmd_evaluate(&logs, &world)?;
            say!("{}", report.render_table());
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&report).expect("report serializes");
                std::fs::write(&path, text + "\n").map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
            }
        }
        Command::Goals { seed, count, world } => {
            let world = load_world(world)?;
            for (s, text) in cmd_goals(&world, seed, count)? {
                say!("[seed {s}]\n{text}\n");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
