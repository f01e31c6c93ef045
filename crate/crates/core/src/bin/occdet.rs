use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use occdet::gradsuite;
use occdet::pipeline::eval::{evaluate, load_scene_set, predict, query_points};
use occdet::pipeline::render::write_renders;
use occdet::pipeline::{load_checkpoint, prepare, train, training_scenes, PipelineConfig};
use occdet::numcore::Rng;
use occdet::synth::{load_scene, save_scene};
use occdet::Error;

#[derive(Parser)]
#[command(name = "occdet", version, about = "Synthetic multi-camera occupancy and detection pipeline")]
struct Cli {
    /// Overrides the seed of the loaded configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a configuration document.
    Config {
        /// The small overfit configuration instead of the defaults.
        #[arg(long)]
        tiny: bool,
    },
    /// Generate the scenes a configuration trains on.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes (default: the config's train_scenes).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train from scratch; writes the log and a checkpoint under `out`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a checkpoint on a scene directory or a directory of scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        /// Where to write the report JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every differentiable operation.
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = gradsuite::DEFAULT_SEEDS)]
        seeds: u64,
    },
    /// Write PPM/PGM renders of one scene's predictions.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> occdet::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> occdet::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> occdet::Result<bool> {
    match cli.command {
        Command::Config { tiny } => {
            let mut cfg = if tiny { PipelineConfig::tiny() } else { PipelineConfig::default() };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
        Command::Synth { spec, out, count } => {
            let mut cfg = load_config(&spec, cli.seed)?;
            if let Some(n) = count {
                cfg.train_scenes = n;
            }
            cfg.validate()?;
            for (i, scene) in training_scenes(&cfg)?.iter().enumerate() {
                let dir = out.join(format!("scene_{i:03}"));
                save_scene(&dir, scene)?;
                println!("{} ({} objects)", dir.display(), scene.boxes.len());
            }
        }
        Command::Train { config, out, steps } => {
            let mut cfg = load_config(&config, cli.seed)?;
            if let Some(n) = steps {
                cfg.steps = n;
            }
            let run = train(&cfg, Some(&out))?;
            if let (Some(first), Some(last)) = (run.step_losses().next(), run.step_losses().last()) {
                println!("loss {:.4} -> {:.4} over {} steps", first.total, last.total, cfg.steps);
            }
            println!("checkpoint in {}", out.join(occdet::pipeline::train::CHECKPOINT_DIR).display());
        }
        Command::Eval { checkpoint, scenes, out } => {
            let (cfg, model, _) = load_checkpoint(&checkpoint)?;
            let set = load_scene_set(&scenes)?;
            let report = evaluate(&model, &cfg, &set)?;
            print!("{}", report.table());
            if let Some(p) = out {
                write_text(&p, &report.to_json()?)?;
            }
        }
        Command::Gradcheck { op, seeds } => {
            let results = gradsuite::run(op.as_deref(), seeds)?;
            let mut all = true;
            for r in &results {
                println!(
                    "{:<26} max rel err {:.3e}  tol {:.0e}  {}",
                    r.name,
                    r.max_rel_error,
                    r.tolerance,
                    if r.passed { "ok" } else { "FAIL" }
                );
                all &= r.passed;
            }
            return Ok(all);
        }
        Command::Render { checkpoint, scene, out } => {
            let (cfg, model, _) = load_checkpoint(&checkpoint)?;
            let p = prepare(&cfg, load_scene(&scene)?)?;
            let queries = query_points(&p.scene, cfg.eval.query_points, &mut Rng::new(cfg.seed).fork("query"));
            let pred = predict(&model, &cfg, &p, &queries)?;
            for f in write_renders(&out, &p.scene, &pred)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(true)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => 3,
        Error::Io { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
