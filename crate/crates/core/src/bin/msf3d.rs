use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use msf3d::error::{Error, Result};
use msf3d::io::{format_detections, format_ground_truth, ground_truth_of, parse_detections, parse_ground_truth, read_scene_dir, write_scene};
use msf3d::metrics::{evaluate, EvalConfig, MetricsReport};
use msf3d::scene::generate_scene;
use msf3d::train::{check_model_config, infer, load_model, Checkpoint, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "msf3d", version, about = "Camera and LiDAR fusion 3D detection head: training, inference and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenes (JSON + point dump) and a ground-truth file.
    Generate {
        /// Training config; its `scene` table drives generation.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes (default: `scenes` from the config).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on synthetic scenes and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path, rewritten at every `checkpoint_every` steps.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint; its stored config is used.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        /// Per-step loss breakdown as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run a checkpoint on scene files and write detections.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of scene JSON files.
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Refuse to run unless the checkpoint was trained with this config's model.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score detections against ground truth.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Also write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Add mAP by distance and size bins.
        #[arg(long)]
        bins: bool,
    },
    /// Run the gradient-check suite.
    Gradcheck,
    /// Render a JSON metrics report as a table.
    Report {
        #[arg(long)]
        metrics: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_toml(&fs::read_to_string(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ck.to_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { config, out, count } => {
            let cfg = load_config(config.as_deref())?;
            fs::create_dir_all(&out)?;
            let n = count.unwrap_or(cfg.scenes);
            let mut scenes = Vec::with_capacity(n);
            for i in 0..n {
                let s = generate_scene(&cfg.scene, cfg.scene.seed.wrapping_add(i as u64))?;
                write_scene(&out, &s)?;
                scenes.push(s);
            }
            fs::write(out.join("gt.txt"), format_ground_truth(&ground_truth_of(&scenes)))?;
            info!("wrote {n} scenes to {}", out.display());
        }
        Command::Train {
            config,
            out,
            resume,
            log,
        } => {
            let mut trainer = match resume {
                Some(p) => Trainer::resume(&read_checkpoint(&p)?)?,
                None => Trainer::new(load_config(config.as_deref())?)?,
            };
            let mut log_file = log.map(fs::File::create).transpose()?;
            let every = trainer.config.checkpoint_every;
            let total = trainer.config.run_steps();
            info!(
                "training {} parameters for {total} steps",
                trainer.detector.store.num_scalars()
            );
            trainer.run(|t, l| {
                if let Some(f) = log_file.as_mut() {
                    writeln!(f, "{}", serde_json::to_string(l).expect("log serializes"))?;
                }
                if l.step % 100 == 0 || l.step == total {
                    info!("step {}/{total} lr {:.3e} loss {:.5}", l.step, l.lr, l.loss);
                }
                if every > 0 && l.step % every == 0 {
                    write_checkpoint(&out, &t.checkpoint())?;
                }
                Ok(())
            })?;
            write_checkpoint(&out, &trainer.checkpoint())?;
        }
        Command::Infer {
            checkpoint,
            scenes,
            out,
            config,
        } => {
            let ck = read_checkpoint(&checkpoint)?;
            let (stored, detector) = load_model(&ck)?;
            if let Some(p) = config {
                check_model_config(&stored.model, &load_config(Some(&p))?.model)?;
            }
            let scenes = read_scene_dir(&scenes)?;
            let dets = infer(&detector, &scenes)?;
            fs::write(&out, format_detections(&dets))?;
            info!("wrote {} detections for {} scenes", dets.len(), scenes.len());
        }
        Command::Eval {
            detections,
            gt,
            json,
            bins,
        } => {
            let preds = parse_detections(&fs::read_to_string(&detections)?)?;
            let gts = parse_ground_truth(&fs::read_to_string(&gt)?)?;
            let cfg = if bins { EvalConfig::default().with_bins() } else { EvalConfig::default() };
            let report = evaluate(&preds, &gts, &cfg)?;
            print!("{}", report.to_table());
            if let Some(p) = json {
                fs::write(p, serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
            }
        }
        Command::Gradcheck => {
            let cases = msf3d::gradsuite::run_suite()?;
            let mut failed = Vec::new();
            for c in &cases {
                let verdict = if c.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:<20} max rel err {:.3e} (< {:.0e}) over {:>5} coords  {verdict}",
                    c.name, c.max_rel_err, c.tolerance, c.coords_checked
                );
                if !c.passed() {
                    failed.push(c.name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
        Command::Report { metrics } => {
            let report: MetricsReport = serde_json::from_str(&fs::read_to_string(&metrics)?)
                .map_err(|e| Error::Input(format!("{}: {e}", metrics.display())))?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
