//! Command-line front end shared by the `dfft` binary and tests.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{load_config, ModelConfig};
use crate::data::{load_coco, load_image, synth_dataset, Sample};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::flops::{compare_single_vs_multilevel, macs_model, MultilevelHead};
use crate::plot::plot_log;
use crate::train::{read_log, train, train_from, TrainOptions, TrainState};

#[derive(Parser, Debug)]
#[command(name = "dfft", version, about = "Single-level transformer object detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints plus a CSV log to --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `synth`, `synth:N` or `coco:IMAGES_DIR,ANNOTATIONS_JSON`.
        #[arg(long, default_value = "synth")]
        data: String,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint; its config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
        /// Seed of the synthetic dataset.
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        /// Run single-threaded for bit-reproducible output.
        #[arg(long)]
        deterministic: bool,
    },
    /// Report COCO-style AP of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "synth")]
        data: String,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        #[arg(long)]
        deterministic: bool,
    },
    /// Detect objects in one image; writes JSON lines.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic MAC counts for a configuration.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 256)]
        height: usize,
    },
    /// Plot a training log as SVG.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns 0 on success, 2 on usage errors and 1 on runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn single_threaded() {
    // only the first call in a process can configure the global pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
}

fn load_data(spec: &str, cfg: &ModelConfig, seed: u64) -> Result<Vec<Sample>> {
    if spec == "synth" {
        return synth_dataset(20, cfg.image_size, seed);
    }
    if let Some(n) = spec.strip_prefix("synth:") {
        let n = n
            .parse()
            .map_err(|_| Error::config(format!("--data synth:N needs a count, got {n:?}")))?;
        return synth_dataset(n, cfg.image_size, seed);
    }
    if let Some(rest) = spec.strip_prefix("coco:") {
        let (dir, ann) = rest
            .split_once(',')
            .ok_or_else(|| Error::config("--data coco:IMAGES_DIR,ANNOTATIONS_JSON"))?;
        return Ok(load_coco(dir, ann, cfg.image_size)?.samples);
    }
    Err(Error::config(format!("unknown --data source {spec:?}")))
}

#[derive(Serialize)]
struct DetectionLine<'a> {
    id: &'a str,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class: usize,
    score: f64,
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            data,
            out,
            resume,
            epochs,
            max_steps,
            data_seed,
            deterministic,
        } => {
            if deterministic {
                single_threaded();
            }
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                max_steps,
                until_epoch: epochs,
                quiet: false,
            };
            let (state, report) = match resume {
                Some(path) => {
                    if config.is_some() {
                        return Err(Error::config("--config cannot be combined with --resume"));
                    }
                    let mut state = TrainState::from_checkpoint(&Checkpoint::load(&path)?)?;
                    let samples = load_data(&data, &state.detector.cfg, data_seed)?;
                    let report = train_from(&mut state, &samples, &opts)?;
                    (state, report)
                }
                None => {
                    let cfg = match config {
                        Some(p) => load_config(p)?,
                        None => ModelConfig::default(),
                    };
                    let samples = load_data(&data, &cfg, data_seed)?;
                    train(cfg, &samples, &opts)?
                }
            };
            println!(
                "trained to epoch {} ({} steps); log and checkpoints in {}",
                state.epoch,
                state.opt.step,
                out.display()
            );
            if let Some(last) = report.logs.last() {
                println!("final mean loss {}", last.mean_loss);
            }
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            data_seed,
            deterministic,
        } => {
            if deterministic {
                single_threaded();
            }
            let state = TrainState::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let samples = load_data(&data, &state.detector.cfg, data_seed)?;
            let m = evaluate(&state.detector, &samples)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
            Ok(())
        }
        Command::Infer { ckpt, image, out } => {
            let state = TrainState::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let det = &state.detector;
            let (tensor, scale) = load_image(&image, det.cfg.image_size)?;
            let dets = det.infer(&[&tensor])?.remove(0);
            let id = file_id(&image);
            let mut f = std::io::BufWriter::new(std::fs::File::create(&out)?);
            for d in &dets {
                let line = DetectionLine {
                    id: &id,
                    bbox: d.bbox.scale(1.0 / scale).to_array(),
                    class: d.class,
                    score: d.score,
                };
                writeln!(f, "{}", serde_json::to_string(&line)?)?;
            }
            f.flush()?;
            println!("{} detections written to {}", dets.len(), out.display());
            Ok(())
        }
        Command::Flops { config, width, height } => {
            let cfg = match config {
                Some(p) => load_config(p)?,
                None => ModelConfig::default(),
            };
            let report = macs_model(&cfg, height, width)?;
            print!("{}", report.to_text());
            let cmp = compare_single_vs_multilevel(&cfg, &MultilevelHead::default(), height, width)?;
            println!(
                "single-level neck+head {} vs multi-level head {} (ratio {:.4})",
                cmp.single_macs, cmp.multilevel_macs, cmp.ratio
            );
            print!("{}", report.rows());
            Ok(())
        }
        Command::Plot { log, out } => {
            let logs = read_log(&log)?;
            plot_log(&logs, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn file_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
