//! Command-line entry point: data generation, training, evaluation and reports.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use alhp::augment::Normalizer;
use alhp::harness::checkpoint::Checkpoint;
use alhp::harness::dataset::load_manifest;
use alhp::harness::eval::evaluate;
use alhp::harness::report::write_report;
use alhp::harness::synth::{gen_data, SynthConfig};
use alhp::trainer::{self, Mode, Precision, RunState, TrainConfig};
use alhp::Real;
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "alhp", version, about = "Adversarial augmentation-policy search for place recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic place-recognition dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        places: usize,
        #[arg(long, default_value_t = 5)]
        variants: usize,
        #[arg(long, default_value_t = 96)]
        res: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a retrieval network.
    Train {
        /// key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a generation checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total generations when resuming.
        #[arg(long)]
        generations: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        recall: Vec<usize>,
        /// Positive radius; defaults to the one the checkpoint was trained with.
        #[arg(long)]
        radius: Option<f64>,
        /// Write region descriptors to this file (default: descriptors.bin next to the checkpoint).
        #[arg(long, num_args = 0..=1, default_missing_value = "")]
        dump_descriptors: Option<PathBuf>,
    },
    /// Inspect the controller.
    Policy {
        #[command(subcommand)]
        action: PolicyAction,
    },
    /// Tabulate finished runs into an ablation CSV.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PolicyAction {
    /// Print the controller's most likely policy.
    Show {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("ALHP_THREADS") {
        let n: usize = v.parse().with_context(|| format!("ALHP_THREADS={v:?} is not a count"))?;
        if n == 0 {
            bail!("ALHP_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn write_descriptors<T: Real>(path: &Path, descs: &[alhp::descriptor::RegionDescriptor<T>]) -> Result<()> {
    let dim = descs.first().map_or(0, |d| d.dim());
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "alhp-descriptors v1 dtype=f32 regions=9 dim={dim} count={}", descs.len())?;
    for (i, d) in descs.iter().enumerate() {
        w.write_all(&(i as u32).to_le_bytes())?;
        for v in d.data() {
            w.write_all(&(v.f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn eval_with<T: Real>(
    ckpt: &Checkpoint,
    data: &Path,
    ks: &[usize],
    radius: Option<f64>,
    dump: Option<PathBuf>,
) -> Result<()> {
    let run = RunState::<T>::from_checkpoint(ckpt)?;
    let ds = load_manifest(data, radius.unwrap_or(run.config.radius))?;
    let images = ds.load_images(run.config.net.resolution as u32)?;
    let (report, descs) = evaluate(&run.net, &ds, &images, &Normalizer::default(), ks)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(p) = dump {
        write_descriptors(&p, &descs)?;
        eprintln!("wrote {} descriptors to {}", descs.len(), p.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads()?;
    match Cli::parse().command {
        Command::GenData {
            out,
            places,
            variants,
            res,
            seed,
        } => {
            let ds = gen_data(
                &SynthConfig {
                    places,
                    variants,
                    resolution: res,
                    seed,
                },
                &out,
            )?;
            println!(
                "{} records ({} queries, {} database) in {}",
                ds.records.len(),
                ds.queries().len(),
                ds.database().len(),
                out.display()
            );
        }
        Command::Train {
            config,
            mode,
            seed,
            out,
            resume,
            generations,
        } => {
            if let Some(ck) = resume {
                let ckpt = Checkpoint::load(&ck)?;
                let s = trainer::resume_configured(&ckpt, generations, Some(&out))?;
                println!("{}", serde_json::to_string_pretty(&s.eval)?);
                return Ok(());
            }
            let mut cfg = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    TrainConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
                }
                None => TrainConfig::default(),
            };
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(g) = generations {
                cfg.generations = g;
            }
            let s = trainer::run_configured(cfg, Some(&out))?;
            println!("{}", serde_json::to_string_pretty(&s.eval)?);
        }
        Command::Eval {
            checkpoint,
            data,
            recall,
            radius,
            dump_descriptors,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dump = dump_descriptors.map(|p| {
                if p.as_os_str().is_empty() {
                    checkpoint.with_file_name("descriptors.bin")
                } else {
                    p
                }
            });
            match trainer::checkpoint_precision(&ckpt)? {
                Precision::F32 => eval_with::<f32>(&ckpt, &data, &recall, radius, dump)?,
                Precision::F64 => eval_with::<f64>(&ckpt, &data, &recall, radius, dump)?,
            }
        }
        Command::Policy {
            action: PolicyAction::Show { checkpoint },
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let policy = match trainer::checkpoint_precision(&ckpt)? {
                Precision::F32 => RunState::<f32>::from_checkpoint(&ckpt)?.controller.argmax_policy()?,
                Precision::F64 => RunState::<f64>::from_checkpoint(&ckpt)?.controller.argmax_policy()?,
            };
            println!("{policy}");
        }
        Command::Report { runs, out } => {
            for w in write_report(&runs, &out)? {
                eprintln!("warning: {w}");
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
