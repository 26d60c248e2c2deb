//! Command-line surface: dataset generation, training, evaluation, single
//! image inference, and the gradient verification table. Exit codes: 0 on
//! success, 1 on usage errors, 2 on runtime failures; runtime failures are
//! reported to stderr as one JSON object per line.

use canet::data::generate_dataset;
use canet::error::{Error, Result};
use canet::gradcheck::run_suite;
use canet::metrics::evaluate_dataset;
use canet::train::{
    infer_files, load_state, predict_dataset, train_fresh, train_resume, Mode, TrainConfig,
};
use clap::{Parser, Subcommand};
use std::fs;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "canet", version, about = "Confidence-aware camouflaged object detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural camouflage dataset with a manifest.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        difficulty: f64,
    },
    /// Train on a generated dataset and write a checkpoint plus epoch log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured mode (ours|m1|m2|m3).
        #[arg(long)]
        mode: Option<String>,
        /// Continue from a checkpoint; its embedded configuration governs.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict a dataset and write the per-image metric report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run one image through the trained networks.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        conf: PathBuf,
    },
    /// Verify every operation's gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::Parse(_) => "parse",
        Error::Checkpoint(_) => "checkpoint",
        Error::Config(_) => "config",
        Error::Data(_) => "data",
        Error::Train(_) => "train",
    }
}

fn run(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Generate { out, count, size, seed, difficulty } => {
            generate_dataset(&out, count, size, seed, difficulty)?;
            println!("wrote {count} samples to {}", out.display());
            Ok(0)
        }
        Cmd::Train { data, config, out, mode, resume } => {
            if let Some(ckpt) = resume {
                if config.is_some() || mode.is_some() {
                    return Err(Error::Config(
                        "--resume uses the checkpoint's embedded configuration; \
                         --config and --mode cannot be combined with it"
                            .to_string(),
                    ));
                }
                let (st, rows) = train_resume::<f32>(&ckpt, &data, &out)?;
                println!(
                    "resumed to epoch {} ({} new), checkpoint at {}",
                    st.epoch,
                    rows.len(),
                    out.display()
                );
            } else {
                let mut cfg = match config {
                    Some(path) => {
                        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                        serde_json::from_str::<TrainConfig>(&text)
                            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
                    }
                    None => TrainConfig::default(),
                };
                if let Some(m) = mode {
                    cfg.mode = m.parse::<Mode>()?;
                }
                let (st, _) = train_fresh::<f32>(cfg, &data, &out)?;
                println!("trained {} epochs, checkpoint at {}", st.epoch, out.display());
            }
            Ok(0)
        }
        Cmd::Eval { ckpt, data, report } => {
            let mut st = load_state::<f32>(&ckpt)?;
            let pred_dir = PathBuf::from(format!("{}.preds", report.display()));
            predict_dataset(&mut st, &data, &pred_dir)?;
            let rep = evaluate_dataset(&pred_dir, &data)?;
            fs::write(&report, rep.to_csv()).map_err(|e| Error::io(&report, e))?;
            let a = &rep.aggregate;
            println!(
                "{} images: mae {:.4} mean_f {:.4} mean_e {:.4} s_measure {:.4}",
                rep.rows.len(),
                a.mae,
                a.mean_f,
                a.mean_e,
                a.s_measure
            );
            println!("report at {}", report.display());
            Ok(0)
        }
        Cmd::Infer { ckpt, image, pred, conf } => {
            infer_files::<f32>(&ckpt, &image, &pred, &conf)?;
            println!("wrote {} and {}", pred.display(), conf.display());
            Ok(0)
        }
        Cmd::Gradcheck { tol } => {
            let results = run_suite();
            let mut failed = 0;
            println!("{:<22} {:>12}  status", "operation", "max_rel_err");
            for r in &results {
                let ok = r.max_rel_err < tol;
                if !ok {
                    failed += 1;
                }
                println!(
                    "{:<22} {:>12.3e}  {}",
                    r.name,
                    r.max_rel_err,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            if failed > 0 {
                return Err(Error::Train(format!(
                    "{failed} of {} gradient checks exceeded tolerance {tol}",
                    results.len()
                )));
            }
            Ok(0)
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            std::process::exit(1);
        }
    };
    match run(cli.cmd) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "kind": error_kind(&e) })
            );
            std::process::exit(2);
        }
    }
}
