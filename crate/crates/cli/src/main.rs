//! Command-line harness: data generation, teacher and student training,
//! evaluation and report comparison. Every command is deterministic under
//! `--seed`.

mod report;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dfdet_core::checkpoint;
use dfdet_core::config::ExperimentConfig;
use dfdet_core::data::{export_dataset, generate_dataset, Dataset};
use dfdet_core::metrics::{
    export_correlation, full_report, roc_points, write_correlation_csv, write_report_csv,
    write_report_json, write_roc_csv, EvalRecord,
};
use dfdet_core::rng::derive_seed;
use dfdet_core::train::{
    evaluate_split, evaluate_teacher_split, student_validation_loss, teacher_validation_loss,
    train_student, train_teacher, VAL_FRACTION,
};
use dfdet_core::vit::HeadKind;
use report::{Report, ValLoss};

#[derive(Parser)]
#[command(name = "dfdet", about = "Hybrid vision-transformer artifact detector", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Export the synthetic dataset as images plus a manifest CSV.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the CNN teacher; writes teacher.ckpt and teacher_log.csv.
    TrainTeacher {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distillation-train the student; writes student.ckpt and student_log.csv.
    TrainStudent {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Teacher checkpoint produced by train-teacher.
        #[arg(long)]
        teacher: PathBuf,
        /// Override loss.lambda from the config.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Evaluate a checkpoint on the held-out split and emit reports.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config override; defaults to the one embedded in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Head to read: class or distill (default distill).
        #[arg(long)]
        head: Option<HeadArg>,
        /// Fake-probability threshold (default 0.55).
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Teacher checkpoint; adds the validation distillation loss to the report.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Compare two evaluation reports over the same split.
    Compare {
        #[arg(long)]
        report_a: PathBuf,
        #[arg(long)]
        report_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum HeadArg {
    Class,
    Distill,
}

impl From<HeadArg> for HeadKind {
    fn from(h: HeadArg) -> HeadKind {
        match h {
            HeadArg::Class => HeadKind::Class,
            HeadArg::Distill => HeadKind::Distill,
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.data.seed = derive_seed(cfg.seed, "data");
    cfg.validate()?;
    Ok(cfg)
}

fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    Ok(generate_dataset(&cfg.data)?)
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenerateData { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let ds = build_dataset(&cfg)?;
            std::fs::create_dir_all(&out)?;
            let manifest = export_dataset(&ds, &out)?;
            println!("wrote {} samples, manifest {}", ds.samples.len(), manifest.display());
        }
        Cmd::TrainTeacher { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let ds = build_dataset(&cfg)?;
            std::fs::create_dir_all(&out)?;
            let (teacher, log) = train_teacher(&ds, &cfg.model.backbone, &cfg.train, cfg.seed)?;
            let ckpt = out.join("teacher.ckpt");
            checkpoint::save_teacher(&ckpt, &cfg, &teacher)?;
            log.write_csv(&out.join("teacher_log.csv"))?;
            let best = log.best_row().expect("training ran at least one epoch");
            println!(
                "teacher checkpoint {} (best epoch {}, val loss {})",
                ckpt.display(),
                log.best_epoch,
                best.val.train
            );
        }
        Cmd::TrainStudent { config, seed, out, teacher, lambda } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(l) = lambda {
                cfg.loss.lambda = l;
                cfg.loss.validate()?;
            }
            if !teacher.exists() {
                bail!("teacher checkpoint {} does not exist", teacher.display());
            }
            let (teacher_model, teacher_cfg) = checkpoint::load_teacher(&teacher)?;
            if teacher_cfg.data.image_size != cfg.data.image_size || teacher_cfg.data.channels != cfg.data.channels {
                bail!(
                    "teacher was trained on {}x{} ({} ch) images, config asks for {}x{} ({} ch)",
                    teacher_cfg.data.image_size,
                    teacher_cfg.data.image_size,
                    teacher_cfg.data.channels,
                    cfg.data.image_size,
                    cfg.data.image_size,
                    cfg.data.channels
                );
            }
            let ds = build_dataset(&cfg)?;
            std::fs::create_dir_all(&out)?;
            let (student, log) = train_student(&ds, &teacher_model, &cfg.model, &cfg.loss, &cfg.train, cfg.seed)?;
            let ckpt = out.join("student.ckpt");
            checkpoint::save_student(&ckpt, &cfg, &student)?;
            log.write_csv(&out.join("student_log.csv"))?;
            let best = log.best_row().expect("training ran at least one epoch");
            println!(
                "student checkpoint {} (best epoch {}, val loss {})",
                ckpt.display(),
                log.best_epoch,
                best.val.train
            );
        }
        Cmd::Evaluate { checkpoint: ckpt_path, config, seed, head, threshold, out, teacher } => {
            evaluate_cmd(&ckpt_path, config.as_deref(), seed, head, threshold, &out, teacher.as_deref())?;
        }
        Cmd::Compare { report_a, report_b, out } => {
            let a = Report::read(&report_a)?;
            let b = Report::read(&report_b)?;
            a.check_same_split(&b)?;
            let (rows, pearson) = export_correlation(&a.predictions, &b.predictions)?;
            std::fs::create_dir_all(&out)?;
            write_correlation_csv(&rows, pearson, &out.join("correlation.csv"))?;

            let table = [
                ("log_loss", a.metrics.log_loss, b.metrics.log_loss),
                ("auc", a.metrics.auc, b.metrics.auc),
                ("f1", a.metrics.f1, b.metrics.f1),
            ];
            let mut cmp = String::from("metric,a,b,diff\n");
            println!("{:<10} {:>12} {:>12} {:>12}", "metric", "a", "b", "diff");
            for (name, va, vb) in table {
                println!("{name:<10} {va:>12.6} {vb:>12.6} {:>12.6}", va - vb);
                cmp.push_str(&format!("{name},{va},{vb},{}\n", va - vb));
            }
            cmp.push_str(&format!("pearson,{pearson},,\n"));
            std::fs::write(out.join("comparison.csv"), cmp)?;
            println!("pearson correlation: {pearson:.6}");
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate_cmd(
    ckpt_path: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    head: Option<HeadArg>,
    threshold: Option<f64>,
    out: &Path,
    teacher: Option<&Path>,
) -> Result<()> {
    let data = checkpoint::load(ckpt_path)?;
    let mut cfg = match config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::parse(&data.config_text)?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.data.seed = derive_seed(s, "data");
    }
    if let Some(t) = threshold {
        cfg.threshold = t;
    }
    if !(0.0..=1.0).contains(&cfg.threshold) {
        bail!("threshold {} outside [0,1]", cfg.threshold);
    }

    let ds = build_dataset(&cfg)?;
    let (_, val_idx) = ds.stratified_split(VAL_FRACTION);
    std::fs::create_dir_all(out)?;

    let (records, head_name): (Vec<EvalRecord>, String) = match data.role.as_str() {
        "student" => {
            let mut model = dfdet_core::vit::HybridViT::new(&cfg.model, &mut dfdet_core::rng::Rng::from_seed(0))?;
            checkpoint::load_into(&data, &mut model.params)?;
            let head: HeadKind = head.map(Into::into).unwrap_or(cfg.eval_head);
            (evaluate_split(&model, &ds, &val_idx, head)?, head.as_str().to_string())
        }
        "teacher" => {
            let mut t = dfdet_core::backbone::Teacher::new(
                &cfg.model.backbone,
                cfg.model.patch.channels,
                &mut dfdet_core::rng::Rng::from_seed(0),
            )?;
            checkpoint::load_into(&data, &mut t.params)?;
            (evaluate_teacher_split(&t, &ds, &val_idx)?, "teacher".to_string())
        }
        other => bail!("unknown checkpoint role '{other}'"),
    };

    let metrics = full_report(&records, cfg.threshold)?;
    let val_loss = match (teacher, data.role.as_str()) {
        (Some(tp), "student") => {
            let (teacher_model, _) = checkpoint::load_teacher(tp)?;
            let mut model = dfdet_core::vit::HybridViT::new(&cfg.model, &mut dfdet_core::rng::Rng::from_seed(0))?;
            checkpoint::load_into(&data, &mut model.params)?;
            let bd = student_validation_loss(&model, &teacher_model, &ds, &val_idx, &cfg.loss)?;
            Some(ValLoss { fake: bd.fake.total, real: bd.real.total, train: bd.train })
        }
        (Some(_), "teacher") => {
            let mut t = dfdet_core::backbone::Teacher::new(
                &cfg.model.backbone,
                cfg.model.patch.channels,
                &mut dfdet_core::rng::Rng::from_seed(0),
            )?;
            checkpoint::load_into(&data, &mut t.params)?;
            let bd = teacher_validation_loss(&t, &ds, &val_idx)?;
            Some(ValLoss { fake: bd.fake.total, real: bd.real.total, train: bd.train })
        }
        (None, _) => None,
        (Some(_), other) => bail!("unknown checkpoint role '{other}'"),
    };

    let report = Report {
        split_seed: cfg.data.seed,
        split_size: val_idx.len(),
        head: head_name.clone(),
        threshold: cfg.threshold,
        metrics: metrics.clone(),
        val_loss,
        predictions: records.clone(),
    };
    report.write(&out.join(format!("report_{head_name}.json")))?;
    write_report_json(&metrics, &out.join(format!("metrics_{head_name}.json")))?;
    write_report_csv(&metrics, &out.join(format!("metrics_{head_name}.csv")))?;
    write_roc_csv(&roc_points(&records)?, &out.join(format!("roc_{head_name}.csv")))?;

    println!(
        "evaluated {} samples with head {head_name}: log_loss {} auc {} f1 {} confusion tp {} fp {} tn {} fn {}",
        metrics.n,
        metrics.log_loss,
        metrics.auc,
        metrics.f1,
        metrics.confusion.tp,
        metrics.confusion.fp,
        metrics.confusion.tn,
        metrics.confusion.fn_
    );
    Ok(())
}
