// Scratch timing/quality probe for the default desk-scale recipe.
// Usage: calibrate <epochs> [lr] [min_strength] [teacher_only] [lambda]

use std::time::Instant;

use dfdet_core::config::ExperimentConfig;
use dfdet_core::data::generate_dataset;
use dfdet_core::metrics::roc_auc;
use dfdet_core::rng::derive_seed;
use dfdet_core::train::{
    evaluate_split, evaluate_teacher_split, train_student, train_teacher, VAL_FRACTION,
};
use dfdet_core::vit::HeadKind;

fn main() {
    let mut cfg = ExperimentConfig::default();
    let args: Vec<String> = std::env::args().collect();
    if args.len() > 1 {
        cfg.train.epochs = args[1].parse().unwrap();
    }
    if args.len() > 2 {
        cfg.train.learning_rate = args[2].parse().unwrap();
    }
    if args.len() > 3 {
        cfg.data.min_strength = args[3].parse().unwrap();
    }
    let teacher_only = args.len() > 4 && args[4] == "1";
    if args.len() > 5 {
        cfg.loss.lambda = args[5].parse().unwrap();
    }
    cfg.data.seed = derive_seed(cfg.seed, "data");
    eprintln!(
        "epochs={} lr={} strength=[{},{}]",
        cfg.train.epochs, cfg.train.learning_rate, cfg.data.min_strength, cfg.data.max_strength
    );

    let ds = generate_dataset(&cfg.data).unwrap();
    let (_, val_idx) = ds.stratified_split(VAL_FRACTION);

    let t0 = Instant::now();
    let (teacher, tlog) = train_teacher(&ds, &cfg.model.backbone, &cfg.train, cfg.seed).unwrap();
    let trecs = evaluate_teacher_split(&teacher, &ds, &val_idx).unwrap();
    eprintln!(
        "teacher: {:.1}s best_epoch={} val_loss={:.4} AUC={:.4}",
        t0.elapsed().as_secs_f64(),
        tlog.best_epoch,
        tlog.best_row().unwrap().val.train,
        roc_auc(&trecs).unwrap()
    );
    for row in &tlog.rows {
        eprintln!("  T epoch {:2} lr {} train {:.4} val {:.4}", row.epoch, row.lr, row.train.train, row.val.train);
    }
    if teacher_only {
        return;
    }

    let t0 = Instant::now();
    let (student, slog) = train_student(&ds, &teacher, &cfg.model, &cfg.loss, &cfg.train, cfg.seed).unwrap();
    eprintln!("student: {:.1}s best_epoch={}", t0.elapsed().as_secs_f64(), slog.best_epoch);
    for row in &slog.rows {
        eprintln!("  S epoch {:2} lr {} train {:.4} val {:.4}", row.epoch, row.lr, row.train.train, row.val.train);
    }
    let d = evaluate_split(&student, &ds, &val_idx, HeadKind::Distill).unwrap();
    let c = evaluate_split(&student, &ds, &val_idx, HeadKind::Class).unwrap();
    eprintln!("student distill AUC={:.4} class AUC={:.4}", roc_auc(&d).unwrap(), roc_auc(&c).unwrap());
}
