//! Teacher pre-training and student distillation training.
//!
//! Both loops share the same skeleton: class-balanced batches, SGD with
//! momentum and step decay, per-epoch validation on a held-out stratified
//! split, and best-checkpoint selection by validation loss.

pub mod loss;
pub mod sgd;

pub use loss::{bce, distillation_loss, LossBreakdown, LossConfig, TermPair};
pub use sgd::Sgd;

use std::io::Write;
use std::path::Path;

use crate::backbone::{BackboneConfig, Teacher};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::EvalRecord;
use crate::nn::Forward;
use crate::rng::Rng;
use crate::vit::{HeadKind, HeadOutputs, HybridViT, ModelConfig};

/// Fraction of the dataset held out for validation.
pub const VAL_FRACTION: f64 = 0.1;
/// Evaluation batch size for inference passes.
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub learning_rate: f64,
    /// Validate every k epochs (the final epoch always validates).
    pub validation_every: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            epochs: 25,
            batch_size: 16,
            batches_per_epoch: 27,
            learning_rate: 0.02,
            validation_every: 1,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.batch_size == 0
            || self.batches_per_epoch == 0
            || self.validation_every == 0
        {
            return Err(Error::config("training epochs, batch sizes and cadence must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        Ok(())
    }
}

/// One logged epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    /// 1-based epoch whose validation loss selected the checkpoint.
    pub best_epoch: usize,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,lr,train_fake,train_real,train_avg,val_fake,val_real,val_avg,\
             train_fake_class,train_fake_distill,train_real_class,train_real_distill,\
             val_fake_class,val_fake_distill,val_real_class,val_real_distill\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.lr,
                r.train.fake.total,
                r.train.real.total,
                r.train.train,
                r.val.fake.total,
                r.val.real.total,
                r.val.train,
                r.train.fake.class_term,
                r.train.fake.distill_term,
                r.train.real.class_term,
                r.train.real.distill_term,
                r.val.fake.class_term,
                r.val.fake.distill_term,
                r.val.real.class_term,
                r.val.real.distill_term,
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn best_row(&self) -> Option<&LogRow> {
        self.rows.iter().find(|r| r.epoch == self.best_epoch)
    }
}

fn check_finite(fwd: &Forward, loss: crate::tensor::ValueId) -> Result<()> {
    if fwd.tape.scalar_value(loss).is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite(
        fwd.tape.first_non_finite().unwrap_or_else(|| "loss".to_string()),
    ))
}

/// Class-balanced batch plan for one epoch: half of each batch is drawn
/// from the fake pool and half from the real pool, cycling through
/// per-epoch shuffles of each.
fn epoch_batches(dataset: &Dataset, train_idx: &[usize], run: &TrainRunConfig, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut fake: Vec<usize> = train_idx.iter().copied().filter(|&i| dataset.samples[i].label == 1).collect();
    let mut real: Vec<usize> = train_idx.iter().copied().filter(|&i| dataset.samples[i].label == 0).collect();
    rng.shuffle(&mut fake);
    rng.shuffle(&mut real);
    let half = run.batch_size / 2;
    let n_real = run.batch_size - half;
    let mut batches = Vec::with_capacity(run.batches_per_epoch);
    for b in 0..run.batches_per_epoch {
        let mut batch = Vec::with_capacity(run.batch_size);
        for j in 0..half {
            batch.push(fake[(b * half + j) % fake.len()]);
        }
        for j in 0..n_real {
            batch.push(real[(b * n_real + j) % real.len()]);
        }
        batches.push(batch);
    }
    batches
}

/// Plain hard-label training loss: Eq. form with the distill term weighted
/// to zero, keeping the per-class averaging.
fn hard_label_loss(
    fwd: &mut Forward,
    logit: crate::tensor::ValueId,
    labels: &[f64],
) -> Result<(crate::tensor::ValueId, LossBreakdown)> {
    let heads = HeadOutputs { class_logit: logit, distill_logit: logit };
    let zeros = vec![0.0; labels.len()];
    distillation_loss(fwd, &LossConfig { lambda: 1.0 }, &heads, labels, &zeros)
}

/// Combine per-class BCE sums into the training-loss breakdown.
fn breakdown_from_sums(cfg: &LossConfig, sums: &ClassSums) -> LossBreakdown {
    let pair = |class_sum: f64, distill_sum: f64, n: usize| -> TermPair {
        let class_term = cfg.lambda * class_sum / n as f64;
        let distill_term = (1.0 - cfg.lambda) * distill_sum / n as f64;
        TermPair { class_term, distill_term, total: class_term + distill_term }
    };
    match (sums.n_fake, sums.n_real) {
        (0, 0) => LossBreakdown::default(),
        (_, 0) => {
            let fake = pair(sums.fake_class, sums.fake_distill, sums.n_fake);
            LossBreakdown { fake, real: TermPair::default(), train: fake.total }
        }
        (0, _) => {
            let real = pair(sums.real_class, sums.real_distill, sums.n_real);
            LossBreakdown { fake: TermPair::default(), real, train: real.total }
        }
        _ => {
            let fake = pair(sums.fake_class, sums.fake_distill, sums.n_fake);
            let real = pair(sums.real_class, sums.real_distill, sums.n_real);
            LossBreakdown { fake, real, train: (fake.total + real.total) / 2.0 }
        }
    }
}

#[derive(Default)]
struct ClassSums {
    fake_class: f64,
    fake_distill: f64,
    real_class: f64,
    real_distill: f64,
    n_fake: usize,
    n_real: usize,
}

impl ClassSums {
    fn push(&mut self, label: f64, class_bce: f64, distill_bce: f64) {
        if label == 1.0 {
            self.fake_class += class_bce;
            self.fake_distill += distill_bce;
            self.n_fake += 1;
        } else {
            self.real_class += class_bce;
            self.real_distill += distill_bce;
            self.n_real += 1;
        }
    }
}

/// Hard-label loss of a teacher over a sample index set, evaluated in
/// fixed-size chunks.
pub fn teacher_validation_loss(teacher: &Teacher, dataset: &Dataset, idx: &[usize]) -> Result<LossBreakdown> {
    let mut sums = ClassSums::default();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (images, shape, labels) = dataset.batch(chunk);
        let logits = teacher.predict_logits(images, shape)?;
        for (&logit, &label) in logits.iter().zip(&labels) {
            sums.push(label, bce(logit, label)?, 0.0);
        }
    }
    Ok(breakdown_from_sums(&LossConfig { lambda: 1.0 }, &sums))
}

/// Distillation loss of a student over a sample index set, evaluated in
/// fixed-size chunks. Matches the in-training loss formula exactly.
pub fn student_validation_loss(
    model: &HybridViT,
    teacher: &Teacher,
    dataset: &Dataset,
    idx: &[usize],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut sums = ClassSums::default();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (images, shape, labels) = dataset.batch(chunk);
        let teacher_logits = teacher.predict_logits(images.clone(), shape.clone())?;
        let (class_logits, distill_logits) = model.predict_logits(images, shape)?;
        for i in 0..labels.len() {
            let class_bce = bce(class_logits[i], labels[i])?;
            let distill_bce = bce(distill_logits[i], loss::sigmoid(teacher_logits[i]))?;
            sums.push(labels[i], class_bce, distill_bce);
        }
    }
    Ok(breakdown_from_sums(cfg, &sums))
}

/// Train the teacher CNN with BCE on hard labels. Returns the teacher with
/// its best-validation-loss weights restored, plus the full epoch log.
pub fn train_teacher(
    dataset: &Dataset,
    backbone: &BackboneConfig,
    run: &TrainRunConfig,
    seed: u64,
) -> Result<(Teacher, TrainingLog)> {
    run.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::contract("teacher training on an empty dataset"));
    }
    let (train_idx, val_idx) = dataset.stratified_split(VAL_FRACTION);
    let root = Rng::from_seed(seed);
    let mut teacher = Teacher::new(backbone, dataset.cfg.channels, &mut root.stream("teacher-init"))?;
    let mut opt = Sgd::new(run.learning_rate, run.epochs);
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut last_val = LossBreakdown::default();

    for epoch in 0..run.epochs {
        opt.begin_epoch(epoch);
        let mut batch_rng = root.stream("teacher-batches").child(epoch as u64);
        let mut parts = Vec::with_capacity(run.batches_per_epoch);
        for batch in epoch_batches(dataset, &train_idx, run, &mut batch_rng) {
            let (images, shape, labels) = dataset.batch(&batch);
            let mut fwd = Forward::tracked();
            let x = fwd.input(images, shape)?;
            let logit = teacher.logit(&mut fwd, x)?;
            let (loss_id, bd) = hard_label_loss(&mut fwd, logit, &labels)?;
            check_finite(&fwd, loss_id)?;
            fwd.backward(loss_id, &mut teacher.params)?;
            opt.step(&mut teacher.params)?;
            parts.push(bd);
        }
        let train_bd = LossBreakdown::mean(&parts);

        let validate = (epoch + 1) % run.validation_every == 0 || epoch + 1 == run.epochs;
        if validate {
            last_val = teacher_validation_loss(&teacher, dataset, &val_idx)?;
            let better = best.as_ref().map_or(true, |(b, _)| last_val.train < *b);
            if better {
                best = Some((last_val.train, teacher.params.snapshot()));
                log.best_epoch = epoch + 1;
            }
        }
        log.rows.push(LogRow { epoch: epoch + 1, lr: opt.lr, train: train_bd, val: last_val });
    }
    if let Some((_, snap)) = best {
        teacher.params.restore(&snap)?;
    }
    Ok((teacher, log))
}

/// Distillation-train a student against a frozen teacher. The teacher is
/// only ever run in inference mode; its parameters are never touched.
pub fn train_student(
    dataset: &Dataset,
    teacher: &Teacher,
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    run: &TrainRunConfig,
    seed: u64,
) -> Result<(HybridViT, TrainingLog)> {
    run.validate()?;
    loss_cfg.validate()?;
    let p = &model_cfg.patch;
    if p.image_h != dataset.cfg.image_size || p.image_w != dataset.cfg.image_size || p.channels != dataset.cfg.channels
    {
        return Err(Error::config(format!(
            "model expects {}x{}x{} images but the dataset provides {}x{}x{}",
            p.channels, p.image_h, p.image_w, dataset.cfg.channels, dataset.cfg.image_size, dataset.cfg.image_size
        )));
    }
    let (train_idx, val_idx) = dataset.stratified_split(VAL_FRACTION);
    let root = Rng::from_seed(seed);
    let mut model = HybridViT::new(model_cfg, &mut root.stream("student-init"))?;
    let mut opt = Sgd::new(run.learning_rate, run.epochs);
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut last_val = LossBreakdown::default();

    for epoch in 0..run.epochs {
        opt.begin_epoch(epoch);
        let mut batch_rng = root.stream("student-batches").child(epoch as u64);
        let mut parts = Vec::with_capacity(run.batches_per_epoch);
        for batch in epoch_batches(dataset, &train_idx, run, &mut batch_rng) {
            let (images, shape, labels) = dataset.batch(&batch);
            let teacher_logits = teacher.predict_logits(images.clone(), shape.clone())?;
            let mut fwd = Forward::tracked();
            let x = fwd.input(images, shape)?;
            let heads = model.forward(&mut fwd, x)?;
            let (loss_id, bd) = distillation_loss(&mut fwd, loss_cfg, &heads, &labels, &teacher_logits)?;
            check_finite(&fwd, loss_id)?;
            fwd.backward(loss_id, &mut model.params)?;
            opt.step(&mut model.params)?;
            parts.push(bd);
        }
        let train_bd = LossBreakdown::mean(&parts);

        let validate = (epoch + 1) % run.validation_every == 0 || epoch + 1 == run.epochs;
        if validate {
            last_val = student_validation_loss(&model, teacher, dataset, &val_idx, loss_cfg)?;
            let better = best.as_ref().map_or(true, |(b, _)| last_val.train < *b);
            if better {
                best = Some((last_val.train, model.params.snapshot()));
                log.best_epoch = epoch + 1;
            }
        }
        log.rows.push(LogRow { epoch: epoch + 1, lr: opt.lr, train: train_bd, val: last_val });
    }
    if let Some((_, snap)) = best {
        model.params.restore(&snap)?;
    }
    Ok((model, log))
}

/// Predict fake probabilities for a sample index set with one model head;
/// record ids are the sample seeds.
pub fn evaluate_split(
    model: &HybridViT,
    dataset: &Dataset,
    idx: &[usize],
    head: HeadKind,
) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (images, shape, _) = dataset.batch(chunk);
        let probs = model.predict_probability(images, shape, head)?;
        for (&i, &p) in chunk.iter().zip(&probs) {
            records.push(EvalRecord::new(dataset.samples[i].seed, dataset.samples[i].label, p, head)?);
        }
    }
    Ok(records)
}

/// Teacher predictions over a sample index set, tagged with head "teacher".
pub fn evaluate_teacher_split(teacher: &Teacher, dataset: &Dataset, idx: &[usize]) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (images, shape, _) = dataset.batch(chunk);
        let logits = teacher.predict_logits(images, shape)?;
        for (&i, &l) in chunk.iter().zip(&logits) {
            records.push(EvalRecord::with_head_name(
                dataset.samples[i].seed,
                dataset.samples[i].label,
                loss::sigmoid(l),
                "teacher",
            )?);
        }
    }
    Ok(records)
}
