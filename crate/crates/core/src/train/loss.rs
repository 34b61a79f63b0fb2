//! Distillation training loss.
//!
//! The batch is partitioned by label into fake and real subsets. Each subset
//! combines a hard-label BCE on the class head with a soft-target BCE on the
//! distillation head against the sigmoided teacher logits:
//!
//!   L_subset = lambda * BCE(class logits, labels)
//!            + (1 - lambda) * BCE(distill logits, sigmoid(teacher logits))
//!
//! and the batch loss averages the two subsets: L = (L_fake + L_real) / 2.
//! A batch holding a single class uses that subset's loss alone.

use crate::error::{Error, Result};
use crate::nn::Forward;
use crate::tensor::ValueId;
use crate::vit::HeadOutputs;

/// Probability clamp applied before every log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the class-head term; the distill term gets 1 - lambda.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda {} outside [0,1]", self.lambda)));
        }
        Ok(())
    }
}

/// Weighted loss terms of one class subset.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TermPair {
    /// lambda * mean BCE(class logits, labels)
    pub class_term: f64,
    /// (1 - lambda) * mean BCE(distill logits, soft teacher targets)
    pub distill_term: f64,
    /// class_term + distill_term
    pub total: f64,
}

/// Per-batch loss values; `train` is the optimized scalar.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub fake: TermPair,
    pub real: TermPair,
    pub train: f64,
}

impl LossBreakdown {
    /// Field-wise mean, used for per-epoch aggregation.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for it in items {
            out.fake.class_term += it.fake.class_term / n;
            out.fake.distill_term += it.fake.distill_term / n;
            out.fake.total += it.fake.total / n;
            out.real.class_term += it.real.class_term / n;
            out.real.distill_term += it.real.distill_term / n;
            out.real.total += it.real.total / n;
            out.train += it.train / n;
        }
        out
    }
}

pub use crate::tensor::sigmoid;

/// Scalar binary cross entropy on a logit against a (possibly soft) target
/// probability, with the prediction clamped to [1e-7, 1-1e-7].
pub fn bce(prediction_logit: f64, target_probability: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&target_probability) {
        return Err(Error::contract(format!(
            "BCE target {target_probability} outside [0,1]"
        )));
    }
    let p = sigmoid(prediction_logit).clamp(PROB_EPS, 1.0 - PROB_EPS);
    Ok(-(target_probability * p.ln() + (1.0 - target_probability) * (1.0 - p).ln()))
}

/// Tape-level mean BCE of a [k,1] logit column against per-sample targets.
fn bce_mean(fwd: &mut Forward, logits: ValueId, targets: &[f64]) -> Result<ValueId> {
    for &t in targets {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::contract(format!("BCE target {t} outside [0,1]")));
        }
    }
    let k = targets.len();
    let shape = fwd.tape.shape(logits).to_vec();
    if shape != [k, 1] {
        return Err(Error::contract(format!(
            "BCE expects [{k},1] logits, got {shape:?}"
        )));
    }
    let t = fwd.tape.constant(targets.to_vec(), vec![k, 1])?;
    let one_minus_t = fwd.tape.constant(targets.iter().map(|v| 1.0 - v).collect(), vec![k, 1])?;
    let s = fwd.tape.sigmoid(logits);
    let p = fwd.tape.clamp(s, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = fwd.tape.log(p)?;
    let neg_p = fwd.tape.scale(p, -1.0);
    let one_minus_p = fwd.tape.add_scalar(neg_p, 1.0);
    let log_1p = fwd.tape.log(one_minus_p)?;
    let a = fwd.tape.mul(t, log_p)?;
    let b = fwd.tape.mul(one_minus_t, log_1p)?;
    let sum = fwd.tape.add(a, b)?;
    let neg = fwd.tape.scale(sum, -1.0);
    Ok(fwd.tape.mean_all(neg))
}

/// Per-class distillation loss over one batch. Returns the scalar loss
/// value on the tape plus the numeric breakdown.
///
/// `labels` must be 0/1 with at least one sample; `teacher_logits` must
/// match the batch length and are treated as constants.
pub fn distillation_loss(
    fwd: &mut Forward,
    cfg: &LossConfig,
    heads: &HeadOutputs,
    labels: &[f64],
    teacher_logits: &[f64],
) -> Result<(ValueId, LossBreakdown)> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(Error::contract("distillation loss of an empty batch"));
    }
    if teacher_logits.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} teacher logits for {} labels",
            teacher_logits.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::contract("labels must be exactly 0 or 1"));
    }
    let batch = labels.len();
    for (name, id) in [("class", heads.class_logit), ("distill", heads.distill_logit)] {
        let s = fwd.tape.shape(id);
        if s != [batch, 1] {
            return Err(Error::contract(format!(
                "{name} logits shape {s:?} does not match batch {batch}"
            )));
        }
    }

    let fake_idx: Vec<usize> = (0..batch).filter(|&i| labels[i] == 1.0).collect();
    let real_idx: Vec<usize> = (0..batch).filter(|&i| labels[i] == 0.0).collect();

    let subset = |fwd: &mut Forward, idx: &[usize]| -> Result<(ValueId, TermPair)> {
        let hard: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
        let soft: Vec<f64> = idx.iter().map(|&i| sigmoid(teacher_logits[i])).collect();
        let cls = fwd.tape.select_rows(heads.class_logit, idx)?;
        let dst = fwd.tape.select_rows(heads.distill_logit, idx)?;
        let class_bce = bce_mean(fwd, cls, &hard)?;
        let distill_bce = bce_mean(fwd, dst, &soft)?;
        let class_term = fwd.tape.scale(class_bce, cfg.lambda);
        let distill_term = fwd.tape.scale(distill_bce, 1.0 - cfg.lambda);
        let total = fwd.tape.add(class_term, distill_term)?;
        let pair = TermPair {
            class_term: fwd.tape.scalar_value(class_term),
            distill_term: fwd.tape.scalar_value(distill_term),
            total: fwd.tape.scalar_value(total),
        };
        Ok((total, pair))
    };

    let fake = if fake_idx.is_empty() { None } else { Some(subset(fwd, &fake_idx)?) };
    let real = if real_idx.is_empty() { None } else { Some(subset(fwd, &real_idx)?) };

    let (loss_id, breakdown) = match (fake, real) {
        (Some((fid, fpair)), Some((rid, rpair))) => {
            let sum = fwd.tape.add(fid, rid)?;
            let avg = fwd.tape.scale(sum, 0.5);
            let b = LossBreakdown { fake: fpair, real: rpair, train: fwd.tape.scalar_value(avg) };
            (avg, b)
        }
        (Some((fid, fpair)), None) => {
            let b = LossBreakdown { fake: fpair, real: TermPair::default(), train: fpair.total };
            (fid, b)
        }
        (None, Some((rid, rpair))) => {
            let b = LossBreakdown { fake: TermPair::default(), real: rpair, train: rpair.total };
            (rid, b)
        }
        (None, None) => unreachable!("batch is non-empty"),
    };
    Ok((loss_id, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn head_leaves(fwd: &mut Forward, class: &[f64], distill: &[f64]) -> HeadOutputs {
        let b = class.len();
        HeadOutputs {
            class_logit: fwd.tape.leaf_parts(class.to_vec(), vec![b, 1], true).unwrap(),
            distill_logit: fwd.tape.leaf_parts(distill.to_vec(), vec![b, 1], true).unwrap(),
        }
    }

    #[test]
    fn bce_zero_logit_hard_target_is_ln2() {
        assert!((bce(0.0, 1.0).unwrap() - LN2).abs() < 1e-15);
    }

    #[test]
    fn bce_zero_logit_soft_half_target_is_ln2() {
        assert!((bce(0.0, 0.5).unwrap() - LN2).abs() < 1e-15);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let want = -(1.0 / (1.0 + (-2.0f64).exp())).ln();
        assert!((bce(2.0, 1.0).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_target_outside_unit_interval() {
        assert!(matches!(bce(0.0, 1.2), Err(Error::Contract(_))));
        assert!(matches!(bce(0.0, -0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn tape_bce_agrees_with_scalar_bce() {
        let logits = [1.3, -0.4, 0.0, 2.5];
        let targets = [1.0, 0.0, 0.25, 0.9];
        let mut fwd = Forward::tracked();
        let l = fwd.tape.leaf_parts(logits.to_vec(), vec![4, 1], true).unwrap();
        let mean = bce_mean(&mut fwd, l, &targets).unwrap();
        let want: f64 = logits.iter().zip(&targets).map(|(&l, &t)| bce(l, t).unwrap()).sum::<f64>() / 4.0;
        assert!((fwd.tape.scalar_value(mean) - want).abs() < 1e-12);
    }

    #[test]
    fn lambda_one_reduces_to_class_bce_and_zeroes_distill_terms() {
        let labels = [1.0, 0.0, 1.0, 0.0];
        let class = [0.7, -0.3, 1.1, 0.4];
        let distill = [2.0, -2.0, 0.5, 0.1];
        let teacher = [5.0, -3.0, 0.0, 1.0];
        let mut fwd = Forward::tracked();
        let heads = head_leaves(&mut fwd, &class, &distill);
        let cfg = LossConfig { lambda: 1.0 };
        let (_, b) = distillation_loss(&mut fwd, &cfg, &heads, &labels, &teacher).unwrap();
        assert_eq!(b.fake.distill_term, 0.0);
        assert_eq!(b.real.distill_term, 0.0);
        let fake_want = (bce(0.7, 1.0).unwrap() + bce(1.1, 1.0).unwrap()) / 2.0;
        let real_want = (bce(-0.3, 0.0).unwrap() + bce(0.4, 0.0).unwrap()) / 2.0;
        assert!((b.fake.total - fake_want).abs() < 1e-12);
        assert!((b.real.total - real_want).abs() < 1e-12);
        assert!((b.train - (fake_want + real_want) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn all_half_probabilities_give_ln2_everywhere() {
        // 2 fake + 2 real, all logits 0, teacher logits 0.
        let labels = [1.0, 1.0, 0.0, 0.0];
        let zeros = [0.0; 4];
        let mut fwd = Forward::tracked();
        let heads = head_leaves(&mut fwd, &zeros, &zeros);
        let (_, b) = distillation_loss(&mut fwd, &LossConfig::default(), &heads, &labels, &zeros).unwrap();
        assert!((b.fake.total - LN2).abs() < 1e-15);
        assert!((b.real.total - LN2).abs() < 1e-15);
        assert!((b.train - LN2).abs() < 1e-15);
    }

    #[test]
    fn four_sample_case_matches_hand_expanded_equations() {
        let labels = [1.0, 1.0, 0.0, 0.0];
        let class = [2.0, -1.0, 0.5, -0.5];
        let distill = [1.0, 0.0, -2.0, 0.3];
        let teacher = [1.5, -0.7, -1.2, 0.1];
        for lambda in [0.5, 0.3] {
            let mut fwd = Forward::tracked();
            let heads = head_leaves(&mut fwd, &class, &distill);
            let cfg = LossConfig { lambda };
            let (_, b) = distillation_loss(&mut fwd, &cfg, &heads, &labels, &teacher).unwrap();

            // Independent expansion with explicit formulas.
            let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
            let xent = |logit: f64, t: f64| {
                let p = sig(logit).clamp(1e-7, 1.0 - 1e-7);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            };
            let l_fake = lambda * (xent(class[0], 1.0) + xent(class[1], 1.0)) / 2.0
                + (1.0 - lambda) * (xent(distill[0], sig(teacher[0])) + xent(distill[1], sig(teacher[1]))) / 2.0;
            let l_real = lambda * (xent(class[2], 0.0) + xent(class[3], 0.0)) / 2.0
                + (1.0 - lambda) * (xent(distill[2], sig(teacher[2])) + xent(distill[3], sig(teacher[3]))) / 2.0;
            let l_train = (l_fake + l_real) / 2.0;
            assert!((b.fake.total - l_fake).abs() < 1e-12);
            assert!((b.real.total - l_real).abs() < 1e-12);
            assert!((b.train - l_train).abs() < 1e-12);
        }
    }

    #[test]
    fn half_lambda_is_unweighted_mean_of_terms() {
        let labels = [1.0, 0.0, 1.0];
        let class = [0.2, -0.8, 1.4];
        let distill = [-0.5, 0.9, 0.0];
        let teacher = [2.0, -2.0, 0.5];
        let mut fwd = Forward::tracked();
        let heads = head_leaves(&mut fwd, &class, &distill);
        let (_, b) = distillation_loss(&mut fwd, &LossConfig { lambda: 0.5 }, &heads, &labels, &teacher).unwrap();
        // At lambda = 1/2 the subset loss is the plain average of the raw
        // class and distill BCE means; raw terms are twice the weighted.
        for pair in [b.fake, b.real] {
            let raw_class = 2.0 * pair.class_term;
            let raw_distill = 2.0 * pair.distill_term;
            assert!((pair.total - (raw_class + raw_distill) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_class_batch_uses_subset_loss_alone() {
        let labels = [1.0, 1.0];
        let class = [0.5, 0.5];
        let distill = [0.5, 0.5];
        let teacher = [0.0, 0.0];
        let mut fwd = Forward::tracked();
        let heads = head_leaves(&mut fwd, &class, &distill);
        let (_, b) = distillation_loss(&mut fwd, &LossConfig::default(), &heads, &labels, &teacher).unwrap();
        assert_eq!(b.train, b.fake.total);
        assert_eq!(b.real, TermPair::default());
    }

    #[test]
    fn empty_batch_is_contract_error() {
        let mut fwd = Forward::tracked();
        let heads = head_leaves(&mut fwd, &[], &[]);
        let r = distillation_loss(&mut fwd, &LossConfig::default(), &heads, &[], &[]);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn equation_identity_holds_on_random_batches() {
        let mut rng = Rng::from_seed(404);
        for _ in 0..1000 {
            let n = 2 + rng.below(14);
            let mut labels: Vec<f64> = (0..n).map(|_| rng.below(2) as f64).collect();
            // Force both classes.
            labels[0] = 1.0;
            labels[1] = 0.0;
            let class: Vec<f64> = (0..n).map(|_| rng.uniform_in(-4.0, 4.0)).collect();
            let distill: Vec<f64> = (0..n).map(|_| rng.uniform_in(-4.0, 4.0)).collect();
            let teacher: Vec<f64> = (0..n).map(|_| rng.uniform_in(-4.0, 4.0)).collect();
            let mut fwd = Forward::tracked();
            let heads = head_leaves(&mut fwd, &class, &distill);
            let (_, b) = distillation_loss(&mut fwd, &LossConfig::default(), &heads, &labels, &teacher).unwrap();
            assert_eq!(b.train, (b.fake.total + b.real.total) / 2.0);
        }
    }

    #[test]
    fn invariant_under_sample_permutation() {
        let mut rng = Rng::from_seed(808);
        let n = 9;
        let labels: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let class: Vec<f64> = (0..n).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
        let distill: Vec<f64> = (0..n).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
        let teacher: Vec<f64> = (0..n).map(|_| rng.uniform_in(-3.0, 3.0)).collect();

        let run = |order: &[usize]| -> LossBreakdown {
            let l: Vec<f64> = order.iter().map(|&i| labels[i]).collect();
            let c: Vec<f64> = order.iter().map(|&i| class[i]).collect();
            let d: Vec<f64> = order.iter().map(|&i| distill[i]).collect();
            let t: Vec<f64> = order.iter().map(|&i| teacher[i]).collect();
            let mut fwd = Forward::tracked();
            let heads = head_leaves(&mut fwd, &c, &d);
            distillation_loss(&mut fwd, &LossConfig::default(), &heads, &l, &t).unwrap().1
        };
        let base = run(&(0..n).collect::<Vec<_>>());
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let shuffled = run(&order);
        assert!((base.train - shuffled.train).abs() < 1e-12);
        assert!((base.fake.total - shuffled.fake.total).abs() < 1e-12);
        assert!((base.real.total - shuffled.real.total).abs() < 1e-12);
    }

    #[test]
    fn lambda_outside_unit_interval_is_config_error() {
        assert!(LossConfig { lambda: 1.5 }.validate().is_err());
        assert!(LossConfig { lambda: -0.1 }.validate().is_err());
    }
}
