//! Binary-classification measurements: log loss, ROC-AUC, confusion matrix
//! with f1 at a threshold, ROC curve points and prediction-correlation
//! export.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::HeadKind;

pub const PROB_CLAMP: f64 = 1e-7;
pub const DEFAULT_THRESHOLD: f64 = 0.55;

/// One evaluated sample: ground truth and predicted fake probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: u64,
    /// 1 = fake, 0 = real.
    pub label: u8,
    /// Predicted probability of fake, in [0,1].
    pub prob: f64,
    /// Which head produced the probability.
    pub head: String,
}

impl EvalRecord {
    pub fn new(id: u64, label: u8, prob: f64, head: HeadKind) -> Result<Self> {
        Self::with_head_name(id, label, prob, head.as_str())
    }

    pub fn with_head_name(id: u64, label: u8, prob: f64, head: impl Into<String>) -> Result<Self> {
        if label > 1 {
            return Err(Error::contract(format!("label {label} is not binary")));
        }
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::contract(format!("probability {prob} outside [0,1]")));
        }
        Ok(EvalRecord { id, label, prob, head: head.into() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    /// f1 with fake as the positive class, reported x100.
    pub f1: f64,
    /// True when TP+FP+FN = 0 and f1 is defined as 0 by convention.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub threshold: f64,
    pub log_loss: f64,
    pub auc: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

/// Mean binary cross entropy of predicted fake probabilities against
/// labels, with probabilities clamped to [1e-7, 1-1e-7].
pub fn log_loss(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::contract("log_loss of zero records"));
    }
    let mut total = 0.0;
    for r in records {
        let p = r.prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total -= if r.label == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / records.len() as f64)
}

/// Mann-Whitney AUC: fraction of (fake, real) pairs where the fake sample
/// scores strictly higher, ties counted half. Computed with midranks;
/// identical to exhaustive pair counting.
pub fn roc_auc(records: &[EvalRecord]) -> Result<f64> {
    let n_pos = records.iter().filter(|r| r.label == 1).count();
    let n_neg = records.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ROC-AUC needs both classes, got {n_pos} fake / {n_neg} real"
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].prob.partial_cmp(&records[b].prob).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && records[order[j + 1]].prob == records[order[i]].prob {
            j += 1;
        }
        // Midrank of the tie group, 1-based.
        let midrank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if records[k].label == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Confusion counts and f1 at a threshold; predicted fake iff prob >= t.
pub fn confusion_and_f1(records: &[EvalRecord], threshold: f64) -> Result<Confusion> {
    if records.is_empty() {
        return Err(Error::contract("confusion matrix of zero records"));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0, 0, 0);
    for r in records {
        let fake = r.prob >= threshold;
        match (r.label == 1, fake) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    let degenerate = 2 * tp + fp + fn_ == 0;
    let f1 = if degenerate {
        0.0
    } else {
        100.0 * 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    Ok(Confusion { tp, fp, tn, fn_, f1, degenerate })
}

/// All metrics at once.
pub fn full_report(records: &[EvalRecord], threshold: f64) -> Result<MetricsReport> {
    let confusion = confusion_and_f1(records, threshold)?;
    Ok(MetricsReport {
        n: records.len(),
        threshold,
        log_loss: log_loss(records)?,
        auc: roc_auc(records)?,
        f1: confusion.f1,
        confusion,
    })
}

/// ROC curve points (threshold, fpr, tpr), one per distinct score, swept
/// from predicting nothing fake to predicting everything fake.
pub fn roc_points(records: &[EvalRecord]) -> Result<Vec<(f64, f64, f64)>> {
    let n_pos = records.iter().filter(|r| r.label == 1).count();
    let n_neg = records.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("ROC curve needs both classes".into()));
    }
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.prob.partial_cmp(&a.prob).unwrap());
    let mut points = vec![(f64::INFINITY, 0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].prob;
        while i < sorted.len() && sorted[i].prob == t {
            if sorted[i].label == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((t, fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(points)
}

/// Pair predictions of two record sets by sample id. Returns
/// (id, prob_a, prob_b) rows in the order of `a` plus the Pearson
/// correlation of the paired probabilities.
pub fn export_correlation(a: &[EvalRecord], b: &[EvalRecord]) -> Result<(Vec<(u64, f64, f64)>, f64)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::contract(format!(
            "record sets have {} and {} samples",
            a.len(),
            b.len()
        )));
    }
    let by_id: std::collections::HashMap<u64, f64> = b.iter().map(|r| (r.id, r.prob)).collect();
    if by_id.len() != b.len() {
        return Err(Error::contract("duplicate sample ids in record set"));
    }
    let mut rows = Vec::with_capacity(a.len());
    for r in a {
        let pb = by_id
            .get(&r.id)
            .ok_or_else(|| Error::contract(format!("sample id {} missing from second record set", r.id)))?;
        rows.push((r.id, r.prob, *pb));
    }
    let n = rows.len() as f64;
    let mx = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let my = rows.iter().map(|r| r.2).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for r in &rows {
        let (dx, dy) = (r.1 - mx, r.2 - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("correlation of constant predictions".into()));
    }
    Ok((rows, sxy / (sxx * syy).sqrt()))
}

// ── file emission ─────────────────────────────────────────────────────

pub fn write_report_json(report: &MetricsReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::contract(format!("report serialization failed: {e}")))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

pub fn write_report_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "n,threshold,log_loss,auc,f1,tp,fp,tn,fn")?;
    writeln!(
        f,
        "{},{},{},{},{},{},{},{},{}",
        report.n,
        report.threshold,
        report.log_loss,
        report.auc,
        report.f1,
        report.confusion.tp,
        report.confusion.fp,
        report.confusion.tn,
        report.confusion.fn_
    )?;
    Ok(())
}

pub fn write_roc_csv(points: &[(f64, f64, f64)], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "threshold,fpr,tpr")?;
    for (t, fpr, tpr) in points {
        writeln!(f, "{t},{fpr},{tpr}")?;
    }
    Ok(())
}

pub fn write_correlation_csv(rows: &[(u64, f64, f64)], pearson: f64, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# pearson={pearson}")?;
    writeln!(f, "id,prob_a,prob_b")?;
    for (id, a, b) in rows {
        writeln!(f, "{id},{a},{b}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rec(id: u64, label: u8, prob: f64) -> EvalRecord {
        EvalRecord::new(id, label, prob, HeadKind::Distill).unwrap()
    }

    // Exhaustive pair-counting oracle for AUC.
    fn auc_oracle(records: &[EvalRecord]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for f in records.iter().filter(|r| r.label == 1) {
            for r in records.iter().filter(|r| r.label == 0) {
                pairs += 1.0;
                if f.prob > r.prob {
                    wins += 1.0;
                } else if f.prob == r.prob {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn log_loss_half_probability_is_ln2() {
        let r = vec![rec(0, 1, 0.5)];
        assert!((log_loss(&r).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn log_loss_all_correct_is_clamp_scale() {
        let r = vec![rec(0, 1, 1.0), rec(1, 0, 0.0)];
        let l = log_loss(&r).unwrap();
        assert!(l > 0.0 && l < 1e-6, "{l}");
    }

    #[test]
    fn log_loss_matches_direct_sum_oracle() {
        let r = vec![rec(0, 1, 0.9), rec(1, 0, 0.3), rec(2, 1, 0.4), rec(3, 0, 0.75)];
        let want = -(0.9f64.ln() + 0.7f64.ln() + 0.4f64.ln() + 0.25f64.ln()) / 4.0;
        assert!((log_loss(&r).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn log_loss_empty_is_contract_error() {
        assert!(matches!(log_loss(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn auc_perfect_separation_is_one() {
        let r = vec![rec(0, 1, 0.9), rec(1, 1, 0.8), rec(2, 0, 0.2), rec(3, 0, 0.1)];
        assert_eq!(roc_auc(&r).unwrap(), 1.0);
    }

    #[test]
    fn auc_all_ties_is_half() {
        let r = vec![rec(0, 1, 0.4), rec(1, 0, 0.4), rec(2, 1, 0.4), rec(3, 0, 0.4)];
        assert_eq!(roc_auc(&r).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_inversion_matches_pair_counting() {
        let r = vec![
            rec(0, 1, 0.9),
            rec(1, 1, 0.7),
            rec(2, 0, 0.75), // the inversion
            rec(3, 1, 0.6),
            rec(4, 0, 0.2),
            rec(5, 0, 0.1),
        ];
        assert_eq!(roc_auc(&r).unwrap(), auc_oracle(&r));
    }

    #[test]
    fn auc_single_class_is_undefined() {
        let r = vec![rec(0, 1, 0.5), rec(1, 1, 0.6)];
        assert!(matches!(roc_auc(&r), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auc_matches_pair_counting_on_random_grids() {
        let mut rng = Rng::from_seed(2718);
        let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        for _ in 0..2000 {
            let n = 2 + rng.below(7);
            let mut records = Vec::with_capacity(n);
            let mut has = [false, false];
            for id in 0..n {
                let label = rng.below(2) as u8;
                has[label as usize] = true;
                records.push(rec(id as u64, label, grid[rng.below(grid.len())]));
            }
            if !(has[0] && has[1]) {
                continue;
            }
            assert_eq!(roc_auc(&records).unwrap(), auc_oracle(&records));
        }
    }

    #[test]
    fn auc_equals_trapezoidal_area_under_roc_points() {
        let mut rng = Rng::from_seed(31415);
        let records: Vec<EvalRecord> = (0..40)
            .map(|id| rec(id, rng.below(2) as u8, (rng.below(20) as f64) / 20.0))
            .collect();
        let auc = roc_auc(&records).unwrap();
        let pts = roc_points(&records).unwrap();
        let mut area = 0.0;
        for w in pts.windows(2) {
            area += (w[1].1 - w[0].1) * (w[1].2 + w[0].2) / 2.0;
        }
        assert!((auc - area).abs() < 1e-12, "{auc} vs {area}");
    }

    #[test]
    fn confusion_all_correct_balanced() {
        let mut r = Vec::new();
        for i in 0..5 {
            r.push(rec(i, 1, 0.9));
            r.push(rec(5 + i, 0, 0.1));
        }
        let c = confusion_and_f1(&r, DEFAULT_THRESHOLD).unwrap();
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (5, 0, 5, 0));
        assert_eq!(c.f1, 100.0);
    }

    #[test]
    fn threshold_boundary_counts_as_fake() {
        let r = vec![rec(0, 1, 0.55), rec(1, 0, 0.1)];
        let c = confusion_and_f1(&r, 0.55).unwrap();
        assert_eq!(c.tp, 1);
        assert_eq!(c.fn_, 0);
    }

    #[test]
    fn f1_hand_case() {
        // TP=3, FP=1, FN=1 -> f1 = 2*3/(6+1+1) = 75.0
        let r = vec![
            rec(0, 1, 0.9),
            rec(1, 1, 0.8),
            rec(2, 1, 0.7),
            rec(3, 0, 0.6), // FP
            rec(4, 1, 0.2), // FN
            rec(5, 0, 0.1),
        ];
        let c = confusion_and_f1(&r, 0.55).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (3, 1, 1));
        assert_eq!(c.f1, 75.0);
    }

    #[test]
    fn degenerate_f1_flagged_zero() {
        let r = vec![rec(0, 0, 0.1), rec(1, 0, 0.2)];
        let c = confusion_and_f1(&r, 0.55).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.f1, 0.0);
    }

    #[test]
    fn correlation_identity_and_inversion() {
        let a: Vec<EvalRecord> = (0..6).map(|i| rec(i, (i % 2) as u8, 0.1 + 0.12 * i as f64)).collect();
        let (_, corr) = export_correlation(&a, &a).unwrap();
        assert!((corr - 1.0).abs() < 1e-12);

        let b: Vec<EvalRecord> = a
            .iter()
            .map(|r| rec(r.id, r.label, 1.0 - r.prob))
            .collect();
        let (_, corr) = export_correlation(&a, &b).unwrap();
        assert!((corr + 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_matches_direct_covariance_formula() {
        let pa = [0.1, 0.9, 0.4, 0.6, 0.25];
        let pb = [0.2, 0.7, 0.5, 0.55, 0.3];
        let a: Vec<EvalRecord> = pa.iter().enumerate().map(|(i, &p)| rec(i as u64, 0, p)).collect();
        let b: Vec<EvalRecord> = pb.iter().enumerate().map(|(i, &p)| rec(i as u64, 0, p)).collect();
        let (rows, corr) = export_correlation(&a, &b).unwrap();
        assert_eq!(rows.len(), 5);
        let n = 5.0;
        let mx = pa.iter().sum::<f64>() / n;
        let my = pb.iter().sum::<f64>() / n;
        let sxy: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = pa.iter().map(|x| (x - mx) * (x - mx)).sum();
        let syy: f64 = pb.iter().map(|y| (y - my) * (y - my)).sum();
        assert!((corr - sxy / (sxx * syy).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn correlation_id_mismatch_is_contract_error() {
        let a = vec![rec(0, 1, 0.5), rec(1, 0, 0.4)];
        let b = vec![rec(0, 1, 0.5), rec(7, 0, 0.4)];
        assert!(matches!(export_correlation(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn auc_invariant_under_monotone_transform_and_flip() {
        let mut rng = Rng::from_seed(11);
        let records: Vec<EvalRecord> = (0..30)
            .map(|id| rec(id, rng.below(2) as u8, rng.uniform()))
            .collect();
        let base = roc_auc(&records).unwrap();

        // Strictly monotone transform of scores preserves ranks.
        let cubed: Vec<EvalRecord> = records
            .iter()
            .map(|r| rec(r.id, r.label, r.prob.powi(3)))
            .collect();
        assert_eq!(roc_auc(&cubed).unwrap(), base);

        // Flipping labels and reversing score order preserves the metric.
        let flipped: Vec<EvalRecord> = records
            .iter()
            .map(|r| rec(r.id, 1 - r.label, 1.0 - r.prob))
            .collect();
        assert!((roc_auc(&flipped).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_log_loss_minimized_at_fake_rate() {
        let mut rng = Rng::from_seed(77);
        let records: Vec<EvalRecord> = (0..50)
            .map(|id| rec(id, (rng.below(10) < 3) as u8, 0.0))
            .collect();
        let rate = records.iter().filter(|r| r.label == 1).count() as f64 / 50.0;
        let loss_at = |p: f64| {
            let consts: Vec<EvalRecord> = records.iter().map(|r| rec(r.id, r.label, p)).collect();
            log_loss(&consts).unwrap()
        };
        let mut best = (f64::INFINITY, 0.0);
        for i in 1..100 {
            let p = i as f64 / 100.0;
            let l = loss_at(p);
            if l < best.0 {
                best = (l, p);
            }
        }
        assert!((best.1 - rate).abs() <= 0.01 + 1e-12, "argmin {} vs rate {rate}", best.1);
    }

    #[test]
    fn counts_sum_and_tp_monotone_in_threshold() {
        let mut rng = Rng::from_seed(5);
        let records: Vec<EvalRecord> = (0..60)
            .map(|id| rec(id, rng.below(2) as u8, rng.uniform()))
            .collect();
        let mut prev_tp = usize::MAX;
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            let c = confusion_and_f1(&records, t).unwrap();
            assert_eq!(c.tp + c.fp + c.tn + c.fn_, 60);
            assert!(c.tp <= prev_tp.max(c.tp));
            if prev_tp != usize::MAX {
                assert!(c.tp <= prev_tp, "raising threshold increased TP");
            }
            prev_tp = c.tp;
        }
    }
}
