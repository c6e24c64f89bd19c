//! Ranking and classification metrics: ROC AUC (Mann-Whitney), standardized
//! partial AUC over a low-FPR band, and F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub false_neg: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub pauc_raw: f64,
    pub pauc_standardized: f64,
    pub f1: f64,
    pub threshold: f64,
    pub confusion: Confusion,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn validate_scores(op: &str, scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::dimension(
            op,
            format!("{} scores", scores.len()),
            format!("{} labels", labels.len()),
        ));
    }
    if scores.is_empty() {
        return Err(Error::contract(op, "empty input"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::numeric(op, "NaN score"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::contract(op, format!("label {bad} not in {{0, 1}}")));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    Ok((n_pos, n_neg))
}

fn require_both_classes(op: &str, n_pos: usize, n_neg: usize) -> Result<()> {
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "{op} needs both classes, found {n_pos} positives and {n_neg} negatives"
        )));
    }
    Ok(())
}

/// ROC AUC via the Mann-Whitney statistic: the fraction of positive/negative
/// pairs ranked correctly, counting ties as one half. Computed with average
/// ranks over sorted scores, which matches O(n^2) pair counting exactly.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_pos, n_neg) = validate_scores("roc_auc", scores, labels)?;
    require_both_classes("roc_auc", n_pos, n_neg)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));

    // Average rank per tie group (1-based ranks), summed over positives.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Vertices of the empirical ROC curve from (0,0) to (1,1); tie groups move
/// diagonally so the trapezoidal area agrees with the tie-aware pair count.
fn roc_curve(scores: &[f64], labels: &[u8], n_pos: usize, n_neg: usize) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN"));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j;
    }
    points
}

/// Area of the empirical ROC curve restricted to `FPR <= fpr_max` (linear
/// interpolation at the cut), plus the standardized value mapping the band
/// area affinely so that chance is 0.5 and a perfect classifier is 1. At
/// `fpr_max = 1` the standardized value reduces to the full AUC. The result
/// is clamped to [0, 1].
pub fn partial_auc(scores: &[f64], labels: &[u8], fpr_max: f64) -> Result<(f64, f64)> {
    if !(fpr_max > 0.0 && fpr_max <= 1.0) {
        return Err(Error::contract(
            "partial_auc",
            format!("fpr_max must be in (0, 1], got {fpr_max}"),
        ));
    }
    let (n_pos, n_neg) = validate_scores("partial_auc", scores, labels)?;
    require_both_classes("partial_auc", n_pos, n_neg)?;

    let points = roc_curve(scores, labels, n_pos, n_neg);
    let mut raw = 0.0;
    for pair in points.windows(2) {
        let ((x1, y1), (x2, y2)) = (pair[0], pair[1]);
        if x1 >= fpr_max {
            break;
        }
        if x2 <= fpr_max {
            raw += (x2 - x1) * (y1 + y2) / 2.0;
        } else {
            // Cut the segment at fpr_max.
            let t = (fpr_max - x1) / (x2 - x1);
            let y_cut = y1 + t * (y2 - y1);
            raw += (fpr_max - x1) * (y1 + y_cut) / 2.0;
            break;
        }
    }

    let min_area = fpr_max * fpr_max / 2.0;
    let max_area = fpr_max;
    let standardized = 0.5 * (1.0 + (raw - min_area) / (max_area - min_area));
    Ok((raw, standardized.clamp(0.0, 1.0)))
}

/// Predict positive iff `score >= t`; returns F1 (0 when tp = 0) and the
/// confusion counts.
pub fn f1_at_threshold(scores: &[f64], labels: &[u8], t: f64) -> Result<(f64, Confusion)> {
    validate_scores("f1_at_threshold", scores, labels)?;
    let (mut tp, mut fp, mut tn, mut false_neg) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= t, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => false_neg += 1,
        }
    }
    // Computed directly from counts (equivalent to 2PR/(P+R)) so results
    // agree bit-for-bit with the confusion-count formula.
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + false_neg as f64)
    };
    Ok((
        f1,
        Confusion {
            tp,
            fp,
            tn,
            false_neg,
        },
    ))
}

/// Threshold maximizing F1 over the candidate grid of sorted unique scores
/// plus midpoints of adjacent unique scores; ties break toward the larger
/// threshold.
pub fn best_threshold(scores: &[f64], labels: &[u8]) -> Result<f64> {
    validate_scores("best_threshold", scores, labels)?;
    let mut unique: Vec<f64> = scores.to_vec();
    unique.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    unique.dedup();

    let mut candidates = Vec::with_capacity(unique.len() * 2);
    for (i, &s) in unique.iter().enumerate() {
        candidates.push(s);
        if i + 1 < unique.len() {
            candidates.push((s + unique[i + 1]) / 2.0);
        }
    }
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));

    let mut best = (f64::NEG_INFINITY, candidates[0]);
    for &t in &candidates {
        let (f1, _) = f1_at_threshold(scores, labels, t)?;
        if f1 >= best.0 {
            best = (f1, t);
        }
    }
    Ok(best.1)
}

/// Full metric set: AUC and partial AUC on `scores`, F1 at the supplied
/// threshold (typically chosen on a validation split).
pub fn metric_report(
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
    fpr_max: f64,
) -> Result<MetricReport> {
    let (n_pos, n_neg) = validate_scores("metric_report", scores, labels)?;
    require_both_classes("metric_report", n_pos, n_neg)?;
    let auc = roc_auc(scores, labels)?;
    let (pauc_raw, pauc_standardized) = partial_auc(scores, labels, fpr_max)?;
    let (f1, confusion) = f1_at_threshold(scores, labels, threshold)?;
    Ok(MetricReport {
        auc,
        pauc_raw,
        pauc_standardized,
        f1,
        threshold,
        confusion,
        n_pos,
        n_neg,
    })
}

/// O(n^2) pair-counting oracle for tests and acceptance checks.
pub fn roc_auc_pair_count(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_pos, n_neg) = validate_scores("roc_auc_pair_count", scores, labels)?;
    require_both_classes("roc_auc_pair_count", n_pos, n_neg)?;
    let mut count = 0.0f64;
    for (i, (&sp, &lp)) in scores.iter().zip(labels).enumerate() {
        if lp != 1 {
            continue;
        }
        let _ = i;
        for (&sn, &ln) in scores.iter().zip(labels) {
            if ln != 0 {
                continue;
            }
            if sp > sn {
                count += 1.0;
            } else if sp == sn {
                count += 0.5;
            }
        }
    }
    Ok(count / (n_pos as f64 * n_neg as f64))
}
