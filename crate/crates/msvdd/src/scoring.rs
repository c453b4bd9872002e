//! Anomaly scoring and evaluation: the combined distance/reconstruction
//! score, thresholding, precision/recall/F1, ROC/AUC, and point-adjusted
//! variants for segment-level telemetry labels.

use crate::model::Mode;
use crate::robust;
use crate::trainer::{TrainedArtifact, Window};
use crate::{Error, Result};
use serde::Serialize;

/// δ = D + w·(μ_D/μ_rec)·rec. The ratio rescales reconstruction error into
/// distance units before the small weight is applied.
pub fn anomaly_score(d: f64, rec: f64, mu_d: f64, mu_rec: f64, w: f64) -> Result<f64> {
    if mu_rec == 0.0 {
        return Err(Error::Contract("mu_rec is zero; the anomaly score is undefined".into()));
    }
    Ok(d + w * (mu_d / mu_rec) * rec)
}

/// Strictly-greater decision rule; scores equal to the threshold are normal.
pub fn classify(deltas: &[f64], threshold: f64) -> Vec<bool> {
    deltas.iter().map(|&d| d > threshold).collect()
}

/// Confusion counts with precision/recall/F1; `None` marks a zero
/// denominator (no predicted positives, or no actual positives).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prf1 {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn prf1(labels: &[bool], predicted: &[bool]) -> Result<Prf1> {
    if labels.len() != predicted.len() {
        return Err(Error::Dimension(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predicted.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&y, &p) in labels.iter().zip(predicted) {
        match (y, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
    let recall = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(Prf1 { tp, fp, fn_, tn, precision, recall, f1 })
}

/// One ROC operating point.
#[derive(Debug, Clone, Serialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

fn check_two_classes(labels: &[bool], scores: &[f64]) -> Result<(usize, usize)> {
    if labels.len() != scores.len() {
        return Err(Error::Dimension(format!("{} labels vs {} scores", labels.len(), scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN score in ROC input".into()));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Contract(format!(
            "ROC needs both classes (got {pos} anomalous, {neg} normal)"
        )));
    }
    Ok((pos, neg))
}

/// ROC curve under the strict-greater rule, one point per distinct score
/// (ties grouped), from (0,0) at threshold +∞ to (1,1) at −∞.
pub fn roc_curve(labels: &[bool], scores: &[f64]) -> Result<Vec<RocPoint>> {
    check_two_classes(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        // consume the whole tie group before emitting a point
        while i < order.len() && scores[order[i]] == v {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // threshold just below v admits everything scoring >= v
        let threshold = if i < order.len() { (v + scores[order[i]]) / 2.0 } else { f64::NEG_INFINITY };
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold,
        });
    }
    Ok(points)
}

/// Area under the ROC curve by trapezoid over grouped thresholds; equals
/// the pair-counting statistic (ties get half credit) exactly because the
/// accumulation stays in integer-valued floats.
pub fn roc_auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = check_two_classes(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area = 0u64; // Σ Δfp·(tp_prev + tp_cur), all integers
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == v {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) * (tp0 + tp);
    }
    Ok(twice_area as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Threshold maximizing F1 under the strict-greater rule. Candidates are
/// midpoints of adjacent distinct scores plus ±∞; ties prefer the larger
/// threshold. Returns (threshold, F1).
pub fn best_f1_threshold(labels: &[bool], scores: &[f64]) -> Result<(f64, f64)> {
    check_two_classes(labels, scores)?;
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let mut candidates = vec![f64::NEG_INFINITY, f64::INFINITY];
    for pair in distinct.windows(2) {
        candidates.push((pair[0] + pair[1]) / 2.0);
    }
    let mut best = (f64::INFINITY, -1.0);
    for &t in &candidates {
        let preds = classify(scores, t);
        let m = prf1(labels, &preds)?;
        let f1 = m.f1.unwrap_or(0.0);
        if f1 > best.1 || (f1 == best.1 && t > best.0) {
            best = (t, f1);
        }
    }
    Ok(best)
}

/// Point adjustment: if any window inside a contiguous true-anomaly segment
/// is flagged, the whole segment counts as detected. Normal-region
/// predictions are untouched.
pub fn point_adjust(labels: &[bool], predicted: &[bool]) -> Result<Vec<bool>> {
    if labels.len() != predicted.len() {
        return Err(Error::Dimension(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predicted.len()
        )));
    }
    let mut adjusted = predicted.to_vec();
    let mut i = 0;
    while i < labels.len() {
        if labels[i] {
            let start = i;
            while i < labels.len() && labels[i] {
                i += 1;
            }
            if predicted[start..i].iter().any(|&p| p) {
                adjusted[start..i].fill(true);
            }
        } else {
            i += 1;
        }
    }
    Ok(adjusted)
}

/// Per-window score row as exported to CSV.
#[derive(Debug, Clone, Serialize)]
pub struct ScoreRecord {
    pub id: String,
    #[serde(rename = "D")]
    pub d: f64,
    pub rec: f64,
    pub delta: f64,
    pub label: Option<bool>,
    pub predicted: bool,
}

/// Score every window with a trained artifact's frozen weights and stored
/// statistics.
pub fn score_windows(
    artifact: &TrainedArtifact,
    windows: &[Window],
    labels: Option<&[bool]>,
) -> Result<Vec<ScoreRecord>> {
    if let Some(l) = labels {
        if l.len() != windows.len() {
            return Err(Error::Dimension(format!("{} labels vs {} windows", l.len(), windows.len())));
        }
    }
    let est = match artifact.model.mode {
        Mode::Euclidean => robust::RobustEstimate::identity(artifact.stats.mu.clone()),
        Mode::Mahalanobis => artifact.estimate()?,
    };
    let (latents, recs) = crate::trainer::embed_all(&artifact.params, &artifact.model, windows)?;
    let s = artifact.model.s;
    let mut out = Vec::with_capacity(windows.len());
    for (row, rec) in recs.iter().enumerate() {
        let d = robust::mahalanobis(&latents[row * s..(row + 1) * s], &est);
        let delta = anomaly_score(d, *rec, artifact.stats.mu_d, artifact.stats.mu_rec, artifact.train.w)?;
        out.push(ScoreRecord {
            id: format!("w{row:06}"),
            d,
            rec: *rec,
            delta,
            label: labels.map(|l| l[row]),
            predicted: delta > artifact.stats.threshold,
        });
    }
    Ok(out)
}

/// Full evaluation summary for a labeled set.
#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub threshold: f64,
    pub auc: f64,
    pub metrics: Prf1,
    pub adjusted_metrics: Prf1,
    pub best_f1_threshold: f64,
    pub best_f1: f64,
}

pub fn evaluate(records: &[ScoreRecord], threshold: f64) -> Result<EvalSummary> {
    let labels: Vec<bool> = records
        .iter()
        .map(|r| r.label.ok_or_else(|| Error::Contract(format!("window {} has no label", r.id))))
        .collect::<Result<_>>()?;
    let deltas: Vec<f64> = records.iter().map(|r| r.delta).collect();
    let preds = classify(&deltas, threshold);
    let metrics = prf1(&labels, &preds)?;
    let adjusted = point_adjust(&labels, &preds)?;
    let adjusted_metrics = prf1(&labels, &adjusted)?;
    let auc = roc_auc(&labels, &deltas)?;
    let (bt, bf1) = best_f1_threshold(&labels, &deltas)?;
    Ok(EvalSummary {
        threshold,
        auc,
        metrics,
        adjusted_metrics,
        best_f1_threshold: bt,
        best_f1: bf1,
    })
}

fn fmt_label(l: Option<bool>) -> &'static str {
    match l {
        Some(true) => "1",
        Some(false) => "0",
        None => "",
    }
}

/// CSV export: `id,D,rec,delta,label,predicted`.
pub fn write_scores_csv<W: std::io::Write>(out: W, records: &[ScoreRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "D", "rec", "delta", "label", "predicted"])
        .map_err(|e| Error::Format(format!("scores csv: {e}")))?;
    for r in records {
        w.write_record([
            r.id.as_str(),
            &r.d.to_string(),
            &r.rec.to_string(),
            &r.delta.to_string(),
            fmt_label(r.label),
            if r.predicted { "1" } else { "0" },
        ])
        .map_err(|e| Error::Format(format!("scores csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// CSV export: `fpr,tpr,threshold`.
pub fn write_roc_csv<W: std::io::Write>(out: W, points: &[RocPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["fpr", "tpr", "threshold"])
        .map_err(|e| Error::Format(format!("roc csv: {e}")))?;
    for p in points {
        w.write_record([&p.fpr.to_string(), &p.tpr.to_string(), &p.threshold.to_string()])
            .map_err(|e| Error::Format(format!("roc csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}
