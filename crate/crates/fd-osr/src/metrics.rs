//! Evaluation metrics: partial ROC AUC, per-category F1, the intra-inter
//! ratio (IIR) representation-quality score, and Pearson correlation.
//!
//! Partial AUC is reported unnormalized: a perfect detector at FPR cap c
//! scores c, a chance detector c^2/2.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerClassIir {
    pub class_id: usize,
    pub intra: f64,
    pub inter: f64,
    pub iir: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc_full: f64,
    pub auc_at_10fpr: f64,
    pub f1_known: f64,
    pub f1_unknown: f64,
    pub f1_overall: f64,
    pub iir: f64,
    pub per_class_iir: Vec<PerClassIir>,
}

/// Area under the ROC curve restricted to FPR in [0, fpr_cap], unnormalized.
///
/// `is_unknown` marks the positive class; higher score = more positive.
pub fn roc_auc_at_fpr(scores: &[f64], is_unknown: &[bool], fpr_cap: f64) -> Result<f64> {
    if scores.len() != is_unknown.len() {
        return Err(Error::Eval("scores/flags length mismatch".into()));
    }
    if !(fpr_cap > 0.0 && fpr_cap <= 1.0) {
        return Err(Error::Eval(format!("fpr_cap {fpr_cap} outside (0, 1]")));
    }
    let p = is_unknown.iter().filter(|&&u| u).count();
    let n = is_unknown.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::Eval("both classes must be present".into()));
    }
    // Sweep thresholds from high to low, emitting one ROC point per
    // distinct score (ties move diagonally in a single step).
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut points = vec![(0.0f64, 0.0f64)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if is_unknown[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    // Trapezoidal area with vertical interpolation at the cap.
    let mut area = 0.0;
    for w in points.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        if x0 >= fpr_cap {
            break;
        }
        if x1 <= fpr_cap {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let t = (fpr_cap - x0) / (x1 - x0);
            let yc = y0 + t * (y1 - y0);
            area += (fpr_cap - x0) * (y0 + yc) / 2.0;
            break;
        }
    }
    Ok(area)
}

/// A prediction for one test sample: a known-class id or the reject verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Known(usize),
    Unknown,
}

/// Ground truth for one test sample.
#[derive(Debug, Clone, Copy)]
pub struct Truth {
    pub label: usize,
    pub is_unknown: bool,
}

/// Per-category F1 over the (K known classes + UNKNOWN)-way labeling.
///
/// Returns (f1_known, f1_unknown, f1_overall): the unweighted mean over
/// known classes, the F1 of the reject label, and the unweighted mean over
/// all K+1 labels. Classes absent from both predictions and truth are
/// excluded from the macro averages.
pub fn f1_report(
    predictions: &[Verdict],
    truths: &[Truth],
    known_class_ids: &[usize],
) -> Result<(f64, f64, f64)> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(Error::Eval("empty or mismatched prediction input".into()));
    }
    // index K = unknown
    let k = known_class_ids.len();
    let idx = |v: &Verdict| -> usize {
        match v {
            Verdict::Unknown => k,
            Verdict::Known(c) => known_class_ids
                .iter()
                .position(|x| x == c)
                .unwrap_or(k + 1),
        }
    };
    let mut tp = vec![0usize; k + 1];
    let mut fp = vec![0usize; k + 1];
    let mut fn_ = vec![0usize; k + 1];
    for (pred, truth) in predictions.iter().zip(truths) {
        let t = if truth.is_unknown {
            k
        } else {
            idx(&Verdict::Known(truth.label))
        };
        let p = idx(pred);
        if p == t {
            tp[t] += 1;
        } else {
            fn_[t] += 1;
            if p <= k {
                fp[p] += 1;
            }
        }
    }
    let f1 = |c: usize| -> Option<f64> {
        if tp[c] + fp[c] + fn_[c] == 0 {
            return None; // absent from both predictions and truth
        }
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        Some(if denom == 0 {
            0.0
        } else {
            2.0 * tp[c] as f64 / denom as f64
        })
    };
    let known: Vec<f64> = (0..k).filter_map(f1).collect();
    if known.is_empty() {
        return Err(Error::Eval("no known class present".into()));
    }
    let f1_known = known.iter().sum::<f64>() / known.len() as f64;
    let f1_unknown = f1(k).unwrap_or(0.0);
    let mut all = known;
    if let Some(v) = f1(k) {
        all.push(v);
    }
    let f1_overall = all.iter().sum::<f64>() / all.len() as f64;
    Ok((f1_known, f1_unknown, f1_overall))
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Intra-inter ratio over labeled embeddings.
///
/// intra_k = mean Euclidean distance of class-k points to their centroid;
/// inter_k = distance from the class-k centroid to its nearest other
/// centroid; IIR = mean over classes of intra_k / inter_k.
pub fn iir(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<PerClassIir>)> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(Error::Eval("empty or mismatched embedding input".into()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Eval(
            "IIR needs at least two classes (inter undefined)".into(),
        ));
    }
    let dim = embeddings[0].len();
    let mut centroids = Vec::with_capacity(classes.len());
    for &c in &classes {
        let members: Vec<&Vec<f64>> = embeddings
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(e, _)| e)
            .collect();
        let mut mu = vec![0.0; dim];
        for e in &members {
            for (m, v) in mu.iter_mut().zip(e.iter()) {
                *m += v;
            }
        }
        for m in &mut mu {
            *m /= members.len() as f64;
        }
        centroids.push(mu);
    }
    let mut per_class = Vec::with_capacity(classes.len());
    for (ci, &c) in classes.iter().enumerate() {
        let intra = {
            let members: Vec<&Vec<f64>> = embeddings
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == c)
                .map(|(e, _)| e)
                .collect();
            members
                .iter()
                .map(|e| euclidean(e, &centroids[ci]))
                .sum::<f64>()
                / members.len() as f64
        };
        let inter = centroids
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != ci)
            .map(|(_, mu)| euclidean(mu, &centroids[ci]))
            .fold(f64::INFINITY, f64::min);
        if inter == 0.0 {
            return Err(Error::Eval(format!(
                "degenerate embedding: class {c} centroid coincides with another"
            )));
        }
        per_class.push(PerClassIir {
            class_id: c,
            intra,
            inter,
            iir: intra / inter,
        });
    }
    let mean = per_class.iter().map(|p| p.iir).sum::<f64>() / per_class.len() as f64;
    Ok((mean, per_class))
}

/// Standard Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Eval("pearson needs two equal-length series".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Eval("pearson undefined for zero variance".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
pub mod oracle {
    //! Brute-force reference implementations, kept independent of the
    //! production code paths they check.

    /// Partial AUC by explicit threshold sweep over a dense grid of all
    /// midpoints between distinct scores, with exact handling of the
    /// vertical cap via fine subdivision of the FPR axis.
    pub fn partial_auc_sweep(scores: &[f64], is_unknown: &[bool], cap: f64) -> f64 {
        // Collect ROC points at every distinct threshold (plus extremes).
        let mut ts: Vec<f64> = scores.to_vec();
        ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
        ts.dedup();
        let p = is_unknown.iter().filter(|&&u| u).count() as f64;
        let n = is_unknown.len() as f64 - p;
        let rate = |thr: f64| -> (f64, f64) {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (s, &u) in scores.iter().zip(is_unknown) {
                if *s >= thr {
                    if u {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
            (fp / n, tp / p)
        };
        let mut points = vec![(0.0, 0.0)];
        for t in ts {
            points.push(rate(t));
        }
        let mut area = 0.0;
        for w in points.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if x0 >= cap {
                break;
            }
            if x1 <= cap {
                area += (x1 - x0) * (y0 + y1) / 2.0;
            } else {
                let t = (cap - x0) / (x1 - x0);
                let yc = y0 + t * (y1 - y0);
                area += (cap - x0) * (y0 + yc) / 2.0;
                break;
            }
        }
        area
    }

    /// Classical rank-statistic (Mann-Whitney) AUC with tie correction.
    pub fn mann_whitney_auc(scores: &[f64], is_unknown: &[bool]) -> f64 {
        let pos: Vec<f64> = scores
            .iter()
            .zip(is_unknown)
            .filter(|(_, &u)| u)
            .map(|(s, _)| *s)
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(is_unknown)
            .filter(|(_, &u)| !u)
            .map(|(s, _)| *s)
            .collect();
        let mut wins = 0.0;
        for p in &pos {
            for q in &neg {
                if p > q {
                    wins += 1.0;
                } else if p == q {
                    wins += 0.5;
                }
            }
        }
        wins / (pos.len() as f64 * neg.len() as f64)
    }
}
