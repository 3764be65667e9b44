//! Accuracy, confusion matrices and detection-error trade-off curves.
//!
//! For detection, class 0 is the negative (non-keyword) class and every other
//! class is a keyword. The detection score is `1 - P(class 0)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One threshold of the DET sweep: accept when `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub frr: f64,
    pub fdr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
    pub curve: Vec<DetPoint>,
    /// Baseline FRR at which `relative_fdr` was read off.
    pub operating_frr: Option<f64>,
    pub relative_fdr: Option<f64>,
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn check(posteriors: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if posteriors.len() != labels.len() || posteriors.is_empty() {
        return Err(Error::Metric(format!("{} posteriors for {} labels", posteriors.len(), labels.len())));
    }
    let classes = posteriors[0].len();
    if classes < 2 || posteriors.iter().any(|p| p.len() != classes) {
        return Err(Error::Metric("posteriors must share one class count of at least two".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Metric(format!("label {y} out of range for {classes} classes")));
    }
    Ok(classes)
}

pub fn accuracy(posteriors: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check(posteriors, labels)?;
    let hits = posteriors.iter().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `confusion[true][predicted]`.
pub fn confusion(posteriors: &[Vec<f64>], labels: &[usize]) -> Result<Vec<Vec<u64>>> {
    let classes = check(posteriors, labels)?;
    let mut m = vec![vec![0u64; classes]; classes];
    for (p, &y) in posteriors.iter().zip(labels) {
        m[y][argmax(p)] += 1;
    }
    Ok(m)
}

/// FRR/FDR at every distinct score, from the strictest threshold to the loosest.
pub fn det_curve(posteriors: &[Vec<f64>], labels: &[usize]) -> Result<Vec<DetPoint>> {
    check(posteriors, labels)?;
    let positives = labels.iter().filter(|&&y| y != 0).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Metric("detection metrics need both keyword and non-keyword examples".into()));
    }
    let mut scored: Vec<(f64, bool)> = posteriors.iter().zip(labels).map(|(p, &y)| (1.0 - p[0], y != 0)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = vec![DetPoint { threshold: f64::INFINITY, frr: 1.0, fdr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let t = scored[i].0;
        while i < scored.len() && scored[i].0 == t {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push(DetPoint {
            threshold: t,
            frr: (positives - tp) as f64 / positives as f64,
            fdr: fp as f64 / (tp + fp) as f64,
        });
    }
    Ok(curve)
}

/// FRR of the loosest operating point whose threshold is at least `threshold`.
pub fn frr_at_threshold(curve: &[DetPoint], threshold: f64) -> f64 {
    curve.iter().filter(|p| p.threshold >= threshold).map(|p| p.frr).fold(1.0, f64::min)
}

/// Lowest FDR among points with FRR no worse than `frr`.
pub fn fdr_at_frr(curve: &[DetPoint], frr: f64) -> Option<f64> {
    curve.iter().filter(|p| p.frr <= frr).map(|p| p.fdr).reduce(f64::min)
}

/// Accuracy, confusion and DET curve; with a baseline curve, also the FDR
/// relative to the baseline at the baseline's FRR for threshold 0.5.
pub fn det_metrics(posteriors: &[Vec<f64>], labels: &[usize], baseline: Option<&[DetPoint]>) -> Result<EvalResult> {
    let curve = det_curve(posteriors, labels)?;
    let (operating_frr, relative_fdr) = match baseline {
        Some(base) => {
            let r0 = frr_at_threshold(base, 0.5);
            let b = fdr_at_frr(base, r0).ok_or_else(|| Error::Metric("empty baseline curve".into()))?;
            let m = fdr_at_frr(&curve, r0).unwrap_or(1.0);
            let rel = if b > 0.0 {
                m / b
            } else if m == 0.0 {
                1.0
            } else {
                f64::INFINITY
            };
            (Some(r0), Some(rel))
        }
        None => (None, None),
    };
    Ok(EvalResult {
        accuracy: accuracy(posteriors, labels)?,
        confusion: confusion(posteriors, labels)?,
        curve,
        operating_frr,
        relative_fdr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(p0: f64) -> Vec<f64> {
        vec![p0, 1.0 - p0]
    }

    #[test]
    fn accuracy_and_confusion() {
        let p = vec![post(0.9), post(0.2), post(0.6), post(0.1)];
        let y = [0, 1, 1, 1];
        assert_eq!(accuracy(&p, &y).unwrap(), 0.75);
        assert_eq!(confusion(&p, &y).unwrap(), vec![vec![1, 0], vec![1, 2]]);
    }

    #[test]
    fn det_curve_by_hand() {
        // scores: 0.1(neg), 0.8(pos), 0.4(pos), 0.7(neg)
        let p = vec![post(0.9), post(0.2), post(0.6), post(0.3)];
        let y = [0, 1, 1, 0];
        let c = det_curve(&p, &y).unwrap();
        let pts: Vec<(f64, f64)> = c.iter().map(|d| (d.frr, d.fdr)).collect();
        assert_eq!(pts, vec![(1.0, 0.0), (0.5, 0.0), (0.5, 0.5), (0.0, 1.0 / 3.0), (0.0, 0.5)]);
    }

    #[test]
    fn self_baseline_is_one() {
        let p = vec![post(0.9), post(0.2), post(0.6), post(0.3), post(0.45)];
        let y = [0, 1, 1, 0, 1];
        let base = det_curve(&p, &y).unwrap();
        let r = det_metrics(&p, &y, Some(&base)).unwrap();
        assert_eq!(r.relative_fdr, Some(1.0));
    }

    #[test]
    fn perfect_classifier_has_zero_fdr_at_every_frr() {
        let p = vec![post(0.99), post(0.01), post(0.95), post(0.02), post(0.1)];
        let y = [0, 1, 0, 1, 1];
        let c = det_curve(&p, &y).unwrap();
        for pt in &c {
            assert_eq!(fdr_at_frr(&c, pt.frr), Some(0.0));
        }
        let r = det_metrics(&p, &y, Some(&c)).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.relative_fdr, Some(1.0));
    }

    #[test]
    fn degenerate_labels_are_rejected() {
        let p = vec![post(0.3), post(0.4)];
        assert!(matches!(det_curve(&p, &[1, 1]), Err(Error::Metric(_))));
        assert!(matches!(det_curve(&p, &[0, 0]), Err(Error::Metric(_))));
        assert!(matches!(accuracy(&p, &[0]), Err(Error::Metric(_))));
    }
}
