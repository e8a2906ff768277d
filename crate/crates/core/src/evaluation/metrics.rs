//! Predictive metrics and prediction-shift scores.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_aligned(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape("metric", format!("{what}: {a} vs {b} entries")));
    }
    if a == 0 {
        return Err(Error::Metric(format!("{what} on empty input")));
    }
    Ok(())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise argmax of an `N × C` score matrix.
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    (0..scores.rows()).map(|r| argmax(scores.row_slice(r))).collect()
}

/// Macro F1 over classes occurring in the labels or the predictions.
pub fn f1_macro(y: &[usize], pred: &[usize], classes: usize) -> Result<f64> {
    check_aligned(y.len(), pred.len(), "f1")?;
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&t, &p) in y.iter().zip(pred) {
        if t >= classes || p >= classes {
            return Err(Error::CategoryOutOfRange {
                index: t.max(p) as i64,
                cardinality: classes,
            });
        }
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let scores: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            (denom > 0).then(|| 2.0 * tp[c] as f64 / denom as f64)
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn r2(y: &[f64], pred: &[f64]) -> Result<f64> {
    check_aligned(y.len(), pred.len(), "r2")?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Metric("r2 undefined for constant targets".into()));
    }
    let ss_res: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn mape(y: &[f64], pred: &[f64]) -> Result<f64> {
    check_aligned(y.len(), pred.len(), "mape")?;
    if y.iter().any(|&v| v == 0.0) {
        return Err(Error::Metric("mape undefined for zero targets".into()));
    }
    Ok(y.iter().zip(pred).map(|(a, b)| ((a - b) / a).abs()).sum::<f64>() / y.len() as f64)
}

/// Average precision of `scores` for the positive set, stepping over every
/// distinct score threshold.
pub fn average_precision(positive: &[bool], scores: &[f64]) -> Result<f64> {
    check_aligned(positive.len(), scores.len(), "auc_pr")?;
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return Err(Error::Metric("auc_pr needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap, mut last_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total as f64;
        ap += (recall - last_recall) * tp as f64 / (tp + fp) as f64;
        last_recall = recall;
    }
    Ok(ap)
}

/// One-vs-rest macro average precision; the positive class only when binary.
pub fn auc_pr(y: &[usize], scores: &Tensor) -> Result<f64> {
    check_aligned(y.len(), scores.rows(), "auc_pr")?;
    let classes = scores.cols();
    let mut present = vec![false; classes];
    for &t in y {
        if t >= classes {
            return Err(Error::CategoryOutOfRange {
                index: t as i64,
                cardinality: classes,
            });
        }
        present[t] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Metric("auc_pr undefined for single-class labels".into()));
    }
    let targets: Vec<usize> = if classes == 2 {
        vec![1]
    } else {
        (0..classes).filter(|&c| present[c]).collect()
    };
    let mut sum = 0.0;
    for &c in &targets {
        let positive: Vec<bool> = y.iter().map(|&t| t == c).collect();
        let col: Vec<f64> = (0..scores.rows()).map(|r| scores.at(r, c)).collect();
        sum += average_precision(&positive, &col)?;
    }
    Ok(sum / targets.len() as f64)
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_aligned(a.len(), b.len(), "rmse")?;
    Ok((a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt())
}

/// `min(1, exp(1 − RMSE(y, miss)/RMSE(y, full)))`.
pub fn prs(y: &[f64], miss: &[f64], full: &[f64]) -> Result<f64> {
    let full_err = rmse(y, full)?;
    if full_err == 0.0 {
        return Err(Error::Metric("prs undefined for zero full-view error".into()));
    }
    let miss_err = rmse(y, miss)?;
    Ok((1.0 - miss_err / full_err).exp().min(1.0))
}

/// Share of rows whose argmax class differs.
pub fn class_change_ratio(full: &Tensor, miss: &Tensor) -> Result<f64> {
    check_aligned(full.rows(), miss.rows(), "class_change")?;
    let changed = argmax_rows(full)
        .into_iter()
        .zip(argmax_rows(miss))
        .filter(|(a, b)| a != b)
        .count();
    Ok(changed as f64 / full.rows() as f64)
}

/// `RMSE(full, miss) / std(full)` over all entries.
pub fn deformation(full: &[f64], miss: &[f64]) -> Result<f64> {
    check_aligned(full.len(), miss.len(), "deformation")?;
    let n = full.len() as f64;
    let mean = full.iter().sum::<f64>() / n;
    let std = (full.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return Err(Error::Metric("deformation undefined for constant predictions".into()));
    }
    Ok(rmse(full, miss)? / std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_examples() {
        assert_eq!(f1_macro(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        let f1 = f1_macro(&[1, 0, 1, 0], &[1, 0, 0, 0], 2).unwrap();
        assert!((f1 - 11.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn regression_examples() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(r2(&y, &[2.0; 3]).unwrap(), 0.0);
        assert!((mape(&[100.0, 200.0], &[110.0, 180.0]).unwrap() - 0.1).abs() < 1e-15);
        assert!(r2(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(mape(&[0.0], &[1.0]).is_err());
    }

    #[test]
    fn auc_pr_cases() {
        let perfect = Tensor::matrix(4, 2, vec![0.9, 0.1, 0.2, 0.8, 0.7, 0.3, 0.4, 0.6]).unwrap();
        assert_eq!(auc_pr(&[0, 1, 0, 1], &perfect).unwrap(), 1.0);
        // ranks: pos, neg, pos -> AP = 0.5·1 + 0.5·(2/3)
        let ap = average_precision(&[true, false, true], &[0.9, 0.8, 0.7]).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
        assert!(auc_pr(&[1, 1], &Tensor::matrix(2, 2, vec![0.5; 4]).unwrap()).is_err());
    }

    #[test]
    fn prs_points() {
        let y = [0.0, 0.0];
        assert_eq!(prs(&y, &[1.0, 1.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!((prs(&y, &[2.0, 2.0], &[1.0, 1.0]).unwrap() - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(prs(&y, &[0.5, 0.5], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(prs(&y, &[1.0, 1.0], &y).is_err());
    }

    #[test]
    fn shift_scores() {
        let full = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(deformation(&full, &full).unwrap(), 0.0);
        let std = (1.25f64).sqrt();
        let shifted: Vec<f64> = full.iter().map(|v| v + 0.7 * std).collect();
        assert!((deformation(&full, &shifted).unwrap() - 0.7).abs() < 1e-12);
        assert!(deformation(&[1.0, 1.0], &[1.0, 2.0]).is_err());

        let a = Tensor::matrix(2, 2, vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.1, 0.9, 0.8, 0.2]).unwrap();
        assert_eq!(class_change_ratio(&a, &a).unwrap(), 0.0);
        assert_eq!(class_change_ratio(&a, &b).unwrap(), 1.0);
    }
}
