use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auc,
    Mcc,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::Auc, Metric::Mcc];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Auc => "auc",
            Metric::Mcc => "mcc",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::Auc => "AUC",
            Metric::Mcc => "MCC",
        }
    }
}

/// Per-fold values of one metric and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub metric: Metric,
    pub value: f64,
    pub fold_values: Vec<f64>,
}

impl MetricResult {
    pub fn from_folds(metric: Metric, fold_values: Vec<f64>) -> Self {
        let value = if fold_values.is_empty() {
            f64::NAN
        } else {
            fold_values.iter().sum::<f64>() / fold_values.len() as f64
        };
        MetricResult {
            metric,
            value,
            fold_values,
        }
    }
}

/// Mann-Whitney AUC of `scores` for positives `is_pos`; tied pairs count 1/2.
fn binary_auc(scores: &[f64], is_pos: &[bool]) -> Option<f64> {
    let n_pos = is_pos.iter().filter(|&&p| p).count();
    let n_neg = is_pos.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of mid-ranks of the positives, ranks starting at 1
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| is_pos[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Area under the ROC curve of per-sample class-score vectors.
///
/// Two classes: the score of class 1 ranks the samples. More classes: the
/// unweighted mean of one-vs-rest AUCs over the classes present in `labels`.
pub fn auc(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    let c = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|s| s.len() != c) || labels.iter().any(|&l| l >= c) {
        return Err(Error::InvalidArgument("auc: class scores do not cover every label".into()));
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::UndefinedMetric("auc needs samples of at least two classes".into()));
    }
    let one_vs_rest = |class: usize| {
        let s: Vec<f64> = scores.iter().map(|r| r[class]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        binary_auc(&s, &pos)
    };
    if c == 2 {
        return Ok(one_vs_rest(1).expect("both classes present"));
    }
    let per_class: Vec<f64> = present.iter().filter_map(|&k| one_vs_rest(k)).collect();
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Matthews correlation coefficient. `degenerate` is set when the
/// denominator vanishes and the value was defined as 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mcc {
    pub value: f64,
    pub degenerate: bool,
}

/// Multiclass correlation over the full confusion matrix; for two classes it
/// coincides with the usual TP/TN/FP/FN formula.
pub fn mcc(predicted: &[usize], truth: &[usize]) -> Result<Mcc> {
    if predicted.len() != truth.len() {
        return Err(Error::shape("mcc", &[predicted.len()], &[truth.len()]));
    }
    let c = predicted.iter().chain(truth).max().map_or(0, |&m| m + 1);
    let mut t = vec![0.0; c];
    let mut p = vec![0.0; c];
    let mut correct = 0.0;
    for (&yp, &yt) in predicted.iter().zip(truth) {
        t[yt] += 1.0;
        p[yp] += 1.0;
        if yp == yt {
            correct += 1.0;
        }
    }
    if t.iter().filter(|&&n| n > 0.0).count() < 2 {
        return Err(Error::UndefinedMetric("mcc needs at least two classes in the truth".into()));
    }
    let s = truth.len() as f64;
    let pt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|a| a * a).sum();
    let tt: f64 = t.iter().map(|a| a * a).sum();
    let denom = ((s * s - pp) * (s * s - tt)).sqrt();
    if denom == 0.0 {
        return Ok(Mcc {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Mcc {
        value: (correct * s - pt) / denom,
        degenerate: false,
    })
}

/// Index of the largest score (first on ties).
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class(p1: &[f64]) -> Vec<Vec<f64>> {
        p1.iter().map(|&p| vec![1.0 - p, p]).collect()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&two_class(&[0.1, 0.2, 0.8, 0.9]), &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&two_class(&[0.5; 4]), &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&two_class(&[0.1, 0.4, 0.35, 0.8]), &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(matches!(
            auc(&two_class(&[0.1, 0.4]), &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn multiclass_auc_is_macro_one_vs_rest() {
        let scores = vec![
            vec![0.8, 0.1, 0.1],
            vec![0.2, 0.7, 0.1],
            vec![0.1, 0.2, 0.7],
            vec![0.3, 0.4, 0.3],
        ];
        assert_eq!(auc(&scores, &[0, 1, 2, 1]).unwrap(), 1.0);
        let worse = auc(&scores, &[1, 0, 2, 1]).unwrap();
        assert!(worse < 1.0 && worse > 0.0);
    }

    #[test]
    fn mcc_examples() {
        assert_eq!(mcc(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap().value, 1.0);
        assert_eq!(mcc(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap().value, 0.0);
        assert_eq!(mcc(&[1, 0, 0, 1], &[0, 1, 1, 0]).unwrap().value, -1.0);
        let d = mcc(&[1, 1, 1, 1], &[0, 1, 1, 0]).unwrap();
        assert!(d.degenerate && d.value == 0.0);
        assert!(mcc(&[0, 1], &[1, 1]).is_err());
    }

    #[test]
    fn binary_mcc_matches_textbook_formula() {
        let pred = [1, 1, 0, 0, 1, 0, 1, 0, 0];
        let truth = [1, 0, 0, 1, 1, 0, 1, 1, 0];
        let (tp, tn, fp, fn_) = (3.0, 3.0, 1.0, 2.0);
        let want = (tp * tn - fp * fn_) / f64::sqrt((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_));
        assert!((mcc(&pred, &truth).unwrap().value - want).abs() < 1e-15);
    }

    #[test]
    fn fold_mean() {
        let r = MetricResult::from_folds(Metric::Auc, vec![0.5, 0.7, 0.9]);
        assert!((r.value - 0.7).abs() < 1e-15);
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
    }
}
