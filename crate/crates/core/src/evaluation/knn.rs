use log::warn;

use crate::data::{fit_preprocessor, one_hot_encode, FeatureKind, MultimodalDataset};
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 5;

/// Distance over the slots observed in both vectors, rescaled to the full
/// slot count: `sqrt(total / shared * sum (a - b)^2)`. `None` when nothing
/// is shared.
fn partial_distance(a: &[Option<f64>], b: &[Option<f64>]) -> Option<f64> {
    let mut shared = 0usize;
    let mut sq = 0.0;
    for (x, y) in a.iter().zip(b) {
        if let (Some(x), Some(y)) = (x, y) {
            shared += 1;
            sq += (x - y) * (x - y);
        }
    }
    (shared > 0).then(|| (a.len() as f64 / shared as f64 * sq).sqrt())
}

fn fill_value(kind: FeatureKind, values: &[f64]) -> f64 {
    match kind {
        FeatureKind::Numerical => values.iter().sum::<f64>() / values.len() as f64,
        FeatureKind::Categorical => {
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            // most frequent value, smallest on ties
            let mut best = (sorted[0], 0usize);
            let mut i = 0;
            while i < sorted.len() {
                let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
                if j > best.1 {
                    best = (sorted[i], j);
                }
                i += j;
            }
            best.0
        }
    }
}

/// Fills every missing cell of `ds` from its `k` nearest training samples.
///
/// Distances are computed on Min-Max scaled numerical features and one-hot
/// encoded categorical features, both fitted on `train`. Neighbours are the
/// training samples (other than the sample itself) that observe the target
/// feature and share at least one observed slot; their raw values are
/// averaged, or their most frequent category taken. Without any such
/// neighbour the training column mean (or mode) is used.
pub fn knn_impute(ds: &MultimodalDataset, train: &[usize], k: usize) -> Result<MultimodalDataset> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let prep = fit_preprocessor(ds, train)?;
    let scaled = prep.apply_all(ds)?;
    let encoded: Vec<Vec<Option<f64>>> = (0..ds.n_samples())
        .map(|i| one_hot_encode(&scaled, &scaled.sample(i)))
        .collect();

    let mut out = ds.clone();
    for i in 0..ds.n_samples() {
        if ds.modalities.iter().all(|m| m.row_observed(i).iter().all(|&o| o)) {
            continue;
        }
        let mut dist: Vec<(f64, usize)> = train
            .iter()
            .filter(|&&j| j != i)
            .filter_map(|&j| partial_distance(&encoded[i], &encoded[j]).map(|d| (d, j)))
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        for (m, modality) in ds.modalities.iter().enumerate() {
            for (f, feat) in modality.schema().iter().enumerate() {
                if modality.is_observed(i, f) {
                    continue;
                }
                let near: Vec<f64> = dist
                    .iter()
                    .filter(|&&(_, j)| modality.is_observed(j, f))
                    .take(k)
                    .map(|&(_, j)| modality.value(j, f))
                    .collect();
                let pool = if near.is_empty() {
                    train
                        .iter()
                        .filter(|&&j| modality.is_observed(j, f))
                        .map(|&j| modality.value(j, f))
                        .collect()
                } else {
                    near
                };
                if pool.is_empty() {
                    warn!("feature `{}` has no observed training value; left missing", feat.name);
                    continue;
                }
                out.modalities[m].set_value(i, f, fill_value(feat.kind, &pool));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureSchema, Modality};

    fn ds(values: Vec<f64>, observed: Vec<bool>, width: usize) -> MultimodalDataset {
        let n = values.len() / width;
        let schema = (0..width).map(|f| FeatureSchema::numerical(format!("x{f}"))).collect();
        MultimodalDataset::new(
            vec![Modality::new("m", schema, values, observed).unwrap()],
            (0..n).map(|i| i % 2).collect(),
            vec!["a".into(), "b".into()],
            (0..n).map(|i| format!("s{i}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_neighbour() {
        // sample 2 is closest to sample 1, which holds 7
        let d = ds(
            vec![0.0, 1.0, 9.0, 7.0, 8.9, 0.0],
            vec![true, true, true, true, true, false],
            2,
        );
        let out = knn_impute(&d, &[0, 1], 1).unwrap();
        assert_eq!(out.modalities[0].value(2, 1), 7.0);
        assert!(out.modalities[0].is_observed(2, 1));
        assert_eq!(out.modalities[0].value(0, 0), 0.0);
    }

    #[test]
    fn identical_neighbours() {
        let d = ds(
            vec![1.0, 4.0, 2.0, 4.0, 3.0, 4.0, 1.5, 0.0],
            vec![true, true, true, true, true, true, true, false],
            2,
        );
        for k in 1..=4 {
            assert_eq!(knn_impute(&d, &[0, 1, 2], k).unwrap().modalities[0].value(3, 1), 4.0);
        }
    }

    #[test]
    fn hand_computed_five_sample_fixture() {
        // features (x0, x1); training rows 0..4 fully observed, row 4 misses x1
        let d = ds(
            vec![0.0, 10.0, 2.0, 20.0, 4.0, 30.0, 10.0, 40.0, 3.0, 0.0],
            vec![true, true, true, true, true, true, true, true, true, false],
            2,
        );
        // scaled x0: 0, 0.2, 0.4, 1.0 ; query 0.3 ; distances sqrt(2)*|dx|:
        // 0.3, 0.1, 0.1, 0.7 -> the two nearest are rows 1 and 2 (tie broken by index)
        let out = knn_impute(&d, &[0, 1, 2, 3], 2).unwrap();
        assert_eq!(out.modalities[0].value(4, 1), 25.0);
        let out = knn_impute(&d, &[0, 1, 2, 3], 3).unwrap();
        assert_eq!(out.modalities[0].value(4, 1), 20.0);
    }

    #[test]
    fn categorical_mode_and_fallback() {
        let schema = vec![
            FeatureSchema::numerical("x"),
            FeatureSchema::categorical("c", ["p", "q", "r"]),
        ];
        let m = Modality::new(
            "m",
            schema,
            vec![0.0, 1.0, 0.1, 1.0, 0.2, 2.0, 5.0, 0.0, 0.0, 0.0],
            vec![true, true, true, true, true, true, false, true, true, false],
        )
        .unwrap();
        let d = MultimodalDataset::new(
            vec![m],
            vec![0, 1, 0, 1, 0],
            vec!["a".into(), "b".into()],
            (0..5).map(|i| format!("s{i}")).collect(),
        )
        .unwrap();
        let out = knn_impute(&d, &[0, 1, 2, 3], 3).unwrap();
        // row 4 shares x with rows 0..2, whose categories are q, q, r
        assert_eq!(out.modalities[0].value(4, 1), 1.0);
        // row 3 observes only the category; its neighbours with x are rows 0..2
        assert!((out.modalities[0].value(3, 0) - 0.1).abs() < 1e-15);
        assert!(knn_impute(&d, &[0], 0).is_err());
    }

    #[test]
    fn no_shared_feature_falls_back_to_column_mean() {
        let d = ds(
            vec![1.0, 0.0, 3.0, 0.0, 0.0, 5.0],
            vec![true, false, true, false, false, true],
            2,
        );
        let out = knn_impute(&d, &[0, 1], 1).unwrap();
        assert_eq!(out.modalities[0].value(2, 0), 2.0);
    }

    #[test]
    fn mode_prefers_smaller_category_on_ties() {
        assert_eq!(fill_value(FeatureKind::Categorical, &[2.0, 1.0, 2.0, 1.0]), 1.0);
        assert_eq!(fill_value(FeatureKind::Categorical, &[2.0, 2.0, 0.0]), 2.0);
    }
}
