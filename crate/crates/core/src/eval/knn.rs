//! Similarity-weighted k-nearest-neighbor classification.

use ndarray::{Array1, ArrayView1, Axis};

use super::bank::FeatureBank;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KnnPrediction {
    pub class: usize,
    /// Summed vote weight per class.
    pub scores: Array1<f64>,
}

/// Vote among the `k` rows most similar to `query` (cosine similarity;
/// equal similarities ordered by row index). Each neighbor adds
/// `exp(sim / temperature)` to its label; the highest total wins, ties
/// going to the lowest class index.
pub fn knn_classify(bank: &FeatureBank, query: ArrayView1<f64>, k: usize, temperature: f64) -> Result<KnnPrediction> {
    if k == 0 || k > bank.len() {
        return Err(Error::InvalidArgument(format!("k={k} must be in [1, {}]", bank.len())));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be > 0")));
    }
    if query.len() != bank.dim() {
        return Err(Error::Shape(format!("query dim {} vs bank dim {}", query.len(), bank.dim())));
    }
    let sims = bank.features.dot(&query);
    let mut order: Vec<usize> = (0..sims.len()).collect();
    let rank = |&a: &usize, &b: &usize| sims[b].total_cmp(&sims[a]).then(a.cmp(&b));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, rank);
        order.truncate(k);
    }
    order.sort_by(rank);
    let mut scores = Array1::<f64>::zeros(bank.num_classes);
    for &i in &order {
        scores[bank.labels[i]] += (sims[i] / temperature).exp();
    }
    let class = super::argmax(scores.view());
    Ok(KnnPrediction { class, scores })
}

/// Predicted class for every row of `queries`.
pub fn knn_predict(bank_train: &FeatureBank, queries: &FeatureBank, k: usize, temperature: f64) -> Result<Vec<usize>> {
    queries
        .features
        .axis_iter(Axis(0))
        .map(|q| knn_classify(bank_train, q, k, temperature).map(|p| p.class))
        .collect()
}

/// Fraction of validation rows classified correctly.
pub fn knn_top1(bank_train: &FeatureBank, bank_val: &FeatureBank, k: usize, temperature: f64) -> Result<f64> {
    let preds = knn_predict(bank_train, bank_val, k, temperature)?;
    let hits = preds
        .iter()
        .zip(&bank_val.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn bank(rows: Array2<f64>, labels: Vec<usize>, classes: usize) -> FeatureBank {
        let ids = (0..labels.len()).map(|i| format!("v{i}")).collect();
        FeatureBank::new(rows, labels, ids, classes).unwrap()
    }

    #[test]
    fn k1_picks_nearest() {
        let b = bank(array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], vec![0, 1, 2], 3);
        let p = knn_classify(&b, array![0.6, 0.8].view(), 1, 0.07).unwrap();
        assert_eq!(p.class, 1);
    }

    #[test]
    fn unanimous_neighbors() {
        let b = bank(array![[1.0, 0.0], [0.8, 0.6], [-1.0, 0.0]], vec![2, 2, 0], 3);
        for tau in [0.01, 0.07, 10.0] {
            assert_eq!(knn_classify(&b, array![1.0, 0.0].view(), 2, tau).unwrap().class, 2);
        }
    }

    #[test]
    fn tie_goes_to_lowest_class() {
        let b = bank(array![[1.0, 0.0], [1.0, 0.0]], vec![1, 0], 2);
        assert_eq!(knn_classify(&b, array![1.0, 0.0].view(), 2, 0.07).unwrap().class, 0);
    }

    #[test]
    fn argument_errors() {
        let b = bank(array![[1.0, 0.0]], vec![0], 1);
        assert!(knn_classify(&b, array![1.0, 0.0].view(), 2, 0.07).is_err());
        assert!(knn_classify(&b, array![1.0, 0.0].view(), 1, 0.0).is_err());
        assert!(knn_classify(&b, array![1.0].view(), 1, 0.1).is_err());
    }

    #[test]
    fn subset_with_k1_is_perfect() {
        let s = 0.5f64.sqrt();
        let b = bank(array![[1.0, 0.0], [s, s], [0.0, 1.0]], vec![0, 1, 2], 3);
        assert_eq!(knn_top1(&b, &b, 1, 0.07).unwrap(), 1.0);
    }
}
