//! Clustering agreement diagnostics.

use std::collections::HashMap;

/// Adjusted Rand index between two labelings of the same points.
///
/// 1.0 for identical partitions (up to label permutation), ~0 for random
/// agreement. Panics if the slices differ in length.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same points");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut contingency: HashMap<(usize, usize), f64> = HashMap::new();
    let mut row_sums: HashMap<usize, f64> = HashMap::new();
    let mut col_sums: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *contingency.entry((x, y)).or_default() += 1.0;
        *row_sums.entry(x).or_default() += 1.0;
        *col_sums.entry(y).or_default() += 1.0;
    }
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let sum_nij: f64 = contingency.values().map(|&c| choose2(c)).sum();
    let sum_ai: f64 = row_sums.values().map(|&c| choose2(c)).sum();
    let sum_bj: f64 = col_sums.values().map(|&c| choose2(c)).sum();
    let total = choose2(n as f64);
    let expected = sum_ai * sum_bj / total;
    let max_index = 0.5 * (sum_ai + sum_bj);
    if (max_index - expected).abs() < 1e-12 {
        return 1.0;
    }
    (sum_nij - expected) / (max_index - expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_partitions_score_one() {
        let a = vec![0, 0, 1, 1, 2, 2];
        assert!((adjusted_rand_index(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permuted_labels_score_one() {
        let a = vec![0, 0, 1, 1, 2, 2];
        let b = vec![5, 5, 9, 9, 1, 1];
        assert!((adjusted_rand_index(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn known_disagreement_value() {
        // Hand-computed: a = [0,0,1,1], b = [0,1,0,1].
        // sum_nij = 0, sum_ai = sum_bj = 2, total = 6,
        // expected = 4/6, max = 2, ari = (0 - 2/3) / (2 - 2/3) = -0.5.
        let a = vec![0, 0, 1, 1];
        let b = vec![0, 1, 0, 1];
        assert!((adjusted_rand_index(&a, &b) - (-0.5)).abs() < 1e-12);
    }
}
