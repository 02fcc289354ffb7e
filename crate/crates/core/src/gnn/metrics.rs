use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub auc: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// ROC AUC via the Mann–Whitney statistic with midranks for ties.
/// `None` when either class is absent.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start..end (0-based) share the average 1-based rank
        let mid = (start + end + 1) as f64 / 2.0;
        rank_sum += mid * order[start..end].iter().filter(|&&i| positive[i]).count() as f64;
        start = end;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Macro one-vs-rest AUC. Binary problems use the positive-class score
/// alone. Classes with no positives or no negatives are skipped; if none
/// remain the result is 0.5.
pub fn macro_ovr_auc(probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> f64 {
    let column = |c: usize| -> Option<f64> {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        roc_auc(&scores, &pos)
    };
    if num_classes == 2 {
        return column(1).unwrap_or(0.5);
    }
    let aucs: Vec<f64> = (0..num_classes).filter_map(column).collect();
    if aucs.is_empty() {
        0.5
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    }
}

pub fn classification_metrics(probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Metrics {
    let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let mut confusion = vec![vec![0; num_classes]; num_classes];
    for (&y, &p) in labels.iter().zip(&predicted) {
        confusion[y][p] += 1;
    }
    Metrics {
        accuracy: accuracy(&predicted, labels),
        auc: macro_ovr_auc(probs, labels, num_classes),
        confusion,
    }
}
