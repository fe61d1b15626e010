//! Ranking metrics for the detection, relabeling, and recall tasks. All of
//! them normalize through the estimator's declared direction so callers
//! never hand-flip scores.

use crate::error::{Error, Result};
use crate::influence::Direction;

/// Scores oriented so that higher means "more noisy" (the detection
/// positive class).
fn orient_to_noisy(scores: &[f64], direction: Direction) -> Vec<f64> {
    match direction {
        Direction::HigherIsNoisier => scores.to_vec(),
        Direction::LowerIsNoisier => scores.iter().map(|s| -s).collect(),
    }
}

/// Scores oriented so that higher means "more helpful".
fn orient_to_helpful(scores: &[f64], direction: Direction) -> Vec<f64> {
    match direction {
        Direction::HigherIsNoisier => scores.iter().map(|s| -s).collect(),
        Direction::LowerIsNoisier => scores.to_vec(),
    }
}

fn check_binary_input(scores: &[f64], flags: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != flags.len() {
        return Err(Error::DimensionMismatch {
            what: "scores vs flags",
            expected: scores.len(),
            got: flags.len(),
        });
    }
    let pos = flags.iter().filter(|f| **f).count();
    let neg = flags.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::EmptySet("roc/ap needs both classes"));
    }
    Ok((pos, neg))
}

/// Average 1-based ranks, ties shared.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // mean of 1-based ranks i+1..=j+1
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney ROC AUC: the probability that a random positive outranks a
/// random negative, ties counted one half.
pub fn roc_auc(scores: &[f64], positive_flags: &[bool], direction: Direction) -> Result<f64> {
    let (pos, neg) = check_binary_input(scores, positive_flags)?;
    let oriented = orient_to_noisy(scores, direction);
    let ranks = average_ranks(&oriented);
    let rank_sum: f64 = ranks
        .iter()
        .zip(positive_flags)
        .filter(|(_, f)| **f)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Non-interpolated average precision: mean over ranked positives of the
/// precision at their rank. Ties order by original index (stable).
pub fn average_precision(
    scores: &[f64],
    positive_flags: &[bool],
    direction: Direction,
) -> Result<f64> {
    let (pos, _) = check_binary_input(scores, positive_flags)?;
    let oriented = orient_to_noisy(scores, direction);
    let mut order: Vec<usize> = (0..oriented.len()).collect();
    order.sort_by(|&a, &b| oriented[b].partial_cmp(&oriented[a]).unwrap().then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if positive_flags[idx] {
            hits += 1;
            ap += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(ap / pos as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "spearman inputs",
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::EmptySet("spearman needs >= 2 points"));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - mean;
        let db = rb[i] - mean;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::NonFinite("spearman with constant ranks"));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Argmax over per-class candidate scores under the estimator's helpfulness
/// orientation; exact ties resolve to the smallest class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelabelOutcome {
    pub label: usize,
    pub tied: bool,
}

pub fn relabel_from_scores(candidate_scores: &[f64], direction: Direction) -> Result<RelabelOutcome> {
    if candidate_scores.len() < 2 {
        return Err(Error::InvalidConfig("relabel needs k >= 2 candidates".into()));
    }
    let helpful = orient_to_helpful(candidate_scores, direction);
    let mut best = 0usize;
    let mut tied = false;
    for (k, v) in helpful.iter().enumerate().skip(1) {
        if *v > helpful[best] {
            best = k;
            tied = false;
        } else if *v == helpful[best] {
            tied = true;
        }
    }
    Ok(RelabelOutcome { label: best, tied })
}

/// Fraction of the `s` most influential (most helpful) training points that
/// share the validation label.
pub fn recall_at_s(
    per_val_scores: &[f64],
    train_labels: &[usize],
    val_label: usize,
    s: usize,
    direction: Direction,
) -> Result<f64> {
    if per_val_scores.len() != train_labels.len() {
        return Err(Error::DimensionMismatch {
            what: "recall scores vs labels",
            expected: train_labels.len(),
            got: per_val_scores.len(),
        });
    }
    if s == 0 {
        return Err(Error::InvalidConfig("s must be >= 1".into()));
    }
    if s > per_val_scores.len() {
        return Err(Error::InvalidConfig(format!(
            "s = {s} exceeds the {} training points",
            per_val_scores.len()
        )));
    }
    let helpful = orient_to_helpful(per_val_scores, direction);
    let mut order: Vec<usize> = (0..helpful.len()).collect();
    order.sort_by(|&a, &b| helpful[b].partial_cmp(&helpful[a]).unwrap().then(a.cmp(&b)));
    let matches = order[..s]
        .iter()
        .filter(|&&i| train_labels[i] == val_label)
        .count();
    Ok(matches as f64 / s as f64)
}

/// `1` iff the training label equals the validation label.
pub fn pseudo_label(train_labels: &[usize], val_label: usize) -> Vec<bool> {
    train_labels.iter().map(|y| *y == val_label).collect()
}

/// Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "pearson inputs",
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::EmptySet("pearson needs >= 2 points"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::NonFinite("pearson with a constant input"));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    const NOISY_HIGH: Direction = Direction::HigherIsNoisier;

    #[test]
    fn roc_auc_separated_and_inverted() {
        let flags = [true, true, false, false];
        let perfect = [0.9, 0.8, 0.2, 0.1];
        assert_eq!(roc_auc(&perfect, &flags, NOISY_HIGH).unwrap(), 1.0);
        let inverted = [0.1, 0.2, 0.8, 0.9];
        assert_eq!(roc_auc(&inverted, &flags, NOISY_HIGH).unwrap(), 0.0);
        // Same scores under the flipped direction recover 1.0.
        assert_eq!(
            roc_auc(&inverted, &flags, Direction::LowerIsNoisier).unwrap(),
            1.0
        );
    }

    #[test]
    fn roc_auc_hand_case() {
        let scores = [0.9, 0.8, 0.7, 0.6];
        let flags = [true, false, true, false];
        assert!((roc_auc(&scores, &flags, NOISY_HIGH).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn roc_auc_ties_count_half() {
        let scores = [0.5, 0.5];
        let flags = [true, false];
        assert_eq!(roc_auc(&scores, &flags, NOISY_HIGH).unwrap(), 0.5);
    }

    #[test]
    fn roc_auc_single_class_errors() {
        assert!(roc_auc(&[0.1, 0.2], &[true, true], NOISY_HIGH).is_err());
    }

    #[test]
    fn roc_auc_monotone_invariance() {
        let scores = [0.3, -1.5, 2.0, 0.7, 0.0];
        let flags = [true, false, true, false, true];
        let base = roc_auc(&scores, &flags, NOISY_HIGH).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 7.0).collect();
        let t = roc_auc(&transformed, &flags, NOISY_HIGH).unwrap();
        assert!((base - t).abs() < 1e-15);
    }

    #[test]
    fn ap_hand_cases() {
        let flags = [true, false, true];
        let scores = [0.9, 0.8, 0.7];
        assert!((average_precision(&scores, &flags, NOISY_HIGH).unwrap() - 5.0 / 6.0).abs() < 1e-15);

        // All positives first -> 1 regardless of balance.
        let flags = [true, true, false, false, false];
        let scores = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(average_precision(&scores, &flags, NOISY_HIGH).unwrap(), 1.0);

        // One positive ranked last of n -> 1/n.
        let flags = [false, false, true];
        let scores = [3.0, 2.0, 1.0];
        assert!((average_precision(&scores, &flags, NOISY_HIGH).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pearson_basics() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 4.0, 6.0, 8.0];
        assert!((pearson(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = [8.0, 6.0, 4.0, 2.0];
        assert!((pearson(&a, &c).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&a, &[1.0, 1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn spearman_basics() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [10.0, 20.0, 30.0, 40.0];
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&a, &c).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn relabel_argmax_and_ties() {
        // Signed estimator: helpful = higher.
        let out = relabel_from_scores(&[3.0, 1.0], Direction::LowerIsNoisier).unwrap();
        assert_eq!(out, RelabelOutcome { label: 0, tied: false });

        // Positive-only estimator: helpful = lower score.
        let out = relabel_from_scores(&[3.0, 1.0], NOISY_HIGH).unwrap();
        assert_eq!(out.label, 1);

        let out = relabel_from_scores(&[2.0, 2.0, 1.0], Direction::LowerIsNoisier).unwrap();
        assert_eq!(out, RelabelOutcome { label: 0, tied: true });
    }

    #[test]
    fn relabel_invariant_under_positive_rescale() {
        let scores = [0.4, 1.9, 0.2, 0.9];
        let a = relabel_from_scores(&scores, NOISY_HIGH).unwrap();
        let scaled: Vec<f64> = scores.iter().map(|s| 12.5 * s).collect();
        let b = relabel_from_scores(&scaled, NOISY_HIGH).unwrap();
        assert_eq!(a.label, b.label);
    }

    #[test]
    fn recall_cases() {
        // All same-class points at the helpful extreme.
        let labels = [1, 1, 0, 0];
        let scores = [9.0, 8.0, 1.0, 0.5]; // higher = helpful for signed
        assert_eq!(
            recall_at_s(&scores, &labels, 1, 2, Direction::LowerIsNoisier).unwrap(),
            1.0
        );
        // s = N recovers the class prior.
        assert_eq!(
            recall_at_s(&scores, &labels, 1, 4, Direction::LowerIsNoisier).unwrap(),
            0.5
        );
        assert!(recall_at_s(&scores, &labels, 1, 5, Direction::LowerIsNoisier).is_err());
    }

    #[test]
    fn recall_random_scores_near_class_prior() {
        use crate::numerics::RngState;
        let mut rng = RngState::new(123);
        let k = 4;
        let n = 400;
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let mut total = 0.0;
        let reps = 200;
        for _ in 0..reps {
            let scores: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
            total +=
                recall_at_s(&scores, &labels, 0, n / k, Direction::LowerIsNoisier).unwrap();
        }
        let mean = total / reps as f64;
        assert!((mean - 1.0 / k as f64).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn pseudo_label_cases() {
        assert_eq!(pseudo_label(&[1, 1, 1], 1), vec![true, true, true]);
        assert_eq!(pseudo_label(&[0, 2, 0], 1), vec![false, false, false]);
        assert_eq!(
            pseudo_label(&[0, 1, 0, 1], 1)
                .iter()
                .filter(|b| **b)
                .count(),
            2
        );
    }
}
