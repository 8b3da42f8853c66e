use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Scored items, their operating points and the concordance AUC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    /// One point per distinct score, thresholds ascending; an item is called
    /// positive iff its score is strictly greater than the threshold.
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub ci95: Option<(f64, f64)>,
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let p = labels.iter().filter(|&&l| l).count();
    (p, labels.len() - p)
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore);
    }
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(EvalError::SingleClass);
    }
    Ok((p, n))
}

/// Twice the Mann–Whitney statistic (wins count 2, ties 1), by sorting.
fn doubled_concordance(scores: &[f64], labels: &[bool]) -> u64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut negatives_below = 0u64;
    let mut total = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        total += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
        i = j;
    }
    total
}

/// ROC curve and Mann–Whitney AUC `(wins + 0.5·ties) / (P·N)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let (p, n) = check_inputs(scores, labels)?;
    let auc = doubled_concordance(scores, labels) as f64 / (2 * p * n) as f64;

    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let points = distinct
        .into_iter()
        .map(|t| {
            let (sensitivity, specificity) = confusion_rates(scores, labels, t);
            RocPoint { threshold: t, sensitivity, specificity }
        })
        .collect();
    Ok(RocCurve { scores: scores.to_vec(), labels: labels.to_vec(), points, auc, ci95: None })
}

fn confusion_rates(scores: &[f64], labels: &[bool], threshold: f64) -> (f64, f64) {
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (l, s > threshold) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    let rate = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    (rate(tp, fn_), rate(tn, fp))
}

/// (sensitivity, specificity) with positive iff score > threshold.
pub fn sens_spec_at(curve: &RocCurve, threshold: f64) -> (f64, f64) {
    confusion_rates(&curve.scores, &curve.labels, threshold)
}

/// Stratified percentile bootstrap of the AUC (2.5th / 97.5th percentiles).
pub fn bootstrap_ci(scores: &[f64], labels: &[bool], n_resamples: usize, seed: u64) -> Result<(f64, f64)> {
    let (p, n) = check_inputs(scores, labels)?;
    if p < 2 || n < 2 {
        return Err(EvalError::SingleClass);
    }
    if n_resamples < 100 {
        return Err(EvalError::TooFewResamples(n_resamples));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    let resampled_labels: Vec<bool> = (0..p + n).map(|i| i < p).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.0; p + n];
    let mut aucs: Vec<f64> = (0..n_resamples)
        .map(|_| {
            for slot in &mut buf[..p] {
                *slot = pos[rng.random_range(0..p)];
            }
            for slot in &mut buf[p..] {
                *slot = neg[rng.random_range(0..n)];
            }
            doubled_concordance(&buf, &resampled_labels) as f64 / (2 * p * n) as f64
        })
        .collect();
    aucs.sort_by(f64::total_cmp);
    Ok((percentile(&aucs, 2.5), percentile(&aucs, 97.5)))
}

/// Linear-interpolation percentile of sorted data (`q` in [0, 100]).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest, ProptestConfig, Strategy};

    /// Exhaustive all-pairs concordance with half credit for ties.
    fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut doubled = 0u64;
        let (mut p, mut n) = (0u64, 0u64);
        for (i, &li) in labels.iter().enumerate() {
            if li {
                p += 1;
            } else {
                n += 1;
            }
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if !lj {
                    if scores[i] > scores[j] {
                        doubled += 2;
                    } else if scores[i] == scores[j] {
                        doubled += 1;
                    }
                }
            }
        }
        doubled as f64 / (2 * p * n) as f64
    }

    #[test]
    fn worked_example() {
        let c = roc_auc(&[0.9, 0.8, 0.85, 0.7], &[true, true, false, false]).unwrap();
        assert_eq!(c.auc, 0.75);
    }

    #[test]
    fn separated_and_inverted() {
        let s = [0.1, 0.2, 0.3, 0.8, 0.9];
        let l = [false, false, false, true, true];
        assert_eq!(roc_auc(&s, &l).unwrap().auc, 1.0);
        let inv: Vec<bool> = l.iter().map(|x| !x).collect();
        assert_eq!(roc_auc(&s, &inv).unwrap().auc, 0.0);
        assert_eq!(bootstrap_ci(&s, &l, 500, 1).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(EvalError::SingleClass)));
        assert!(matches!(bootstrap_ci(&[0.1, 0.2, 0.3], &[true, true, false], 200, 0), Err(EvalError::SingleClass)));
    }

    #[test]
    fn degenerate_thresholds() {
        let c = roc_auc(&[0.2, 0.4, 0.6], &[true, false, true]).unwrap();
        assert_eq!(sens_spec_at(&c, 0.0), (1.0, 0.0));
        assert_eq!(sens_spec_at(&c, 1.0), (0.0, 1.0));
        let c = roc_auc(&[0.9, 0.1], &[true, false]).unwrap();
        assert_eq!(sens_spec_at(&c, 0.5), (1.0, 1.0));
    }

    #[test]
    fn bootstrap_is_seeded_and_brackets_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let labels: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
            let scores: Vec<f64> =
                labels.iter().map(|&l| rng.random_range(0.0..1.0) + if l { 0.3 } else { 0.0 }).collect();
            let auc = roc_auc(&scores, &labels).unwrap().auc;
            let ci = bootstrap_ci(&scores, &labels, 2000, 9).unwrap();
            assert_eq!(ci, bootstrap_ci(&scores, &labels, 2000, 9).unwrap());
            assert!(ci.0 <= auc && auc <= ci.1, "{ci:?} vs {auc}");
        }
    }

    #[test]
    fn ci_narrows_with_more_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut data = |n: usize| {
            let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
            let scores: Vec<f64> =
                labels.iter().map(|&l| rng.random_range(0.0..1.0) + if l { 0.25 } else { 0.0 }).collect();
            let ci = bootstrap_ci(&scores, &labels, 1000, 1).unwrap();
            ci.1 - ci.0
        };
        let small: f64 = (0..5).map(|_| data(40)).sum();
        let large: f64 = (0..5).map(|_| data(160)).sum();
        assert!(large < small, "{large} vs {small}");
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0, 5.0], 50.0), 3.0);
        assert_eq!(percentile(&[0.0, 10.0], 25.0), 2.5);
        assert_eq!(percentile(&[7.0], 99.0), 7.0);
    }

    fn dataset() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..=200).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..12).prop_map(|q| q as f64 / 11.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn auc_equals_pairwise_oracle((scores, mut labels) in dataset()) {
            labels[0] = true;
            labels[1] = false;
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap().auc, pairwise_auc(&scores, &labels));
        }

        #[test]
        fn auc_invariant_under_monotone_transform((scores, mut labels) in dataset()) {
            labels[0] = true;
            labels[1] = false;
            let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap().auc, roc_auc(&t, &labels).unwrap().auc);
        }

        #[test]
        fn points_match_confusion_counts((scores, mut labels) in dataset()) {
            labels[0] = true;
            labels[1] = false;
            let c = roc_auc(&scores, &labels).unwrap();
            let mut prev_sens = f64::INFINITY;
            for pt in &c.points {
                let tp = scores.iter().zip(&labels).filter(|(s, l)| **l && **s > pt.threshold).count();
                let p = labels.iter().filter(|l| **l).count();
                prop_assert_eq!(pt.sensitivity, tp as f64 / p as f64);
                prop_assert_eq!(sens_spec_at(&c, pt.threshold), (pt.sensitivity, pt.specificity));
                prop_assert!(pt.sensitivity <= prev_sens);
                prev_sens = pt.sensitivity;
            }
        }
    }
}
