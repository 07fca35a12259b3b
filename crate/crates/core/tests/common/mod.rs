//! Independent reference implementations shared by the test targets.
#![allow(dead_code)]

use rand::Rng;

/// AUROC by counting every (positive, negative) pair.
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Average precision by sweeping every distinct score as a threshold and
/// recounting the confusion matrix from scratch at each one.
pub fn sweep_auprc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut cuts: Vec<f64> = scores.to_vec();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in cuts {
        let (mut tp, mut predicted) = (0.0, 0.0);
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                predicted += 1.0;
                if l {
                    tp += 1.0;
                }
            }
        }
        let recall = tp / pos;
        ap += (recall - prev_recall) * (tp / predicted);
        prev_recall = recall;
    }
    ap
}

/// Random scored set of 2..=12 items with heavy ties and both classes.
pub fn random_scored_set<R: Rng>(rng: &mut R) -> (Vec<f64>, Vec<bool>) {
    loop {
        let n = rng.random_range(2..=12);
        let levels = rng.random_range(1..=6);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}
