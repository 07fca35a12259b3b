//! Binary classification metrics: Macro-F1, AUROC (Mann–Whitney with ties
//! counted as one half) and AUPRC in average-precision step form.

use std::io::Write;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} scores vs {1} labels")]
    Length(usize, usize),
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

/// Score threshold at or above which a node is predicted positive.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn count(predictions: &[bool], labels: &[bool]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(MetricError::Length(predictions.len(), labels.len()));
        }
        let mut c = Confusion::default();
        for (&p, &y) in predictions.iter().zip(labels) {
            match (p, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Unweighted mean of the per-class F1 scores of classes 1 and 0,
/// with 0/0 taken as 0.
pub fn macro_f1(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    if labels.is_empty() {
        return Err(MetricError::Empty);
    }
    let c = Confusion::count(predictions, labels)?;
    let pos = f1(c.tp, c.fp, c.fn_);
    let neg = f1(c.tn, c.fn_, c.fp);
    Ok((pos + neg) / 2.0)
}

pub fn threshold(scores: &[f64]) -> Vec<bool> {
    scores.iter().map(|&s| s >= DECISION_THRESHOLD).collect()
}

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Indices sorted by descending score, grouped into blocks of equal score.
fn tie_blocks(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match blocks.last_mut() {
            Some(b) if scores[b[0]] == scores[i] => b.push(i),
            _ => blocks.push(vec![i]),
        }
    }
    blocks
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from tie blocks in O(n log n).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::Undefined("AUROC needs both classes"));
    }
    // Walk blocks from the lowest score upward, counting negatives below.
    let mut neg_below = 0usize;
    let mut wins = 0.0;
    for block in tie_blocks(scores).iter().rev() {
        let p = block.iter().filter(|&&i| labels[i]).count();
        let n = block.len() - p;
        wins += p as f64 * (neg_below as f64 + 0.5 * n as f64);
        neg_below += n;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Average precision: Σ over descending score blocks of ΔRecall × Precision,
/// with tied scores entering as one block.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(MetricError::Undefined("AUPRC needs at least one positive"));
    }
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    for block in tie_blocks(scores) {
        let p = block.iter().filter(|&&i| labels[i]).count();
        tp += p;
        seen += block.len();
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSet {
    pub macro_f1: f64,
    pub auroc: f64,
    pub auprc: f64,
}

impl MetricSet {
    pub fn compute(scores: &[f64], labels: &[bool]) -> Result<Self> {
        Ok(Self {
            macro_f1: macro_f1(&threshold(scores), labels)?,
            auroc: auroc(scores, labels)?,
            auprc: auprc(scores, labels)?,
        })
    }

    pub fn named(&self) -> [(&'static str, f64); 3] {
        [("macro_f1", self.macro_f1), ("auroc", self.auroc), ("auprc", self.auprc)]
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
}

pub fn write_report<W: Write>(w: &mut W, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(w, "metric,value,n,seed")?;
    for r in rows {
        writeln!(w, "{},{:.6},{},{}", r.metric, r.value, r.n, r.seed)?;
    }
    Ok(())
}
