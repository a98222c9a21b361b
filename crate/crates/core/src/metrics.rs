//! Classification accuracy bookkeeping.

use crate::real::Real;

/// Whether `label` is among the `k` largest entries of `row`; equal values
/// rank the lower class index first.
pub fn top_k_hit<S: Real>(row: &[S], label: usize, k: usize) -> bool {
    let target = row[label];
    let rank = row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < label))
        .count();
    rank < k
}

/// Running totals over a pass of batches.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Tally {
    pub loss_sum: f64,
    pub top1: usize,
    pub top5: usize,
    pub count: usize,
}

impl Tally {
    /// Folds in one batch: `logits` is row-major (B, K), `loss` the batch mean.
    pub fn record<S: Real>(&mut self, logits: &[S], labels: &[usize], loss: f64) {
        let k = logits.len() / labels.len().max(1);
        for (row, &label) in logits.chunks_exact(k).zip(labels) {
            self.top1 += top_k_hit(row, label, 1) as usize;
            self.top5 += top_k_hit(row, label, 5) as usize;
        }
        self.loss_sum += loss * labels.len() as f64;
        self.count += labels.len();
    }

    pub fn merge(&mut self, other: &Tally) {
        self.loss_sum += other.loss_sum;
        self.top1 += other.top1;
        self.top5 += other.top5;
        self.count += other.count;
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.count.max(1) as f64
    }

    pub fn top1_rate(&self) -> f64 {
        self.top1 as f64 / self.count.max(1) as f64
    }

    pub fn top5_rate(&self) -> f64 {
        self.top5 as f64 / self.count.max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_favor_lower_index() {
        let row = [1.0f32, 1.0, 0.5];
        assert!(top_k_hit(&row, 0, 1));
        assert!(!top_k_hit(&row, 1, 1));
        assert!(top_k_hit(&row, 1, 2));
        assert!(top_k_hit(&row, 2, 5));
    }

    #[test]
    fn tally_rates() {
        let mut t = Tally::default();
        t.record(&[2.0f64, 1.0, 0.0, 3.0], &[0, 0], 0.5);
        assert_eq!((t.top1, t.top5, t.count), (1, 2, 2));
        assert_eq!(t.mean_loss(), 0.5);
        assert_eq!(t.top1_rate(), 0.5);
    }
}
