use super::sample::{LabelMap, IGNORE_INDEX};
use crate::error::{Error, Result};

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub miou: f64,
    pub pixel_accuracy: f64,
    /// `None` for classes absent from both truth and prediction.
    pub per_class: Vec<Option<f64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { k: num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), num_classes * num_classes);
        ConfusionMatrix { k: num_classes, counts }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Counts every pixel whose truth is not the ignore index.
    pub fn update(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (truth.height, truth.width) {
            return Err(Error::Dimension(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.height, pred.width, truth.height, truth.width
            )));
        }
        let k = self.k;
        let mut delta = vec![0u64; k * k];
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            if t == IGNORE_INDEX {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= k || t >= k {
                return Err(Error::Data(format!("class {} outside 0..{k}", p.max(t))));
            }
            delta[t * k + p] += 1;
        }
        for (c, d) in self.counts.iter_mut().zip(delta) {
            *c += d;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `IoU_k = cm[k,k] / (row_k + col_k - cm[k,k])`; classes with a zero
    /// denominator are left out of the mean.
    pub fn scores(&self) -> Result<Scores> {
        let total = self.total();
        if total == 0 {
            return Err(Error::UndefinedMetric("confusion matrix is empty".into()));
        }
        let k = self.k;
        let mut per_class = Vec::with_capacity(k);
        let mut trace = 0;
        for c in 0..k {
            let tp = self.get(c, c);
            trace += tp;
            let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
            let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
            let denom = row + col - tp;
            per_class.push((denom > 0).then(|| tp as f64 / denom as f64));
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(Scores { miou, pixel_accuracy: trace as f64 / total as f64, per_class })
    }
}

pub fn update_confusion(cm: &mut ConfusionMatrix, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
    cm.update(pred, truth)
}

pub fn miou_pixacc(cm: &ConfusionMatrix) -> Result<Scores> {
    cm.scores()
}
