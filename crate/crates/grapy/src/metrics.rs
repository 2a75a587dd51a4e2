//! Confusion matrices, mean IoU and mean per-class accuracy.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::labels::{argmax_channel, LabelMap};
use crate::model::Prediction;
use crate::taxonomy::{Level, Taxonomy};
use crate::tensor::Tensor;

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Invalid("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.size() != gt.size() {
            return Err(Error::Invalid(format!(
                "prediction is {:?}, ground truth is {:?}",
                pred.size(),
                gt.size()
            )));
        }
        if pred.classes() > self.classes || gt.classes() > self.classes {
            return Err(Error::Invalid(format!(
                "label maps have up to {} classes, matrix has {}",
                pred.classes().max(gt.classes()),
                self.classes
            )));
        }
        for (&p, &g) in pred.values().iter().zip(gt.values()) {
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Invalid("cannot merge matrices of different size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|j| self.get(k, j)).sum()
    }

    fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, k)).sum()
    }

    /// IoU of class `k`, or `None` when it appears in neither prediction nor
    /// ground truth.
    pub fn iou(&self, k: usize) -> Option<f64> {
        let union = self.row_sum(k) + self.col_sum(k) - self.get(k, k);
        (union > 0).then(|| self.get(k, k) as f64 / union as f64)
    }

    /// Recall of class `k`, or `None` without ground-truth support.
    pub fn recall(&self, k: usize) -> Option<f64> {
        let support = self.row_sum(k);
        (support > 0).then(|| self.get(k, k) as f64 / support as f64)
    }

    pub fn miou(&self) -> Result<f64> {
        mean((0..self.classes).filter_map(|k| self.iou(k)))
            .ok_or_else(|| Error::Invalid("no class has any pixels".into()))
    }

    pub fn mean_accuracy(&self) -> Result<f64> {
        self.mean_accuracy_from(0)
    }

    /// Mean recall over classes `first..`; `first = 1` drops background.
    pub fn mean_accuracy_from(&self, first: usize) -> Result<f64> {
        mean((first..self.classes).filter_map(|k| self.recall(k)))
            .ok_or_else(|| Error::Invalid("no class has ground-truth pixels".into()))
    }

    /// Plain-text table: one row per class, then the summary rows.
    pub fn report(&self, names: &[&str]) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let width = names.iter().map(|n| n.len()).max().unwrap_or(5).max(14);
        let mut out = format!("{:<width$}  {:>7}  {:>7}\n", "class", "IoU", "recall");
        for k in 0..self.classes {
            let name = names.get(k).copied().unwrap_or("?");
            let _ = writeln!(out, "{name:<width$}  {:>7}  {:>7}", fmt(self.iou(k)), fmt(self.recall(k)));
        }
        let _ = writeln!(out, "{:<width$}  {:>7}", "mIoU", fmt(self.miou().ok()));
        let _ = writeln!(out, "{:<width$}  {:>7}", "mean accuracy", fmt(self.mean_accuracy().ok()));
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub miou: f64,
    pub mean_accuracy: f64,
}

impl Scores {
    pub fn of(cm: &ConfusionMatrix) -> Result<Self> {
        Self::of_from(cm, 0)
    }

    /// Mean accuracy over classes `first..`.
    pub fn of_from(cm: &ConfusionMatrix, first: usize) -> Result<Self> {
        Ok(Self {
            miou: cm.miou()?,
            mean_accuracy: cm.mean_accuracy_from(first)?,
        })
    }
}

/// Which prediction branch to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Main,
    Gpm,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Main => "main",
            Branch::Gpm => "gpm",
        }
    }
}

/// Confusion matrices at every level for both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Indexed `[branch][level - 1]`; the pyramid entry is `None` when the
    /// model has no pyramid branch.
    pub main: [ConfusionMatrix; 3],
    pub gpm: Option<[ConfusionMatrix; 3]>,
    /// Leave background out of mean accuracy.
    pub exclude_background: bool,
}

impl Evaluation {
    pub fn matrix(&self, branch: Branch, level: Level) -> Option<&ConfusionMatrix> {
        let i = level.number() - 1;
        match branch {
            Branch::Main => Some(&self.main[i]),
            Branch::Gpm => self.gpm.as_ref().map(|m| &m[i]),
        }
    }

    pub fn scores(&self, branch: Branch, level: Level) -> Option<Result<Scores>> {
        let first = usize::from(self.exclude_background);
        self.matrix(branch, level).map(|cm| Scores::of_from(cm, first))
    }

    /// `key=value` lines, e.g. `gpm.level3.miou=0.8123`.
    pub fn kv_lines(&self) -> String {
        let mut out = String::new();
        for branch in [Branch::Main, Branch::Gpm] {
            for level in Level::ALL {
                if let Some(Ok(s)) = self.scores(branch, level) {
                    let b = branch.as_str();
                    let l = level.number();
                    let _ = writeln!(out, "{b}.level{l}.miou={:.6}", s.miou);
                    let _ = writeln!(out, "{b}.level{l}.mean_accuracy={:.6}", s.mean_accuracy);
                }
            }
        }
        out
    }

    pub fn report(&self, taxonomy: &Taxonomy) -> String {
        let mut out = String::new();
        for branch in [Branch::Main, Branch::Gpm] {
            for level in Level::ALL {
                if let Some(cm) = self.matrix(branch, level) {
                    let _ = writeln!(out, "[{} branch, level {}]", branch.as_str(), level.number());
                    out.push_str(&cm.report(&taxonomy.class_names(level)));
                    out.push('\n');
                }
            }
        }
        out
    }
}

fn level_matrices(
    taxonomy: &Taxonomy,
    probs: &Tensor,
    gt: &LabelMap,
) -> Result<[ConfusionMatrix; 3]> {
    let pred = argmax_channel(probs);
    let mut out = Level::ALL.map(|l| ConfusionMatrix::new(taxonomy.num_classes(l)));
    for (cm, level) in out.iter_mut().zip(Level::ALL) {
        let p = taxonomy.coarsen(&pred, level)?;
        let g = taxonomy.coarsen(gt, level)?;
        cm.accumulate(&p, &g)?;
    }
    Ok(out)
}

fn merge_all(acc: &mut [ConfusionMatrix; 3], other: &[ConfusionMatrix; 3]) -> Result<()> {
    for (a, b) in acc.iter_mut().zip(other) {
        a.merge(b)?;
    }
    Ok(())
}

/// Scores `predict` on every sample at all three levels. `workers > 1`
/// spreads images over a thread pool; results do not depend on it.
pub fn evaluate<F>(dataset: &Dataset, workers: usize, predict: F) -> Result<Evaluation>
where
    F: Fn(&Tensor) -> Result<Prediction> + Sync,
{
    let tax = &dataset.taxonomy;
    let one = |i: usize| -> Result<([ConfusionMatrix; 3], Option<[ConfusionMatrix; 3]>)> {
        let s = &dataset.samples[i];
        let p = predict(&s.image)?;
        let main = level_matrices(tax, &p.main, &s.labels)?;
        let gpm = p.gpm.as_ref().map(|g| level_matrices(tax, g, &s.labels)).transpose()?;
        Ok((main, gpm))
    };
    let per_image: Vec<_> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
        pool.install(|| (0..dataset.len()).into_par_iter().map(one).collect::<Result<_>>())?
    } else {
        (0..dataset.len()).map(one).collect::<Result<_>>()?
    };
    let mut main = Level::ALL.map(|l| ConfusionMatrix::new(tax.num_classes(l)));
    let mut gpm: Option<[ConfusionMatrix; 3]> = None;
    for (m, g) in &per_image {
        merge_all(&mut main, m)?;
        if let Some(g) = g {
            match gpm.as_mut() {
                Some(acc) => merge_all(acc, g)?,
                None => gpm = Some(g.clone()),
            }
        }
    }
    Ok(Evaluation {
        main,
        gpm,
        exclude_background: false,
    })
}

/// Scores of `branch` at `level` (falls back to the main branch when there is
/// no pyramid).
pub fn evaluate_at_level<F>(dataset: &Dataset, level: Level, branch: Branch, predict: F) -> Result<Scores>
where
    F: Fn(&Tensor) -> Result<Prediction> + Sync,
{
    let eval = evaluate(dataset, 1, predict)?;
    let cm = eval
        .matrix(branch, level)
        .or_else(|| eval.matrix(Branch::Main, level))
        .expect("main branch always scored");
    Scores::of(cm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_lists_every_class() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 0, 0], vec![1, 2, 0], vec![0, 0, 0]]).unwrap();
        let r = cm.report(&["bg", "a", "b"]);
        assert_eq!(r.lines().count(), 1 + 3 + 2);
        assert!(r.lines().nth(3).unwrap().contains('-'));
    }

    #[test]
    fn merge_requires_same_size() {
        let mut a = ConfusionMatrix::new(2);
        assert!(a.merge(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn empty_matrix_has_no_miou() {
        assert!(ConfusionMatrix::new(4).miou().is_err());
        assert!(ConfusionMatrix::new(4).mean_accuracy().is_err());
    }
}
