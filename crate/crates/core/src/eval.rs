//! Confusion-matrix accumulation and intersection-over-union.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::LabelMap;

/// Pixel counts indexed `[ground truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_labels: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_labels: usize) -> Self {
        ConfusionMatrix {
            num_labels,
            counts: vec![0; num_labels * num_labels],
        }
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_labels + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every non-void pixel of the pair.
    pub fn accumulate(&mut self, gt: &LabelMap, pred: &LabelMap, void_label: Option<u8>) -> Result<()> {
        if gt.height() != pred.height() || gt.width() != pred.width() {
            return Err(Error::invalid(format!(
                "ground truth {}x{} vs prediction {}x{}",
                gt.height(),
                gt.width(),
                pred.height(),
                pred.width()
            )));
        }
        for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
            if Some(g) == void_label {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= self.num_labels || p >= self.num_labels {
                return Err(Error::invalid(format!(
                    "label pair ({g}, {p}) outside {} labels",
                    self.num_labels
                )));
            }
            self.counts[g * self.num_labels + p] += 1;
        }
        Ok(())
    }

    /// Cell-wise sum.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_labels != self.num_labels {
            return Err(Error::invalid("confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IOU (`None` where the class is in neither ground truth nor
    /// prediction) and the mean over the defined classes.
    pub fn mean_iou(&self) -> Result<IouReport> {
        let n = self.num_labels;
        let per_class: Vec<Option<f64>> = (0..n)
            .map(|l| {
                let tp = self.get(l, l);
                let row: u64 = (0..n).map(|p| self.get(l, p)).sum();
                let col: u64 = (0..n).map(|g| self.get(g, l)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Err(Error::UndefinedMean);
        }
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        Ok(IouReport { per_class, mean })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl IouReport {
    /// Fixed-order table: one row per class, then the mean, 4 decimals.
    pub fn table(&self) -> String {
        let mut s = String::from("class\tiou\n");
        for (l, v) in self.per_class.iter().enumerate() {
            match v {
                Some(v) => writeln!(s, "{l}\t{v:.4}").unwrap(),
                None => writeln!(s, "{l}\t-").unwrap(),
            }
        }
        writeln!(s, "mean\t{:.4}", self.mean).unwrap();
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("class,iou\n");
        for (l, v) in self.per_class.iter().enumerate() {
            match v {
                Some(v) => writeln!(s, "{l},{v:.6}").unwrap(),
                None => writeln!(s, "{l},").unwrap(),
            }
        }
        writeln!(s, "mean,{:.6}", self.mean).unwrap();
        s
    }
}

/// Dataset-level mean IOU over `(ground truth, prediction)` pairs.
pub fn evaluate<'a>(
    num_labels: usize,
    pairs: impl IntoIterator<Item = (&'a LabelMap, &'a LabelMap)>,
    void_label: Option<u8>,
) -> Result<IouReport> {
    let mut cm = ConfusionMatrix::new(num_labels);
    for (gt, pred) in pairs {
        cm.accumulate(gt, pred, void_label)?;
    }
    cm.mean_iou()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nested_loop(gt: &LabelMap, pred: &LabelMap, n: usize) -> Vec<u64> {
        let mut out = vec![0u64; n * n];
        for g in 0..n {
            for p in 0..n {
                for m in 0..gt.num_pixels() {
                    if gt.labels()[m] as usize == g && pred.labels()[m] as usize == p {
                        out[g * n + p] += 1;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn perfect_class_one() {
        let m = LabelMap::filled(2, 2, 1);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&m, &m, None).unwrap();
        assert_eq!(cm.get(1, 1), 4);
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn void_pixels_are_skipped() {
        let gt = LabelMap::new(1, 4, vec![1, 255, 0, 255]).unwrap();
        let pred = LabelMap::new(1, 4, vec![1, 0, 0, 1]).unwrap();
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&gt, &pred, Some(255)).unwrap();
        assert_eq!(cm.total(), 2);
    }

    #[test]
    fn hand_computed_iou() {
        let gt = LabelMap::filled(2, 2, 1);
        let pred = LabelMap::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let r = evaluate(2, [(&gt, &pred)], None).unwrap();
        assert_eq!(r.per_class, vec![Some(0.0), Some(0.5)]);
        assert_eq!(r.mean, 0.25);
    }

    #[test]
    fn perfect_prediction() {
        let gt = LabelMap::new(1, 3, vec![0, 1, 2]).unwrap();
        let r = evaluate(4, [(&gt, &gt)], None).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), Some(1.0), None]);
        assert_eq!(r.mean, 1.0);
        assert!(r.table().ends_with("mean\t1.0000\n"));
        assert!(r.table().contains("3\t-\n"));
    }

    #[test]
    fn empty_matrix_has_no_mean() {
        assert!(matches!(ConfusionMatrix::new(3).mean_iou(), Err(Error::UndefinedMean)));
    }

    #[test]
    fn mismatched_dims() {
        let a = LabelMap::filled(2, 2, 0);
        let b = LabelMap::filled(2, 3, 0);
        assert!(ConfusionMatrix::new(2).accumulate(&a, &b, None).is_err());
    }

    #[test]
    fn random_pair_matches_nested_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let gt = LabelMap::new(8, 8, (0..64).map(|_| rng.gen_range(0..5)).collect()).unwrap();
        let pred = LabelMap::new(8, 8, (0..64).map(|_| rng.gen_range(0..5)).collect()).unwrap();
        let mut cm = ConfusionMatrix::new(5);
        cm.accumulate(&gt, &pred, None).unwrap();
        assert_eq!(cm.counts, nested_loop(&gt, &pred, 5));
    }

    proptest! {
        #[test]
        fn permutation_leaves_mean_unchanged(
            pairs in prop::collection::vec((0u8..4, 0u8..4), 1..60),
            perm_seed in 0usize..24,
        ) {
            let mut perm: Vec<u8> = vec![0, 1, 2, 3];
            // enumerate the 24 permutations by a factorial index
            let mut idx = perm_seed;
            let mut out = Vec::new();
            while !perm.is_empty() {
                let k = idx % perm.len();
                idx /= perm.len().max(1);
                out.push(perm.remove(k));
            }
            let n = pairs.len();
            let gt = LabelMap::new(1, n, pairs.iter().map(|p| p.0).collect()).unwrap();
            let pred = LabelMap::new(1, n, pairs.iter().map(|p| p.1).collect()).unwrap();
            let pgt = LabelMap::new(1, n, pairs.iter().map(|p| out[p.0 as usize]).collect()).unwrap();
            let ppred = LabelMap::new(1, n, pairs.iter().map(|p| out[p.1 as usize]).collect()).unwrap();
            let a = evaluate(4, [(&gt, &pred)], None).unwrap();
            let b = evaluate(4, [(&pgt, &ppred)], None).unwrap();
            prop_assert!((a.mean - b.mean).abs() < 1e-12);
            for l in 0..4 {
                prop_assert_eq!(a.per_class[l], b.per_class[out[l] as usize]);
                if let Some(v) = a.per_class[l] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }
}
