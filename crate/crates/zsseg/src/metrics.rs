//! Segmentation evaluation: confusion matrix, per-class IoU, subset mIoU
//! and the harmonic mean of seen and unseen mIoU.

use crate::error::{Error, Result};

/// Label value treated as unlabeled and skipped during evaluation.
pub const IGNORE_LABEL: i64 = -1;

/// Row = ground truth, column = prediction.
#[derive(Clone, Debug)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    classes: usize,
    seen: Vec<bool>,
}

/// Per-class IoU with the degenerate case flagged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassIoU {
    pub iou: f64,
    /// No ground-truth and no predicted points for this class.
    pub absent: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    Seen,
    Unseen,
    All,
}

impl ConfusionMatrix {
    pub fn new(seen: Vec<bool>) -> Self {
        let classes = seen.len();
        ConfusionMatrix {
            counts: vec![0; classes * classes],
            classes,
            seen,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulate one batch of predictions. Ignore-labeled points are
    /// skipped; any other invalid id is an error.
    pub fn update(&mut self, predictions: &[usize], labels: &[i64]) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(Error::Argument(format!(
                "{} predictions vs {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        for (&p, &y) in predictions.iter().zip(labels) {
            if y == IGNORE_LABEL {
                continue;
            }
            if y < 0 || y as usize >= self.classes {
                return Err(Error::Argument(format!("label {y} out of range")));
            }
            if p >= self.classes {
                return Err(Error::Argument(format!("prediction {p} out of range")));
            }
            self.counts[y as usize * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Merge another confusion matrix (e.g. one per scene) into this one.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes || other.seen != self.seen {
            return Err(Error::Argument("merging incompatible matrices".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU_c = TP / (TP + FP + FN); zero denominator gives 0, flagged absent.
    pub fn iou_per_class(&self) -> Vec<ClassIoU> {
        (0..self.classes)
            .map(|c| {
                let tp = self.count(c, c);
                let gt: u64 = (0..self.classes).map(|p| self.count(c, p)).sum();
                let predicted: u64 = (0..self.classes).map(|g| self.count(g, c)).sum();
                let denom = gt + predicted - tp;
                if denom == 0 {
                    ClassIoU {
                        iou: 0.0,
                        absent: true,
                    }
                } else {
                    ClassIoU {
                        iou: tp as f64 / denom as f64,
                        absent: false,
                    }
                }
            })
            .collect()
    }

    fn in_subset(&self, c: usize, subset: Subset) -> bool {
        match subset {
            Subset::Seen => self.seen[c],
            Subset::Unseen => !self.seen[c],
            Subset::All => true,
        }
    }

    /// Mean IoU over the subset. Classes flagged absent (no ground truth
    /// and never predicted) are excluded from the average.
    pub fn miou(&self, subset: Subset) -> Result<f64> {
        let ious = self.iou_per_class();
        let members: Vec<usize> = (0..self.classes)
            .filter(|&c| self.in_subset(c, subset))
            .collect();
        if members.is_empty() {
            return Err(Error::Argument(format!("empty subset {subset:?}")));
        }
        let present: Vec<f64> = members
            .iter()
            .filter(|&&c| !ious[c].absent)
            .map(|&c| ious[c].iou)
            .collect();
        if present.is_empty() {
            return Ok(0.0);
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn seen_flags(&self) -> &[bool] {
        &self.seen
    }
}

/// Harmonic mean 2su/(s+u), zero when both inputs are zero.
pub fn hmiou(miou_seen: f64, miou_unseen: f64) -> f64 {
    let sum = miou_seen + miou_unseen;
    if sum == 0.0 {
        return 0.0;
    }
    2.0 * miou_seen * miou_unseen / sum
}

/// Full evaluation result for one run.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub seen: Vec<bool>,
    pub ious: Vec<ClassIoU>,
    pub miou_seen: f64,
    pub miou_unseen: f64,
    pub miou_all: f64,
    pub hmiou: f64,
}

impl MetricsReport {
    pub fn from_confusion(conf: &ConfusionMatrix, class_names: &[String]) -> Result<Self> {
        if class_names.len() != conf.classes() {
            return Err(Error::Argument(format!(
                "{} names for {} classes",
                class_names.len(),
                conf.classes()
            )));
        }
        let miou_seen = conf.miou(Subset::Seen)?;
        let miou_unseen = conf.miou(Subset::Unseen)?;
        Ok(MetricsReport {
            class_names: class_names.to_vec(),
            seen: conf.seen_flags().to_vec(),
            ious: conf.iou_per_class(),
            miou_seen,
            miou_unseen,
            miou_all: conf.miou(Subset::All)?,
            hmiou: hmiou(miou_seen, miou_unseen),
        })
    }

    /// CSV with header `split,class,iou`, one row per class, then the four
    /// summary rows. LF line endings and a trailing newline. An empty class
    /// list yields the header alone, since no partition exists to summarize.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,class,iou\n");
        if self.class_names.is_empty() {
            return out;
        }
        for (c, name) in self.class_names.iter().enumerate() {
            let split = if self.seen[c] { "seen" } else { "unseen" };
            out.push_str(&format!(
                "{split},{name},{}\n",
                fmt_metric(self.ious[c].iou)
            ));
        }
        out.push_str(&format!(
            "summary,miou_seen,{}\n",
            fmt_metric(self.miou_seen)
        ));
        out.push_str(&format!(
            "summary,miou_unseen,{}\n",
            fmt_metric(self.miou_unseen)
        ));
        out.push_str(&format!("summary,miou_all,{}\n", fmt_metric(self.miou_all)));
        out.push_str(&format!("summary,hmiou,{}\n", fmt_metric(self.hmiou)));
        out
    }
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn flags(seen: usize, unseen: usize) -> Vec<bool> {
        let mut f = vec![true; seen];
        f.extend(vec![false; unseen]);
        f
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let mut conf = ConfusionMatrix::new(flags(2, 1));
        conf.update(&[0, 1, 2, 0], &[0, 1, 2, 0]).unwrap();
        for c in 0..3 {
            for p in 0..3 {
                if c == p {
                    continue;
                }
                assert_eq!(conf.count(c, p), 0);
            }
        }
        let ious = conf.iou_per_class();
        assert!(ious.iter().all(|i| i.iou == 1.0 && !i.absent));
        assert_eq!(conf.miou(Subset::All).unwrap(), 1.0);
    }

    #[test]
    fn empty_update_changes_nothing() {
        let mut conf = ConfusionMatrix::new(flags(1, 1));
        conf.update(&[], &[]).unwrap();
        assert_eq!(conf.total(), 0);
    }

    #[test]
    fn ignore_label_is_skipped() {
        let mut conf = ConfusionMatrix::new(flags(1, 1));
        conf.update(&[0, 1], &[IGNORE_LABEL, 1]).unwrap();
        assert_eq!(conf.total(), 1);
    }

    #[test]
    fn invalid_ids_are_rejected() {
        let mut conf = ConfusionMatrix::new(flags(1, 1));
        assert!(conf.update(&[0], &[5]).is_err());
        assert!(conf.update(&[7], &[0]).is_err());
        assert!(conf.update(&[0, 0], &[0]).is_err());
    }

    #[test]
    fn update_matches_recount_oracle() {
        let mut rng = stream(1, "metrics");
        let classes = 5;
        let n = 400;
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let labels: Vec<i64> = (0..n)
            .map(|_| rng.random_range(0..classes as i64))
            .collect();
        let mut conf = ConfusionMatrix::new(flags(3, 2));
        conf.update(&preds, &labels).unwrap();
        for gt in 0..classes {
            for p in 0..classes {
                let expect = preds
                    .iter()
                    .zip(&labels)
                    .filter(|(&pp, &yy)| pp == p && yy == gt as i64)
                    .count() as u64;
                assert_eq!(conf.count(gt, p), expect);
            }
        }
    }

    #[test]
    fn absent_class_flagged_and_excluded() {
        // class 2 never appears in labels nor predictions
        let mut conf = ConfusionMatrix::new(flags(2, 1));
        conf.update(&[0, 1, 0], &[0, 1, 1]).unwrap();
        let ious = conf.iou_per_class();
        assert!(ious[2].absent);
        assert_eq!(ious[2].iou, 0.0);
        // unseen subset = {2}, all absent -> 0
        assert_eq!(conf.miou(Subset::Unseen).unwrap(), 0.0);
        // all-subset average excludes the absent class
        let expect = (ious[0].iou + ious[1].iou) / 2.0;
        assert!((conf.miou(Subset::All).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn iou_matches_set_arithmetic_oracle() {
        let mut rng = stream(2, "metrics");
        let classes = 4;
        let preds: Vec<usize> = (0..300).map(|_| rng.random_range(0..classes)).collect();
        let labels: Vec<i64> = (0..300)
            .map(|_| rng.random_range(0..classes as i64))
            .collect();
        let mut conf = ConfusionMatrix::new(flags(2, 2));
        conf.update(&preds, &labels).unwrap();
        let ious = conf.iou_per_class();
        for c in 0..classes {
            let tp = preds
                .iter()
                .zip(&labels)
                .filter(|(&p, &y)| p == c && y == c as i64)
                .count() as f64;
            let union = preds
                .iter()
                .zip(&labels)
                .filter(|(&p, &y)| p == c || y == c as i64)
                .count() as f64;
            assert!((ious[c].iou - tp / union).abs() < 1e-12);
        }
    }

    #[test]
    fn miou_of_equal_ious_is_that_value() {
        let mut conf = ConfusionMatrix::new(flags(2, 0));
        // both classes get IoU 1/3: 1 TP, 1 FP, 1 FN each
        conf.update(&[0, 1, 0, 1, 0, 1], &[0, 1, 1, 0, 1, 0])
            .unwrap();
        let ious = conf.iou_per_class();
        assert!((ious[0].iou - ious[1].iou).abs() < 1e-12);
        assert!((conf.miou(Subset::Seen).unwrap() - ious[0].iou).abs() < 1e-12);
        assert!(conf.miou(Subset::Unseen).is_err());
    }

    #[test]
    fn merge_equals_streamed_updates() {
        let mut rng = stream(3, "metrics");
        let classes = 3usize;
        let mk = |rng: &mut crate::rng::Stream| {
            let preds: Vec<usize> = (0..100).map(|_| rng.random_range(0..classes)).collect();
            let labels: Vec<i64> = (0..100)
                .map(|_| rng.random_range(0..classes as i64))
                .collect();
            (preds, labels)
        };
        let (p1, l1) = mk(&mut rng);
        let (p2, l2) = mk(&mut rng);
        let mut streamed = ConfusionMatrix::new(flags(2, 1));
        streamed.update(&p1, &l1).unwrap();
        streamed.update(&p2, &l2).unwrap();
        let mut a = ConfusionMatrix::new(flags(2, 1));
        a.update(&p1, &l1).unwrap();
        let mut b = ConfusionMatrix::new(flags(2, 1));
        b.update(&p2, &l2).unwrap();
        a.merge(&b).unwrap();
        for gt in 0..classes {
            for p in 0..classes {
                assert_eq!(a.count(gt, p), streamed.count(gt, p));
            }
        }
    }

    #[test]
    fn hmiou_paper_rows() {
        assert!((hmiou(34.5, 14.3) - 20.2).abs() < 0.05);
        assert!((hmiou(32.8, 7.7) - 12.5).abs() < 0.05);
        assert!((hmiou(58.9, 9.7) - 16.7).abs() < 0.05);
        assert!((hmiou(46.4, 12.8) - 20.1).abs() < 0.05);
        assert_eq!(hmiou(39.2, 0.0), 0.0);
        assert_eq!(hmiou(0.0, 0.0), 0.0);
    }

    #[test]
    fn hmiou_bounds() {
        let mut rng = stream(4, "metrics");
        for _ in 0..50 {
            let s: f64 = rng.random_range(0.0..1.0);
            let u: f64 = rng.random_range(0.0..1.0);
            let h = hmiou(s, u);
            assert!(h <= 2.0 * s.min(u) + 1e-12);
            assert!(h <= (s + u) / 2.0 + 1e-12);
        }
        assert!((hmiou(0.37, 0.37) - 0.37).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = stream(5, "metrics");
        let preds: Vec<usize> = (0..200).map(|_| rng.random_range(0..4)).collect();
        let labels: Vec<i64> = (0..200).map(|_| rng.random_range(0..4i64)).collect();
        let mut conf = ConfusionMatrix::new(flags(2, 2));
        conf.update(&preds, &labels).unwrap();
        let mut order: Vec<usize> = (0..200).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let sp: Vec<usize> = order.iter().map(|&i| preds[i]).collect();
        let sl: Vec<i64> = order.iter().map(|&i| labels[i]).collect();
        let mut conf2 = ConfusionMatrix::new(flags(2, 2));
        conf2.update(&sp, &sl).unwrap();
        assert!((conf.miou(Subset::All).unwrap() - conf2.miou(Subset::All).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn csv_empty_class_list_is_header_only() {
        let report = MetricsReport {
            class_names: vec![],
            seen: vec![],
            ious: vec![],
            miou_seen: 0.0,
            miou_unseen: 0.0,
            miou_all: 0.0,
            hmiou: 0.0,
        };
        assert_eq!(report.to_csv(), "split,class,iou\n");
    }

    #[test]
    fn csv_golden_bytes() {
        let mut conf = ConfusionMatrix::new(flags(1, 1));
        // class 0: TP 2, FN 1 (predicted as 1); class 1: TP 1, FP 1
        conf.update(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap();
        let names = vec!["chair".to_string(), "sofa".to_string()];
        let report = MetricsReport::from_confusion(&conf, &names).unwrap();
        let expected = "split,class,iou\n\
                        seen,chair,0.666667\n\
                        unseen,sofa,0.500000\n\
                        summary,miou_seen,0.666667\n\
                        summary,miou_unseen,0.500000\n\
                        summary,miou_all,0.583333\n\
                        summary,hmiou,0.571429\n";
        assert_eq!(report.to_csv(), expected);
    }

    #[test]
    fn csv_shape_and_unicode_names() {
        let mut conf = ConfusionMatrix::new(flags(1, 1));
        conf.update(&[0, 1], &[0, 1]).unwrap();
        let names = vec!["ch\u{00e4}ir".to_string(), "sof\u{00e1}".to_string()];
        let report = MetricsReport::from_confusion(&conf, &names).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "split,class,iou");
        assert!(lines[1].starts_with("seen,ch\u{00e4}ir,"));
        assert!(lines[2].starts_with("unseen,sof\u{00e1},"));
        assert!(lines[6].starts_with("summary,hmiou,"));
        assert!(csv.ends_with('\n'));
        assert!(!csv.contains('\r'));
    }
}
