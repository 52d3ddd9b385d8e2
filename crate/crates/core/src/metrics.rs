//! Mean IoU plus the region-consistency counts: per image, how many
//! predicted classes are absent from the ground truth (wrong classes) and how
//! many pixels carry one of those classes (wrong labels).

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::gt::{LabelMask, IGNORE};

/// Counts for one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageCounts {
    pub wrong_class: usize,
    pub wrong_label: usize,
}

/// Running evaluation state; call [`EvalReport::finalize`] for the means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub num_classes: usize,
    /// `confusion[gt * K + pred]`, valid pixels only.
    pub confusion: Vec<u64>,
    pub image_count: usize,
    pub wrong_class_sum: u64,
    pub wrong_label_sum: u64,
    /// `None` where a class is absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub mean_wrong_class: f64,
    pub mean_wrong_label: f64,
}

impl EvalReport {
    pub fn new(num_classes: usize) -> Self {
        EvalReport {
            num_classes,
            confusion: vec![0; num_classes * num_classes],
            image_count: 0,
            wrong_class_sum: 0,
            wrong_label_sum: 0,
            per_class_iou: vec![None; num_classes],
            mean_iou: 0.0,
            mean_wrong_class: 0.0,
            mean_wrong_label: 0.0,
        }
    }

    #[inline]
    pub fn cell(&self, gt: usize, pred: usize) -> u64 {
        self.confusion[gt * self.num_classes + pred]
    }

    /// Adds one image. Ignore pixels of `gt` are skipped everywhere.
    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<ImageCounts> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::data(format!(
                "prediction {}x{} and ground truth {}x{} differ in size",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let k = self.num_classes;
        gt.validate(k)?;
        let mut pred_hist = vec![0u64; k];
        let mut gt_seen = vec![false; k];
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE {
                continue;
            }
            let p = p as usize;
            if p >= k {
                return Err(Error::data(format!("predicted class {p} is not below {k}")));
            }
            let g = g as usize;
            self.confusion[g * k + p] += 1;
            pred_hist[p] += 1;
            gt_seen[g] = true;
        }
        let mut counts = ImageCounts {
            wrong_class: 0,
            wrong_label: 0,
        };
        for c in 0..k {
            if pred_hist[c] > 0 && !gt_seen[c] {
                counts.wrong_class += 1;
                counts.wrong_label += pred_hist[c] as usize;
            }
        }
        self.image_count += 1;
        self.wrong_class_sum += counts.wrong_class as u64;
        self.wrong_label_sum += counts.wrong_label as u64;
        Ok(counts)
    }

    /// Adds the counts of another partial report.
    pub fn merge(&mut self, other: &EvalReport) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::usage(format!(
                "cannot merge reports over {} and {} classes",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            *a += b;
        }
        self.image_count += other.image_count;
        self.wrong_class_sum += other.wrong_class_sum;
        self.wrong_label_sum += other.wrong_label_sum;
        Ok(())
    }

    /// Fills the per-class IoU and the means.
    pub fn finalize(&mut self) -> Result<()> {
        if self.image_count == 0 {
            return Err(Error::usage(
                "cannot finalize an evaluation over zero images",
            ));
        }
        let k = self.num_classes;
        let mut sum = 0.0;
        let mut defined = 0;
        for c in 0..k {
            let tp = self.cell(c, c);
            let gt_total: u64 = (0..k).map(|p| self.cell(c, p)).sum();
            let pred_total: u64 = (0..k).map(|g| self.cell(g, c)).sum();
            let denom = gt_total + pred_total - tp;
            self.per_class_iou[c] = if denom == 0 {
                None
            } else {
                let iou = tp as f64 / denom as f64;
                sum += iou;
                defined += 1;
                Some(iou)
            };
        }
        self.mean_iou = if defined == 0 {
            0.0
        } else {
            sum / defined as f64
        };
        self.mean_wrong_class = self.wrong_class_sum as f64 / self.image_count as f64;
        self.mean_wrong_label = self.wrong_label_sum as f64 / self.image_count as f64;
        Ok(())
    }

    /// Fraction of valid pixels predicted correctly.
    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.confusion.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.num_classes).map(|c| self.cell(c, c)).sum();
        diag as f64 / total as f64
    }

    /// Per-class rows followed by one summary row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,iou,mean_wrong_class,mean_wrong_label,images\n");
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => {
                    let _ = writeln!(s, "class_{c},{v:.6},,,");
                }
                None => {
                    let _ = writeln!(s, "class_{c},,,,");
                }
            }
        }
        let _ = writeln!(
            s,
            "summary,{:.6},{:.6},{:.6},{}",
            self.mean_iou, self.mean_wrong_class, self.mean_wrong_label, self.image_count
        );
        s
    }
}

/// Renders `Model | IOU | #Wrong class | #Wrong label` rows with IoU in
/// percent; the counts are per-image means.
pub fn table(rows: &[(&str, &EvalReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<name_w$} | {:>6} | {:>13} | {:>13}",
        "Model", "IOU", "#Wrong class", "#Wrong label"
    );
    let _ = writeln!(s, "{}", "-".repeat(name_w + 42));
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{:<name_w$} | {:>6.2} | {:>13.3} | {:>13.1}",
            name,
            r.mean_iou * 100.0,
            r.mean_wrong_class,
            r.mean_wrong_label
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, v: &[u8]) -> LabelMask {
        LabelMask::new(v.len() / w, w, v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = mask(3, &[0, 1, 1, 2, 2, 0]);
        let mut r = EvalReport::new(4);
        let c = r.accumulate(&gt, &gt).unwrap();
        assert_eq!(
            c,
            ImageCounts {
                wrong_class: 0,
                wrong_label: 0
            }
        );
        r.finalize().unwrap();
        assert_eq!(r.mean_iou, 1.0);
        assert_eq!(r.per_class_iou[3], None);
    }

    #[test]
    fn two_extra_classes() {
        let gt = mask(5, &[0, 0, 1, 1, 2, 0, 0, 1, 1, 2]);
        let pred = mask(5, &[0, 3, 1, 4, 2, 0, 3, 1, 1, 2]);
        let mut r = EvalReport::new(5);
        let c = r.accumulate(&pred, &gt).unwrap();
        assert_eq!(
            c,
            ImageCounts {
                wrong_class: 2,
                wrong_label: 3
            }
        );
    }

    #[test]
    fn means_over_images() {
        let mut r = EvalReport::new(6);
        let gt = mask(2, &[0, 0]);
        r.accumulate(&mask(2, &[1, 2]), &gt).unwrap();
        r.accumulate(&mask(4, &[1, 2, 3, 4]), &mask(4, &[0; 4]))
            .unwrap();
        r.finalize().unwrap();
        assert_eq!(r.mean_wrong_class, 3.0);
        assert_eq!(r.mean_wrong_label, 3.0);
    }

    #[test]
    fn ignore_pixels_do_not_count() {
        let gt = mask(2, &[IGNORE, 0]);
        let pred = mask(2, &[1, 0]);
        let mut r = EvalReport::new(2);
        let c = r.accumulate(&pred, &gt).unwrap();
        assert_eq!(c.wrong_class, 0);
        assert_eq!(r.confusion, vec![1, 0, 0, 0]);
    }

    #[test]
    fn hand_computed_three_classes() {
        // gt:   0 0 1 1 2 2
        // pred: 0 1 1 1 2 0
        let mut r = EvalReport::new(3);
        r.accumulate(&mask(6, &[0, 1, 1, 1, 2, 0]), &mask(6, &[0, 0, 1, 1, 2, 2]))
            .unwrap();
        r.finalize().unwrap();
        assert_eq!(
            r.per_class_iou,
            vec![Some(1.0 / 3.0), Some(2.0 / 3.0), Some(0.5)]
        );
        assert!((r.mean_iou - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_images_is_usage_error() {
        assert!(matches!(
            EvalReport::new(3).finalize(),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_data_error() {
        let mut r = EvalReport::new(2);
        assert!(matches!(
            r.accumulate(&mask(2, &[0, 0]), &mask(1, &[0, 0])),
            Err(Error::Data(_))
        ));
    }
}
