//! Confusion counts, IoU/Dice reports and fold aggregation.
//!
//! Counts are accumulated over the whole evaluation set (micro average).
//! Means run over the foreground classes that occur in either prediction
//! or ground truth; the background class 0 is reported but not averaged.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::LabelMap;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    /// Number of label maps accumulated (a (B, H, W) map counts B).
    pub samples: usize,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            samples: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::shape("confusion_counts", "prediction", gt.shape(), pred.shape()));
        }
        let k = self.num_classes();
        pred.validate(k)?;
        gt.validate(k)?;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if p == g {
                self.tp[p as usize] += 1;
            } else {
                self.fp[p as usize] += 1;
                self.fn_[g as usize] += 1;
            }
        }
        self.samples += gt.batch();
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::shape(
                "ConfusionCounts::merge",
                "classes",
                self.num_classes(),
                other.num_classes(),
            ));
        }
        for c in 0..self.num_classes() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        self.samples += other.samples;
        Ok(())
    }
}

pub fn confusion_counts(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<ConfusionCounts> {
    let mut c = ConfusionCounts::new(num_classes);
    c.accumulate(pred, gt)?;
    Ok(c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// Percentages; `None` for a class absent from both maps.
    pub iou: Option<f64>,
    pub dice: Option<f64>,
}

impl ClassMetrics {
    pub fn is_empty(&self) -> bool {
        self.iou.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub mean_iou: Option<f64>,
    pub mean_dice: Option<f64>,
    pub samples: usize,
}

pub fn iou_dice(counts: &ConfusionCounts) -> MetricsReport {
    let classes: Vec<ClassMetrics> = (0..counts.num_classes())
        .map(|c| {
            let (tp, fp, fn_) = (counts.tp[c], counts.fp[c], counts.fn_[c]);
            let (iou, dice) = if tp + fp + fn_ == 0 {
                (None, None)
            } else {
                let (t, e) = (tp as f64, (fp + fn_) as f64);
                (Some(100.0 * t / (t + e)), Some(100.0 * 2.0 * t / (2.0 * t + e)))
            };
            ClassMetrics {
                class: c,
                name: format!("class{c}"),
                tp,
                fp,
                fn_,
                iou,
                dice,
            }
        })
        .collect();
    let fg: Vec<&ClassMetrics> = classes.iter().skip(1).filter(|m| !m.is_empty()).collect();
    let mean = |f: fn(&ClassMetrics) -> Option<f64>| {
        (!fg.is_empty()).then(|| fg.iter().filter_map(|m| f(m)).sum::<f64>() / fg.len() as f64)
    };
    MetricsReport {
        mean_iou: mean(|m| m.iou),
        mean_dice: mean(|m| m.dice),
        classes,
        samples: counts.samples,
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

impl MetricsReport {
    pub fn with_names(mut self, names: &[String]) -> Self {
        for (m, n) in self.classes.iter_mut().zip(names) {
            m.name = n.clone();
        }
        self
    }

    /// Aligned human-readable table.
    pub fn table(&self) -> String {
        let w = self.classes.iter().map(|m| m.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<w$}  {:>8}  {:>8}  {:>10}  {:>10}  {:>10}",
            "class", "IoU(%)", "Dice(%)", "TP", "FP", "FN"
        );
        for m in &self.classes {
            let flag = if m.is_empty() { "  (empty)" } else { "" };
            let _ = writeln!(
                s,
                "{:<w$}  {:>8}  {:>8}  {:>10}  {:>10}  {:>10}{flag}",
                m.name,
                pct(m.iou),
                pct(m.dice),
                m.tp,
                m.fp,
                m.fn_
            );
        }
        let _ = writeln!(
            s,
            "{:<w$}  {:>8}  {:>8}",
            "MEAN",
            pct(self.mean_iou),
            pct(self.mean_dice)
        );
        s
    }

    /// `class<TAB>iou<TAB>dice` lines plus a MEAN row.
    pub fn tsv(&self) -> String {
        let mut s = String::from("class\tiou\tdice\n");
        for m in &self.classes {
            let _ = writeln!(s, "{}\t{}\t{}", m.name, pct(m.iou), pct(m.dice));
        }
        let _ = writeln!(s, "MEAN\t{}\t{}", pct(self.mean_iou), pct(self.mean_dice));
        s
    }

    /// Machine-readable `key=value` lines.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples={}", self.samples);
        let _ = writeln!(s, "mean_iou={}", pct(self.mean_iou));
        let _ = writeln!(s, "mean_dice={}", pct(self.mean_dice));
        for m in &self.classes {
            let _ = writeln!(s, "iou.{}={}", m.name, pct(m.iou));
            let _ = writeln!(s, "dice.{}={}", m.name, pct(m.dice));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldSummary {
    pub folds: usize,
    pub mean_iou: f64,
    pub std_iou: f64,
    pub mean_dice: f64,
    pub std_dice: f64,
}

/// Mean and population standard deviation of `values`.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Unweighted mean and standard deviation of the per-fold means. Folds
/// without any foreground class contribute 0.
pub fn aggregate_folds(reports: &[MetricsReport]) -> Result<FoldSummary> {
    if reports.is_empty() {
        return Err(Error::Config("aggregate_folds needs at least one report".into()));
    }
    let iou: Vec<f64> = reports.iter().map(|r| r.mean_iou.unwrap_or(0.0)).collect();
    let dice: Vec<f64> = reports.iter().map(|r| r.mean_dice.unwrap_or(0.0)).collect();
    let (mean_iou, std_iou) = mean_std(&iou);
    let (mean_dice, std_dice) = mean_std(&dice);
    Ok(FoldSummary {
        folds: reports.len(),
        mean_iou,
        std_iou,
        mean_dice,
        std_dice,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[u8]) -> LabelMap {
        LabelMap::new(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn one_tp_one_fn() {
        let c = confusion_counts(&map(&[1, 0]), &map(&[1, 1]), 2).unwrap();
        let r = iou_dice(&c);
        assert_eq!(r.classes[1].iou, Some(50.0));
        assert!((r.classes[1].dice.unwrap() - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_match_is_100() {
        let m = map(&[0, 1, 2, 2]);
        let r = iou_dice(&confusion_counts(&m, &m, 3).unwrap());
        assert_eq!(r.mean_iou, Some(100.0));
        assert_eq!(r.mean_dice, Some(100.0));
    }

    #[test]
    fn empty_class_is_flagged_and_excluded() {
        let m = map(&[0, 1]);
        let r = iou_dice(&confusion_counts(&m, &m, 3).unwrap());
        assert!(r.classes[2].is_empty());
        assert_eq!(r.mean_dice, Some(100.0));
        assert!(r.table().contains("(empty)"));
    }

    #[test]
    fn overflowing_label_is_rejected() {
        assert!(confusion_counts(&map(&[3]), &map(&[0]), 3).is_err());
    }

    #[test]
    fn tsv_has_mean_row() {
        let m = map(&[0, 1]);
        let r = iou_dice(&confusion_counts(&m, &m, 2).unwrap());
        assert_eq!(r.tsv().lines().last(), Some("MEAN\t100.00\t100.00"));
    }

    #[test]
    fn two_folds_average() {
        let mk = |d: f64| MetricsReport {
            classes: vec![],
            mean_iou: Some(d),
            mean_dice: Some(d),
            samples: 1,
        };
        let s = aggregate_folds(&[mk(50.0), mk(70.0)]).unwrap();
        assert_eq!(s.mean_dice, 60.0);
        assert_eq!(s.std_dice, 10.0);
    }
}
