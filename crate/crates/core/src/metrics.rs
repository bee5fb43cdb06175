//! Occupancy IoU and semantic mIoU.

use std::io::Write;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub empty_index: usize,
    /// Voxels that passed the evaluation mask.
    pub evaluated: u64,
}

impl ConfusionCounts {
    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    /// Occupied-vs-empty counts: every non-empty class merged into one.
    pub fn geometry(&self) -> (u64, u64, u64) {
        // A voxel is a geometry TP when both labels are non-empty, whatever the classes.
        // Derive from per-class counts: non-empty predictions = Σ_{c≠e} (tp+fp).
        let e = self.empty_index;
        let pred_occ: u64 = (0..self.num_classes()).filter(|&c| c != e).map(|c| self.tp[c] + self.fp[c]).sum();
        let gt_occ: u64 = (0..self.num_classes()).filter(|&c| c != e).map(|c| self.tp[c] + self.fn_[c]).sum();
        // Voxels empty in both: the empty class true positives.
        let both_empty = self.tp[e];
        let union = self.evaluated - both_empty;
        let tp = pred_occ + gt_occ - union;
        (tp, pred_occ - tp, gt_occ - tp)
    }
}

pub fn confusion(
    pred: &[u16],
    gt: &[u16],
    num_classes: usize,
    empty_index: usize,
    mask: Option<&[bool]>,
) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "prediction has {} voxels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(m) = mask {
        if m.len() != gt.len() {
            return Err(Error::invalid("evaluation mask size differs from grid size"));
        }
    }
    if empty_index >= num_classes {
        return Err(Error::invalid("empty index out of range"));
    }
    let mut counts = ConfusionCounts {
        tp: vec![0; num_classes],
        fp: vec![0; num_classes],
        fn_: vec![0; num_classes],
        empty_index,
        evaluated: 0,
    };
    for i in 0..gt.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let (p, g) = (pred[i] as usize, gt[i] as usize);
        if p >= num_classes || g >= num_classes {
            return Err(Error::invalid(format!("label out of range at voxel {i}")));
        }
        counts.evaluated += 1;
        if p == g {
            counts.tp[p] += 1;
        } else {
            counts.fp[p] += 1;
            counts.fn_[g] += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// Geometry IoU, `None` when nothing is occupied in either grid.
    pub iou: Option<f64>,
    /// Mean over non-empty classes with a defined IoU; `None` if there are none.
    pub miou: Option<f64>,
    /// Per-class IoU, `None` where `TP + FP + FN = 0`.
    pub per_class: Vec<Option<f64>>,
}

fn ratio(tp: u64, fp: u64, fn_: u64) -> Option<f64> {
    let d = tp + fp + fn_;
    (d > 0).then(|| tp as f64 / d as f64)
}

pub fn iou_miou(counts: &ConfusionCounts) -> IouReport {
    let per_class: Vec<Option<f64>> = (0..counts.num_classes())
        .map(|c| ratio(counts.tp[c], counts.fp[c], counts.fn_[c]))
        .collect();
    let (tp, fp, fn_) = counts.geometry();
    let defined: Vec<f64> = per_class
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != counts.empty_index)
        .filter_map(|(_, v)| *v)
        .collect();
    let miou = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    IouReport {
        iou: ratio(tp, fp, fn_),
        miou,
        per_class,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"))
}

/// `class,iou` rows followed by `IoU` and `mIoU` summary rows.
pub fn write_metrics_csv<W: Write>(w: &mut W, report: &IouReport, class_names: &[String]) -> Result<()> {
    writeln!(w, "class,iou")?;
    for (c, v) in report.per_class.iter().enumerate() {
        let name = class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
        writeln!(w, "{name},{}", fmt_opt(*v))?;
    }
    writeln!(w, "IoU,{}", fmt_opt(report.iou))?;
    writeln!(w, "mIoU,{}", fmt_opt(report.miou))?;
    Ok(())
}
