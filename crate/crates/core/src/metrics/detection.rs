use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::segmentation::Overlaps;
use crate::conditioning::{instance_pixels, majority_class};
use crate::error::{Error, Result};

/// IoU a prediction must exceed to count as a detection of a ground-truth instance.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub f_d: f64,
    /// Fraction of matched pairs with agreeing classes; `None` when nothing matched.
    pub acc: Option<f64>,
    /// F1 per foreground class 1..=K_fg; `None` for a class absent from both sides.
    pub per_class_f: Vec<Option<f64>>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Class of every instance (majority of its pixels in the class map).
pub fn instance_classes(
    instances: &Array2<u32>,
    classes: &Array2<u8>,
    num_fg_classes: usize,
) -> Result<BTreeMap<u32, u8>> {
    if instances.dim() != classes.dim() {
        return Err(Error::arg("instance and class maps differ in shape"));
    }
    let mut out = BTreeMap::new();
    for (id, px) in instance_pixels(instances) {
        let c = majority_class(classes, &px)
            .ok_or_else(|| Error::Data(format!("instance {id} has no foreground class")))?;
        if c as usize > num_fg_classes {
            return Err(Error::Data(format!(
                "instance {id} has class {c}, outside 1..={num_fg_classes}"
            )));
        }
        out.insert(id, c);
    }
    Ok(out)
}

/// One-to-one matches (gt, pred) with IoU > [`MATCH_IOU`], greedily by
/// descending IoU, ties by ascending (gt, pred).
pub(crate) fn match_instances(pred: &Array2<u32>, gt: &Array2<u32>) -> Result<Vec<(u32, u32)>> {
    let o = Overlaps::new(pred, gt)?;
    let mut cands = Vec::new();
    for (&g, &ga) in &o.gt_area {
        for (p, n) in o.overlaps_of(g) {
            let iou = n as f64 / (ga + o.pred_area[&p] - n) as f64;
            if iou > MATCH_IOU {
                cands.push((iou, g, p));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut taken_g = std::collections::HashSet::new();
    let mut taken_p = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (_, g, p) in cands {
        if taken_g.contains(&g) || taken_p.contains(&p) {
            continue;
        }
        taken_g.insert(g);
        taken_p.insert(p);
        out.push((g, p));
    }
    out.sort();
    Ok(out)
}

fn f1(tp: usize, fp: usize, fn_: usize) -> Option<f64> {
    let denom = 2 * tp + fp + fn_;
    (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
}

/// Detection quality F_d, classification accuracy over matched pairs, and per-class F1.
///
/// A matched pair with disagreeing classes is a false negative of the true
/// class and a false positive of the predicted class; unmatched instances
/// count against their own class.
pub fn detection_scores(
    pred_instances: &Array2<u32>,
    pred_classes: &Array2<u8>,
    gt_instances: &Array2<u32>,
    gt_classes: &Array2<u8>,
    num_fg_classes: usize,
) -> Result<DetectionScores> {
    let pc = instance_classes(pred_instances, pred_classes, num_fg_classes)?;
    let gc = instance_classes(gt_instances, gt_classes, num_fg_classes)?;
    let matches = match_instances(pred_instances, gt_instances)?;

    let tp = matches.len();
    let fp = pc.len() - tp;
    let fn_ = gc.len() - tp;
    let f_d = f1(tp, fp, fn_).unwrap_or(1.0);

    let mut tp_c = vec![0usize; num_fg_classes + 1];
    let mut fp_c = vec![0usize; num_fg_classes + 1];
    let mut fn_c = vec![0usize; num_fg_classes + 1];
    let mut correct = 0usize;
    let (mut matched_g, mut matched_p) = (std::collections::HashSet::new(), std::collections::HashSet::new());
    for &(g, p) in &matches {
        matched_g.insert(g);
        matched_p.insert(p);
        let (cg, cp) = (gc[&g] as usize, pc[&p] as usize);
        if cg == cp {
            correct += 1;
            tp_c[cg] += 1;
        } else {
            fn_c[cg] += 1;
            fp_c[cp] += 1;
        }
    }
    for (p, &c) in &pc {
        if !matched_p.contains(p) {
            fp_c[c as usize] += 1;
        }
    }
    for (g, &c) in &gc {
        if !matched_g.contains(g) {
            fn_c[c as usize] += 1;
        }
    }
    let per_class_f = (1..=num_fg_classes)
        .map(|c| f1(tp_c[c], fp_c[c], fn_c[c]))
        .collect();
    Ok(DetectionScores {
        f_d,
        acc: (tp > 0).then(|| correct as f64 / tp as f64),
        per_class_f,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
    })
}
