//! COCO-style detection metrics: greedy matching, 101-point interpolated AP,
//! mAP over IoU 0.50:0.05:0.95, AP50 and AP75.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};

pub const NUM_THRESHOLDS: usize = 10;
pub const RECALL_POINTS: usize = 101;
pub const MAX_DETS: usize = 100;

/// `0.50, 0.55, ..., 0.95`.
pub fn iou_thresholds() -> [f64; NUM_THRESHOLDS] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Descending score, lower index first on ties.
fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// TP flag per detection (input order) for one image and one class.
pub fn match_dets(dets: &[(BBox, f64)], gts: &[BBox], iou_thresh: f64) -> Vec<bool> {
    let scores: Vec<f64> = dets.iter().map(|d| d.1).collect();
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for i in score_order(&scores) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let o = iou(&dets[i].0, g);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, o)) = best {
            if o >= iou_thresh {
                taken[j] = true;
                flags[i] = true;
            }
        }
    }
    flags
}

/// 101-point interpolated AP. `None` when there is no ground truth.
pub fn average_precision(flags: &[bool], scores: &[f64], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let order = score_order(scores);
    let mut tps = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        tp += flags[i] as usize;
        tps.push(tp);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    // recall >= k/100 compared exactly as 100 tp >= k num_gt
    let mut total = 0.0;
    let mut cursor = 0;
    for k in 0..RECALL_POINTS {
        while cursor < tps.len() && 100 * tps[cursor] < k * num_gt {
            cursor += 1;
        }
        if cursor < tps.len() {
            total += precision[cursor];
        }
    }
    Some(total / RECALL_POINTS as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub image_id: u64,
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetRecord {
    pub image_id: u64,
    pub class_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalSet {
    pub image_ids: Vec<u64>,
    /// Class vocabulary; classes seen only in records are added automatically.
    pub classes: Vec<usize>,
    pub gts: Vec<GtRecord>,
    pub dets: Vec<DetRecord>,
}

impl EvalSet {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let dup: Vec<u64> = self.image_ids.iter().copied().filter(|id| !seen.insert(*id)).collect();
        if !dup.is_empty() {
            return Err(Error::Validation(format!("duplicate image ids: {dup:?}")));
        }
        let orphans: BTreeSet<u64> = self
            .gts
            .iter()
            .map(|g| g.image_id)
            .chain(self.dets.iter().map(|d| d.image_id))
            .filter(|id| !seen.contains(id))
            .collect();
        if !orphans.is_empty() {
            return Err(Error::Validation(format!("records reference unknown image ids: {orphans:?}")));
        }
        if let Some(d) = self.dets.iter().find(|d| !d.score.is_finite()) {
            return Err(Error::Validation(format!("non-finite score on image {}", d.image_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub num_gt: usize,
    pub num_dets: usize,
    /// AP at each IoU threshold; `None` without ground truth.
    pub ap_per_threshold: Option<[f64; NUM_THRESHOLDS]>,
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassMetrics>,
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub diagnostics: Vec<String>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// AP of one class at one threshold, keeping the `MAX_DETS` best detections per image.
fn class_ap(
    per_image: &BTreeMap<u64, (Vec<(BBox, f64)>, Vec<BBox>)>,
    num_gt: usize,
    iou_thresh: f64,
) -> Option<f64> {
    let mut flags = Vec::new();
    let mut scores = Vec::new();
    for (dets, gts) in per_image.values() {
        let f = match_dets(dets, gts, iou_thresh);
        flags.extend(f);
        scores.extend(dets.iter().map(|d| d.1));
    }
    average_precision(&flags, &scores, num_gt)
}

pub fn evaluate(set: &EvalSet) -> Result<EvalReport> {
    set.validate()?;
    let classes: BTreeSet<usize> = set
        .classes
        .iter()
        .copied()
        .chain(set.gts.iter().map(|g| g.class_id))
        .chain(set.dets.iter().map(|d| d.class_id))
        .collect();
    let thresholds = iou_thresholds();
    let mut diagnostics = Vec::new();
    let mut per_class = Vec::new();
    for &class_id in &classes {
        let mut per_image: BTreeMap<u64, (Vec<(BBox, f64)>, Vec<BBox>)> = BTreeMap::new();
        for g in set.gts.iter().filter(|g| g.class_id == class_id) {
            per_image.entry(g.image_id).or_default().1.push(g.bbox);
        }
        for d in set.dets.iter().filter(|d| d.class_id == class_id) {
            per_image.entry(d.image_id).or_default().0.push((d.bbox, d.score));
        }
        let mut num_dets = 0;
        for (dets, _) in per_image.values_mut() {
            let scores: Vec<f64> = dets.iter().map(|d| d.1).collect();
            let order = score_order(&scores);
            *dets = order.into_iter().take(MAX_DETS).map(|i| dets[i]).collect();
            num_dets += dets.len();
        }
        let num_gt = per_image.values().map(|(_, g)| g.len()).sum();
        let aps: Option<[f64; NUM_THRESHOLDS]> = if num_gt == 0 {
            diagnostics.push(format!("class {class_id}: no ground truth, AP undefined and excluded from means"));
            None
        } else {
            Some(std::array::from_fn(|t| class_ap(&per_image, num_gt, thresholds[t]).unwrap()))
        };
        per_class.push(ClassMetrics {
            class_id,
            num_gt,
            num_dets,
            ap_per_threshold: aps,
            map: aps.map(|a| a.iter().sum::<f64>() / NUM_THRESHOLDS as f64),
            ap50: aps.map(|a| a[0]),
            ap75: aps.map(|a| a[5]),
        });
    }
    if set.gts.is_empty() {
        diagnostics.push("no ground truth in the evaluation set; metrics are undefined".into());
    }
    Ok(EvalReport {
        map: mean_defined(per_class.iter().map(|c| c.map)),
        ap50: mean_defined(per_class.iter().map(|c| c.ap50)),
        ap75: mean_defined(per_class.iter().map(|c| c.ap75)),
        per_class,
        diagnostics,
    })
}
