//! Cost-based label assignment: per-level top-K candidates per ground truth,
//! a per-GT mean-cost threshold, and one-to-one conflict resolution.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredSample {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub logits: Vec<f64>,
    /// Pyramid level, `0..num_levels`, finest first.
    pub level: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtSample {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignConfig {
    pub lambda: f64,
    pub top_k: usize,
    pub num_levels: usize,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            lambda: 0.5,
            top_k: 7,
            num_levels: 3,
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Validation(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.top_k == 0 {
            return Err(Error::Validation("top_k must be at least 1".into()));
        }
        if self.num_levels == 0 {
            return Err(Error::Validation("num_levels must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FilterOutcome {
    pub retained: Vec<usize>,
    pub threshold: f64,
    /// Nothing fell strictly below the threshold; the cheapest candidate was kept.
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GtAssignment {
    pub candidates: Vec<usize>,
    pub threshold: Option<f64>,
    pub retained: Vec<usize>,
    pub fallback: bool,
    /// Predictions finally mapped to this GT, ascending.
    pub assigned: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssignmentResult {
    /// `costs[i][j]` for prediction `i` and ground truth `j`.
    pub costs: Vec<Vec<f64>>,
    pub per_gt: Vec<GtAssignment>,
    /// GT index per prediction, `None` for background.
    pub assignment: Vec<Option<usize>>,
    pub all_background: bool,
}

impl AssignmentResult {
    pub fn num_foreground(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_some()).count()
    }
}

/// `log(softmax(logits)[class])`, evaluated with the max logit subtracted.
pub fn log_softmax_at(logits: &[f64], class: usize) -> Result<f64> {
    if class >= logits.len() {
        return Err(Error::Index {
            context: "cost",
            what: "logits",
            index: class,
            len: logits.len(),
        });
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
    Ok(logits[class] - m - sum.ln())
}

pub fn cost_from_iou(logits: &[f64], class: usize, overlap: f64, lambda: f64) -> Result<f64> {
    let nll = -log_softmax_at(logits, class)?;
    Ok(lambda * nll + (1.0 - lambda) * (1.0 - overlap))
}

pub fn cost(pred: &PredSample, gt: &GtSample, lambda: f64) -> Result<f64> {
    cost_from_iou(&pred.logits, gt.class_id, iou(&pred.bbox, &gt.bbox), lambda)
}

fn by_cost(costs: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b))
}

/// Union over levels of the `k` cheapest predictions on each level, grouped
/// by level and cheapest first within a level.
pub fn topk_per_level(costs: &[f64], levels: &[usize], num_levels: usize, k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for l in 0..num_levels {
        let mut idx: Vec<usize> = (0..costs.len()).filter(|&i| levels[i] == l).collect();
        idx.sort_by(by_cost(costs));
        idx.truncate(k);
        out.extend(idx);
    }
    out
}

/// Compensated (Neumaier) mean, clamped to the sample range so equal inputs
/// give back exactly their common value and order does not matter in practice.
fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp, mut n) = (0.0f64, 0.0f64, 0usize);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
        lo = lo.min(v);
        hi = hi.max(v);
        n += 1;
    }
    ((sum + comp) / n as f64).clamp(lo, hi)
}

/// Keep candidates strictly cheaper than their mean cost.
pub fn dynamic_filter(candidates: &[usize], costs: &[f64]) -> Result<FilterOutcome> {
    if candidates.is_empty() {
        return Err(Error::Contract("dynamic_filter needs at least one candidate".into()));
    }
    let threshold = mean(candidates.iter().map(|&i| costs[i]));
    let retained: Vec<usize> = candidates.iter().copied().filter(|&i| costs[i] < threshold).collect();
    if !retained.is_empty() {
        return Ok(FilterOutcome {
            retained,
            threshold,
            fallback: false,
        });
    }
    let best = *candidates.iter().min_by(|a, b| by_cost(costs)(a, b)).unwrap();
    Ok(FilterOutcome {
        retained: vec![best],
        threshold,
        fallback: true,
    })
}

fn validate(preds: &[PredSample], gts: &[GtSample], config: &AssignConfig) -> Result<()> {
    config.validate()?;
    let num_classes = preds.first().map(|p| p.logits.len());
    for (i, p) in preds.iter().enumerate() {
        if !p.bbox.is_valid() {
            return Err(Error::Validation(format!("prediction {i}: invalid box {:?}", p.bbox)));
        }
        if Some(p.logits.len()) != num_classes || p.logits.is_empty() {
            return Err(Error::Validation(format!(
                "prediction {i}: {} logits, expected {}",
                p.logits.len(),
                num_classes.unwrap_or(0)
            )));
        }
        if p.logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Validation(format!("prediction {i}: non-finite logit")));
        }
        if p.level >= config.num_levels {
            return Err(Error::Validation(format!(
                "prediction {i}: level {} outside 0..{}",
                p.level, config.num_levels
            )));
        }
    }
    for (j, g) in gts.iter().enumerate() {
        if !g.bbox.is_valid() {
            return Err(Error::Validation(format!("ground truth {j}: invalid box {:?}", g.bbox)));
        }
        if let Some(nc) = num_classes {
            if g.class_id >= nc {
                return Err(Error::Index {
                    context: "assign",
                    what: "class_id",
                    index: g.class_id,
                    len: nc,
                });
            }
        }
    }
    Ok(())
}

pub fn assign(preds: &[PredSample], gts: &[GtSample], config: &AssignConfig) -> Result<AssignmentResult> {
    validate(preds, gts, config)?;
    if preds.is_empty() {
        return Ok(AssignmentResult {
            costs: Vec::new(),
            per_gt: gts
                .iter()
                .map(|_| GtAssignment {
                    candidates: Vec::new(),
                    threshold: None,
                    retained: Vec::new(),
                    fallback: false,
                    assigned: Vec::new(),
                })
                .collect(),
            assignment: Vec::new(),
            all_background: true,
        });
    }

    let costs: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| gts.iter().map(|g| cost(p, g, config.lambda)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let levels: Vec<usize> = preds.iter().map(|p| p.level).collect();

    let mut per_gt = Vec::with_capacity(gts.len());
    let mut column = vec![0.0; preds.len()];
    for j in 0..gts.len() {
        for (c, row) in column.iter_mut().zip(&costs) {
            *c = row[j];
        }
        let candidates = topk_per_level(&column, &levels, config.num_levels, config.top_k);
        let filtered = dynamic_filter(&candidates, &column)?;
        per_gt.push(GtAssignment {
            candidates,
            threshold: Some(filtered.threshold),
            retained: filtered.retained,
            fallback: filtered.fallback,
            assigned: Vec::new(),
        });
    }

    // A prediction retained by several GTs goes to the cheapest one, lower GT index on ties.
    let mut assignment: Vec<Option<usize>> = vec![None; preds.len()];
    for (j, g) in per_gt.iter().enumerate() {
        for &i in &g.retained {
            let take = match assignment[i] {
                None => true,
                Some(cur) => costs[i][j] < costs[i][cur],
            };
            if take {
                assignment[i] = Some(j);
            }
        }
    }

    // GTs that lost every retained prediction take their cheapest free candidate,
    // then the cheapest free prediction overall.
    for j in 0..gts.len() {
        if assignment.contains(&Some(j)) {
            continue;
        }
        let col: Vec<f64> = costs.iter().map(|row| row[j]).collect();
        let mut cands = per_gt[j].candidates.clone();
        cands.sort_by(by_cost(&col));
        let mut all: Vec<usize> = (0..preds.len()).collect();
        all.sort_by(by_cost(&col));
        if let Some(i) = cands.into_iter().chain(all).find(|&i| assignment[i].is_none()) {
            assignment[i] = Some(j);
        }
    }

    for (i, a) in assignment.iter().enumerate() {
        if let Some(j) = a {
            per_gt[*j].assigned.push(i);
        }
    }
    Ok(AssignmentResult {
        costs,
        per_gt,
        assignment,
        all_background: false,
    })
}
