//! HOI triplets and mean average precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{iou, BBox};
use crate::text_bank::{split_report, SplitReport, TextEmbeddingBank};

pub const IOU_THRESHOLD: f64 = 0.5;

/// A human box, an object box and an interaction category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoiTriplet {
    pub human_box: BBox,
    pub object_box: BBox,
    pub interaction_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<usize>,
    /// Present on predictions only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl HoiTriplet {
    /// True positive test against a ground-truth triplet; returns the weaker overlap.
    pub fn overlap(&self, gt: &HoiTriplet) -> Option<f64> {
        if self.interaction_id != gt.interaction_id {
            return None;
        }
        let (h, o) = (iou(self.human_box, gt.human_box), iou(self.object_box, gt.object_box));
        (h > IOU_THRESHOLD && o > IOU_THRESHOLD).then_some(h.min(o))
    }
}

/// AP and ground-truth count for one category.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CategoryAp {
    pub ap: Option<f64>,
    pub num_gt: usize,
}

/// Detections of one category across images, highest score first; equal
/// scores keep (image, prediction) order.
pub(crate) fn ranked(
    predictions: &[Vec<HoiTriplet>],
    category: usize,
) -> Vec<(usize, &HoiTriplet)> {
    let mut dets: Vec<(usize, &HoiTriplet)> = predictions
        .iter()
        .enumerate()
        .flat_map(|(img, ps)| ps.iter().map(move |p| (img, p)))
        .filter(|(_, p)| p.interaction_id == category)
        .collect();
    dets.sort_by(|a, b| {
        let (sa, sb) = (a.1.score.unwrap_or(0.0), b.1.score.unwrap_or(0.0));
        sb.total_cmp(&sa)
    });
    dets
}

/// Greedy matching: each detection takes the unmatched ground truth with
/// the largest weaker overlap (lowest index on ties).
pub(crate) fn greedy_hits(
    dets: &[(usize, &HoiTriplet)],
    ground_truth: &[Vec<HoiTriplet>],
    category: usize,
) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    dets.iter()
        .map(|&(img, det)| {
            let Some(gts) = ground_truth.get(img) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in gts.iter().enumerate() {
                if used[img][j] || gt.interaction_id != category {
                    continue;
                }
                if let Some(ov) = det.overlap(gt) {
                    if best.is_none_or(|(_, b)| ov > b) {
                        best = Some((j, ov));
                    }
                }
            }
            match best {
                Some((j, _)) => {
                    used[img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-points interpolated AP from a hit sequence.
pub fn average_precision(hits: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

/// AP for every category id in `categories`.
pub fn per_category_ap(
    predictions: &[Vec<HoiTriplet>],
    ground_truth: &[Vec<HoiTriplet>],
    categories: &[usize],
) -> BTreeMap<usize, CategoryAp> {
    categories
        .iter()
        .map(|&c| {
            let num_gt = ground_truth
                .iter()
                .flatten()
                .filter(|g| g.interaction_id == c)
                .count();
            let dets = ranked(predictions, c);
            let hits = greedy_hits(&dets, ground_truth, c);
            (
                c,
                CategoryAp {
                    ap: average_precision(&hits, num_gt),
                    num_gt,
                },
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub splits: SplitReport,
    /// AP per category id; `None` when the category has no ground truth.
    pub per_category: BTreeMap<usize, Option<f64>>,
}

/// Per-split mAP over every category in `bank`.
pub fn evaluate_map(
    predictions: &[Vec<HoiTriplet>],
    ground_truth: &[Vec<HoiTriplet>],
    bank: &TextEmbeddingBank,
) -> Result<MapReport> {
    let aps = per_category_ap(predictions, ground_truth, &bank.ids());
    let per_category: BTreeMap<usize, Option<f64>> = aps.iter().map(|(&c, a)| (c, a.ap)).collect();
    Ok(MapReport {
        splits: split_report(bank, &per_category)?,
        per_category,
    })
}
