//! Matching costs and the set-prediction loss suite for both protocols.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::eval::HoiTriplet;
use crate::geometry::giou;
use crate::matching::{hungarian, MatchAssignment};
use crate::model::{ForwardVars, ImageOutputs};
use crate::protocol::{LossWeights, Protocol, ProtocolName};
use crate::tensor::{Mat, Real};

/// Named loss terms (unweighted) and their weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
}

/// Graph handles of the loss terms.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub terms: BTreeMap<&'static str, Var>,
    pub total: Var,
}

impl LossVars {
    pub fn record<T: Real>(&self, g: &Graph<T>) -> LossRecord {
        LossRecord {
            terms: self
                .terms
                .iter()
                .map(|(k, &v)| (k.to_string(), g.scalar(v).as_f64()))
                .collect(),
            total: g.scalar(self.total).as_f64(),
        }
    }
}

/// One image's forward handles and ground truth.
pub struct ImageTerms<'a> {
    pub vars: ForwardVars,
    pub targets: &'a [HoiTriplet],
    pub assignment: &'a MatchAssignment,
}

fn column_of(columns: &[usize], id: usize) -> Result<usize> {
    columns
        .iter()
        .position(|&c| c == id)
        .ok_or_else(|| Error::Data(format!("target category {id} is not among the classified columns")))
}

/// `cost[i][j]` for prediction `i`, target `j`.
pub fn matching_cost(
    outputs: &ImageOutputs,
    targets: &[HoiTriplet],
    weights: &LossWeights,
) -> Result<Vec<Vec<f64>>> {
    let cols: Vec<usize> = targets
        .iter()
        .map(|t| column_of(&outputs.columns, t.interaction_id))
        .collect::<Result<_>>()?;
    Ok((0..outputs.boxes_h.len())
        .map(|i| {
            targets
                .iter()
                .zip(&cols)
                .map(|(t, &c)| {
                    let (bh, bo) = (outputs.boxes_h[i], outputs.boxes_o[i]);
                    weights.interaction * -outputs.probs[i][c]
                        + weights.l1 * (bh.l1(t.human_box) + bo.l1(t.object_box))
                        + weights.giou
                            * ((1.0 - giou(bh, t.human_box)) + (1.0 - giou(bo, t.object_box)))
                })
                .collect()
        })
        .collect())
}

/// Minimum-cost assignment of predictions to targets.
pub fn hungarian_match(
    outputs: &ImageOutputs,
    targets: &[HoiTriplet],
    protocol: &Protocol,
) -> Result<MatchAssignment> {
    if targets.len() > outputs.boxes_h.len() {
        return Err(Error::InvalidInput(format!(
            "{} targets exceed {} queries",
            targets.len(),
            outputs.boxes_h.len()
        )));
    }
    hungarian(&matching_cost(outputs, targets, &protocol.weights)?)
}

/// Per-row generalized IoU of `M × 4` center-format predictions against constants.
pub fn giou_rows<T: Real>(g: &mut Graph<T>, pred: Var, target: &Mat<T>) -> Var {
    let col = |g: &mut Graph<T>, v: Var, c: usize| g.slice_cols(v, c, 1);
    let t = g.constant_mat(target.clone());
    let corners = |g: &mut Graph<T>, b: Var| {
        let (cx, cy, w, h) = (col(g, b, 0), col(g, b, 1), col(g, b, 2), col(g, b, 3));
        let hw = g.scale(w, T::cst(0.5));
        let hh = g.scale(h, T::cst(0.5));
        let x0 = g.sub(cx, hw);
        let y0 = g.sub(cy, hh);
        let x1 = g.add(cx, hw);
        let y1 = g.add(cy, hh);
        let area = g.mul(w, h);
        ([x0, y0, x1, y1], area)
    };
    let (p, area_p) = corners(g, pred);
    let (q, area_t) = corners(g, t);
    let ix0 = g.max(p[0], q[0]);
    let iy0 = g.max(p[1], q[1]);
    let ix1 = g.min(p[2], q[2]);
    let iy1 = g.min(p[3], q[3]);
    let iw = g.sub(ix1, ix0);
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0);
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih);
    let areas = g.add(area_p, area_t);
    let union = g.sub(areas, inter);
    let iou = g.div(inter, union);
    let hx0 = g.min(p[0], q[0]);
    let hy0 = g.min(p[1], q[1]);
    let hx1 = g.max(p[2], q[2]);
    let hy1 = g.max(p[3], q[3]);
    let hw = g.sub(hx1, hx0);
    let hh = g.sub(hy1, hy0);
    let hull = g.mul(hw, hh);
    let gap = g.sub(hull, union);
    let penalty = g.div(gap, hull);
    g.sub(iou, penalty)
}

fn one_hot<T: Real>(rows: usize, cols: usize, hot: &[usize]) -> Mat<T> {
    let mut m = Mat::zeros(rows, cols);
    for (r, &c) in hot.iter().enumerate() {
        m.set(r, c, T::one());
    }
    m
}

/// `−mean_r log_softmax(logits)[r, y_r]`.
fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Var {
    let (rows, cols) = g.shape(logits);
    let ls = g.log_softmax_rows(logits);
    let picked = g.mul_const(ls, Arc::new(one_hot(rows, cols, labels)));
    let s = g.sum_all(picked);
    g.scale(s, T::cst(-1.0 / rows as f64))
}

/// Symmetric in-batch contrastive loss: query→text cross-entropy averaged
/// with a multi-positive text→query term.
pub fn contrastive<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Var {
    let (m, k) = g.shape(logits);
    let i2t = cross_entropy(g, logits, labels);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let mut w = Mat::zeros(k, m);
    for (r, &l) in labels.iter().enumerate() {
        w.set(l, r, T::cst(1.0 / (counts[l] as f64 * present)));
    }
    let lt = g.transpose(logits);
    let ls = g.log_softmax_rows(lt);
    let picked = g.mul_const(ls, Arc::new(w));
    let s = g.sum_all(picked);
    let t2i = g.scale(s, T::cst(-1.0));
    let both = g.add(i2t, t2i);
    g.scale(both, T::cst(0.5))
}

/// Builds every loss term for a batch under `protocol`.
///
/// `columns` are the category ids behind the interaction logit columns;
/// `num_object_classes` is the background index under hico.
pub fn compute_losses<T: Real>(
    g: &mut Graph<T>,
    images: &[ImageTerms<'_>],
    columns: &[usize],
    protocol: &Protocol,
    num_object_classes: usize,
) -> Result<LossVars> {
    let w = protocol.weights;
    let mut matched_h = Vec::new();
    let mut matched_o = Vec::new();
    let mut matched_logits = Vec::new();
    let mut tgt_h: Vec<[f64; 4]> = Vec::new();
    let mut tgt_o: Vec<[f64; 4]> = Vec::new();
    let mut labels = Vec::new();
    let mut conf_logits = Vec::new();
    let mut conf_targets = Vec::new();
    let mut obj_logits = Vec::new();
    let mut obj_labels = Vec::new();

    for img in images {
        let v = &img.vars;
        let n_q = g.shape(v.boxes_h).0;
        for &(p, t) in &img.assignment.pairs {
            if p >= n_q || t >= img.targets.len() {
                return Err(Error::InvalidInput(format!("assignment pair ({p}, {t}) out of range")));
            }
        }
        let preds: Vec<usize> = img.assignment.pairs.iter().map(|&(p, _)| p).collect();
        if !preds.is_empty() {
            matched_h.push(g.gather_rows(v.boxes_h, &preds));
            matched_o.push(g.gather_rows(v.boxes_o, &preds));
            matched_logits.push(g.gather_rows(v.interaction_logits, &preds));
        }
        for &(_, t) in &img.assignment.pairs {
            let tr = &img.targets[t];
            tgt_h.push(tr.human_box.to_array());
            tgt_o.push(tr.object_box.to_array());
            labels.push(column_of(columns, tr.interaction_id)?);
        }
        let target_of = img.assignment.target_of(n_q);
        match protocol.name {
            ProtocolName::Swig => {
                let c = v.confidence.ok_or(Error::ProtocolMismatch {
                    expected: "swig",
                    active: "hico",
                })?;
                conf_logits.push(c);
                conf_targets.extend(target_of.iter().map(|t| if t.is_some() { 1.0 } else { 0.0 }));
            }
            ProtocolName::Hico => {
                let o = v.object_logits.ok_or(Error::ProtocolMismatch {
                    expected: "hico",
                    active: "swig",
                })?;
                obj_logits.push(o);
                for t in &target_of {
                    obj_labels.push(match t {
                        Some(t) => {
                            let id = img.targets[*t].object_id.ok_or_else(|| {
                                Error::Data("hico targets need an object id".into())
                            })?;
                            if id >= num_object_classes {
                                return Err(Error::Data(format!(
                                    "object id {id} out of range for {num_object_classes} classes"
                                )));
                            }
                            id
                        }
                        None => num_object_classes,
                    });
                }
            }
        }
    }

    let mut terms: BTreeMap<&'static str, Var> = BTreeMap::new();
    let zero = || Mat::<T>::zeros(1, 1);
    let m = labels.len();
    if m > 0 {
        let to_mat = |rows: &[[f64; 4]]| Mat::from_fn(rows.len(), 4, |r, c| T::cst(rows[r][c]));
        let (th, to) = (to_mat(&tgt_h), to_mat(&tgt_o));
        let ph = g.concat_rows(&matched_h);
        let po = g.concat_rows(&matched_o);
        let inv_m = T::cst(1.0 / m as f64);

        let dh = g.add_const(ph, &th.scale(-T::one()));
        let dh = g.abs(dh);
        let do_ = g.add_const(po, &to.scale(-T::one()));
        let do_ = g.abs(do_);
        let sh = g.sum_all(dh);
        let so = g.sum_all(do_);
        let l1 = g.add(sh, so);
        terms.insert("l1", g.scale(l1, inv_m));

        let gh = giou_rows(g, ph, &th);
        let go = giou_rows(g, po, &to);
        let gs = g.add(gh, go);
        let gsum = g.sum_all(gs);
        // Σ (1 − GIoU_h) + (1 − GIoU_o) = 2M − Σ GIoU
        let neg = g.scale(gsum, -inv_m);
        terms.insert("giou", g.add_scalar(neg, T::cst(2.0)));

        let logits = g.concat_rows(&matched_logits);
        let inter = match protocol.name {
            ProtocolName::Swig => contrastive(g, logits, &labels),
            ProtocolName::Hico => cross_entropy(g, logits, &labels),
        };
        terms.insert("interaction", inter);
    } else {
        for k in ["l1", "giou", "interaction"] {
            terms.insert(k, g.constant_mat(zero()));
        }
    }

    match protocol.name {
        ProtocolName::Swig => {
            let logits = g.concat_rows(&conf_logits);
            let n = conf_targets.len();
            let t = Mat::from_fn(n, 1, |r, _| T::cst(conf_targets[r]));
            let bce = g.bce_with_logits(logits, Arc::new(t));
            terms.insert("confidence", g.mean_all(bce));
        }
        ProtocolName::Hico => {
            let logits = g.concat_rows(&obj_logits);
            terms.insert("object_class", cross_entropy(g, logits, &obj_labels));
        }
    }

    let weight_of = |k: &str| match k {
        "l1" => w.l1,
        "giou" => w.giou,
        "interaction" => w.interaction,
        "confidence" => w.confidence,
        "object_class" => w.object_class,
        _ => 0.0,
    };
    let weighted: Vec<Var> = terms
        .iter()
        .map(|(k, &v)| g.scale(v, T::cst(weight_of(k))))
        .collect();
    let mut total = weighted[0];
    for &v in &weighted[1..] {
        total = g.add(total, v);
    }
    Ok(LossVars { terms, total })
}
