//! Loss terms checked against a plain, graph-free recomputation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slhoi_core::config::RunConfig;
use slhoi_core::data::prepare_image;
use slhoi_core::eval::HoiTriplet;
use slhoi_core::features::ImageFeatures;
use slhoi_core::geometry::BBox;
use slhoi_core::imaging::Image;
use slhoi_core::interaction::Variant;
use slhoi_core::matching::MatchAssignment;
use slhoi_core::model::SlHoi;
use slhoi_core::nn::Ctx;
use slhoi_core::protocol::ProtocolName;
use slhoi_core::text_bank::{CategoryEntry, Rarity, TextEmbeddingBank};
use slhoi_core::train::{loss_and_grads, BatchItem};
use slhoi_core::Error;

struct Raw {
    boxes_h: Vec<[f64; 4]>,
    boxes_o: Vec<[f64; 4]>,
    logits: Vec<Vec<f64>>,
    confidence: Option<Vec<f64>>,
    object_logits: Option<Vec<Vec<f64>>>,
}

fn rows(m: &slhoi_core::Mat<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn raw_outputs(model: &SlHoi<f64>, f: &ImageFeatures<f64>, bank: &TextEmbeddingBank, columns: &[usize]) -> Raw {
    let text = bank.subset::<f64>(columns).unwrap();
    let mut ctx = Ctx::new();
    let v = model.forward_graph(&mut ctx, f, &text, false).unwrap();
    let boxes = |var| rows(ctx.g.value(var)).into_iter().map(|r| [r[0], r[1], r[2], r[3]]).collect();
    Raw {
        boxes_h: boxes(v.boxes_h),
        boxes_o: boxes(v.boxes_o),
        logits: rows(ctx.g.value(v.interaction_logits)),
        confidence: v.confidence.map(|c| ctx.g.value(c).data().to_vec()),
        object_logits: v.object_logits.map(|o| rows(ctx.g.value(o))),
    }
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

fn corners(b: [f64; 4]) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (a, b) = (corners(a), corners(b));
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    inter / union - (hull - union) / hull
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Every term recomputed from raw outputs, keyed like the loss record.
fn oracle(
    protocol: ProtocolName,
    raws: &[Raw],
    targets: &[Vec<HoiTriplet>],
    assignments: &[MatchAssignment],
    columns: &[usize],
    num_objects: usize,
) -> Vec<(&'static str, f64)> {
    let mut l1 = 0.0;
    let mut g = 0.0;
    let mut matched_logits = Vec::new();
    let mut labels = Vec::new();
    let mut conf = Vec::new();
    let mut obj = Vec::new();
    for ((raw, tgts), a) in raws.iter().zip(targets).zip(assignments) {
        let mut target_of = vec![None; raw.boxes_h.len()];
        for &(p, t) in &a.pairs {
            target_of[p] = Some(t);
            let tr = &tgts[t];
            let (th, to) = (tr.human_box.to_array(), tr.object_box.to_array());
            for k in 0..4 {
                l1 += (raw.boxes_h[p][k] - th[k]).abs() + (raw.boxes_o[p][k] - to[k]).abs();
            }
            g += (1.0 - giou(raw.boxes_h[p], th)) + (1.0 - giou(raw.boxes_o[p], to));
            matched_logits.push(raw.logits[p].clone());
            labels.push(columns.iter().position(|&c| c == tr.interaction_id).unwrap());
        }
        for (q, t) in target_of.iter().enumerate() {
            match protocol {
                ProtocolName::Swig => {
                    let x = raw.confidence.as_ref().unwrap()[q];
                    let y = if t.is_some() { 1.0 } else { 0.0 };
                    conf.push(softplus(x) - x * y);
                }
                ProtocolName::Hico => {
                    let label = t.map_or(num_objects, |t| tgts[t].object_id.unwrap());
                    obj.push(-log_softmax(&raw.object_logits.as_ref().unwrap()[q])[label]);
                }
            }
        }
    }
    let m = labels.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ce: Vec<f64> = matched_logits
        .iter()
        .zip(&labels)
        .map(|(row, &y)| -log_softmax(row)[y])
        .collect();
    let interaction = match protocol {
        ProtocolName::Hico => mean(&ce),
        ProtocolName::Swig => {
            // each present category column: softmax over matched queries,
            // averaged over its positives, then over present categories
            let mut present: Vec<usize> = labels.clone();
            present.sort();
            present.dedup();
            let t2i: f64 = present
                .iter()
                .map(|&c| {
                    let column: Vec<f64> = matched_logits.iter().map(|r| r[c]).collect();
                    let ls = log_softmax(&column);
                    let pos: Vec<f64> = labels
                        .iter()
                        .enumerate()
                        .filter(|(_, &y)| y == c)
                        .map(|(r, _)| -ls[r])
                        .collect();
                    mean(&pos)
                })
                .sum::<f64>()
                / present.len() as f64;
            0.5 * (mean(&ce) + t2i)
        }
    };
    let mut out = vec![("l1", l1 / m), ("giou", g / m), ("interaction", interaction)];
    match protocol {
        ProtocolName::Swig => out.push(("confidence", mean(&conf))),
        ProtocolName::Hico => out.push(("object_class", mean(&obj))),
    }
    out
}

fn bank() -> TextEmbeddingBank {
    let entries = (0..4)
        .map(|id| CategoryEntry {
            id,
            action: ["ride", "hold", "push", "lift"][id].into(),
            object: "box".into(),
            seen: true,
            rarity: Rarity::NotApplicable,
        })
        .collect();
    TextEmbeddingBank::from_stub(entries, 3, 128).unwrap()
}

fn setup(protocol: ProtocolName, variant: Variant) -> (SlHoi<f64>, Vec<ImageFeatures<f64>>) {
    let mut cfg = RunConfig::toy().with_variant(variant);
    cfg.protocol.name = protocol;
    let model = cfg.build_model::<f64>().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let features = (0..3)
        .map(|_| {
            let img = Image::new(16, 16, (0..768).map(|_| rng.random::<f32>()).collect()).unwrap();
            model
                .features(&prepare_image(&img, model.backbone().config(), None))
                .unwrap()
        })
        .collect();
    (model, features)
}

fn targets() -> Vec<Vec<HoiTriplet>> {
    let t = |h: BBox, o: BBox, id, obj| HoiTriplet {
        human_box: h,
        object_box: o,
        interaction_id: id,
        object_id: Some(obj),
        score: None,
    };
    vec![
        vec![
            t(BBox::new(0.3, 0.5, 0.3, 0.6), BBox::new(0.7, 0.6, 0.2, 0.2), 0, 0),
            t(BBox::new(0.6, 0.4, 0.2, 0.5), BBox::new(0.2, 0.2, 0.3, 0.3), 2, 1),
        ],
        vec![t(BBox::new(0.5, 0.5, 0.4, 0.9), BBox::new(0.5, 0.1, 0.2, 0.1), 2, 0)],
        vec![
            t(BBox::new(0.2, 0.3, 0.2, 0.4), BBox::new(0.8, 0.8, 0.2, 0.2), 1, 1),
            t(BBox::new(0.4, 0.6, 0.3, 0.3), BBox::new(0.4, 0.3, 0.2, 0.2), 3, 0),
            t(BBox::new(0.7, 0.5, 0.3, 0.7), BBox::new(0.9, 0.5, 0.1, 0.3), 0, 1),
        ],
    ]
}

fn check(protocol: ProtocolName, variant: Variant, targets: Vec<Vec<HoiTriplet>>) {
    let (model, features) = setup(protocol, variant);
    let bank = bank();
    let columns = bank.ids();
    let batch: Vec<BatchItem<'_, f64>> = features
        .iter()
        .zip(&targets)
        .map(|(f, t)| BatchItem { features: f, targets: t })
        .collect();
    let protocol_cfg = slhoi_core::protocol::Protocol::named(protocol);
    let step = loss_and_grads(&model, &bank, &batch, &columns, &protocol_cfg, None).unwrap();
    let raws: Vec<Raw> = features.iter().map(|f| raw_outputs(&model, f, &bank, &columns)).collect();
    let n_obj = model.detector().config().num_object_classes;
    let expected = if targets.iter().all(Vec::is_empty) {
        let mut zero = vec![("l1", 0.0), ("giou", 0.0), ("interaction", 0.0)];
        let full = oracle(protocol, &raws, &targets, &step.assignments, &columns, n_obj);
        zero.push(*full.last().unwrap());
        zero
    } else {
        oracle(protocol, &raws, &targets, &step.assignments, &columns, n_obj)
    };
    let w = protocol_cfg.weights;
    let mut total = 0.0;
    for (name, want) in &expected {
        let got = step.loss.terms[*name];
        assert!((got - want).abs() < 1e-10, "{protocol} {variant} {name}: {got} vs {want}");
        total += want
            * match *name {
                "l1" => w.l1,
                "giou" => w.giou,
                "interaction" => w.interaction,
                "confidence" => w.confidence,
                _ => w.object_class,
            };
    }
    assert_eq!(step.loss.terms.len(), expected.len());
    assert!((step.loss.total - total).abs() < 1e-9);
}

#[test]
fn swig_terms_match_plain_recomputation() {
    for v in Variant::ALL {
        check(ProtocolName::Swig, v, targets());
    }
}

#[test]
fn hico_terms_match_plain_recomputation() {
    for v in Variant::ALL {
        check(ProtocolName::Hico, v, targets());
    }
}

#[test]
fn images_without_targets_leave_only_the_background_terms() {
    check(ProtocolName::Swig, Variant::Full, vec![Vec::new(); 3]);
    check(ProtocolName::Hico, Variant::Full, vec![Vec::new(); 3]);
}

#[test]
fn matching_minimizes_the_weighted_cost() {
    // any other injective assignment must not lower the matching objective
    let (model, features) = setup(ProtocolName::Swig, Variant::Full);
    let bank = bank();
    let tg = targets();
    let protocol = slhoi_core::protocol::Protocol::swig();
    let out = model.predict(&features[2], &bank, &bank.ids()).unwrap();
    let cost = slhoi_core::loss::matching_cost(&out, &tg[2], &protocol.weights).unwrap();
    let best = slhoi_core::loss::hungarian_match(&out, &tg[2], &protocol).unwrap();
    let n = cost.len();
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                if a != b && b != c && a != c {
                    let alt = cost[a][0] + cost[b][1] + cost[c][2];
                    assert!(best.total_cost(&cost) <= alt + 1e-12);
                }
            }
        }
    }
}

#[test]
fn protocol_must_match_the_model() {
    let (model, features) = setup(ProtocolName::Swig, Variant::Full);
    let bank = bank();
    let tg = targets();
    let batch = [BatchItem {
        features: &features[0],
        targets: &tg[0],
    }];
    let hico = slhoi_core::protocol::Protocol::hico();
    let err = loss_and_grads(&model, &bank, &batch, &bank.ids(), &hico, None).unwrap_err();
    assert!(matches!(err, Error::ProtocolMismatch { .. }));
}

#[test]
fn more_targets_than_queries_is_rejected() {
    let (model, features) = setup(ProtocolName::Swig, Variant::Full);
    let bank = bank();
    let many: Vec<HoiTriplet> = (0..5).flat_map(|_| targets().remove(2)).take(5).collect();
    let batch = [BatchItem {
        features: &features[0],
        targets: &many,
    }];
    let err = loss_and_grads(&model, &bank, &batch, &bank.ids(), &slhoi_core::protocol::Protocol::swig(), None)
        .unwrap_err();
    assert!(matches!(err, Error::InvalidInput(_)));
}
