use proptest::prelude::*;

use slhoi_core::eval::{average_precision, per_category_ap, HoiTriplet};
use slhoi_core::geometry::{giou, iou, BBox};
use slhoi_core::matching::hungarian;
use slhoi_core::protocol::Protocol;
use slhoi_core::tensor::Mat;
use slhoi_core::text_bank::{build_prompt, gerund, stub_encode};
use slhoi_core::tokens::{Layout, SegmentKind};
use slhoi_core::train::epoch_order;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.05f64..0.95, 0.05f64..0.95, 0.01f64..0.8, 0.01f64..0.8).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

fn cost_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=6)
        .prop_flat_map(|p| (Just(p), 1usize..=p))
        .prop_flat_map(|(p, t)| prop::collection::vec(prop::collection::vec(-10.0f64..10.0, t), p))
}

fn exhaustive(cost: &[Vec<f64>]) -> f64 {
    let t = cost[0].len();
    let mut best = f64::INFINITY;
    let mut stack = vec![(0usize, 0.0f64, 0u32)];
    while let Some((j, acc, used)) = stack.pop() {
        if j == t {
            best = best.min(acc);
            continue;
        }
        for (p, row) in cost.iter().enumerate() {
            if used & (1 << p) == 0 {
                stack.push((j + 1, acc + row[j], used | (1 << p)));
            }
        }
    }
    best
}

fn triplet(h: BBox, o: BBox, id: usize, score: Option<f64>) -> HoiTriplet {
    HoiTriplet {
        human_box: h,
        object_box: o,
        interaction_id: id,
        object_id: None,
        score,
    }
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let (x, y) = (iou(a, b), iou(b, a));
        prop_assert!((x - y).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((iou(a, a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn giou_lower_bounds_iou(a in bbox(), b in bbox()) {
        let g = giou(a, b);
        prop_assert!(g <= iou(a, b) + 1e-12);
        prop_assert!((-1.0..=1.0).contains(&g));
        prop_assert!((giou(a, b) - giou(b, a)).abs() < 1e-12);
    }

    #[test]
    fn flipping_twice_is_identity_and_keeps_overlap(a in bbox(), b in bbox()) {
        let f = a.flipped_horizontally().flipped_horizontally();
        prop_assert!((f.cx - a.cx).abs() < 1e-12);
        let flipped = iou(a.flipped_horizontally(), b.flipped_horizontally());
        prop_assert!((flipped - iou(a, b)).abs() < 1e-9);
    }

    #[test]
    fn corner_round_trip(a in bbox()) {
        let [x0, y0, x1, y1] = a.to_xyxy();
        let b = BBox::from_xyxy(x0, y0, x1, y1);
        prop_assert!(a.l1(b) < 1e-12);
    }

    #[test]
    fn hungarian_matches_exhaustive_search(cost in cost_matrix()) {
        let a = hungarian(&cost).unwrap();
        prop_assert_eq!(a.len(), cost[0].len());
        prop_assert!((a.total_cost(&cost) - exhaustive(&cost)).abs() < 1e-9);
    }

    #[test]
    fn hungarian_is_invariant_to_constant_shifts(cost in cost_matrix(), shift in -5.0f64..5.0) {
        let shifted: Vec<Vec<f64>> = cost.iter().map(|r| r.iter().map(|c| c + shift).collect()).collect();
        let a = hungarian(&cost).unwrap();
        let b = hungarian(&shifted).unwrap();
        prop_assert!((a.total_cost(&cost) - b.total_cost(&cost)).abs() < 1e-9);
    }

    #[test]
    fn average_precision_is_a_fraction(hits in prop::collection::vec(any::<bool>(), 0..30), extra in 0usize..5) {
        let tp = hits.iter().filter(|&&h| h).count();
        let ap = average_precision(&hits, tp + extra).unwrap_or(0.0);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
        if extra == 0 && tp > 0 && hits.iter().take(tp).all(|&h| h) {
            prop_assert!((ap - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ap_ignores_monotone_score_maps(
        boxes in prop::collection::vec((bbox(), bbox(), 0usize..3), 1..6),
        scores in prop::collection::vec(0.01f64..1.0, 1..12),
        noise in prop::collection::vec((bbox(), bbox()), 12),
    ) {
        let gt = vec![boxes.iter().map(|&(h, o, c)| triplet(h, o, c, None)).collect::<Vec<_>>()];
        let make = |f: &dyn Fn(f64) -> f64| {
            vec![scores
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    let (h, o, c) = if i % 2 == 0 { boxes[i % boxes.len()] } else { (noise[i].0, noise[i].1, i % 3) };
                    triplet(h, o, c, Some(f(s)))
                })
                .collect::<Vec<_>>()]
        };
        let a = per_category_ap(&make(&|s| s), &gt, &[0, 1, 2]);
        let b = per_category_ap(&make(&|s| s.powi(3) * 0.5 + 0.1), &gt, &[0, 1, 2]);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn perfect_detections_score_one(boxes in prop::collection::vec((bbox(), bbox(), 0usize..3), 1..8)) {
        let gt = vec![boxes.iter().map(|&(h, o, c)| triplet(h, o, c, None)).collect::<Vec<_>>()];
        let pr = vec![boxes.iter().map(|&(h, o, c)| triplet(h, o, c, Some(0.9))).collect::<Vec<_>>()];
        for (_, ap) in per_category_ap(&pr, &gt, &[0, 1, 2]) {
            if let Some(ap) = ap.ap {
                prop_assert!((ap - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..8) {
        let rows = v.len().div_ceil(cols);
        let m = Mat::from_fn(rows, cols, |r, c| *v.get(r * cols + c).unwrap_or(&0.0));
        let s = m.softmax_rows();
        for r in 0..rows {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn layouts_follow_the_canonical_order(h in 1usize..6, w in 1usize..6, regs in 0usize..5, nq in 0usize..70) {
        let layout = Layout::image(regs, (h, w)).unwrap().with_queries(nq).unwrap();
        prop_assert_eq!(layout.len(), 1 + regs + nq + h * w);
        prop_assert_eq!(layout.range(SegmentKind::Patch).end, layout.len());
        prop_assert_eq!(layout.count(SegmentKind::Query), nq);
        let kinds: Vec<_> = (0..layout.len()).map(|i| layout.kind_at(i).unwrap()).collect();
        let mut sorted = kinds.clone();
        sorted.sort_by_key(|k| match k {
            SegmentKind::Class => 0,
            SegmentKind::Register => 1,
            SegmentKind::Query => 2,
            _ => 3,
        });
        prop_assert_eq!(kinds, sorted);
    }

    #[test]
    fn epoch_order_is_a_permutation(seed in any::<u64>(), epoch in 0usize..500, n in 0usize..64) {
        let mut o = epoch_order(seed, epoch, n);
        prop_assert_eq!(o.clone(), epoch_order(seed, epoch, n));
        o.sort();
        prop_assert_eq!(o, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn learning_rate_never_increases(epoch in 0usize..200) {
        for p in [Protocol::swig(), Protocol::hico()] {
            prop_assert!(p.lr_at(epoch + 1) <= p.lr_at(epoch));
            prop_assert!(p.lr_at(epoch) > 0.0);
        }
    }

    #[test]
    fn gerunds_end_in_ing(verb in "[a-z]{1,10}") {
        prop_assert!(gerund(&verb).ends_with("ing"));
    }

    #[test]
    fn prompts_keep_their_frame(verb in "[a-z]{2,8}", noun in "[a-z]{2,8}") {
        let p = build_prompt(&verb, &noun).unwrap();
        prop_assert!(p.starts_with("a photo of a person "));
        let ends_with_object = p.ends_with(&format!(" a {noun}")) || p.ends_with(&format!(" an {noun}"));
        prop_assert!(ends_with_object);
    }

    #[test]
    fn stub_embeddings_are_unit_and_deterministic(prompt in ".{1,40}", seed in any::<u64>(), half in 1usize..64) {
        let dim = 2 * half;
        let a = stub_encode(&prompt, seed, dim).unwrap();
        prop_assert_eq!(&a, &stub_encode(&prompt, seed, dim).unwrap());
        let norm: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-5);
    }
}
