use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use slhoi_core::config::RunConfig;
use slhoi_core::data::prepare_image;
use slhoi_core::eval::HoiTriplet;
use slhoi_core::geometry::BBox;
use slhoi_core::head::AttentionMask;
use slhoi_core::imaging::Image;
use slhoi_core::matching::hungarian;
use slhoi_core::optim::AdamW;
use slhoi_core::synthetic::{generate, SyntheticSpec};
use slhoi_core::tensor::Mat;
use slhoi_core::text_bank::TextEmbeddingBank;
use slhoi_core::train::{training_step, BatchItem};

fn image(h: usize, w: usize) -> Image {
    Image::new(h, w, (0..h * w * 3).map(|v| ((v * 37) % 101) as f32 / 101.0).collect()).unwrap()
}

fn forward(c: &mut Criterion) {
    let cfg = RunConfig::toy();
    let model = cfg.build_model::<f32>().unwrap();
    let img = prepare_image(&image(64, 64), model.backbone().config(), None);
    let set = generate(&SyntheticSpec::default()).unwrap();
    let bank = TextEmbeddingBank::from_stub(set.categories, 0, cfg.text_dim()).unwrap();
    let features = model.features(&img).unwrap();
    let queries = Mat::from_fn(4, 64, |r, c| ((r * 64 + c) % 7) as f32 * 0.1);

    c.bench_function("backbone_encode_64px", |b| b.iter(|| model.backbone().encode(black_box(&img)).unwrap()));
    c.bench_function("head_plain", |b| b.iter(|| model.head().forward_plain(black_box(&features.x_b)).unwrap()));
    c.bench_function("head_bootstrapped_masked", |b| {
        b.iter(|| {
            model
                .head()
                .forward_bootstrapped(black_box(&queries), &features.x_b, AttentionMask::BlockQueryToImage)
                .unwrap()
        })
    });
    c.bench_function("predict_cached_features", |b| {
        b.iter(|| model.predict(black_box(&features), &bank, &bank.ids()).unwrap())
    });
}

fn train(c: &mut Criterion) {
    let cfg = RunConfig::synthetic();
    let mut model = cfg.build_model::<f32>().unwrap();
    let set = generate(&SyntheticSpec::default()).unwrap();
    let bank = TextEmbeddingBank::from_stub(set.categories.clone(), 0, cfg.text_dim()).unwrap();
    let targets = set.annotations.triplets(&bank).unwrap();
    let features: Vec<_> = set
        .images
        .iter()
        .map(|i| model.features(&prepare_image(i, model.backbone().config(), None)).unwrap())
        .collect();
    let mut opt = AdamW::new(cfg.optimizer);
    let protocol = cfg.protocol();
    let seen = bank.ids();
    c.bench_function("training_step_batch8", |b| {
        b.iter(|| {
            let batch: Vec<BatchItem<'_, f32>> = features
                .iter()
                .zip(&targets)
                .map(|(f, t)| BatchItem { features: f, targets: t })
                .collect();
            training_step(&mut model, &mut opt, &bank, &batch, &seen, &protocol, 1e-4).unwrap()
        })
    });
}

fn matching_and_eval(c: &mut Criterion) {
    let n = 64;
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n / 2).map(|j| (((i * 31 + j * 17) % 97) as f64).sin()).collect())
        .collect();
    c.bench_function("hungarian_64x32", |b| b.iter(|| hungarian(black_box(&cost)).unwrap()));

    let set = generate(&SyntheticSpec {
        num_images: 64,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let bank = TextEmbeddingBank::from_stub(set.categories.clone(), 0, 8).unwrap();
    let gt = set.annotations.triplets(&bank).unwrap();
    let preds: Vec<Vec<HoiTriplet>> = gt
        .iter()
        .enumerate()
        .map(|(i, g)| {
            (0..100)
                .map(|k| HoiTriplet {
                    score: Some(((i * 100 + k) % 89) as f64 / 89.0),
                    interaction_id: k % 4,
                    human_box: if k < g.len() { g[k].human_box } else { BBox::new(0.5, 0.5, 0.2, 0.2) },
                    ..g[0].clone()
                })
                .collect()
        })
        .collect();
    c.bench_function("evaluate_map_64img_100det", |b| {
        b.iter(|| slhoi_core::eval::evaluate_map(black_box(&preds), &gt, &bank).unwrap())
    });
}

criterion_group!(benches, forward, train, matching_and_eval);
criterion_main!(benches);
