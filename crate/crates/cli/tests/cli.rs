use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slhoi_core::config::RunConfig;
use slhoi_core::data::AnnotationFile;
use slhoi_core::eval::HoiTriplet;
use slhoi_core::geometry::BBox;

fn slhoi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slhoi"))
        .args(args)
        .output()
        .expect("spawn slhoi")
}

fn ok(args: &[&str]) -> String {
    let out = slhoi(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    slhoi(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic data plus a config variant written next to it.
fn synthetic(dir: &Path, edit: impl FnOnce(&mut RunConfig)) -> PathBuf {
    ok(&["gen-synthetic", "--out", s(dir)]);
    let mut cfg = RunConfig::load(&dir.join("config.toml")).unwrap();
    edit(&mut cfg);
    let path = dir.join("edited.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn short(cfg: &mut RunConfig) {
    cfg.train.max_iterations = Some(6);
    cfg.train.checkpoint_every = 1;
}

#[test]
fn gen_synthetic_is_seed_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&["gen-synthetic", "--out", s(a.path()), "--seed", "4"]);
    ok(&["gen-synthetic", "--out", s(b.path()), "--seed", "4"]);
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), "annotations.json"), read(b.path(), "annotations.json"));
    assert_eq!(read(a.path(), "img_0003.png"), read(b.path(), "img_0003.png"));
    let ann = AnnotationFile::load(&a.path().join("annotations.json")).unwrap();
    assert_eq!(ann.images.len(), 8);
}

#[test]
fn gen_synthetic_rejects_empty_vocabulary() {
    let d = tempfile::tempdir().unwrap();
    let spec = d.path().join("spec.toml");
    std::fs::write(&spec, "objects = []\n").unwrap();
    assert_eq!(code(&["gen-synthetic", "--spec", s(&spec), "--out", s(d.path())]), 2);
}

#[test]
fn train_is_deterministic_and_resumable() {
    let d = tempfile::tempdir().unwrap();
    let cfg = synthetic(d.path(), short);
    let run_a = d.path().join("a");
    let run_b = d.path().join("b");
    ok(&["train", "--config", s(&cfg), "--out", s(&run_a)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&run_b)]);
    let log = |r: &Path| std::fs::read_to_string(r.join("loss_log.jsonl")).unwrap();
    assert_eq!(log(&run_a), log(&run_b));
    assert_eq!(log(&run_a).lines().count(), 6);

    // resume from the third epoch into a fresh directory
    let run_c = d.path().join("c");
    let ckpt = run_a.join("checkpoints/epoch_0003");
    ok(&["train", "--config", s(&cfg), "--out", s(&run_c), "--checkpoint", s(&ckpt)]);
    assert_eq!(log(&run_a), log(&run_c));

    // the embedded config reloads to the one that produced it
    let embedded = RunConfig::load(&ckpt.join("config.toml")).unwrap();
    let mut expected = RunConfig::load(&cfg).unwrap();
    expected.output_dir = run_a.clone();
    assert_eq!(embedded, expected);
    let latest = std::fs::read_to_string(run_a.join("checkpoints/latest")).unwrap();
    assert_eq!(latest.trim(), "epoch_0006");
}

#[test]
fn eval_scores_injected_predictions() {
    let d = tempfile::tempdir().unwrap();
    let cfg = synthetic(d.path(), |_| {});
    let ann = AnnotationFile::load(&d.path().join("annotations.json")).unwrap();
    let oracle: Vec<Vec<HoiTriplet>> = ann
        .images
        .iter()
        .map(|img| {
            img.annotations
                .iter()
                .map(|a| HoiTriplet {
                    human_box: BBox::normalize_xyxy(a.human_box, img.width as f64, img.height as f64),
                    object_box: BBox::normalize_xyxy(a.object_box, img.width as f64, img.height as f64),
                    interaction_id: a.action_id * 2 + a.object_id,
                    object_id: Some(a.object_id),
                    score: Some(0.9),
                })
                .collect()
        })
        .collect();
    let perfect = d.path().join("perfect.json");
    std::fs::write(&perfect, serde_json::to_vec(&oracle).unwrap()).unwrap();
    let out = ok(&["eval", "--config", s(&cfg), "--predictions", s(&perfect)]);
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["full"], 1.0);
    assert_eq!(report["seen"], 1.0);
    assert!(report["unseen"].is_null());

    let empty = d.path().join("empty.json");
    std::fs::write(&empty, serde_json::to_vec(&vec![Vec::<HoiTriplet>::new(); 8]).unwrap()).unwrap();
    let out = ok(&["eval", "--config", s(&cfg), "--predictions", s(&empty)]);
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["full"], 0.0);
}

#[test]
fn eval_of_a_checkpoint_is_repeatable() {
    let d = tempfile::tempdir().unwrap();
    let cfg = synthetic(d.path(), short);
    let run = d.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    let a = ok(&["eval", "--checkpoint", s(&run)]);
    let metrics_a = std::fs::read(run.join("eval_metrics.json")).unwrap();
    let b = ok(&["eval", "--checkpoint", s(&run)]);
    assert_eq!(a, b);
    assert_eq!(metrics_a, std::fs::read(run.join("eval_metrics.json")).unwrap());
}

#[test]
fn probe_writes_named_heatmaps() {
    let d = tempfile::tempdir().unwrap();
    let cfg = synthetic(d.path(), |_| {});
    let img = d.path().join("img_0000.png");
    let out = d.path().join("probe_run");
    let listed = ok(&[
        "probe-attention",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--image",
        s(&img),
        "--row",
        "2",
        "--col",
        "5",
        "--stage",
        "backbone_last",
        "--stage",
        "head_block_2",
        "--stage",
        "refine_cross",
    ]);
    let probe = out.join("probe");
    for f in [
        "backbone_last_r2_c5_heatmap.png",
        "backbone_last_r2_c5_overlay.png",
        "head_block_2_r2_c5_heatmap.png",
        "refine_cross_q0_heatmap.png",
        "refine_cross_q3_overlay.png",
    ] {
        assert!(probe.join(f).is_file(), "{f}");
        assert!(listed.contains(f));
    }
    assert!(!probe.join("refine_cross_q4_heatmap.png").exists());
    let map: serde_json::Value =
        serde_json::from_slice(&std::fs::read(probe.join("head_block_2_r2_c5.json")).unwrap()).unwrap();
    let values: Vec<f64> = serde_json::from_value(map["values"].clone()).unwrap();
    assert_eq!(values.len(), 64);
    assert!((values.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn build_text_bank_from_stub_and_file() {
    let d = tempfile::tempdir().unwrap();
    let csv = d.path().join("cats.csv");
    std::fs::write(&csv, "id,action,object,seen,rarity\n0,ride,horse,seen,rare\n1,hold,cup,unseen,non_rare\n").unwrap();
    let out = ok(&["build-text-bank", "--categories", s(&csv), "--dim", "16", "--out", s(&d.path().join("stub"))]);
    assert!(out.contains("2 categories x 16 dims"));

    let emb = d.path().join("emb.json");
    std::fs::write(&emb, "[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]").unwrap();
    let file_bank = d.path().join("file");
    ok(&[
        "build-text-bank",
        "--categories",
        s(&csv),
        "--encoder",
        "file",
        "--embeddings",
        s(&emb),
        "--out",
        s(&file_bank),
    ]);
    let bank = slhoi_core::text_bank::TextEmbeddingBank::load(&file_bank).unwrap();
    assert_eq!(bank.dim(), 3);

    std::fs::write(&emb, "[[1.0, 0.0, 0.0]]").unwrap();
    assert_eq!(
        code(&["build-text-bank", "--categories", s(&csv), "--encoder", "file", "--embeddings", s(&emb), "--out", s(&file_bank)]),
        3
    );
}

#[test]
fn exit_codes_classify_failures() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.toml");
    std::fs::write(&bad, "[detector]\nd = 30\nnum_heads = 4\n").unwrap();
    assert_eq!(code(&["train", "--config", s(&bad)]), 2);
    assert_eq!(code(&["train"]), 2);

    let cfg = synthetic(d.path(), |_| {});
    assert_eq!(
        code(&["eval", "--config", s(&cfg), "--annotations", s(&d.path().join("missing.json"))]),
        3
    );
    let nan = synthetic(d.path(), |c| {
        c.protocol.lr = Some(1e38);
        c.train.max_iterations = Some(5);
    });
    assert_eq!(code(&["train", "--config", s(&nan), "--out", s(&d.path().join("nan"))]), 4);
}

#[test]
fn relative_paths_survive_the_checkpoint_round_trip() {
    let d = tempfile::tempdir().unwrap();
    synthetic(d.path(), short);
    let run_in = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_slhoi"))
            .current_dir(d.path())
            .args(args)
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    run_in(&["train", "--config", "edited.toml", "--out", "rel"]);
    let report: serde_json::Value = serde_json::from_str(&run_in(&["eval", "--checkpoint", "rel"])).unwrap();
    assert!(report["full"].is_number());
}
