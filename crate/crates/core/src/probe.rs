//! Attention probing: per-stage attention over the patch grid, rendered as
//! heatmaps and overlays.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::prepare_image;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::model::SlHoi;
use crate::nn::AttentionRecord;
use crate::tensor::Real;
use crate::text_bank::TextEmbeddingBank;
use crate::tokens::SegmentKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeStage {
    BackboneLast,
    HeadBlock1,
    HeadBlock2,
    RefineCross,
}

impl ProbeStage {
    pub const ALL: [ProbeStage; 4] = [
        ProbeStage::BackboneLast,
        ProbeStage::HeadBlock1,
        ProbeStage::HeadBlock2,
        ProbeStage::RefineCross,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeStage::BackboneLast => "backbone_last",
            ProbeStage::HeadBlock1 => "head_block_1",
            ProbeStage::HeadBlock2 => "head_block_2",
            ProbeStage::RefineCross => "refine_cross",
        }
    }
}

impl fmt::Display for ProbeStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ProbeStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown probe stage `{s}`")))
    }
}

/// One attention row over the patch grid, renormalized to sum to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub stage: ProbeStage,
    /// `r{row}_c{col}` for patch queries, `q{i}` for interaction queries.
    pub tag: String,
    /// `(rows, cols)` of the patch grid.
    pub grid: (usize, usize),
    /// Head-averaged, row-major over the grid.
    pub values: Vec<f64>,
    pub per_head: Vec<Vec<f64>>,
    /// Patch the row belongs to, when it is a patch query.
    pub marked: Option<(usize, usize)>,
}

impl Heatmap {
    /// Base file name: `<stage>_<tag>`.
    pub fn stem(&self) -> String {
        format!("{}_{}", self.stage, self.tag)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid.1 + col]
    }
}

/// Restricts `row` to `keys` and rescales it to sum to 1.
pub fn renormalize<T: Real>(row: &[T], keys: std::ops::Range<usize>) -> Vec<f64> {
    let vals: Vec<f64> = row[keys].iter().map(|v| v.as_f64()).collect();
    let sum: f64 = vals.iter().sum();
    if sum > 0.0 {
        vals.iter().map(|v| v / sum).collect()
    } else {
        vec![1.0 / vals.len() as f64; vals.len()]
    }
}

fn heatmap<T: Real>(
    stage: ProbeStage,
    tag: String,
    record: &AttentionRecord<T>,
    row: usize,
    keys: std::ops::Range<usize>,
    grid: (usize, usize),
    marked: Option<(usize, usize)>,
) -> Heatmap {
    Heatmap {
        stage,
        tag,
        grid,
        values: renormalize(record.mean().row(row), keys.clone()),
        per_head: record
            .heads
            .iter()
            .map(|h| renormalize(h.row(row), keys.clone()))
            .collect(),
        marked,
    }
}

/// Attention maps for `stage` on `image` (raw `[0, 1]` pixels).
///
/// Patch stages return the row of patch `(row, col)`; `refine_cross`
/// returns one map per interaction query and ignores the patch.
pub fn probe<T: Real>(
    model: &SlHoi<T>,
    image: &Image,
    size: Option<(usize, usize)>,
    stage: ProbeStage,
    patch: (usize, usize),
    bank: &TextEmbeddingBank,
    columns: &[usize],
) -> Result<Vec<Heatmap>> {
    let img = prepare_image(image, model.backbone().config(), size);
    let grid = model.backbone().grid_for(img.height(), img.width())?;
    let (row, col) = patch;
    if stage != ProbeStage::RefineCross && (row >= grid.0 || col >= grid.1) {
        return Err(Error::InvalidInput(format!(
            "patch ({row}, {col}) is off the {}x{} grid",
            grid.0, grid.1
        )));
    }
    let tag = format!("r{row}_c{col}");
    match stage {
        ProbeStage::BackboneLast | ProbeStage::HeadBlock1 | ProbeStage::HeadBlock2 => {
            let (x_b, mut records) = model.backbone().encode_recording(&img)?;
            let record = if stage == ProbeStage::BackboneLast {
                records
                    .pop()
                    .ok_or_else(|| Error::InvalidInput("backbone recorded no attention".into()))?
            } else {
                let block = if stage == ProbeStage::HeadBlock1 { 0 } else { 1 };
                let mut head = model.head().attention_records(&x_b)?;
                if block >= head.len() {
                    return Err(Error::InvalidInput(format!(
                        "head has {} blocks, no {stage}",
                        head.len()
                    )));
                }
                head.swap_remove(block)
            };
            let patches = x_b.layout().range(SegmentKind::Patch);
            let position = patches.start + row * grid.1 + col;
            Ok(vec![heatmap(stage, tag, &record, position, patches, grid, Some(patch))])
        }
        ProbeStage::RefineCross => {
            if !model.interaction().config().variant.refines()
                && !model.interaction().config().variant.is_late_fusion()
            {
                return Err(Error::VariantMismatch(
                    model.interaction().config().variant.as_str().to_string(),
                ));
            }
            let f = model.features(&img)?;
            let (_, mut records) = model.predict_recording(&f, bank, columns)?;
            let record = records
                .pop()
                .ok_or_else(|| Error::InvalidInput("no refinement attention recorded".into()))?;
            let n = grid.0 * grid.1;
            let keys = record.heads[0].cols();
            // patch tokens are always the trailing block of the key sequence
            let patches = keys - n..keys;
            Ok((0..record.heads[0].rows())
                .map(|q| heatmap(stage, format!("q{q}"), &record, q, patches.clone(), grid, None))
                .collect())
        }
    }
}

// ---- rendering ----

/// Black → red → yellow → white.
pub fn colormap(v: f64) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0) as f32;
    [(3.0 * v).min(1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)]
}

pub const MARK_COLOR: [f32; 3] = [0.0, 1.0, 1.0];

fn scaled(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(0.0, f64::max);
    values.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect()
}

fn mark(img: &mut Image, cy: f64, cx: f64, radius: f64) {
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            if dy * dy + dx * dx <= radius * radius {
                img.set_pixel(y, x, MARK_COLOR);
            }
        }
    }
}

/// Colored grid with `cell` pixels per patch; the queried patch gets a dot.
pub fn render_grid(values: &[f64], grid: (usize, usize), cell: usize, marked: Option<(usize, usize)>) -> Image {
    let v = scaled(values);
    let mut img = Image::zeros(grid.0 * cell, grid.1 * cell);
    for y in 0..img.height() {
        for x in 0..img.width() {
            img.set_pixel(y, x, colormap(v[(y / cell) * grid.1 + x / cell]));
        }
    }
    if let Some((r, c)) = marked {
        let half = cell as f64 / 2.0;
        mark(&mut img, r as f64 * cell as f64 + half, c as f64 * cell as f64 + half, (cell as f64 / 4.0).max(1.0));
    }
    img
}

/// Bilinearly upsampled heatmap blended over `image`.
pub fn render_overlay(image: &Image, map: &Heatmap, alpha: f32) -> Image {
    let v = scaled(&map.values);
    let (gr, gc) = map.grid;
    let small = Image::new(gr, gc, v.iter().flat_map(|&x| [x as f32; 3]).collect())
        .expect("grid-sized buffer");
    let up = small.resized(image.height(), image.width());
    let mut out = Image::zeros(image.height(), image.width());
    for y in 0..image.height() {
        for x in 0..image.width() {
            let heat = colormap(f64::from(up.pixel(y, x)[0]));
            let base = image.pixel(y, x);
            out.set_pixel(y, x, [0, 1, 2].map(|k| (1.0 - alpha) * base[k] + alpha * heat[k]));
        }
    }
    if let Some((r, c)) = map.marked {
        let (sy, sx) = (image.height() as f64 / gr as f64, image.width() as f64 / gc as f64);
        mark(&mut out, (r as f64 + 0.5) * sy, (c as f64 + 0.5) * sx, (sy.min(sx) / 4.0).max(1.0));
    }
    out
}

/// Writes `<stem>_heatmap.png`, `<stem>_overlay.png`, `<stem>.json` and,
/// with `per_head`, `<stem>_head{h}.png`. Returns the written paths.
pub fn write_heatmaps(dir: &Path, image: &Image, maps: &[Heatmap], per_head: bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for m in maps {
        let cell = (image.height() / m.grid.0).max(1);
        let stem = m.stem();
        let p = dir.join(format!("{stem}_heatmap.png"));
        render_grid(&m.values, m.grid, cell, m.marked).save_png(&p)?;
        out.push(p);
        let p = dir.join(format!("{stem}_overlay.png"));
        render_overlay(image, m, 0.5).save_png(&p)?;
        out.push(p);
        if per_head {
            for (h, values) in m.per_head.iter().enumerate() {
                let p = dir.join(format!("{stem}_head{h}.png"));
                render_grid(values, m.grid, cell, m.marked).save_png(&p)?;
                out.push(p);
            }
        }
        let p = dir.join(format!("{stem}.json"));
        std::fs::write(&p, serde_json::to_vec_pretty(m)?).map_err(|e| Error::io(&p, e))?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::interaction::Variant;
    use crate::text_bank::{CategoryEntry, Rarity};

    fn bank() -> TextEmbeddingBank {
        let entries = (0..3)
            .map(|i| CategoryEntry {
                id: i,
                action: ["ride", "hold", "push"][i].into(),
                object: "box".into(),
                seen: true,
                rarity: Rarity::NotApplicable,
            })
            .collect();
        TextEmbeddingBank::from_stub(entries, 0, 128).unwrap()
    }

    fn image() -> Image {
        Image::new(32, 24, (0..32 * 24 * 3).map(|v| ((v * 7) % 13) as f32 / 13.0).collect()).unwrap()
    }

    #[test]
    fn every_stage_yields_distributions_on_the_grid() {
        let m = RunConfig::toy().build_model::<f32>().unwrap();
        for stage in ProbeStage::ALL {
            let maps = probe(&m, &image(), None, stage, (3, 1), &bank(), &[0, 1, 2]).unwrap();
            let expected = if stage == ProbeStage::RefineCross { 4 } else { 1 };
            assert_eq!(maps.len(), expected, "{stage}");
            for h in &maps {
                assert_eq!(h.grid, (4, 3));
                assert_eq!(h.values.len(), 12);
                assert!((h.values.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(h.per_head.len(), 4);
            }
        }
    }

    #[test]
    fn off_grid_and_missing_refinement_rejected() {
        let m = RunConfig::toy().build_model::<f32>().unwrap();
        let r = probe(&m, &image(), None, ProbeStage::HeadBlock2, (4, 0), &bank(), &[0]);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
        let m = RunConfig::toy()
            .with_variant(Variant::BootstrapOnly)
            .build_model::<f32>()
            .unwrap();
        let r = probe(&m, &image(), None, ProbeStage::RefineCross, (0, 0), &bank(), &[0]);
        assert!(matches!(r, Err(Error::VariantMismatch(_))));
    }

    #[test]
    fn files_are_named_by_stage_and_patch() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunConfig::toy().build_model::<f32>().unwrap();
        let mut maps = Vec::new();
        for stage in [ProbeStage::BackboneLast, ProbeStage::HeadBlock2] {
            maps.extend(probe(&m, &image(), None, stage, (1, 2), &bank(), &[0]).unwrap());
        }
        let written = write_heatmaps(dir.path(), &image(), &maps, true).unwrap();
        for name in [
            "backbone_last_r1_c2_heatmap.png",
            "head_block_2_r1_c2_heatmap.png",
            "head_block_2_r1_c2_overlay.png",
            "head_block_2_r1_c2_head3.png",
            "backbone_last_r1_c2.json",
        ] {
            assert!(written.contains(&dir.path().join(name)), "{name}");
        }
        let a = std::fs::read(dir.path().join("backbone_last_r1_c2_heatmap.png")).unwrap();
        let b = std::fs::read(dir.path().join("head_block_2_r1_c2_heatmap.png")).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0.0, 0.0, 0.0]);
        assert_eq!(colormap(1.0), [1.0, 1.0, 1.0]);
    }
}
