//! Annotation files, image preparation and dataset-level prediction.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::eval::HoiTriplet;
use crate::geometry::BBox;
use crate::imaging::Image;
use crate::model::SlHoi;
use crate::tensor::Real;
use crate::text_bank::TextEmbeddingBank;
use crate::train::TrainSample;

/// One human-object pair with absolute `[x0, y0, x1, y1]` pixel boxes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawAnnotation {
    pub human_box: [f64; 4],
    pub object_box: [f64; 4],
    pub action_id: usize,
    pub object_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: usize,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub annotations: Vec<RawAnnotation>,
}

/// Annotation file.
///
/// With `actions` and `objects` present, `(action_id, object_id)` index
/// those lists and resolve to bank categories by name; otherwise
/// `action_id` is the category id itself.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objects: Option<Vec<String>>,
    pub images: Vec<ImageRecord>,
}

impl AnnotationFile {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    fn category_of(&self, a: &RawAnnotation, bank: &TextEmbeddingBank) -> Result<usize> {
        match (&self.actions, &self.objects) {
            (Some(actions), Some(objects)) => {
                let action = actions
                    .get(a.action_id)
                    .ok_or_else(|| Error::Data(format!("action id {} out of range", a.action_id)))?;
                let object = objects
                    .get(a.object_id)
                    .ok_or_else(|| Error::Data(format!("object id {} out of range", a.object_id)))?;
                bank.find(action, object).map(|e| e.id).ok_or_else(|| {
                    Error::Data(format!("no bank category for `{action}` `{object}`"))
                })
            }
            (None, None) => bank
                .entry(a.action_id)
                .map(|e| e.id)
                .ok_or_else(|| Error::Data(format!("category {} is not in the bank", a.action_id))),
            _ => Err(Error::Data("`actions` and `objects` must be given together".into())),
        }
    }

    /// Normalized triplets per image, validated against image bounds and the bank.
    pub fn triplets(&self, bank: &TextEmbeddingBank) -> Result<Vec<Vec<HoiTriplet>>> {
        self.images
            .iter()
            .map(|img| {
                if img.width == 0 || img.height == 0 {
                    return Err(Error::Data(format!("image {} has zero size", img.id)));
                }
                img.annotations
                    .iter()
                    .map(|a| {
                        for b in [a.human_box, a.object_box] {
                            let ok = b.iter().all(|v| v.is_finite())
                                && b[0] >= 0.0
                                && b[1] >= 0.0
                                && b[2] <= img.width as f64
                                && b[3] <= img.height as f64
                                && b[2] > b[0]
                                && b[3] > b[1];
                            if !ok {
                                return Err(Error::Data(format!(
                                    "image {}: box {b:?} is empty or outside {}x{}",
                                    img.id, img.width, img.height
                                )));
                            }
                        }
                        Ok(HoiTriplet {
                            human_box: BBox::normalize_xyxy(a.human_box, img.width as f64, img.height as f64),
                            object_box: BBox::normalize_xyxy(a.object_box, img.width as f64, img.height as f64),
                            interaction_id: self.category_of(a, bank)?,
                            object_id: Some(a.object_id),
                            score: None,
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

/// A resolved dataset: image paths and normalized ground truth.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub paths: Vec<PathBuf>,
    pub targets: Vec<Vec<HoiTriplet>>,
}

impl Dataset {
    /// Images are looked up in `images_dir`, defaulting to the annotation file's directory.
    pub fn load(annotations: &Path, images_dir: Option<&Path>, bank: &TextEmbeddingBank) -> Result<Self> {
        let file = AnnotationFile::load(annotations)?;
        let dir = images_dir
            .map(Path::to_path_buf)
            .unwrap_or_else(|| annotations.parent().unwrap_or(Path::new(".")).to_path_buf());
        let targets = file.triplets(bank)?;
        Ok(Self {
            paths: file.images.iter().map(|r| dir.join(&r.file_name)).collect(),
            records: file.images,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Reads image `i`, checking its size against the record.
    pub fn image(&self, i: usize) -> Result<Image> {
        let img = Image::load(&self.paths[i])?;
        let r = &self.records[i];
        if (img.width(), img.height()) != (r.width, r.height) {
            return Err(Error::Data(format!(
                "{} is {}x{}, annotations say {}x{}",
                self.paths[i].display(),
                img.width(),
                img.height(),
                r.width,
                r.height
            )));
        }
        Ok(img)
    }
}

/// Resizes (when `size` is set) and normalizes with the backbone statistics.
pub fn prepare_image(image: &Image, backbone: &BackboneConfig, size: Option<(usize, usize)>) -> Image {
    let resized = match size {
        Some((h, w)) => image.resized(h, w),
        None => image.clone(),
    };
    resized.normalized(backbone.image_mean, backbone.image_std)
}

/// Caches frozen features for every image, keeping only annotations of `seen` categories.
pub fn training_samples<T: Real>(
    model: &SlHoi<T>,
    dataset: &Dataset,
    size: Option<(usize, usize)>,
    flip: bool,
    seen: &[usize],
) -> Result<Vec<TrainSample<T>>> {
    let seen: BTreeSet<usize> = seen.iter().copied().collect();
    let cfg = model.backbone().config();
    (0..dataset.len())
        .map(|i| {
            let raw = dataset.image(i)?;
            let img = prepare_image(&raw, cfg, size);
            let flipped = if flip {
                Some(Arc::new(model.features(&img.flipped_horizontally())?))
            } else {
                None
            };
            Ok(TrainSample {
                features: Arc::new(model.features(&img)?),
                flipped,
                targets: dataset.targets[i]
                    .iter()
                    .filter(|t| seen.contains(&t.interaction_id))
                    .cloned()
                    .collect(),
            })
        })
        .collect()
}

/// Top-scoring triplets per image, classified against `columns` of the bank.
pub fn predict_dataset<T: Real>(
    model: &SlHoi<T>,
    dataset: &Dataset,
    bank: &TextEmbeddingBank,
    columns: &[usize],
    size: Option<(usize, usize)>,
    max_detections: usize,
) -> Result<Vec<Vec<HoiTriplet>>> {
    let cfg = model.backbone().config();
    (0..dataset.len())
        .map(|i| {
            let img = prepare_image(&dataset.image(i)?, cfg, size);
            let f = model.features(&img)?;
            let out = model.predict(&f, bank, columns)?;
            if out.probs.iter().flatten().any(|p| !p.is_finite()) {
                return Err(Error::Numerical(format!("non-finite scores on image {}", dataset.records[i].id)));
            }
            Ok(out.triplets(max_detections))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text_bank::{CategoryEntry, Rarity};

    fn bank() -> TextEmbeddingBank {
        let entries = [("ride", "horse"), ("hold", "cup")]
            .iter()
            .enumerate()
            .map(|(i, (a, o))| CategoryEntry {
                id: i,
                action: a.to_string(),
                object: o.to_string(),
                seen: true,
                rarity: Rarity::NotApplicable,
            })
            .collect();
        TextEmbeddingBank::from_stub(entries, 0, 8).unwrap()
    }

    fn file(box_: [f64; 4]) -> AnnotationFile {
        AnnotationFile {
            actions: Some(vec!["hold".into(), "ride".into()]),
            objects: Some(vec!["cup".into(), "horse".into()]),
            images: vec![ImageRecord {
                id: 3,
                file_name: "a.png".into(),
                width: 100,
                height: 50,
                annotations: vec![RawAnnotation {
                    human_box: [0.0, 0.0, 50.0, 50.0],
                    object_box: box_,
                    action_id: 1,
                    object_id: 1,
                }],
            }],
        }
    }

    #[test]
    fn resolves_names_and_normalizes() {
        let t = file([50.0, 25.0, 100.0, 50.0]).triplets(&bank()).unwrap();
        assert_eq!(t[0][0].interaction_id, 0);
        assert_eq!(t[0][0].human_box, BBox::new(0.25, 0.5, 0.5, 1.0));
        assert_eq!(t[0][0].object_box, BBox::new(0.75, 0.75, 0.5, 0.5));
    }

    #[test]
    fn rejects_bad_boxes_and_unknown_pairs() {
        assert!(matches!(file([50.0, 25.0, 101.0, 50.0]).triplets(&bank()), Err(Error::Data(_))));
        assert!(matches!(file([50.0, 25.0, 50.0, 50.0]).triplets(&bank()), Err(Error::Data(_))));
        let mut f = file([50.0, 25.0, 100.0, 50.0]);
        f.images[0].annotations[0].object_id = 0;
        assert!(matches!(f.triplets(&bank()), Err(Error::Data(_))));
    }

    #[test]
    fn plain_ids_are_category_ids() {
        let mut f = file([50.0, 25.0, 100.0, 50.0]);
        f.actions = None;
        f.objects = None;
        assert_eq!(f.triplets(&bank()).unwrap()[0][0].interaction_id, 1);
        f.images[0].annotations[0].action_id = 9;
        assert!(f.triplets(&bank()).is_err());
    }
}
