//! The assembled detector: frozen backbone and head plus learnable modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::backbone::{Backbone, BackboneConfig};
use crate::detector::{boxes_from_mat, DetectionConfig, Detector, Which};
use crate::error::{Error, Result};
use crate::eval::HoiTriplet;
use crate::features::ImageFeatures;
use crate::geometry::BBox;
use crate::head::{HeadConfig, VisionHead};
use crate::interaction::{Interaction, InteractionConfig};
use crate::nn::{AttentionRecord, Ctx};
use crate::params::ParamStore;
use crate::protocol::ProtocolName;
use crate::tensor::{Mat, Real};
use crate::text_bank::TextEmbeddingBank;

pub const LEARNABLE_PREFIXES: [&str; 2] = ["det.", "inter."];

/// Graph handles of one image's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub boxes_h: Var,
    pub boxes_o: Var,
    /// `N_q × 1` logits (swig).
    pub confidence: Option<Var>,
    /// `N_q × (C + 1)` logits (hico).
    pub object_logits: Option<Var>,
    /// `N_q × |columns|` scaled cosine logits.
    pub interaction_logits: Var,
}

/// Plain values of one image's outputs.
#[derive(Clone, Debug)]
pub struct ImageOutputs {
    pub boxes_h: Vec<BBox>,
    pub boxes_o: Vec<BBox>,
    pub confidence: Option<Vec<f64>>,
    /// Softmax over object classes, background last.
    pub object_probs: Option<Vec<Vec<f64>>>,
    /// Softmax over the category columns the pass was run with.
    pub probs: Vec<Vec<f64>>,
    pub columns: Vec<usize>,
}

impl ImageOutputs {
    pub(crate) fn read<T: Real>(g: &crate::autograd::Graph<T>, v: &ForwardVars, columns: &[usize]) -> Self {
        let rows = |m: &Mat<T>| -> Vec<Vec<f64>> {
            (0..m.rows())
                .map(|r| m.row(r).iter().map(|x| x.as_f64()).collect())
                .collect()
        };
        Self {
            boxes_h: boxes_from_mat(g.value(v.boxes_h)),
            boxes_o: boxes_from_mat(g.value(v.boxes_o)),
            confidence: v.confidence.map(|c| {
                g.value(c)
                    .data()
                    .iter()
                    .map(|x| crate::autograd::sigmoid(x.as_f64()))
                    .collect()
            }),
            object_probs: v.object_logits.map(|o| rows(&g.value(o).softmax_rows())),
            probs: rows(&g.value(v.interaction_logits).softmax_rows()),
            columns: columns.to_vec(),
        }
    }

    /// Per-query, per-category triplets, best first, truncated to `max_detections`.
    pub fn triplets(&self, max_detections: usize) -> Vec<HoiTriplet> {
        let mut out = Vec::new();
        for (i, probs) in self.probs.iter().enumerate() {
            let pair_score = match (&self.confidence, &self.object_probs) {
                (Some(c), _) => c[i],
                (None, Some(o)) => o[i][..o[i].len() - 1].iter().copied().fold(0.0, f64::max),
                (None, None) => 1.0,
            };
            let object_id = self.object_probs.as_ref().map(|o| {
                let fg = &o[i][..o[i].len() - 1];
                (0..fg.len()).max_by(|&a, &b| fg[a].total_cmp(&fg[b])).unwrap_or(0)
            });
            for (j, &p) in probs.iter().enumerate() {
                out.push(HoiTriplet {
                    human_box: self.boxes_h[i],
                    object_box: self.boxes_o[i],
                    interaction_id: self.columns[j],
                    object_id,
                    score: Some(p * pair_score),
                });
            }
        }
        // stable: ties keep query-major order
        out.sort_by(|a, b| b.score.unwrap_or(0.0).total_cmp(&a.score.unwrap_or(0.0)));
        out.truncate(max_detections);
        out
    }
}

#[derive(Clone, Debug)]
pub struct SlHoi<T> {
    backbone: Backbone<T>,
    head: VisionHead<T>,
    detector: Detector,
    interaction: Interaction,
    /// Learnable parameters only (`det.*`, `inter.*`).
    pub params: ParamStore<T>,
}

impl<T: Real> SlHoi<T> {
    /// Wraps frozen modules and initializes learnable parameters from `seed`.
    pub fn new(
        backbone: Backbone<T>,
        head: VisionHead<T>,
        detection: DetectionConfig,
        interaction: InteractionConfig,
        protocol: ProtocolName,
        seed: u64,
    ) -> Result<Self> {
        let dim = backbone.config().dim;
        if head.config().dim != dim {
            return Err(Error::config(
                "head.dim",
                format!("{} does not match backbone.dim {dim}", head.config().dim),
            ));
        }
        let detector = Detector::new(detection, dim, protocol)?;
        let interaction = Interaction::new(interaction, detector.config().d, dim)?;
        let mut specs = detector.param_specs();
        specs.extend(interaction.param_specs());
        let params = ParamStore::initialize(&specs, &mut ChaCha8Rng::seed_from_u64(seed), false);
        Ok(Self {
            backbone,
            head,
            detector,
            interaction,
            params,
        })
    }

    /// Fully random toy-scale model.
    pub fn random(
        backbone: BackboneConfig,
        head: HeadConfig,
        detection: DetectionConfig,
        interaction: InteractionConfig,
        protocol: ProtocolName,
        seed: u64,
    ) -> Result<Self> {
        Self::new(
            Backbone::random(backbone, seed)?,
            VisionHead::random(head, seed.wrapping_add(1))?,
            detection,
            interaction,
            protocol,
            seed.wrapping_add(2),
        )
    }

    pub fn backbone(&self) -> &Backbone<T> {
        &self.backbone
    }

    pub fn head(&self) -> &VisionHead<T> {
        &self.head
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn interaction(&self) -> &Interaction {
        &self.interaction
    }

    pub fn protocol(&self) -> ProtocolName {
        self.detector.protocol()
    }

    /// Replaces learnable values from named arrays (extra names are ignored).
    pub fn load_learnable(&mut self, arrays: &std::collections::BTreeMap<String, Mat<T>>) -> Result<()> {
        let names: Vec<String> = self.params.names().cloned().collect();
        for name in names {
            let v = arrays
                .get(&name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            self.params.set(&name, v.clone())?;
        }
        Ok(())
    }

    pub fn features(&self, image: &crate::imaging::Image) -> Result<ImageFeatures<T>> {
        ImageFeatures::compute(&self.backbone, &self.head, image)
    }

    /// Checksums of the frozen backbone and head, in that order.
    pub fn frozen_checksums(&self) -> (String, String) {
        (self.backbone.current_checksum(), self.head.current_checksum())
    }

    /// Whole forward pass for one image on `ctx`, classifying against `text`.
    pub fn forward_graph(
        &self,
        ctx: &mut Ctx<T>,
        features: &ImageFeatures<T>,
        text: &Mat<T>,
        record: bool,
    ) -> Result<ForwardVars> {
        let s = &self.params;
        let semantic = features.semantic_token();
        let memory = self.detector.memory_graph(ctx, s, &features.x_b, Some(&semantic))?;
        let (e_h, e_o) = self.detector.decode_graph(ctx, s, memory)?;
        let boxes_h = self.detector.boxes_graph(ctx, s, e_h, Which::Human)?;
        let boxes_o = self.detector.boxes_graph(ctx, s, e_o, Which::Object)?;
        let (confidence, object_logits) = match self.protocol() {
            ProtocolName::Swig => (Some(self.detector.confidence_graph(ctx, s, e_h, e_o)?), None),
            ProtocolName::Hico => (None, Some(self.detector.object_class_graph(ctx, s, e_o)?)),
        };
        let q_r = self.interaction.form_queries_graph(ctx, s, e_h, e_o)?;
        let projected = self
            .interaction
            .project_graph(ctx, s, &self.head, q_r, features, record)?;
        let interaction_logits = self.interaction.cosine_logits_graph(ctx, s, projected, text)?;
        Ok(ForwardVars {
            boxes_h,
            boxes_o,
            confidence,
            object_logits,
            interaction_logits,
        })
    }

    /// Outputs for one image over `columns` of `bank`.
    pub fn predict(
        &self,
        features: &ImageFeatures<T>,
        bank: &TextEmbeddingBank,
        columns: &[usize],
    ) -> Result<ImageOutputs> {
        let text = bank.subset::<T>(columns)?;
        let mut ctx = Ctx::new();
        let v = self.forward_graph(&mut ctx, features, &text, false)?;
        Ok(ImageOutputs::read(&ctx.g, &v, columns))
    }

    /// As [`Self::predict`], also returning the refinement attention.
    pub fn predict_recording(
        &self,
        features: &ImageFeatures<T>,
        bank: &TextEmbeddingBank,
        columns: &[usize],
    ) -> Result<(ImageOutputs, Vec<AttentionRecord<T>>)> {
        let text = bank.subset::<T>(columns)?;
        let mut ctx = Ctx::recording();
        let v = self.forward_graph(&mut ctx, features, &text, true)?;
        let out = ImageOutputs::read(&ctx.g, &v, columns);
        let records = ctx
            .take_records()
            .into_iter()
            .filter(|r| r.label == "refine_cross")
            .collect();
        Ok((out, records))
    }
}
