//! Run configuration read from TOML and validated before any compute.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::WeightArchive;
use crate::backbone::{Backbone, BackboneConfig};
use crate::detector::DetectionConfig;
use crate::error::{Error, Result};
use crate::head::{HeadConfig, VisionHead};
use crate::interaction::{InteractionConfig, Variant};
use crate::model::SlHoi;
use crate::optim::AdamWConfig;
use crate::protocol::{LossWeights, Protocol, ProtocolName};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Protocol name plus optional overrides of its recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    pub name: ProtocolName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_epochs: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<LossWeights>,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            name: ProtocolName::Swig,
            epochs: None,
            lr: None,
            decay_epochs: None,
            decay_factor: None,
            weights: None,
        }
    }
}

impl ProtocolSection {
    pub fn resolve(&self) -> Protocol {
        let base = Protocol::named(self.name);
        Protocol {
            name: self.name,
            weights: self.weights.unwrap_or(base.weights),
            epochs: self.epochs.unwrap_or(base.epochs),
            lr: self.lr.unwrap_or(base.lr),
            decay_epochs: self.decay_epochs.clone().unwrap_or(base.decay_epochs),
            decay_factor: self.decay_factor.unwrap_or(base.decay_factor),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_annotations: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_annotations: Option<PathBuf>,
    /// Defaults to the directory holding the annotation file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_bank: Option<PathBuf>,
    /// `(height, width)` every image is resized to; native size when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_size: Option<(usize, usize)>,
    pub flip: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 8,
            max_iterations: None,
            checkpoint_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub max_detections: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { max_detections: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub precision: Precision,
    /// Weight archive with every `backbone.*` and `head.*` array; frozen
    /// modules are seeded randomly from `seed` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frozen_weights: Option<PathBuf>,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub detector: DetectionConfig,
    pub interaction: InteractionConfig,
    pub protocol: ProtocolSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub optimizer: AdamWConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            precision: Precision::F32,
            frozen_weights: None,
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            detector: DetectionConfig::default(),
            interaction: InteractionConfig::default(),
            protocol: ProtocolSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            optimizer: AdamWConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

fn parse_toml(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<syntax>", e.message()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::Config {
            field: if field == "." { "<root>".into() } else { field },
            message: e.into_inner().message().to_string(),
        }
    })
}

impl RunConfig {
    /// Toy-scale config used by tests and the synthetic harness.
    pub fn toy() -> Self {
        Self {
            backbone: BackboneConfig {
                patch_size: 8,
                ..BackboneConfig::toy()
            },
            head: HeadConfig::toy(),
            detector: DetectionConfig::toy(),
            interaction: InteractionConfig::toy(),
            ..Self::default()
        }
    }

    /// Recipe for the synthetic scenes: toy widths with a two-layer decoder,
    /// swig weights, constant lr 2e-3 for 200 full-batch iterations.
    pub fn synthetic() -> Self {
        let mut cfg = Self::toy();
        cfg.detector.decoder_layers = 2;
        cfg.protocol.lr = Some(2e-3);
        cfg.protocol.epochs = Some(200);
        cfg.protocol.decay_epochs = Some(vec![]);
        cfg.train.max_iterations = Some(200);
        cfg.train.checkpoint_every = 50;
        cfg
    }

    /// Width of the text embeddings the interaction module classifies against.
    pub fn text_dim(&self) -> usize {
        2 * self.head.dim
    }

    /// Parses and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg = parse_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<config>", e.to_string()))
    }

    /// Reads a config file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(base).map_err(|e| Error::io(base, e))?;
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [
            &mut self.frozen_weights,
            &mut self.data.train_annotations,
            &mut self.data.eval_annotations,
            &mut self.data.images_dir,
            &mut self.data.text_bank,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn protocol(&self) -> Protocol {
        self.protocol.resolve()
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.interaction.variant = variant;
        self
    }

    /// Field-level checks of every section and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()?;
        self.detector.validate()?;
        if self.head.dim != self.backbone.dim {
            return Err(Error::config(
                "head.dim",
                format!("{} does not match backbone.dim {}", self.head.dim, self.backbone.dim),
            ));
        }
        self.interaction.validate(self.head.dim, self.detector.d)?;
        self.protocol().validate()?;
        if self.protocol.name == ProtocolName::Hico && self.detector.num_object_classes == 0 {
            return Err(Error::config(
                "detector.num_object_classes",
                "must be positive under the hico protocol",
            ));
        }
        self.optimizer.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.eval.max_detections == 0 {
            return Err(Error::config("eval.max_detections", "must be positive"));
        }
        if let Some((h, w)) = self.data.image_size {
            let p = self.backbone.patch_size;
            if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
                return Err(Error::config(
                    "data.image_size",
                    format!("{h}x{w} must be a positive multiple of patch size {p}"),
                ));
            }
        }
        Ok(())
    }

    /// Builds the model: frozen modules from `frozen_weights` or the seed,
    /// learnable modules from the seed.
    pub fn build_model<T: Real>(&self) -> Result<SlHoi<T>> {
        self.validate()?;
        let (backbone, head) = match &self.frozen_weights {
            Some(dir) => {
                let archive = WeightArchive::<T>::load(dir)?;
                (
                    Backbone::load_weights(self.backbone.clone(), &archive)?,
                    VisionHead::load_weights(self.head.clone(), &archive)?,
                )
            }
            None => (
                Backbone::random(self.backbone.clone(), self.seed)?,
                VisionHead::random(self.head.clone(), self.seed.wrapping_add(1))?,
            ),
        };
        SlHoi::new(
            backbone,
            head,
            self.detector.clone(),
            self.interaction.clone(),
            self.protocol.name,
            self.seed.wrapping_add(2),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::toy();
        cfg.protocol.lr = Some(1e-3);
        cfg.protocol.decay_epochs = Some(vec![]);
        cfg.data.image_size = Some((64, 64));
        cfg.train.max_iterations = Some(200);
        cfg.interaction.variant = Variant::LateFusionMultiscale;
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = RunConfig::from_toml("seed = 5\n[protocol]\nname = \"hico\"\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.protocol().decay_epochs, vec![40]);
        assert_eq!(cfg.detector, DetectionConfig::default());
    }

    #[test]
    fn field_errors_name_the_field() {
        let mut cfg = RunConfig::toy();
        cfg.head.dim = 32;
        cfg.head.num_heads = 4;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "head.dim"),
            other => panic!("{other:?}"),
        }
        let mut cfg = RunConfig::toy();
        cfg.data.image_size = Some((60, 64));
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "data.image_size"));
        assert!(matches!(
            RunConfig::from_toml("[detector]\nwidth = 3\n"),
            Err(Error::Config { field, .. }) if field.starts_with("detector")
        ));
        assert!(matches!(
            RunConfig::from_toml("[interaction]\nvariant = \"sideways\"\n"),
            Err(Error::Config { field, .. }) if field == "interaction.variant"
        ));
        assert!(matches!(RunConfig::from_toml("seed = [\n"), Err(Error::Config { .. })));
    }
}
