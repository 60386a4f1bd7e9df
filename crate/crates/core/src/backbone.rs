//! Frozen ViT encoder producing class, register and patch tokens.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::WeightArchive;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::imaging::{source_coord, Image, IMAGENET_MEAN, IMAGENET_STD};
use crate::nn::{self, Ctx};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::tensor::{Mat, Real};
use crate::tokens::{Layout, SegmentKind, TokenSequence};

pub const PREFIX: &str = "backbone";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub num_heads: usize,
    pub num_registers: usize,
    pub mlp_ratio: usize,
    /// Patch grid of the learned positional table; other grids interpolate.
    pub pos_grid: (usize, usize),
    pub image_mean: [f32; 3],
    pub image_std: [f32; 3],
}

impl Default for BackboneConfig {
    /// ViT-L/16 at 224×224.
    fn default() -> Self {
        Self {
            patch_size: 16,
            depth: 24,
            dim: 1024,
            num_heads: 16,
            num_registers: 4,
            mlp_ratio: 4,
            pos_grid: (14, 14),
            image_mean: IMAGENET_MEAN,
            image_std: IMAGENET_STD,
        }
    }
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self {
            patch_size: 16,
            depth: 2,
            dim: 64,
            num_heads: 4,
            num_registers: 4,
            mlp_ratio: 4,
            pos_grid: (2, 2),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::config("backbone.patch_size", "must be at least 1"));
        }
        if self.dim == 0 || self.num_heads == 0 || !self.dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "backbone.dim",
                format!("{} is not divisible by num_heads {}", self.dim, self.num_heads),
            ));
        }
        if self.pos_grid.0 == 0 || self.pos_grid.1 == 0 {
            return Err(Error::config("backbone.pos_grid", "must be non-empty"));
        }
        if self.image_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("backbone.image_std", "must be positive"));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.dim;
        let mut s = Vec::new();
        nn::linear_spec(&mut s, "backbone.patch_embed", 3 * self.patch_size * self.patch_size, d);
        s.push(ParamSpec::new("backbone.cls_token", (1, d), Init::Normal(0.02)));
        if self.num_registers > 0 {
            s.push(ParamSpec::new(
                "backbone.register_tokens",
                (self.num_registers, d),
                Init::Normal(0.02),
            ));
        }
        s.push(ParamSpec::new(
            "backbone.pos_embed",
            (self.pos_grid.0 * self.pos_grid.1, d),
            Init::Normal(0.02),
        ));
        for i in 0..self.depth {
            nn::block_spec(&mut s, &format!("backbone.blocks.{i}"), d, self.mlp_ratio);
        }
        nn::norm_spec(&mut s, "backbone.norm", d);
        s
    }
}

/// Frozen ViT encoder.
#[derive(Clone, Debug)]
pub struct Backbone<T> {
    config: BackboneConfig,
    params: ParamStore<T>,
    checksum: String,
}

impl<T: Real> Backbone<T> {
    /// Seeded random initialization.
    pub fn random(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamStore::initialize(&config.param_specs(), &mut rng, true);
        Ok(Self::from_store(config, params))
    }

    /// Populates every parameter from an archive; extra arrays are ignored.
    pub fn load_weights(config: BackboneConfig, archive: &WeightArchive<T>) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::from_arrays(&config.param_specs(), &archive.arrays, true)?;
        Ok(Self::from_store(config, params))
    }

    fn from_store(config: BackboneConfig, params: ParamStore<T>) -> Self {
        let checksum = params.checksum();
        Self {
            config,
            params,
            checksum,
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Checksum recorded at load time.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Checksum of the current parameter values.
    pub fn current_checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn grid_for(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.config.patch_size;
        if !height.is_multiple_of(p) {
            return Err(Error::NotDivisible {
                axis: "height",
                size: height,
                patch: p,
            });
        }
        if !width.is_multiple_of(p) {
            return Err(Error::NotDivisible {
                axis: "width",
                size: width,
                patch: p,
            });
        }
        Ok((height / p, width / p))
    }

    /// Positional table resampled to `grid` (bilinear, half-pixel centers).
    pub fn positional_embedding(&self, grid: (usize, usize)) -> Result<Mat<T>> {
        let table = self.params.value("backbone.pos_embed")?;
        Ok(interpolate_grid(table, self.config.pos_grid, grid))
    }

    /// Image (already normalized) → `[CLS, Reg…, P…]` before any attention.
    pub fn patchify(&self, image: &Image) -> Result<TokenSequence<T>> {
        let grid = self.grid_for(image.height(), image.width())?;
        let p = self.config.patch_size;
        let (rows, cols) = grid;
        let patches = Mat::from_fn(rows * cols, 3 * p * p, |n, k| {
            let (gy, gx) = (n / cols, n % cols);
            let (py, rest) = (k / (3 * p), k % (3 * p));
            let (px, c) = (rest / 3, rest % 3);
            T::cst(f64::from(image.pixel(gy * p + py, gx * p + px)[c]))
        });
        let w = self.params.value("backbone.patch_embed.weight")?;
        let b = self.params.value("backbone.patch_embed.bias")?;
        let mut embedded = patches.matmul(w);
        let pos = self.positional_embedding(grid)?;
        for r in 0..embedded.rows() {
            let (er, pr) = (embedded.row_mut(r), pos.row(r));
            for ((e, &bb), &pp) in er.iter_mut().zip(b.row(0)).zip(pr) {
                *e += bb + pp;
            }
        }
        let cls = self.params.value("backbone.cls_token")?;
        let mut parts = vec![cls];
        if self.config.num_registers > 0 {
            parts.push(self.params.value("backbone.register_tokens")?);
        }
        parts.push(&embedded);
        let tokens = Mat::concat_rows(&parts)?;
        TokenSequence::new(tokens, Layout::image(self.config.num_registers, grid)?)
    }

    /// Runs every attention layer plus the final norm on a patchified sequence.
    pub fn transform(&self, seq: &TokenSequence<T>) -> Result<TokenSequence<T>> {
        let mut ctx = Ctx::new();
        let out = self.transform_graph(&mut ctx, seq, false)?;
        TokenSequence::new(ctx.g.value(out).clone(), seq.layout().clone())
    }

    pub(crate) fn transform_graph(
        &self,
        ctx: &mut Ctx<T>,
        seq: &TokenSequence<T>,
        record_last: bool,
    ) -> Result<Var> {
        if seq.dim() != self.config.dim {
            return Err(Error::Shape(format!(
                "backbone expects width {}, got {}",
                self.config.dim,
                seq.dim()
            )));
        }
        let mut x = ctx.g.constant(Arc::new(seq.tokens().clone()));
        for i in 0..self.config.depth {
            let label = (record_last && i + 1 == self.config.depth).then_some("backbone_last");
            x = nn::block(
                ctx,
                &self.params,
                &format!("backbone.blocks.{i}"),
                x,
                self.config.num_heads,
                None,
                label,
            )?;
        }
        nn::layer_norm(ctx, &self.params, "backbone.norm", x)
    }

    /// Full frozen forward pass: `X_b`.
    pub fn encode(&self, image: &Image) -> Result<TokenSequence<T>> {
        self.transform(&self.patchify(image)?)
    }

    /// Forward pass that also captures the last block's attention.
    pub fn encode_recording(
        &self,
        image: &Image,
    ) -> Result<(TokenSequence<T>, Vec<nn::AttentionRecord<T>>)> {
        let seq = self.patchify(image)?;
        let mut ctx = Ctx::recording();
        let out = self.transform_graph(&mut ctx, &seq, true)?;
        let tokens = TokenSequence::new(ctx.g.value(out).clone(), seq.layout().clone())?;
        Ok((tokens, ctx.take_records()))
    }

    pub fn patch_tokens(seq: &TokenSequence<T>) -> Mat<T> {
        seq.segment(SegmentKind::Patch)
    }
}

/// Bilinear resampling of a `(rows·cols) × D` grid table.
pub fn interpolate_grid<T: Real>(table: &Mat<T>, from: (usize, usize), to: (usize, usize)) -> Mat<T> {
    if from == to {
        return table.clone();
    }
    let d = table.cols();
    let mut out = Mat::zeros(to.0 * to.1, d);
    for y in 0..to.0 {
        let (y0, y1, wy) = source_coord(y, to.0, from.0);
        let wy = T::cst(f64::from(wy));
        for x in 0..to.1 {
            let (x0, x1, wx) = source_coord(x, to.1, from.1);
            let wx = T::cst(f64::from(wx));
            let one = T::one();
            let corners = [
                (y0 * from.1 + x0, (one - wy) * (one - wx)),
                (y0 * from.1 + x1, (one - wy) * wx),
                (y1 * from.1 + x0, wy * (one - wx)),
                (y1 * from.1 + x1, wy * wx),
            ];
            let row = out.row_mut(y * to.1 + x);
            for (src, w) in corners {
                for (o, &v) in row.iter_mut().zip(table.row(src)) {
                    *o += w * v;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn toy() -> Backbone<f32> {
        Backbone::random(BackboneConfig::toy(), 11).unwrap()
    }

    #[test]
    fn patch_counts_follow_grid() {
        let mut cfg = BackboneConfig::toy();
        cfg.dim = 8;
        cfg.num_heads = 2;
        cfg.depth = 0;
        let b = Backbone::<f32>::random(cfg, 0).unwrap();
        let s = b.patchify(&Image::zeros(224, 224)).unwrap();
        assert_eq!(s.layout().count(SegmentKind::Patch), 196);
        assert_eq!(s.grid(), (14, 14));
        let s = b.patchify(&Image::zeros(256, 320)).unwrap();
        assert_eq!(s.layout().count(SegmentKind::Patch), 320);
        assert_eq!(s.grid(), (16, 20));
        match b.patchify(&Image::zeros(230, 224)) {
            Err(Error::NotDivisible { axis, size, .. }) => {
                assert_eq!((axis, size), ("height", 230));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn toy_encode_shape_and_determinism() {
        let b = toy();
        let img = Image::new(32, 32, (0..32 * 32 * 3).map(|v| (v % 7) as f32 * 0.1).collect()).unwrap();
        let a = b.encode(&img).unwrap();
        assert_eq!(a.len(), 1 + 4 + 4);
        assert_eq!(a.dim(), 64);
        let again = b.encode(&img).unwrap();
        assert_eq!(a.tokens().data(), again.tokens().data());
    }

    #[test]
    fn zero_weights_give_zero_patch_inputs() {
        let cfg = BackboneConfig::toy();
        let arrays: BTreeMap<String, Mat<f32>> = cfg
            .param_specs()
            .iter()
            .map(|s| (s.name.clone(), Mat::zeros(s.shape.0, s.shape.1)))
            .collect();
        let b = Backbone::load_weights(cfg, &WeightArchive::new(arrays)).unwrap();
        let s = b.patchify(&Image::zeros(32, 32)).unwrap();
        assert!(s.segment(SegmentKind::Patch).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn load_rejects_wrong_shape_by_name() {
        let cfg = BackboneConfig::toy();
        let src = toy();
        let mut arrays = src.params().to_arrays();
        arrays.insert("backbone.cls_token".into(), Mat::zeros(1, 3));
        match Backbone::load_weights(cfg.clone(), &WeightArchive::new(arrays)) {
            Err(Error::ParameterShape { name, .. }) => assert_eq!(name, "backbone.cls_token"),
            other => panic!("unexpected {other:?}"),
        }
        let mut arrays = src.params().to_arrays();
        arrays.remove("backbone.norm.bias");
        assert!(matches!(
            Backbone::load_weights(cfg, &WeightArchive::new(arrays)),
            Err(Error::MissingParameter(_))
        ));
    }

    #[test]
    fn checksum_stable_across_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let b = toy();
        WeightArchive::new(b.params().to_arrays()).save(dir.path()).unwrap();
        let reloaded =
            Backbone::<f32>::load_weights(BackboneConfig::toy(), &WeightArchive::load(dir.path()).unwrap())
                .unwrap();
        assert_eq!(b.checksum(), reloaded.checksum());
        assert_eq!(toy().checksum(), b.checksum());
    }

    #[test]
    fn permuting_patches_permutes_outputs_without_positions() {
        let b = toy();
        let img = Image::new(32, 32, (0..32 * 32 * 3).map(|v| ((v * 31) % 17) as f32 / 17.0).collect())
            .unwrap();
        let seq = b.patchify(&img).unwrap();
        let pos = b.positional_embedding(seq.grid()).unwrap();
        // strip positions from patch rows
        let mut tokens = seq.tokens().clone();
        let start = seq.layout().range(SegmentKind::Patch).start;
        for r in 0..pos.rows() {
            for c in 0..pos.cols() {
                let v = tokens.get(start + r, c) - pos.get(r, c);
                tokens.set(start + r, c, v);
            }
        }
        let perm = [2usize, 0, 3, 1];
        let mut permuted = tokens.clone();
        for (dst, &src) in perm.iter().enumerate() {
            permuted.row_mut(start + dst).copy_from_slice(tokens.row(start + src));
        }
        let layout = seq.layout().clone();
        let out = b.transform(&TokenSequence::new(tokens, layout.clone()).unwrap()).unwrap();
        let out_p = b.transform(&TokenSequence::new(permuted, layout).unwrap()).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..64 {
                let diff = (out_p.tokens().get(start + dst, c) - out.tokens().get(start + src, c)).abs();
                assert!(diff < 1e-5, "patch {dst} col {c}: {diff}");
            }
        }
    }

    #[test]
    fn interpolation_is_identity_on_reference_grid_and_preserves_constants() {
        let t = Mat::<f64>::from_fn(4, 3, |r, c| (r * 3 + c) as f64);
        assert_eq!(interpolate_grid(&t, (2, 2), (2, 2)), t);
        let c = Mat::<f64>::filled(4, 3, 2.5);
        let up = interpolate_grid(&c, (2, 2), (5, 3));
        assert!(up.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }
}
