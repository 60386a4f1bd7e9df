//! Interaction queries, semantic bootstrapping, refinement and
//! open-vocabulary classification, plus the ablation variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::features::ImageFeatures;
use crate::head::{AttentionMask, VisionHead};
use crate::nn::{self, AttnInputs, Ctx};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::tensor::{Mat, Real};
use crate::text_bank::TextEmbeddingBank;
use crate::tokens::{SegmentKind, TokenSequence};

pub const COSINE_EPS: f64 = 1e-8;
pub const LOGIT_SCALE_INIT: f64 = 2.6592;
pub const LOGIT_SCALE_MAX: f64 = 100.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Bootstrapping through the head, then refinement over its outputs.
    #[default]
    Full,
    /// As `Full`, but image tokens cannot attend to the queries inside the head.
    MaskedFull,
    /// Classify the bootstrapped queries directly.
    BootstrapOnly,
    /// Standalone decoder over the plain head outputs.
    LateFusionHeadOnly,
    /// Standalone decoder over backbone patches plus plain head outputs.
    LateFusionMultiscale,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::MaskedFull,
        Variant::BootstrapOnly,
        Variant::LateFusionHeadOnly,
        Variant::LateFusionMultiscale,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::MaskedFull => "masked_full",
            Variant::BootstrapOnly => "bootstrap_only",
            Variant::LateFusionHeadOnly => "late_fusion_head_only",
            Variant::LateFusionMultiscale => "late_fusion_multiscale",
        }
    }

    pub fn is_late_fusion(self) -> bool {
        matches!(self, Variant::LateFusionHeadOnly | Variant::LateFusionMultiscale)
    }

    pub fn refines(self) -> bool {
        matches!(self, Variant::Full | Variant::MaskedFull)
    }

    pub fn mask(self) -> AttentionMask {
        match self {
            Variant::MaskedFull => AttentionMask::BlockQueryToImage,
            _ => AttentionMask::None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config("interaction.variant", format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InteractionConfig {
    pub variant: Variant,
    pub refine_layers: usize,
    pub late_fusion_layers: usize,
    /// Heads of the refinement cross-attention (width `D`).
    pub num_heads: usize,
    /// Heads of the late-fusion decoder (width `d`).
    pub late_fusion_heads: usize,
    pub mlp_ratio: usize,
    pub logit_scale_init: f64,
    pub logit_scale_max: f64,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            refine_layers: 1,
            late_fusion_layers: 3,
            num_heads: 16,
            late_fusion_heads: 8,
            mlp_ratio: 4,
            logit_scale_init: LOGIT_SCALE_INIT,
            logit_scale_max: LOGIT_SCALE_MAX,
        }
    }
}

impl InteractionConfig {
    pub fn toy() -> Self {
        Self {
            num_heads: 4,
            late_fusion_heads: 4,
            mlp_ratio: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self, head_dim: usize, d: usize) -> Result<()> {
        if self.variant.refines() && self.refine_layers == 0 {
            return Err(Error::config("interaction.refine_layers", "must be at least 1"));
        }
        if self.variant.is_late_fusion() && self.late_fusion_layers == 0 {
            return Err(Error::config("interaction.late_fusion_layers", "must be at least 1"));
        }
        if self.num_heads == 0 || !head_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "interaction.num_heads",
                format!("head dim {head_dim} is not divisible by {}", self.num_heads),
            ));
        }
        if self.late_fusion_heads == 0 || !d.is_multiple_of(self.late_fusion_heads) {
            return Err(Error::config(
                "interaction.late_fusion_heads",
                format!("detection width {d} is not divisible by {}", self.late_fusion_heads),
            ));
        }
        if !(self.logit_scale_max.is_finite() && self.logit_scale_max > 0.0) {
            return Err(Error::config("interaction.logit_scale_max", "must be positive"));
        }
        if !self.logit_scale_init.is_finite() {
            return Err(Error::config("interaction.logit_scale_init", "must be finite"));
        }
        Ok(())
    }
}

/// Learnable log-scale temperature: logits are `min(exp(log_scale), max) · cos`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature {
    pub log_scale: f64,
    pub max: f64,
}

impl Default for Temperature {
    fn default() -> Self {
        Self {
            log_scale: LOGIT_SCALE_INIT,
            max: LOGIT_SCALE_MAX,
        }
    }
}

impl Temperature {
    pub fn scale(self) -> f64 {
        self.log_scale.exp().min(self.max)
    }
}

/// Intermediate embeddings of the interaction branch.
#[derive(Clone, Debug)]
pub struct InteractionEmbeddings<T> {
    pub raw_queries: Mat<T>,
    pub bootstrapped: Option<Mat<T>>,
    pub refined: Option<Mat<T>>,
    pub projected: Mat<T>,
}

#[derive(Clone, Debug)]
pub struct Interaction {
    config: InteractionConfig,
    d: usize,
    head_dim: usize,
}

impl Interaction {
    pub fn new(config: InteractionConfig, d: usize, head_dim: usize) -> Result<Self> {
        config.validate(head_dim, d)?;
        Ok(Self {
            config,
            d,
            head_dim,
        })
    }

    pub fn config(&self) -> &InteractionConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn text_dim(&self) -> usize {
        2 * self.head_dim
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (c, big, d) = (&self.config, self.head_dim, self.d);
        let mut s = Vec::new();
        nn::linear_spec(&mut s, "inter.query_proj", d, big);
        s.push(ParamSpec::new("inter.logit_scale", (1, 1), Init::Const(c.logit_scale_init)));
        if c.variant.refines() {
            for i in 0..c.refine_layers {
                let p = format!("inter.refine.{i}");
                nn::norm_spec(&mut s, &format!("{p}.norm1"), big);
                nn::attention_spec(&mut s, &format!("{p}.cross_attn"), big, big);
                nn::norm_spec(&mut s, &format!("{p}.norm2"), big);
                nn::mlp_spec(&mut s, &format!("{p}.mlp"), big, big * c.mlp_ratio);
            }
        }
        if c.variant.is_late_fusion() {
            nn::linear_spec(&mut s, "inter.late.query_in", big, d);
            nn::linear_spec(&mut s, "inter.late.kv_proj", big, d);
            for i in 0..c.late_fusion_layers {
                nn::decoder_layer_spec(&mut s, &format!("inter.late.layers.{i}"), d, c.mlp_ratio);
            }
            nn::norm_spec(&mut s, "inter.late.norm", d);
            nn::linear_spec(&mut s, "inter.late.text_proj", d, 2 * big);
        } else {
            nn::linear_spec(&mut s, "inter.text_proj", big, 2 * big);
        }
        s
    }

    fn require_refine(&self) -> Result<()> {
        if self.config.variant.refines() {
            Ok(())
        } else {
            Err(Error::VariantMismatch(self.config.variant.to_string()))
        }
    }

    // ---- graph ----

    pub(crate) fn form_queries_graph<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        s: &ParamStore<T>,
        e_h: Var,
        e_o: Var,
    ) -> Result<Var> {
        let sum = ctx.g.add(e_h, e_o);
        let mean = ctx.g.scale(sum, T::cst(0.5));
        nn::linear(ctx, s, "inter.query_proj", mean)
    }

    pub(crate) fn refine_graph<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        s: &ParamStore<T>,
        q: Var,
        kv: Var,
        record: bool,
    ) -> Result<Var> {
        self.require_refine()?;
        let mut x = q;
        for i in 0..self.config.refine_layers {
            let p = format!("inter.refine.{i}");
            let h = nn::layer_norm(ctx, s, &format!("{p}.norm1"), x)?;
            let label = (record && i + 1 == self.config.refine_layers).then_some("refine_cross");
            let a = nn::attention(
                ctx,
                s,
                &format!("{p}.cross_attn"),
                h,
                kv,
                self.config.num_heads,
                AttnInputs {
                    label,
                    ..Default::default()
                },
            )?;
            x = ctx.g.add(x, a);
            let h = nn::layer_norm(ctx, s, &format!("{p}.norm2"), x)?;
            let m = nn::mlp(ctx, s, &format!("{p}.mlp"), h)?;
            x = ctx.g.add(x, m);
        }
        Ok(x)
    }

    /// Scaled cosine logits of `emb` (already in text space) against `text`.
    pub(crate) fn cosine_logits_graph<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        s: &ParamStore<T>,
        emb: Var,
        text: &Mat<T>,
    ) -> Result<Var> {
        if text.cols() != ctx.g.shape(emb).1 {
            return Err(Error::Bank(format!(
                "text embeddings are {}-dim, projected queries are {}-dim",
                text.cols(),
                ctx.g.shape(emb).1
            )));
        }
        let e = ctx.g.l2_normalize_rows(emb, T::cst(COSINE_EPS));
        let t = ctx.g.constant_mat(normalize_rows(text));
        let cos = ctx.g.matmul_nt(e, t);
        let log_scale = ctx.p(s, "inter.logit_scale")?;
        let scale = ctx.g.exp(log_scale);
        let scale = ctx.g.clamp_max(scale, T::cst(self.config.logit_scale_max));
        Ok(ctx.g.scale_by(cos, scale))
    }

    /// Text-space embedding `N_q × 2D` for every variant.
    pub(crate) fn project_graph<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        s: &ParamStore<T>,
        head: &VisionHead<T>,
        q_r: Var,
        features: &ImageFeatures<T>,
        record: bool,
    ) -> Result<Var> {
        let variant = self.config.variant;
        match variant {
            Variant::Full | Variant::MaskedFull | Variant::BootstrapOnly => {
                let b = head.bootstrap_graph(ctx, Some(q_r), &features.x_b, variant.mask())?;
                let q_prime = b
                    .queries
                    .ok_or_else(|| Error::InvalidInput("no interaction queries".into()))?;
                let e = if variant.refines() {
                    let kv = VisionHead::kv_graph(ctx, &b);
                    self.refine_graph(ctx, s, q_prime, kv, record)?
                } else {
                    q_prime
                };
                nn::linear(ctx, s, "inter.text_proj", e)
            }
            Variant::LateFusionHeadOnly | Variant::LateFusionMultiscale => {
                let mut memory = features.plain_kv.tokens().clone();
                if variant == Variant::LateFusionMultiscale {
                    let patches = features.x_b.segment(SegmentKind::Patch);
                    memory = Mat::concat_rows(&[&patches, &memory])?;
                }
                let m = ctx.g.constant_mat(memory);
                let m = nn::linear(ctx, s, "inter.late.kv_proj", m)?;
                let mut x = nn::linear(ctx, s, "inter.late.query_in", q_r)?;
                for i in 0..self.config.late_fusion_layers {
                    let label = (record && i + 1 == self.config.late_fusion_layers)
                        .then_some("refine_cross");
                    x = nn::decoder_layer(
                        ctx,
                        s,
                        &format!("inter.late.layers.{i}"),
                        x,
                        None,
                        m,
                        self.config.late_fusion_heads,
                        label,
                    )?;
                }
                let x = nn::layer_norm(ctx, s, "inter.late.norm", x)?;
                nn::linear(ctx, s, "inter.late.text_proj", x)
            }
        }
    }

    // ---- direct evaluation ----

    pub fn temperature<T: Real>(&self, s: &ParamStore<T>) -> Result<Temperature> {
        Ok(Temperature {
            log_scale: s.value("inter.logit_scale")?.get(0, 0).as_f64(),
            max: self.config.logit_scale_max,
        })
    }

    /// `Q_r = Proj((E_h + E_o) / 2)`.
    pub fn form_queries<T: Real>(&self, s: &ParamStore<T>, e_h: &Mat<T>, e_o: &Mat<T>) -> Result<Mat<T>> {
        if e_h.shape() != e_o.shape() {
            return Err(Error::Shape(format!(
                "human embeddings {:?} and object embeddings {:?} differ",
                e_h.shape(),
                e_o.shape()
            )));
        }
        let mut ctx = Ctx::new();
        let h = ctx.g.constant_mat(e_h.clone());
        let o = ctx.g.constant_mat(e_o.clone());
        let q = self.form_queries_graph(&mut ctx, s, h, o)?;
        Ok(ctx.g.value(q).clone())
    }

    /// Bootstrapped queries `Q_r′` and the key/value sequence for refinement.
    pub fn bootstrap<T: Real>(
        &self,
        head: &VisionHead<T>,
        q_r: &Mat<T>,
        x_b: &TokenSequence<T>,
    ) -> Result<(Mat<T>, TokenSequence<T>)> {
        let out = head.forward_bootstrapped(q_r, x_b, self.config.variant.mask())?;
        let kv = VisionHead::build_kv(&out)?;
        Ok((out.queries_out, kv))
    }

    /// `E_r`: cross-attention over `kv` then MLP, both residual.
    pub fn refine<T: Real>(&self, s: &ParamStore<T>, q: &Mat<T>, kv: &TokenSequence<T>) -> Result<Mat<T>> {
        self.require_refine()?;
        let mut ctx = Ctx::new();
        let q = ctx.g.constant_mat(q.clone());
        let kv = ctx.g.constant_mat(kv.tokens().clone());
        let e = self.refine_graph(&mut ctx, s, q, kv, false)?;
        Ok(ctx.g.value(e).clone())
    }

    /// Softmax over `category_ids` of scaled cosine similarity between
    /// `LinearProj(e)` and the bank embeddings.
    pub fn classify<T: Real>(
        &self,
        s: &ParamStore<T>,
        e: &Mat<T>,
        bank: &TextEmbeddingBank,
        category_ids: &[usize],
    ) -> Result<Mat<T>> {
        if self.config.variant.is_late_fusion() {
            return Err(Error::VariantMismatch(self.config.variant.to_string()));
        }
        let text = bank.subset::<T>(category_ids)?;
        let mut ctx = Ctx::new();
        let x = ctx.g.constant_mat(e.clone());
        let p = nn::linear(&mut ctx, s, "inter.text_proj", x)?;
        let logits = self.cosine_logits_graph(&mut ctx, s, p, &text)?;
        Ok(ctx.g.value(logits).softmax_rows())
    }

    /// End-to-end probabilities from decoder embeddings for the configured variant.
    #[allow(clippy::too_many_arguments)]
    pub fn classify_variant<T: Real>(
        &self,
        s: &ParamStore<T>,
        head: &VisionHead<T>,
        e_h: &Mat<T>,
        e_o: &Mat<T>,
        features: &ImageFeatures<T>,
        bank: &TextEmbeddingBank,
        category_ids: &[usize],
    ) -> Result<Mat<T>> {
        let text = bank.subset::<T>(category_ids)?;
        let mut ctx = Ctx::new();
        let h = ctx.g.constant_mat(e_h.clone());
        let o = ctx.g.constant_mat(e_o.clone());
        let q = self.form_queries_graph(&mut ctx, s, h, o)?;
        let p = self.project_graph(&mut ctx, s, head, q, features, false)?;
        let logits = self.cosine_logits_graph(&mut ctx, s, p, &text)?;
        Ok(ctx.g.value(logits).softmax_rows())
    }
}

/// Rows scaled to unit length, guarded by [`COSINE_EPS`].
pub fn normalize_rows<T: Real>(m: &Mat<T>) -> Mat<T> {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let n = m.row(r).iter().map(|&v| v * v).sum::<T>().sqrt().max(T::cst(COSINE_EPS));
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::HeadConfig;
    use crate::text_bank::{CategoryEntry, Rarity};
    use crate::tokens::Layout;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: usize = 8;
    const SMALL: usize = 4;

    fn setup(variant: Variant) -> (Interaction, ParamStore<f64>, VisionHead<f64>) {
        let cfg = InteractionConfig {
            variant,
            num_heads: 2,
            late_fusion_heads: 2,
            ..InteractionConfig::toy()
        };
        let inter = Interaction::new(cfg, SMALL, D).unwrap();
        let store = ParamStore::initialize(&inter.param_specs(), &mut ChaCha8Rng::seed_from_u64(2), false);
        let head = VisionHead::random(
            HeadConfig {
                dim: D,
                num_heads: 2,
                ..HeadConfig::default()
            },
            3,
        )
        .unwrap();
        (inter, store, head)
    }

    fn features(head: &VisionHead<f64>) -> ImageFeatures<f64> {
        let layout = Layout::image(4, (2, 2)).unwrap();
        let tokens = Mat::from_fn(layout.len(), D, |r, c| ((r * 7 + c * 3) % 13) as f64 / 6.0 - 1.0);
        ImageFeatures::from_tokens(head, TokenSequence::new(tokens, layout).unwrap()).unwrap()
    }

    fn bank(n: usize) -> TextEmbeddingBank {
        let entries = (0..n)
            .map(|i| CategoryEntry {
                id: i,
                action: format!("act{i}"),
                object: "thing".into(),
                seen: true,
                rarity: Rarity::NotApplicable,
            })
            .collect();
        TextEmbeddingBank::from_stub(entries, 0, 2 * D).unwrap()
    }

    #[test]
    fn query_formation_mean_and_cancellation() {
        let (inter, store, _) = setup(Variant::Full);
        let v = Mat::from_fn(3, SMALL, |r, c| (r + c) as f64);
        let both = inter.form_queries(&store, &v, &v).unwrap();
        let mut ctx = Ctx::new();
        let x = ctx.g.constant_mat(v.clone());
        let direct = nn::linear(&mut ctx, &store, "inter.query_proj", x).unwrap();
        assert!(both.max_abs_diff(ctx.g.value(direct)) < 1e-12);

        let neg = v.scale(-1.0);
        let zero = inter.form_queries(&store, &v, &neg).unwrap();
        let bias = store.value("inter.query_proj.bias").unwrap();
        for r in 0..3 {
            assert_eq!(zero.row(r), bias.row(0));
        }
    }

    #[test]
    fn shapes_through_bootstrap_and_refine() {
        let (inter, store, head) = setup(Variant::Full);
        let f = features(&head);
        let q = Mat::from_fn(3, D, |r, c| (r as f64 - c as f64) * 0.2);
        let (qp, kv) = inter.bootstrap(&head, &q, &f.x_b).unwrap();
        assert_eq!(qp.shape(), (3, D));
        assert_eq!(kv.len(), 4 + 2);
        let e = inter.refine(&store, &qp, &kv).unwrap();
        assert_eq!(e.shape(), (3, D));
    }

    #[test]
    fn masked_kv_matches_plain_and_ignores_queries() {
        let (inter, _, head) = setup(Variant::MaskedFull);
        let f = features(&head);
        let q1 = Mat::from_fn(2, D, |r, c| (r * c) as f64 * 0.1);
        let q2 = q1.map(|v| v * -3.0 + 1.0);
        let (qp1, kv1) = inter.bootstrap(&head, &q1, &f.x_b).unwrap();
        let (qp2, kv2) = inter.bootstrap(&head, &q2, &f.x_b).unwrap();
        assert!(kv1.tokens().max_abs_diff(f.plain_kv.tokens()) < 1e-10);
        assert!(kv1.tokens().max_abs_diff(kv2.tokens()) < 1e-10);
        assert!(qp1.max_abs_diff(&qp2) > 1e-6);
    }

    #[test]
    fn refine_rejected_outside_full_variants() {
        for v in [Variant::BootstrapOnly, Variant::LateFusionHeadOnly] {
            let (inter, store, head) = setup(v);
            let f = features(&head);
            assert!(matches!(
                inter.refine(&store, &Mat::zeros(1, D), &f.plain_kv),
                Err(Error::VariantMismatch(_))
            ));
        }
    }

    #[test]
    fn single_category_and_identical_text() {
        let (inter, store, _) = setup(Variant::BootstrapOnly);
        let e = Mat::from_fn(3, D, |r, c| (r + 2 * c) as f64 - 4.0);
        let p = inter.classify(&store, &e, &bank(1), &[0]).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let b = bank(2);
        let twin = TextEmbeddingBank::new(
            b.entries().to_vec(),
            Mat::from_fn(2, 2 * D, |_, c| b.embeddings().get(0, c)),
            "twin",
        )
        .unwrap();
        let p = inter.classify(&store, &e, &twin, &[0, 1]).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        assert!(inter.classify(&store, &e, &b, &[]).is_err());
        assert!(inter.classify(&store, &e, &b, &[5]).is_err());
    }

    #[test]
    fn vanishing_temperature_gives_uniform() {
        let (inter, mut store, _) = setup(Variant::Full);
        store.set("inter.logit_scale", Mat::filled(1, 1, -60.0)).unwrap();
        let e = Mat::from_fn(2, D, |r, c| (r * 3 + c) as f64);
        let p = inter.classify(&store, &e, &bank(4), &[0, 1, 2, 3]).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-9));
    }

    #[test]
    fn temperature_clamps() {
        assert!((Temperature::default().scale() - LOGIT_SCALE_INIT.exp()).abs() < 1e-12);
        let t = Temperature {
            log_scale: 10.0,
            max: 100.0,
        };
        assert_eq!(t.scale(), 100.0);
    }

    #[test]
    fn every_variant_emits_stochastic_rows() {
        for v in Variant::ALL {
            let (inter, store, head) = setup(v);
            let f = features(&head);
            let eh = Mat::from_fn(3, SMALL, |r, c| (r as f64 + 1.0) * (c as f64 - 1.5));
            let eo = eh.map(|x| x * 0.5 + 0.1);
            let p = inter
                .classify_variant(&store, &head, &eh, &eo, &f, &bank(3), &[0, 1, 2])
                .unwrap();
            assert_eq!(p.shape(), (3, 3), "{v}");
            for r in 0..3 {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9, "{v}");
            }
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }
}
