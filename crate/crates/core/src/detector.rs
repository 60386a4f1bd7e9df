//! Adapter, dual-query instance decoder, and box / score heads.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{self, Ctx};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::protocol::ProtocolName;
use crate::tensor::{Mat, Real};
use crate::tokens::{SegmentKind, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    /// Detection width `d`.
    pub d: usize,
    pub adapter_layers: usize,
    pub decoder_layers: usize,
    /// Queries per set `N_q`.
    pub num_queries: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Object classes excluding background (hico only).
    pub num_object_classes: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            d: 256,
            adapter_layers: 2,
            decoder_layers: 3,
            num_queries: 64,
            num_heads: 8,
            mlp_ratio: 4,
            num_object_classes: 80,
        }
    }
}

impl DetectionConfig {
    pub fn toy() -> Self {
        Self {
            d: 32,
            adapter_layers: 1,
            decoder_layers: 1,
            num_queries: 4,
            num_heads: 4,
            mlp_ratio: 2,
            num_object_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("detector.d", self.d),
            ("detector.num_queries", self.num_queries),
            ("detector.num_heads", self.num_heads),
            ("detector.mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.d.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "detector.d",
                format!("{} is not divisible by num_heads {}", self.d, self.num_heads),
            ));
        }
        if !self.d.is_multiple_of(2) {
            return Err(Error::config("detector.d", "must be even for 2-D positional encoding"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Human,
    Object,
}

impl Which {
    fn prefix(self) -> &'static str {
        match self {
            Which::Human => "det.box_h",
            Which::Object => "det.box_o",
        }
    }
}

/// Decoder outputs; row `i` of both halves is candidate pair `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderEmbeddings<T> {
    pub human: Mat<T>,
    pub object: Mat<T>,
}

/// Box with optional pair confidence and object-class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxPrediction {
    pub bbox: BBox,
    pub confidence: Option<f64>,
    pub object_logits: Option<Vec<f64>>,
}

/// Fixed 2-D sine/cosine encoding: `d/2` channels for rows then `d/2` for columns.
pub fn sine_position_encoding<T: Real>(grid: (usize, usize), d: usize) -> Mat<T> {
    let half = d / 2;
    let two_pi = 2.0 * std::f64::consts::PI;
    let freq = |k: usize| 10000f64.powf(2.0 * (k / 2) as f64 / half as f64);
    let (rows, cols) = grid;
    Mat::from_fn(rows * cols, d, |n, c| {
        let (axis_pos, len, k) = if c < half {
            (n / cols, rows, c)
        } else {
            (n % cols, cols, c - half)
        };
        let x = (axis_pos as f64 + 1.0) / len as f64 * two_pi / freq(k);
        T::cst(if k % 2 == 0 { x.sin() } else { x.cos() })
    })
}

#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectionConfig,
    head_dim: usize,
    protocol: ProtocolName,
}

impl Detector {
    pub fn new(config: DetectionConfig, head_dim: usize, protocol: ProtocolName) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            head_dim,
            protocol,
        })
    }

    pub fn config(&self) -> &DetectionConfig {
        &self.config
    }

    pub fn protocol(&self) -> ProtocolName {
        self.protocol
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (c, d) = (&self.config, self.config.d);
        let mut s = Vec::new();
        nn::linear_spec(&mut s, "det.input_proj", self.head_dim, d);
        for i in 0..c.adapter_layers {
            nn::block_spec(&mut s, &format!("det.adapter.{i}"), d, c.mlp_ratio);
        }
        s.push(ParamSpec::new("det.query_h", (c.num_queries, d), Init::Normal(1.0)));
        s.push(ParamSpec::new("det.query_o", (c.num_queries, d), Init::Normal(1.0)));
        s.push(ParamSpec::new("det.query_pos", (2 * c.num_queries, d), Init::Normal(1.0)));
        for i in 0..c.decoder_layers {
            nn::decoder_layer_spec(&mut s, &format!("det.decoder.{i}"), d, c.mlp_ratio);
        }
        nn::norm_spec(&mut s, "det.decoder_norm", d);
        for which in [Which::Human, Which::Object] {
            let p = which.prefix();
            nn::linear_spec(&mut s, &format!("{p}.0"), d, d);
            nn::linear_spec(&mut s, &format!("{p}.1"), d, d);
            nn::linear_spec(&mut s, &format!("{p}.2"), d, 4);
        }
        match self.protocol {
            ProtocolName::Swig => nn::linear_spec(&mut s, "det.confidence", d, 1),
            ProtocolName::Hico => {
                nn::linear_spec(&mut s, "det.object_class", d, c.num_object_classes + 1);
                nn::linear_spec(&mut s, "det.semantic_proj", self.head_dim, d);
            }
        }
        s
    }

    // ---- graph ----

    pub(crate) fn adapt_graph<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        s: &ParamStore<T>,
        x_b: &TokenSequence<T>,
    ) -> Result<Var> {
        let patches = x_b.segment(SegmentKind::Patch);
        if patches.rows() == 0 {
            return Err(Error::InvalidInput("adapter needs at least one patch token".into()));
        }
        if patches.cols() != self.head_dim {
            return Err(Error::Shape(format!(
                "adapter expects width {}, got {}",
                self.head_dim,
                patches.cols()
            )));
        }
        let x = ctx.g.constant_mat(patches);
        let x = nn::linear(ctx, s, "det.input_proj", x)?;
        let pos = sine_position_encoding::<T>(x_b.grid(), self.config.d);
        let mut x = ctx.g.add_const(x, &pos);
        for i in 0..self.config.adapter_layers {
            x = nn::block(
                ctx,
                s,
                &format!("det.adapter.{i}"),
                x,
                self.config.num_heads,
                None,
                None,
            )?;
        }
        Ok(x)
    }

    /// Adapter output, plus the projected semantic token under hico.
    pub(crate) fn memory_graph<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        s: &ParamStore<T>,
        x_b: &TokenSequence<T>,
        semantic: Option<&Mat<T>>,
    ) -> Result<Var> {
        let f = self.adapt_graph(ctx, s, x_b)?;
        match (self.protocol, semantic) {
            (ProtocolName::Hico, Some(cls)) => {
                let c = ctx.g.constant_mat(cls.clone());
                let c = nn::linear(ctx, s, "det.semantic_proj", c)?;
                Ok(ctx.g.concat_rows(&[f, c]))
            }
            (ProtocolName::Hico, None) => Err(Error::InvalidInput(
                "the hico protocol needs the head's semantic token".into(),
            )),
            (ProtocolName::Swig, _) => Ok(f),
        }
    }

    pub(crate) fn decode_graph<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        s: &ParamStore<T>,
        memory: Var,
    ) -> Result<(Var, Var)> {
        let d = self.config.d;
        if ctx.g.shape(memory).1 != d {
            return Err(Error::Shape(format!(
                "decoder memory width {} does not match d={d}",
                ctx.g.shape(memory).1
            )));
        }
        let qh = ctx.p(s, "det.query_h")?;
        let qo = ctx.p(s, "det.query_o")?;
        let pos = ctx.p(s, "det.query_pos")?;
        let mut x = ctx.g.concat_rows(&[qh, qo]);
        for i in 0..self.config.decoder_layers {
            x = nn::decoder_layer(
                ctx,
                s,
                &format!("det.decoder.{i}"),
                x,
                Some(pos),
                memory,
                self.config.num_heads,
                None,
            )?;
        }
        let x = nn::layer_norm(ctx, s, "det.decoder_norm", x)?;
        let n = self.config.num_queries;
        Ok((ctx.g.slice_rows(x, 0, n), ctx.g.slice_rows(x, n, n)))
    }

    pub(crate) fn boxes_graph<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        s: &ParamStore<T>,
        e: Var,
        which: Which,
    ) -> Result<Var> {
        let p = which.prefix();
        let h = nn::linear(ctx, s, &format!("{p}.0"), e)?;
        let h = ctx.g.relu(h);
        let h = nn::linear(ctx, s, &format!("{p}.1"), h)?;
        let h = ctx.g.relu(h);
        let h = nn::linear(ctx, s, &format!("{p}.2"), h)?;
        Ok(ctx.g.sigmoid(h))
    }

    /// `N_q × 1` confidence logits from the pair mean.
    pub(crate) fn confidence_graph<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        s: &ParamStore<T>,
        e_h: Var,
        e_o: Var,
    ) -> Result<Var> {
        self.protocol.require(ProtocolName::Swig)?;
        let sum = ctx.g.add(e_h, e_o);
        let mean = ctx.g.scale(sum, T::cst(0.5));
        nn::linear(ctx, s, "det.confidence", mean)
    }

    pub(crate) fn object_class_graph<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        s: &ParamStore<T>,
        e_o: Var,
    ) -> Result<Var> {
        self.protocol.require(ProtocolName::Hico)?;
        nn::linear(ctx, s, "det.object_class", e_o)
    }

    // ---- direct evaluation ----

    /// `F`: one `d`-wide row per patch token.
    pub fn adapt<T: Real>(&self, s: &ParamStore<T>, x_b: &TokenSequence<T>) -> Result<Mat<T>> {
        let mut ctx = Ctx::new();
        let f = self.adapt_graph(&mut ctx, s, x_b)?;
        Ok(ctx.g.value(f).clone())
    }

    pub fn decode_instances<T: Real>(
        &self,
        s: &ParamStore<T>,
        memory: &Mat<T>,
    ) -> Result<DecoderEmbeddings<T>> {
        let mut ctx = Ctx::new();
        let m = ctx.g.constant_mat(memory.clone());
        let (h, o) = self.decode_graph(&mut ctx, s, m)?;
        Ok(DecoderEmbeddings {
            human: ctx.g.value(h).clone(),
            object: ctx.g.value(o).clone(),
        })
    }

    pub fn predict_boxes<T: Real>(
        &self,
        s: &ParamStore<T>,
        e: &Mat<T>,
        which: Which,
    ) -> Result<Vec<BBox>> {
        let mut ctx = Ctx::new();
        let x = ctx.g.constant_mat(e.clone());
        let b = self.boxes_graph(&mut ctx, s, x, which)?;
        Ok(boxes_from_mat(ctx.g.value(b)))
    }

    pub fn predict_confidence<T: Real>(
        &self,
        s: &ParamStore<T>,
        e: &DecoderEmbeddings<T>,
    ) -> Result<Vec<f64>> {
        self.protocol.require(ProtocolName::Swig)?;
        let mut ctx = Ctx::new();
        let h = ctx.g.constant_mat(e.human.clone());
        let o = ctx.g.constant_mat(e.object.clone());
        let l = self.confidence_graph(&mut ctx, s, h, o)?;
        Ok(ctx
            .g
            .value(l)
            .data()
            .iter()
            .map(|v| crate::autograd::sigmoid(v.as_f64()))
            .collect())
    }

    /// `N_q × (C + 1)` logits; the last column is background.
    pub fn predict_object_class<T: Real>(&self, s: &ParamStore<T>, e_o: &Mat<T>) -> Result<Mat<T>> {
        self.protocol.require(ProtocolName::Hico)?;
        let mut ctx = Ctx::new();
        let x = ctx.g.constant_mat(e_o.clone());
        let l = self.object_class_graph(&mut ctx, s, x)?;
        Ok(ctx.g.value(l).clone())
    }
}

pub(crate) fn boxes_from_mat<T: Real>(m: &Mat<T>) -> Vec<BBox> {
    (0..m.rows())
        .map(|r| {
            let v = m.row(r);
            BBox::new(v[0].as_f64(), v[1].as_f64(), v[2].as_f64(), v[3].as_f64())
        })
        .collect()
}
