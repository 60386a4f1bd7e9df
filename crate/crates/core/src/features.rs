//! Frozen per-image features shared by every learnable module.

use crate::backbone::Backbone;
use crate::error::Result;
use crate::head::VisionHead;
use crate::imaging::Image;
use crate::tensor::{Mat, Real};
use crate::tokens::{SegmentKind, TokenSequence};

/// Backbone tokens and the query-free head pass for one image.
///
/// Both depend only on frozen weights, so training caches them per image.
#[derive(Clone, Debug)]
pub struct ImageFeatures<T> {
    /// `X_b`.
    pub x_b: TokenSequence<T>,
    /// `[CLS′, mean(P′), P′…]` from the plain head pass.
    pub plain_kv: TokenSequence<T>,
}

impl<T: Real> ImageFeatures<T> {
    /// Encodes an image that is already resized and normalized.
    pub fn compute(backbone: &Backbone<T>, head: &VisionHead<T>, image: &Image) -> Result<Self> {
        Self::from_tokens(head, backbone.encode(image)?)
    }

    pub fn from_tokens(head: &VisionHead<T>, x_b: TokenSequence<T>) -> Result<Self> {
        let plain = head.forward_plain(&x_b)?;
        let (tokens, _) = plain.into_parts();
        let class = tokens.slice_rows(0, 1);
        let patch = x_b.layout().range(SegmentKind::Patch);
        let patches = tokens.slice_rows(patch.start, patch.len());
        let mean = patches.mean_rows();
        let kv = Mat::concat_rows(&[&class, &mean, &patches])?;
        Ok(Self {
            plain_kv: TokenSequence::new(kv, crate::head::kv_layout(x_b.grid())?)?,
            x_b,
        })
    }

    /// Head-level semantic token `CLS′` (`1 × D`).
    pub fn semantic_token(&self) -> Mat<T> {
        self.plain_kv.tokens().slice_rows(0, 1)
    }
}
