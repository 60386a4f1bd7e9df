//! Token sequences with segment bookkeeping.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Class,
    Register,
    Query,
    /// Mean of the patch tokens; only appears in key/value sequences.
    Pooled,
    Patch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Segment layout of a token sequence plus the patch grid shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    grid: (usize, usize),
}

impl Layout {
    /// Builds a layout from `(kind, len)` runs; zero-length runs are dropped.
    pub fn from_runs(runs: &[(SegmentKind, usize)], grid: (usize, usize)) -> Result<Self> {
        let mut segments = Vec::new();
        let mut start = 0;
        for &(kind, len) in runs {
            if len == 0 {
                continue;
            }
            if segments.iter().any(|s: &Segment| s.kind == kind) {
                return Err(Error::Shape(format!("segment {kind:?} appears twice")));
            }
            segments.push(Segment { kind, start, len });
            start += len;
        }
        let layout = Self { segments, grid };
        layout.validate()?;
        Ok(layout)
    }

    /// `[CLS, Reg₁..Reg_R, P₁..P_N]`.
    pub fn image(num_registers: usize, grid: (usize, usize)) -> Result<Self> {
        Self::from_runs(
            &[
                (SegmentKind::Class, 1),
                (SegmentKind::Register, num_registers),
                (SegmentKind::Patch, grid.0 * grid.1),
            ],
            grid,
        )
    }

    /// Inserts a query segment immediately before the patch tokens.
    pub fn with_queries(&self, num_queries: usize) -> Result<Self> {
        if self.count(SegmentKind::Query) > 0 {
            return Err(Error::InvalidInput("sequence already holds queries".into()));
        }
        let runs: Vec<(SegmentKind, usize)> = self
            .segments
            .iter()
            .flat_map(|s| {
                if s.kind == SegmentKind::Patch {
                    vec![(SegmentKind::Query, num_queries), (s.kind, s.len)]
                } else {
                    vec![(s.kind, s.len)]
                }
            })
            .collect();
        Self::from_runs(&runs, self.grid)
    }

    fn validate(&self) -> Result<()> {
        let class = self.count(SegmentKind::Class);
        if class != 1 || self.segments.first().map(|s| s.kind) != Some(SegmentKind::Class) {
            return Err(Error::Shape(
                "sequence must hold exactly one class token at position 0".into(),
            ));
        }
        if self.grid.0 * self.grid.1 != self.count(SegmentKind::Patch) {
            return Err(Error::Shape(format!(
                "grid {}x{} does not match {} patch tokens",
                self.grid.0,
                self.grid.1,
                self.count(SegmentKind::Patch)
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.start + s.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, kind: SegmentKind) -> Option<Segment> {
        self.segments.iter().copied().find(|s| s.kind == kind)
    }

    pub fn count(&self, kind: SegmentKind) -> usize {
        self.segment(kind).map_or(0, |s| s.len)
    }

    /// Range of `kind`, empty (positioned at the end) when absent.
    pub fn range(&self, kind: SegmentKind) -> Range<usize> {
        self.segment(kind)
            .map_or(self.len()..self.len(), |s| s.range())
    }

    pub fn kind_at(&self, position: usize) -> Option<SegmentKind> {
        self.segments
            .iter()
            .find(|s| s.range().contains(&position))
            .map(|s| s.kind)
    }
}

/// Ordered `D`-dim token embeddings with their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    tokens: Mat<T>,
    layout: Layout,
}

impl<T: Real> TokenSequence<T> {
    pub fn new(tokens: Mat<T>, layout: Layout) -> Result<Self> {
        if tokens.rows() != layout.len() {
            return Err(Error::Shape(format!(
                "{} tokens for a layout of length {}",
                tokens.rows(),
                layout.len()
            )));
        }
        Ok(Self { tokens, layout })
    }

    pub fn tokens(&self) -> &Mat<T> {
        &self.tokens
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn grid(&self) -> (usize, usize) {
        self.layout.grid
    }

    pub fn segment(&self, kind: SegmentKind) -> Mat<T> {
        let r = self.layout.range(kind);
        self.tokens.slice_rows(r.start, r.len())
    }

    pub fn into_parts(self) -> (Mat<T>, Layout) {
        (self.tokens, self.layout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_layout_counts() {
        let l = Layout::image(4, (14, 14)).unwrap();
        assert_eq!(l.len(), 1 + 4 + 196);
        assert_eq!(l.range(SegmentKind::Patch), 5..201);
        let q = l.with_queries(64).unwrap();
        assert_eq!(q.len(), 265);
        assert_eq!(q.range(SegmentKind::Query), 5..69);
        assert_eq!(q.range(SegmentKind::Patch), 69..265);
        assert_eq!(q.kind_at(0), Some(SegmentKind::Class));
        assert_eq!(q.kind_at(69), Some(SegmentKind::Patch));
    }

    #[test]
    fn zero_queries_keep_layout() {
        let l = Layout::image(4, (2, 2)).unwrap();
        assert_eq!(l.with_queries(0).unwrap(), l);
    }

    #[test]
    fn grid_mismatch_rejected() {
        assert!(Layout::from_runs(
            &[(SegmentKind::Class, 1), (SegmentKind::Patch, 5)],
            (2, 2)
        )
        .is_err());
        assert!(Layout::from_runs(&[(SegmentKind::Patch, 4)], (2, 2)).is_err());
    }

    #[test]
    fn sequence_length_must_match_layout() {
        let l = Layout::image(0, (1, 1)).unwrap();
        assert!(TokenSequence::new(Mat::<f32>::zeros(3, 4), l.clone()).is_err());
        assert!(TokenSequence::new(Mat::<f32>::zeros(2, 4), l).is_ok());
    }
}
