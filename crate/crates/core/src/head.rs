//! Frozen text-aligned vision head and semantic bootstrapping.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::WeightArchive;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{self, AttentionRecord, Ctx};
use crate::params::{ParamSpec, ParamStore};
use crate::tensor::{Mat, Real};
use crate::tokens::{Layout, SegmentKind, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub num_blocks: usize,
    pub dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Adds a trailing `D × D` linear layer after the blocks.
    pub terminal_projection: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_blocks: 2,
            dim: 1024,
            num_heads: 16,
            mlp_ratio: 4,
            terminal_projection: false,
        }
    }
}

impl HeadConfig {
    pub fn toy() -> Self {
        Self {
            dim: 64,
            num_heads: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::config("head.num_blocks", "must be at least 1"));
        }
        if self.dim == 0 || self.num_heads == 0 || !self.dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "head.dim",
                format!("{} is not divisible by num_heads {}", self.dim, self.num_heads),
            ));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut s = Vec::new();
        for i in 0..self.num_blocks {
            nn::block_spec(&mut s, &format!("head.blocks.{i}"), self.dim, self.mlp_ratio);
        }
        if self.terminal_projection {
            nn::linear_spec(&mut s, "head.proj", self.dim, self.dim);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMask {
    #[default]
    None,
    /// Class, register and patch rows never attend to query columns.
    BlockQueryToImage,
}

impl AttentionMask {
    /// Additive `len × len` mask for `layout`, or `None` when nothing is blocked.
    pub fn matrix<T: Real>(self, layout: &Layout) -> Option<Mat<T>> {
        let queries = layout.range(SegmentKind::Query);
        if self == AttentionMask::None || queries.is_empty() {
            return None;
        }
        let n = layout.len();
        Some(Mat::from_fn(n, n, |r, c| {
            if !queries.contains(&r) && queries.contains(&c) {
                T::neg_infinity()
            } else {
                T::zero()
            }
        }))
    }
}

/// Segment-split outputs of a bootstrapped head pass.
#[derive(Clone, Debug)]
pub struct BootstrapOutput<T> {
    pub queries_out: Mat<T>,
    pub class_out: Mat<T>,
    /// Register outputs; auxiliary and never used downstream.
    pub registers_out: Mat<T>,
    pub patches_out: Mat<T>,
    pub grid: (usize, usize),
    pub attention_records: Vec<AttentionRecord<T>>,
}

/// Graph handles of a bootstrapped pass, for use inside a larger tape.
#[derive(Clone, Debug)]
pub struct BootstrapVars {
    /// Whole output sequence laid out as `layout`.
    pub output: Var,
    pub layout: Layout,
    pub queries: Option<Var>,
    pub class: Var,
    pub patches: Var,
}

#[derive(Clone, Debug)]
pub struct VisionHead<T> {
    config: HeadConfig,
    params: ParamStore<T>,
    checksum: String,
}

impl<T: Real> VisionHead<T> {
    pub fn random(config: HeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::initialize(&config.param_specs(), &mut rng, true);
        if config.terminal_projection {
            params.set("head.proj.weight", Mat::eye(config.dim))?;
        }
        Ok(Self::from_store(config, params))
    }

    pub fn load_weights(config: HeadConfig, archive: &WeightArchive<T>) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::from_arrays(&config.param_specs(), &archive.arrays, true)?;
        Ok(Self::from_store(config, params))
    }

    fn from_store(config: HeadConfig, params: ParamStore<T>) -> Self {
        let checksum = params.checksum();
        Self {
            config,
            params,
            checksum,
        }
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn current_checksum(&self) -> String {
        self.params.checksum()
    }

    fn check_width(&self, what: &str, width: usize) -> Result<()> {
        if width != self.config.dim {
            return Err(Error::Shape(format!(
                "{what} width {width} does not match head dim D={}",
                self.config.dim
            )));
        }
        Ok(())
    }

    /// Runs every block over `x` with an optional mask; labels blocks `head_block_{i}`.
    pub(crate) fn blocks_graph(
        &self,
        ctx: &mut Ctx<T>,
        x: Var,
        mask: Option<&Mat<T>>,
    ) -> Result<Var> {
        let mut x = x;
        for i in 0..self.config.num_blocks {
            let label = format!("head_block_{}", i + 1);
            x = nn::block(
                ctx,
                &self.params,
                &format!("head.blocks.{i}"),
                x,
                self.config.num_heads,
                mask,
                Some(&label),
            )?;
        }
        if self.config.terminal_projection {
            x = nn::linear(ctx, &self.params, "head.proj", x)?;
        }
        Ok(x)
    }

    /// Query-free head pass.
    pub fn forward_plain(&self, x_b: &TokenSequence<T>) -> Result<TokenSequence<T>> {
        self.forward_plain_with(x_b, &mut Ctx::new())
    }

    fn forward_plain_with(&self, x_b: &TokenSequence<T>, ctx: &mut Ctx<T>) -> Result<TokenSequence<T>> {
        if x_b.layout().count(SegmentKind::Query) > 0 {
            return Err(Error::InvalidInput(
                "forward_plain received a query segment; use forward_bootstrapped".into(),
            ));
        }
        self.check_width("token", x_b.dim())?;
        let x = ctx.g.constant(Arc::new(x_b.tokens().clone()));
        let y = self.blocks_graph(ctx, x, None)?;
        TokenSequence::new(ctx.g.value(y).clone(), x_b.layout().clone())
    }

    /// Assembles `[CLS, Reg…, Q…, P…]` on the tape and runs the head.
    pub(crate) fn bootstrap_graph(
        &self,
        ctx: &mut Ctx<T>,
        queries: Option<Var>,
        x_b: &TokenSequence<T>,
        mask: AttentionMask,
    ) -> Result<BootstrapVars> {
        if x_b.layout().count(SegmentKind::Query) > 0 {
            return Err(Error::InvalidInput("image sequence already holds queries".into()));
        }
        self.check_width("token", x_b.dim())?;
        let n_q = match queries {
            Some(q) => {
                let (rows, cols) = ctx.g.shape(q);
                self.check_width("query", cols)?;
                rows
            }
            None => 0,
        };
        let layout = x_b.layout().with_queries(n_q)?;
        let tokens = x_b.tokens();
        let before = x_b.layout().range(SegmentKind::Patch).start;
        let head = ctx.g.constant_mat(tokens.slice_rows(0, before));
        let patches = ctx.g.constant_mat(tokens.slice_rows(before, tokens.rows() - before));
        let mut parts = vec![head];
        if let Some(q) = queries.filter(|_| n_q > 0) {
            parts.push(q);
        }
        parts.push(patches);
        let x = ctx.g.concat_rows(&parts);
        let mask = mask.matrix::<T>(&layout);
        let y = self.blocks_graph(ctx, x, mask.as_ref())?;

        let slice = |ctx: &mut Ctx<T>, kind| {
            let r = layout.range(kind);
            ctx.g.slice_rows(y, r.start, r.len())
        };
        Ok(BootstrapVars {
            output: y,
            layout: layout.clone(),
            queries: (n_q > 0).then(|| slice(ctx, SegmentKind::Query)),
            class: slice(ctx, SegmentKind::Class),
            patches: slice(ctx, SegmentKind::Patch),
        })
    }

    /// Head pass over `[CLS, Reg…, Q_r, P…]`, split back by segment.
    pub fn forward_bootstrapped(
        &self,
        q_r: &Mat<T>,
        x_b: &TokenSequence<T>,
        mask: AttentionMask,
    ) -> Result<BootstrapOutput<T>> {
        self.bootstrapped_with(q_r, x_b, mask, Ctx::new())
    }

    /// As [`Self::forward_bootstrapped`] with per-block attention captured.
    pub fn forward_bootstrapped_recording(
        &self,
        q_r: &Mat<T>,
        x_b: &TokenSequence<T>,
        mask: AttentionMask,
    ) -> Result<BootstrapOutput<T>> {
        self.bootstrapped_with(q_r, x_b, mask, Ctx::recording())
    }

    fn bootstrapped_with(
        &self,
        q_r: &Mat<T>,
        x_b: &TokenSequence<T>,
        mask: AttentionMask,
        mut ctx: Ctx<T>,
    ) -> Result<BootstrapOutput<T>> {
        self.check_width("query", q_r.cols())?;
        let q = (q_r.rows() > 0).then(|| ctx.g.constant_mat(q_r.clone()));
        let vars = self.bootstrap_graph(&mut ctx, q, x_b, mask)?;
        let regs = vars.layout.range(SegmentKind::Register);
        let registers_out = ctx.g.value(vars.output).slice_rows(regs.start, regs.len());
        Ok(BootstrapOutput {
            queries_out: vars
                .queries
                .map_or_else(|| Mat::zeros(0, self.config.dim), |v| ctx.g.value(v).clone()),
            class_out: ctx.g.value(vars.class).clone(),
            registers_out,
            patches_out: ctx.g.value(vars.patches).clone(),
            grid: x_b.grid(),
            attention_records: ctx.take_records(),
        })
    }

    /// `[CLS′, mean(P′), P′₁..P′_N]`.
    pub fn build_kv(b: &BootstrapOutput<T>) -> Result<TokenSequence<T>> {
        if b.patches_out.rows() == 0 {
            return Err(Error::InvalidInput("cannot build key/value tokens without patches".into()));
        }
        let mean = b.patches_out.mean_rows();
        let tokens = Mat::concat_rows(&[&b.class_out, &mean, &b.patches_out])?;
        TokenSequence::new(tokens, kv_layout(b.grid)?)
    }

    pub(crate) fn kv_graph(ctx: &mut Ctx<T>, vars: &BootstrapVars) -> Var {
        let mean = ctx.g.mean_rows(vars.patches);
        ctx.g.concat_rows(&[vars.class, mean, vars.patches])
    }

    /// Head-block attention for one query position: one row-stochastic vector per head.
    pub fn attention_maps(
        &self,
        seq: &TokenSequence<T>,
        block_index: usize,
        query_position: usize,
    ) -> Result<Vec<Vec<T>>> {
        if block_index >= self.config.num_blocks {
            return Err(Error::InvalidInput(format!(
                "block index {block_index} out of range (head has {})",
                self.config.num_blocks
            )));
        }
        if query_position >= seq.len() {
            return Err(Error::InvalidInput(format!(
                "query position {query_position} out of range (sequence length {})",
                seq.len()
            )));
        }
        self.check_width("token", seq.dim())?;
        let records = self.attention_records(seq)?;
        Ok(records[block_index]
            .heads
            .iter()
            .map(|h| h.row(query_position).to_vec())
            .collect())
    }

    /// Full per-block attention for any sequence, queries included (no mask).
    pub fn attention_records(&self, seq: &TokenSequence<T>) -> Result<Vec<AttentionRecord<T>>> {
        let mut ctx = Ctx::recording();
        let x = ctx.g.constant_mat(seq.tokens().clone());
        self.blocks_graph(&mut ctx, x, None)?;
        Ok(ctx.take_records())
    }
}

/// Layout of the key/value sequence built from head outputs.
pub fn kv_layout(grid: (usize, usize)) -> Result<Layout> {
    Layout::from_runs(
        &[
            (SegmentKind::Class, 1),
            (SegmentKind::Pooled, 1),
            (SegmentKind::Patch, grid.0 * grid.1),
        ],
        grid,
    )
}
