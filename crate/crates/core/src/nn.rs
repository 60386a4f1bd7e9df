//! Transformer building blocks on top of the autograd tape.
//!
//! Linear weights are stored `in × out` so a layer computes `x · W + b`.
//! Every block is pre-norm with residual connections.

use std::collections::{BTreeMap, HashMap};

use crate::autograd::{Grads, Graph, Var};
use crate::error::Result;
use crate::params::{Init, ParamSpec, ParamStore};
use crate::tensor::{Mat, Real};

pub const LN_EPS: f64 = 1e-6;

/// Per-head attention probabilities captured during a forward pass.
#[derive(Clone, Debug)]
pub struct AttentionRecord<T> {
    pub label: String,
    /// One `queries × keys` row-stochastic matrix per head.
    pub heads: Vec<Mat<T>>,
}

impl<T: Real> AttentionRecord<T> {
    /// Head-averaged map.
    pub fn mean(&self) -> Mat<T> {
        let mut out = self.heads[0].clone();
        for h in &self.heads[1..] {
            out.add_assign(h);
        }
        out.scale(T::one() / T::from_usize(self.heads.len()).unwrap())
    }
}

/// Forward-pass context: the tape, bound parameters, and optional attention capture.
pub struct Ctx<T> {
    pub g: Graph<T>,
    bound: HashMap<String, Var>,
    order: Vec<String>,
    recorder: Option<Vec<AttentionRecord<T>>>,
}

impl<T: Real> Default for Ctx<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Ctx<T> {
    pub fn new() -> Self {
        Self {
            g: Graph::new(),
            bound: HashMap::new(),
            order: Vec::new(),
            recorder: None,
        }
    }

    pub fn recording() -> Self {
        Self {
            recorder: Some(Vec::new()),
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recorder.is_some()
    }

    pub fn take_records(&mut self) -> Vec<AttentionRecord<T>> {
        self.recorder.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Binds a parameter to the tape once; frozen parameters enter as constants.
    pub fn p(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let param = store.get(name)?;
        let v = if param.frozen {
            self.g.constant(param.value.clone())
        } else {
            self.g.param(param.value.clone())
        };
        self.bound.insert(name.to_string(), v);
        self.order.push(name.to_string());
        Ok(v)
    }

    /// Trainable parameters bound so far, in binding order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.order
            .iter()
            .map(|n| (n.clone(), self.bound[n]))
            .filter(|(_, v)| self.g.requires_grad(*v))
            .collect()
    }

    /// Gradients of every bound trainable parameter; unused ones get zeros.
    pub fn param_grads(&self, grads: &Grads<T>) -> BTreeMap<String, Mat<T>> {
        self.trainable()
            .into_iter()
            .map(|(n, v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| {
                    let (r, c) = self.g.shape(v);
                    Mat::zeros(r, c)
                });
                (n, g)
            })
            .collect()
    }

    fn record(&mut self, label: &str, heads: Vec<Mat<T>>) {
        if let Some(r) = self.recorder.as_mut() {
            r.push(AttentionRecord {
                label: label.to_string(),
                heads,
            });
        }
    }
}

// ---- parameter declarations ----

pub fn linear_spec(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push(ParamSpec::new(format!("{prefix}.weight"), (fan_in, fan_out), Init::Xavier));
    out.push(ParamSpec::new(format!("{prefix}.bias"), (1, fan_out), Init::Zeros));
}

pub fn norm_spec(out: &mut Vec<ParamSpec>, prefix: &str, dim: usize) {
    out.push(ParamSpec::new(format!("{prefix}.weight"), (1, dim), Init::Ones));
    out.push(ParamSpec::new(format!("{prefix}.bias"), (1, dim), Init::Zeros));
}

pub fn attention_spec(out: &mut Vec<ParamSpec>, prefix: &str, dim: usize, kv_dim: usize) {
    linear_spec(out, &format!("{prefix}.q"), dim, dim);
    linear_spec(out, &format!("{prefix}.k"), kv_dim, dim);
    linear_spec(out, &format!("{prefix}.v"), kv_dim, dim);
    linear_spec(out, &format!("{prefix}.out"), dim, dim);
}

pub fn mlp_spec(out: &mut Vec<ParamSpec>, prefix: &str, dim: usize, hidden: usize) {
    linear_spec(out, &format!("{prefix}.fc1"), dim, hidden);
    linear_spec(out, &format!("{prefix}.fc2"), hidden, dim);
}

/// Pre-norm self-attention block (`norm1`, `attn`, `norm2`, `mlp`).
pub fn block_spec(out: &mut Vec<ParamSpec>, prefix: &str, dim: usize, mlp_ratio: usize) {
    norm_spec(out, &format!("{prefix}.norm1"), dim);
    attention_spec(out, &format!("{prefix}.attn"), dim, dim);
    norm_spec(out, &format!("{prefix}.norm2"), dim);
    mlp_spec(out, &format!("{prefix}.mlp"), dim, dim * mlp_ratio);
}

/// Pre-norm decoder layer (`norm1`, `self_attn`, `norm2`, `cross_attn`, `norm3`, `mlp`).
pub fn decoder_layer_spec(out: &mut Vec<ParamSpec>, prefix: &str, dim: usize, mlp_ratio: usize) {
    norm_spec(out, &format!("{prefix}.norm1"), dim);
    attention_spec(out, &format!("{prefix}.self_attn"), dim, dim);
    norm_spec(out, &format!("{prefix}.norm2"), dim);
    attention_spec(out, &format!("{prefix}.cross_attn"), dim, dim);
    norm_spec(out, &format!("{prefix}.norm3"), dim);
    mlp_spec(out, &format!("{prefix}.mlp"), dim, dim * mlp_ratio);
}

// ---- forward functions ----

pub fn linear<T: Real>(ctx: &mut Ctx<T>, s: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = ctx.p(s, &format!("{prefix}.weight"))?;
    let b = ctx.p(s, &format!("{prefix}.bias"))?;
    let y = ctx.g.matmul(x, w);
    Ok(ctx.g.add_row(y, b))
}

pub fn layer_norm<T: Real>(ctx: &mut Ctx<T>, s: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = ctx.p(s, &format!("{prefix}.weight"))?;
    let b = ctx.p(s, &format!("{prefix}.bias"))?;
    let n = ctx.g.layer_norm(x, T::cst(LN_EPS));
    let y = ctx.g.mul_row(n, w);
    Ok(ctx.g.add_row(y, b))
}

pub fn mlp<T: Real>(ctx: &mut Ctx<T>, s: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(ctx, s, &format!("{prefix}.fc1"), x)?;
    let h = ctx.g.gelu(h);
    linear(ctx, s, &format!("{prefix}.fc2"), h)
}

/// Inputs to one multi-head attention call.
pub struct AttnInputs<'m, T> {
    /// Added to the query stream before the query projection only.
    pub query_pos: Option<Var>,
    /// Added to the key stream before the key projection only.
    pub key_pos: Option<Var>,
    /// Additive `queries × keys` mask (0 or −∞).
    pub mask: Option<&'m Mat<T>>,
    /// Capture label; `None` never records.
    pub label: Option<&'m str>,
}

impl<T> Default for AttnInputs<'_, T> {
    fn default() -> Self {
        Self {
            query_pos: None,
            key_pos: None,
            mask: None,
            label: None,
        }
    }
}

/// Multi-head scaled dot-product attention with `q/k/v/out` projections.
pub fn attention<T: Real>(
    ctx: &mut Ctx<T>,
    s: &ParamStore<T>,
    prefix: &str,
    queries: Var,
    keys_values: Var,
    num_heads: usize,
    extra: AttnInputs<'_, T>,
) -> Result<Var> {
    let q_in = match extra.query_pos {
        Some(p) => ctx.g.add(queries, p),
        None => queries,
    };
    let k_in = match extra.key_pos {
        Some(p) => ctx.g.add(keys_values, p),
        None => keys_values,
    };
    let q = linear(ctx, s, &format!("{prefix}.q"), q_in)?;
    let k = linear(ctx, s, &format!("{prefix}.k"), k_in)?;
    let v = linear(ctx, s, &format!("{prefix}.v"), keys_values)?;
    let dim = ctx.g.shape(q).1;
    let head_dim = dim / num_heads;
    let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();

    let mut outs = Vec::with_capacity(num_heads);
    let mut probs = Vec::new();
    for h in 0..num_heads {
        let qh = ctx.g.slice_cols(q, h * head_dim, head_dim);
        let kh = ctx.g.slice_cols(k, h * head_dim, head_dim);
        let vh = ctx.g.slice_cols(v, h * head_dim, head_dim);
        let scores = ctx.g.matmul_nt(qh, kh);
        let scores = ctx.g.scale(scores, scale);
        let scores = match extra.mask {
            Some(m) => ctx.g.add_const(scores, m),
            None => scores,
        };
        let p = ctx.g.softmax_rows(scores);
        if extra.label.is_some() && ctx.is_recording() {
            probs.push(ctx.g.value(p).clone());
        }
        outs.push(ctx.g.matmul(p, vh));
    }
    if let Some(label) = extra.label {
        if ctx.is_recording() {
            ctx.record(label, probs);
        }
    }
    let merged = if num_heads == 1 {
        outs[0]
    } else {
        ctx.g.concat_cols(&outs)
    };
    linear(ctx, s, &format!("{prefix}.out"), merged)
}

/// Pre-norm self-attention block.
pub fn block<T: Real>(
    ctx: &mut Ctx<T>,
    s: &ParamStore<T>,
    prefix: &str,
    x: Var,
    num_heads: usize,
    mask: Option<&Mat<T>>,
    label: Option<&str>,
) -> Result<Var> {
    let h = layer_norm(ctx, s, &format!("{prefix}.norm1"), x)?;
    let a = attention(
        ctx,
        s,
        &format!("{prefix}.attn"),
        h,
        h,
        num_heads,
        AttnInputs {
            mask,
            label,
            ..Default::default()
        },
    )?;
    let x = ctx.g.add(x, a);
    let h = layer_norm(ctx, s, &format!("{prefix}.norm2"), x)?;
    let m = mlp(ctx, s, &format!("{prefix}.mlp"), h)?;
    Ok(ctx.g.add(x, m))
}

/// Pre-norm decoder layer: self-attention, cross-attention over `memory`, MLP.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer<T: Real>(
    ctx: &mut Ctx<T>,
    s: &ParamStore<T>,
    prefix: &str,
    x: Var,
    query_pos: Option<Var>,
    memory: Var,
    num_heads: usize,
    cross_label: Option<&str>,
) -> Result<Var> {
    let h = layer_norm(ctx, s, &format!("{prefix}.norm1"), x)?;
    let a = attention(
        ctx,
        s,
        &format!("{prefix}.self_attn"),
        h,
        h,
        num_heads,
        AttnInputs {
            query_pos,
            key_pos: query_pos,
            ..Default::default()
        },
    )?;
    let x = ctx.g.add(x, a);
    let h = layer_norm(ctx, s, &format!("{prefix}.norm2"), x)?;
    let c = attention(
        ctx,
        s,
        &format!("{prefix}.cross_attn"),
        h,
        memory,
        num_heads,
        AttnInputs {
            query_pos,
            label: cross_label,
            ..Default::default()
        },
    )?;
    let x = ctx.g.add(x, c);
    let h = layer_norm(ctx, s, &format!("{prefix}.norm3"), x)?;
    let m = mlp(ctx, s, &format!("{prefix}.mlp"), h)?;
    Ok(ctx.g.add(x, m))
}
