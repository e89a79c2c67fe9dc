//! Propagation blocks: short-term (previous frame), long-term (memory bank,
//! via modulated cross-attention) and self-propagation, each with a residual,
//! followed by a position-wise feed-forward layer.
//!
//! Blocks run two branches. The visual branch computes attention; the ID
//! branch reuses the visual branch's attention maps on identity values and
//! never evaluates a softmax of its own.

#![allow(clippy::type_complexity)]

use rand::Rng;

use crate::autodiff::Backend;
use crate::error::{Error, Result};
use crate::fusion::{
    cross_attention, modulated_cross_attention, BoundFusion, BoundLinear, FusionWeights, TokenMap,
};
use crate::memory::MemoryBank;
use crate::params::{join, Parameters};
use crate::tensor::{LinearProjection, Scalar, Tensor};

pub const DEFAULT_BLOCKS: usize = 3;

/// Two projections with GeLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T = f64> {
    pub up: LinearProjection<T>,
    pub down: LinearProjection<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn init<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: LinearProjection::init(dim, hidden, rng),
            down: LinearProjection::init(hidden, dim, rng),
        }
    }
}

impl<T: Scalar> Parameters<T> for FeedForward<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.up.visit(&join(prefix, "up"), f);
        self.down.visit(&join(prefix, "down"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}

#[derive(Clone, Debug)]
pub struct BoundFeedForward<V> {
    pub up: BoundLinear<V>,
    pub down: BoundLinear<V>,
}

impl<V: Clone> BoundFeedForward<V> {
    pub fn apply<B: Backend<Value = V>>(&self, b: &mut B, x: &V) -> Result<V> {
        let h = self.up.apply(b, x)?;
        let h = b.gelu(&h)?;
        self.down.apply(b, &h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ELSTTBlock<T = f64> {
    pub short_term: FusionWeights<T>,
    pub long_term: FusionWeights<T>,
    pub self_prop: FusionWeights<T>,
    pub ffn: FeedForward<T>,
    /// ID-branch value projections, one per stage.
    pub id_short: LinearProjection<T>,
    pub id_long: LinearProjection<T>,
    pub id_self: LinearProjection<T>,
    pub id_ffn: FeedForward<T>,
}

impl<T: Scalar> ELSTTBlock<T> {
    pub fn init<R: Rng>(dim: usize, levels: usize, rng: &mut R) -> Self {
        Self {
            short_term: FusionWeights::init(dim, levels, rng),
            long_term: FusionWeights::init(dim, levels, rng),
            self_prop: FusionWeights::init(dim, levels, rng),
            ffn: FeedForward::init(dim, 2 * dim, rng),
            id_short: LinearProjection::init(dim, dim, rng),
            id_long: LinearProjection::init(dim, dim, rng),
            id_self: LinearProjection::init(dim, dim, rng),
            id_ffn: FeedForward::init(dim, 2 * dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.short_term.dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.short_term.validate()?;
        self.long_term.validate()?;
        self.self_prop.validate()?;
        let d = self.dim();
        if self.long_term.dim() != d || self.self_prop.dim() != d {
            return Err(Error::Validation("all propagation stages must share D".into()));
        }
        Ok(())
    }

    pub fn bind<B: Backend<Scalar = T>>(&self, b: &mut B) -> BoundBlock<B::Value> {
        BoundBlock {
            short_term: self.short_term.bind(b),
            long_term: self.long_term.bind(b),
            self_prop: self.self_prop.bind(b),
            ffn: BoundFeedForward {
                up: BoundLinear::bind(&self.ffn.up, b),
                down: BoundLinear::bind(&self.ffn.down, b),
            },
            id_short: BoundLinear::bind(&self.id_short, b),
            id_long: BoundLinear::bind(&self.id_long, b),
            id_self: BoundLinear::bind(&self.id_self, b),
            id_ffn: BoundFeedForward {
                up: BoundLinear::bind(&self.id_ffn.up, b),
                down: BoundLinear::bind(&self.id_ffn.down, b),
            },
        }
    }
}

impl<T: Scalar> Parameters<T> for ELSTTBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.short_term.visit(&join(prefix, "short"), f);
        self.long_term.visit(&join(prefix, "long"), f);
        self.self_prop.visit(&join(prefix, "self"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
        self.id_short.visit(&join(prefix, "id_short"), f);
        self.id_long.visit(&join(prefix, "id_long"), f);
        self.id_self.visit(&join(prefix, "id_self"), f);
        self.id_ffn.visit(&join(prefix, "id_ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.short_term.visit_mut(&join(prefix, "short"), f);
        self.long_term.visit_mut(&join(prefix, "long"), f);
        self.self_prop.visit_mut(&join(prefix, "self"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
        self.id_short.visit_mut(&join(prefix, "id_short"), f);
        self.id_long.visit_mut(&join(prefix, "id_long"), f);
        self.id_self.visit_mut(&join(prefix, "id_self"), f);
        self.id_ffn.visit_mut(&join(prefix, "id_ffn"), f);
    }
}

#[derive(Clone, Debug)]
pub struct BoundBlock<V> {
    pub short_term: BoundFusion<V>,
    pub long_term: BoundFusion<V>,
    pub self_prop: BoundFusion<V>,
    pub ffn: BoundFeedForward<V>,
    pub id_short: BoundLinear<V>,
    pub id_long: BoundLinear<V>,
    pub id_self: BoundLinear<V>,
    pub id_ffn: BoundFeedForward<V>,
}

/// Visual and identity embeddings of one frame at one block depth.
#[derive(Clone, Debug)]
pub struct FrameFeatures<V> {
    pub visual: TokenMap<V>,
    pub id: TokenMap<V>,
}

/// What a frame propagates from: the previous frame and the long-term memory.
#[derive(Clone, Debug)]
pub struct PropagationContext<V> {
    /// Previous frame's visual input at this depth; `None` on the first frame.
    pub prev_visual: Option<TokenMap<V>>,
    /// Identity embedding of the previous frame's mask.
    pub prev_id: Option<TokenMap<V>>,
    pub memory: TokenMap<V>,
    pub memory_id: TokenMap<V>,
}

/// Attention maps produced by the visual branch of one block.
#[derive(Clone, Debug)]
pub struct AttentionCache<V> {
    /// `[T, T_prev]`, absent on the first frame.
    pub short: Option<V>,
    /// `[T, T_memory]`
    pub long: V,
    /// `[T, T]`
    pub self_prop: V,
}

/// Streaming state carried from frame to frame.
#[derive(Clone, Debug)]
pub struct PropagationState<V> {
    /// Visual input of the previous frame at each block depth.
    pub prev_visual: Vec<Option<TokenMap<V>>>,
    pub prev_id: Option<TokenMap<V>>,
    pub bank: MemoryBank<V>,
    pub caches: Vec<Option<AttentionCache<V>>>,
}

impl<V: Clone> PropagationState<V> {
    pub fn new(bank: MemoryBank<V>, depth: usize) -> Self {
        Self {
            prev_visual: vec![None; depth],
            prev_id: None,
            bank,
            caches: vec![None; depth],
        }
    }

    pub fn depth(&self) -> usize {
        self.prev_visual.len()
    }

    pub fn context<B: Backend<Value = V>>(&self, b: &mut B, depth: usize) -> Result<PropagationContext<V>> {
        if depth >= self.depth() {
            return Err(Error::Usage(format!("block depth {depth} outside state of {}", self.depth())));
        }
        let memory = self.bank.context_tokens(b)?;
        let memory_id = self
            .bank
            .id_tokens(b)?
            .ok_or_else(|| Error::Usage("memory bank carries no identity embeddings".into()))?;
        Ok(PropagationContext {
            prev_visual: self.prev_visual[depth].clone(),
            prev_id: self.prev_id.clone(),
            memory,
            memory_id,
        })
    }
}

fn residual<B: Backend>(b: &mut B, x: &TokenMap<B::Value>, update: &B::Value) -> Result<TokenMap<B::Value>> {
    let sum = b.add(&x.tokens, update)?;
    Ok(x.replace_tokens(sum))
}

/// Cross-attention to the previous frame plus residual; identity on the first frame.
pub fn short_term_propagate<B: Backend>(
    b: &mut B,
    current: &TokenMap<B::Value>,
    previous: Option<&TokenMap<B::Value>>,
    w: &BoundFusion<B::Value>,
) -> Result<(TokenMap<B::Value>, Option<B::Value>)> {
    match previous {
        None => Ok((current.clone(), None)),
        Some(prev) => {
            let a = cross_attention(b, current, prev, w)?;
            Ok((residual(b, current, &a.output.tokens)?, Some(a.attention)))
        }
    }
}

/// Modulated cross-attention over the memory context plus residual.
pub fn long_term_propagate<B: Backend>(
    b: &mut B,
    current: &TokenMap<B::Value>,
    memory: &TokenMap<B::Value>,
    w: &BoundFusion<B::Value>,
) -> Result<(TokenMap<B::Value>, B::Value)> {
    if memory.len == 0 {
        return Err(Error::Usage("long-term propagation over an empty memory".into()));
    }
    let a = modulated_cross_attention(b, current, memory, w)?;
    Ok((residual(b, current, &a.output.tokens)?, a.attention))
}

/// [`long_term_propagate`] over everything stored in `bank`.
pub fn long_term_propagate_bank<B: Backend>(
    b: &mut B,
    current: &TokenMap<B::Value>,
    bank: &MemoryBank<B::Value>,
    w: &BoundFusion<B::Value>,
) -> Result<(TokenMap<B::Value>, B::Value)> {
    let memory = bank.context_tokens(b)?;
    long_term_propagate(b, current, &memory, w)
}

/// Self-attention (cross-attention with context == target) plus residual.
pub fn self_propagate<B: Backend>(
    b: &mut B,
    current: &TokenMap<B::Value>,
    w: &BoundFusion<B::Value>,
) -> Result<(TokenMap<B::Value>, B::Value)> {
    let a = cross_attention(b, current, current, w)?;
    Ok((residual(b, current, &a.output.tokens)?, a.attention))
}

/// Visual branch: short -> long -> self -> feed-forward.
pub fn visual_branch<B: Backend>(
    b: &mut B,
    visual: &TokenMap<B::Value>,
    ctx: &PropagationContext<B::Value>,
    block: &BoundBlock<B::Value>,
) -> Result<(TokenMap<B::Value>, AttentionCache<B::Value>)> {
    let (x, short) = short_term_propagate(b, visual, ctx.prev_visual.as_ref(), &block.short_term)?;
    let (x, long) = long_term_propagate(b, &x, &ctx.memory, &block.long_term)?;
    let (x, self_prop) = self_propagate(b, &x, &block.self_prop)?;
    let ff = block.ffn.apply(b, &x.tokens)?;
    let out = residual(b, &x, &ff)?;
    Ok((
        out,
        AttentionCache {
            short,
            long,
            self_prop,
        },
    ))
}

fn check_cache<B: Backend>(b: &B, map: &B::Value, rows: usize, cols: usize, stage: &str) -> Result<()> {
    let s = b.shape(map);
    if s != [rows, cols] {
        return Err(Error::Usage(format!(
            "stale {stage} attention cache: {s:?}, expected [{rows}, {cols}]"
        )));
    }
    Ok(())
}

/// ID branch: applies cached attention maps to identity values.
pub fn id_branch<B: Backend>(
    b: &mut B,
    id: &TokenMap<B::Value>,
    ctx: &PropagationContext<B::Value>,
    cache: &AttentionCache<B::Value>,
    block: &BoundBlock<B::Value>,
) -> Result<TokenMap<B::Value>> {
    let mut x = id.clone();
    match (&ctx.prev_id, &cache.short) {
        (Some(prev), Some(a)) => {
            check_cache(b, a, x.len, prev.len, "short-term")?;
            let v = block.id_short.apply(b, &prev.tokens)?;
            let upd = b.matmul(a, &v)?;
            x = residual(b, &x, &upd)?;
        }
        (None, None) => {}
        (Some(_), None) if ctx.prev_visual.is_none() => {}
        _ => return Err(Error::Usage("short-term attention cache does not match context".into())),
    }
    check_cache(b, &cache.long, x.len, ctx.memory_id.len, "long-term")?;
    let v = block.id_long.apply(b, &ctx.memory_id.tokens)?;
    let upd = b.matmul(&cache.long, &v)?;
    x = residual(b, &x, &upd)?;

    check_cache(b, &cache.self_prop, x.len, x.len, "self")?;
    let v = block.id_self.apply(b, &x.tokens)?;
    let upd = b.matmul(&cache.self_prop, &v)?;
    x = residual(b, &x, &upd)?;

    let ff = block.id_ffn.apply(b, &x.tokens)?;
    residual(b, &x, &ff)
}

/// One block on both branches.
pub fn block_forward<B: Backend>(
    b: &mut B,
    input: &FrameFeatures<B::Value>,
    ctx: &PropagationContext<B::Value>,
    block: &BoundBlock<B::Value>,
) -> Result<(FrameFeatures<B::Value>, AttentionCache<B::Value>)> {
    if input.visual.len != input.id.len || input.visual.dim != input.id.dim {
        return Err(Error::dim(
            "block_forward",
            &[input.visual.len, input.visual.dim],
            &[input.id.len, input.id.dim],
        ));
    }
    let (visual, cache) = visual_branch(b, &input.visual, ctx, block)?;
    let id = id_branch(b, &input.id, ctx, &cache, block)?;
    Ok((FrameFeatures { visual, id }, cache))
}

/// Runs the block stack for one frame. Returns the output and each block's visual input.
pub fn trunk_forward<B: Backend>(
    b: &mut B,
    input: FrameFeatures<B::Value>,
    state: &mut PropagationState<B::Value>,
    blocks: &[BoundBlock<B::Value>],
) -> Result<(FrameFeatures<B::Value>, Vec<TokenMap<B::Value>>)> {
    if blocks.len() != state.depth() {
        return Err(Error::Usage(format!(
            "{} blocks but state tracks {} depths",
            blocks.len(),
            state.depth()
        )));
    }
    let mut x = input;
    let mut inputs = Vec::with_capacity(blocks.len());
    let memory = state.bank.context_tokens(b)?;
    let memory_id = state
        .bank
        .id_tokens(b)?
        .ok_or_else(|| Error::Usage("memory bank carries no identity embeddings".into()))?;
    for (depth, block) in blocks.iter().enumerate() {
        let ctx = PropagationContext {
            prev_visual: state.prev_visual[depth].clone(),
            prev_id: state.prev_id.clone(),
            memory: memory.clone(),
            memory_id: memory_id.clone(),
        };
        inputs.push(x.visual.clone());
        let (out, cache) = block_forward(b, &x, &ctx, block)?;
        state.caches[depth] = Some(cache);
        x = out;
    }
    Ok((x, inputs))
}
