//! Desk-scale segmentation pipeline: a strided patch encoder, identity
//! assignment, the propagation trunk, an upsampling decoder, the training
//! loss and the J / F / J&F metrics.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eager, Graph, SegLossTarget};
use crate::eltt::{trunk_forward, BoundBlock, ELSTTBlock, FrameFeatures, PropagationState, DEFAULT_BLOCKS};
use crate::error::{Error, Result};
use crate::fusion::{BoundLinear, Grid, TokenMap, DEFAULT_FOCAL_LEVELS};
use crate::memory::{MemoryBank, MemoryPolicy, MemoryStats, TRAIN_DELTA};
use crate::params::{decode_stream, encode_stream, join, Parameters};
use crate::synthgen::{Frame, VideoSequence};
use crate::tensor::{LinearProjection, Scalar, Tensor};

pub const MAX_OBJECTS: usize = 4;
pub const LOSS_EPS: f64 = 1e-7;
pub const TRAIN_UNROLL: usize = 8;

/// Per-pixel object labels: 0 is background, `k + 1` is object `k`.
///
/// A label map keeps the per-object masks disjoint by construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectMask {
    size: usize,
    objects: usize,
    labels: Vec<u8>,
}

impl ObjectMask {
    pub fn from_labels(size: usize, objects: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != size * size {
            return Err(Error::dim("ObjectMask", &[labels.len()], &[size * size]));
        }
        if objects > MAX_OBJECTS {
            return Err(Error::Validation(format!("{objects} objects exceed {MAX_OBJECTS}")));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize > objects) {
            return Err(Error::Validation(format!("label {l} outside 0..={objects}")));
        }
        Ok(Self { size, objects, labels })
    }

    pub fn empty(size: usize, objects: usize) -> Self {
        Self {
            size,
            objects,
            labels: vec![0; size * size],
        }
    }

    /// Builds a mask from one binary plane per object; overlapping planes are rejected.
    pub fn from_planes(size: usize, planes: &[Vec<bool>]) -> Result<Self> {
        let mut labels = vec![0u8; size * size];
        for (k, plane) in planes.iter().enumerate() {
            if plane.len() != size * size {
                return Err(Error::dim("ObjectMask plane", &[plane.len()], &[size * size]));
            }
            for (i, _) in plane.iter().enumerate().filter(|(_, &v)| v) {
                if labels[i] != 0 {
                    return Err(Error::Validation(format!(
                        "objects {} and {k} overlap at pixel {i}",
                        labels[i] - 1
                    )));
                }
                labels[i] = k as u8 + 1;
            }
        }
        Self::from_labels(size, planes.len(), labels)
    }

    /// Per-pixel argmax over background plus the first `objects` channels of `[G*G, C]` logits.
    pub fn from_logits<T: Scalar>(logits: &Tensor<T>, size: usize, objects: usize) -> Result<Self> {
        let (rows, ch) = logits.rows_cols();
        if rows != size * size || ch <= objects {
            return Err(Error::dim("ObjectMask::from_logits", logits.shape(), &[size * size, objects + 1]));
        }
        let labels = logits
            .data()
            .chunks_exact(ch)
            .map(|row| {
                let mut best = 0;
                for c in 1..=objects {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Ok(Self { size, objects, labels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn objects(&self) -> usize {
        self.objects
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.size + x] as usize
    }

    pub fn area(&self, object: usize) -> usize {
        self.labels.iter().filter(|&&l| l as usize == object + 1).count()
    }

    pub fn plane(&self, object: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l as usize == object + 1).collect()
    }

    /// Relabels objects not in `keep` as background.
    pub fn restrict(&self, keep: &[bool]) -> Self {
        let labels = self
            .labels
            .iter()
            .map(|&l| if l > 0 && !keep[l as usize - 1] { 0 } else { l })
            .collect();
        Self { labels, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    /// Frame side length G.
    pub grid: usize,
    /// Encoder stride s; tokens form a `(G/s) x (G/s)` grid.
    pub stride: usize,
    pub dim: usize,
    pub levels: usize,
    pub blocks: usize,
    pub max_objects: usize,
    pub decoder_hidden: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            grid: 64,
            stride: 16,
            dim: 32,
            levels: DEFAULT_FOCAL_LEVELS,
            blocks: DEFAULT_BLOCKS,
            max_objects: MAX_OBJECTS,
            decoder_hidden: 32,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride < 2 || !self.stride.is_power_of_two() {
            return Err(Error::Config(format!("stride {} must be a power of two >= 2", self.stride)));
        }
        if self.grid == 0 || !self.grid.is_multiple_of(self.stride) {
            return Err(Error::Config(format!("grid {} not divisible by stride {}", self.grid, self.stride)));
        }
        if self.dim == 0 || self.levels == 0 || self.blocks == 0 || self.decoder_hidden == 0 {
            return Err(Error::Config("dim, levels, blocks and decoder_hidden must be positive".into()));
        }
        if self.max_objects == 0 || self.max_objects > MAX_OBJECTS {
            return Err(Error::Config(format!("max_objects must lie in 1..={MAX_OBJECTS}")));
        }
        Ok(())
    }

    pub fn token_grid(&self) -> Grid {
        let side = self.grid / self.stride;
        Grid::new(side, side)
    }
}

/// Patchify stages: each is a 2x2 space-to-depth followed by a projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder<T = f64> {
    pub stages: Vec<LinearProjection<T>>,
}

impl<T: Scalar> ToyEncoder<T> {
    pub fn init<R: Rng>(cfg: &SegmenterConfig, rng: &mut R) -> Self {
        let n = cfg.stride.trailing_zeros() as usize;
        let mut c_in = 3;
        let stages = (0..n)
            .map(|i| {
                let out = if i + 1 == n { cfg.dim } else { cfg.dim.min(8 << i) };
                let p = LinearProjection::init(4 * c_in, out, rng);
                c_in = out;
                p
            })
            .collect();
        Self { stages }
    }
}

/// `N_max` learnable identity vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct IdBank<T = f64> {
    /// `[N_max, D]`
    pub vectors: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDecoder<T = f64> {
    /// `2D -> H` on tokens, before upsampling.
    pub fuse: LinearProjection<T>,
    /// `H + 3 -> H` per pixel, with the frame's RGB appended.
    pub head: LinearProjection<T>,
    /// `H -> N_max + 1`
    pub out: LinearProjection<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter<T = f64> {
    pub config: SegmenterConfig,
    pub encoder: ToyEncoder<T>,
    pub id_bank: IdBank<T>,
    pub blocks: Vec<ELSTTBlock<T>>,
    pub decoder: ToyDecoder<T>,
}

impl<T: Scalar> Segmenter<T> {
    pub fn init(config: SegmenterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let h = config.decoder_hidden;
        Ok(Self {
            encoder: ToyEncoder::init(&config, &mut rng),
            id_bank: IdBank {
                vectors: Tensor::uniform(&[config.max_objects, d], 1.0, &mut rng),
            },
            blocks: (0..config.blocks).map(|_| ELSTTBlock::init(d, config.levels, &mut rng)).collect(),
            decoder: ToyDecoder {
                fuse: LinearProjection::init(2 * d, h, &mut rng),
                head: LinearProjection::init(h + 3, h, &mut rng),
                out: LinearProjection::init(h, config.max_objects + 1, &mut rng),
            },
            config,
        })
    }

    /// Registers every tensor on `b`, in [`Parameters::visit`] order.
    pub fn bind<B: Backend<Scalar = T>>(&self, b: &mut B) -> BoundSegmenter<B::Value> {
        BoundSegmenter {
            config: self.config.clone(),
            encoder: self.encoder.stages.iter().map(|p| BoundLinear::bind(p, b)).collect(),
            id_bank: b.param(&self.id_bank.vectors),
            blocks: self.blocks.iter().map(|blk| blk.bind(b)).collect(),
            fuse: BoundLinear::bind(&self.decoder.fuse, b),
            head: BoundLinear::bind(&self.decoder.head, b),
            out: BoundLinear::bind(&self.decoder.out, b),
        }
    }
}

impl<T: Scalar> Parameters<T> for Segmenter<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, s) in self.encoder.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("encoder.stage{i}")), f);
        }
        f(&join(prefix, "id_bank"), &self.id_bank.vectors);
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.decoder.fuse.visit(&join(prefix, "decoder.fuse"), f);
        self.decoder.head.visit(&join(prefix, "decoder.head"), f);
        self.decoder.out.visit(&join(prefix, "decoder.out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, s) in self.encoder.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("encoder.stage{i}")), f);
        }
        f(&join(prefix, "id_bank"), &mut self.id_bank.vectors);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.decoder.fuse.visit_mut(&join(prefix, "decoder.fuse"), f);
        self.decoder.head.visit_mut(&join(prefix, "decoder.head"), f);
        self.decoder.out.visit_mut(&join(prefix, "decoder.out"), f);
    }
}

/// One-hot `[T, N_max]` assignment: each token takes the label covering most of its cell.
///
/// Ties go to the lower label, so an evenly split cell prefers background.
pub fn id_assignment<T: Scalar>(mask: &ObjectMask, grid: Grid, max_objects: usize) -> Result<Tensor<T>> {
    let g = mask.size();
    if grid.h == 0 || grid.w == 0 || !g.is_multiple_of(grid.h) || !g.is_multiple_of(grid.w) {
        return Err(Error::dim("assign_id", &[g, g], &[grid.h, grid.w]));
    }
    if mask.objects() > max_objects {
        return Err(Error::Validation(format!(
            "mask has {} objects, identity bank holds {max_objects}",
            mask.objects()
        )));
    }
    let (ch, cw) = (g / grid.h, g / grid.w);
    let mut counts = vec![0usize; grid.h * grid.w * (max_objects + 1)];
    for y in 0..g {
        for x in 0..g {
            let cell = (y / ch) * grid.w + x / cw;
            counts[cell * (max_objects + 1) + mask.label(x, y)] += 1;
        }
    }
    let mut out = Tensor::zeros(&[grid.h * grid.w, max_objects]);
    for (cell, c) in counts.chunks_exact(max_objects + 1).enumerate() {
        let mut best = 0;
        for l in 1..c.len() {
            if c[l] > c[best] {
                best = l;
            }
        }
        if best > 0 {
            out.data_mut()[cell * max_objects + best - 1] = T::one();
        }
    }
    Ok(out)
}

/// Identity embedding `[T, D]`: each token gets its majority object's vector, background zero.
pub fn assign_id<B: Backend>(
    b: &mut B,
    id_bank: &B::Value,
    mask: &ObjectMask,
    grid: Grid,
) -> Result<TokenMap<B::Value>> {
    let shape = b.shape(id_bank);
    let [n, d] = shape[..] else {
        return Err(Error::Shape {
            shape,
            reason: "identity bank must be [N_max, D]".into(),
        });
    };
    let onehot = b.constant(id_assignment(mask, grid, n)?);
    let tokens = b.matmul(&onehot, id_bank)?;
    Ok(TokenMap::with_grid(tokens, grid, d))
}

/// [`Segmenter`] registered on a backend.
#[derive(Clone, Debug)]
pub struct BoundSegmenter<V> {
    pub config: SegmenterConfig,
    pub encoder: Vec<BoundLinear<V>>,
    pub id_bank: V,
    pub blocks: Vec<BoundBlock<V>>,
    pub fuse: BoundLinear<V>,
    pub head: BoundLinear<V>,
    pub out: BoundLinear<V>,
}

/// Streaming state for one video.
#[derive(Clone, Debug)]
pub struct StreamState<V> {
    pub propagation: PropagationState<V>,
    pub frame_index: usize,
    pub objects: usize,
}

#[derive(Clone, Debug)]
pub struct FrameOutput<V> {
    /// `[G*G, N_max + 1]`
    pub logits: V,
    pub mask: ObjectMask,
}

impl<V: Clone> BoundSegmenter<V> {
    /// `[G, G, 3] -> (G/s)^2` tokens of width D.
    pub fn encode<B: Backend<Value = V>>(&self, b: &mut B, frame: &V) -> Result<TokenMap<V>> {
        let g = self.config.grid;
        let shape = b.shape(frame);
        if shape != [g, g, 3] {
            return Err(Error::dim("encode", &shape, &[g, g, 3]));
        }
        let mut x = frame.clone();
        let mut side = g;
        let n = self.encoder.len();
        for (i, stage) in self.encoder.iter().enumerate() {
            x = b.space_to_depth(&x, 2)?;
            side /= 2;
            let c = b.shape(&x)[2];
            x = b.reshape(&x, &[side * side, c])?;
            x = stage.apply(b, &x)?;
            if i + 1 < n {
                x = b.gelu(&x)?;
                let c = b.shape(&x)[1];
                x = b.reshape(&x, &[side, side, c])?;
            }
        }
        Ok(TokenMap::with_grid(x, Grid::new(side, side), self.config.dim))
    }

    /// Per-pixel logits `[G*G, N_max + 1]`.
    pub fn decode<B: Backend<Value = V>>(
        &self,
        b: &mut B,
        visual: &TokenMap<V>,
        id: &TokenMap<V>,
        frame: &V,
    ) -> Result<V> {
        let cfg = &self.config;
        let grid = cfg.token_grid();
        let x = b.concat_last(&[&visual.tokens, &id.tokens])?;
        let x = self.fuse.apply(b, &x)?;
        let x = b.gelu(&x)?;
        let x = b.reshape(&x, &[grid.h, grid.w, cfg.decoder_hidden])?;
        let x = b.upsample(&x, cfg.stride)?;
        let pixels = cfg.grid * cfg.grid;
        let x = b.reshape(&x, &[pixels, cfg.decoder_hidden])?;
        let rgb = b.reshape(frame, &[pixels, 3])?;
        let x = b.concat_last(&[&x, &rgb])?;
        let x = self.head.apply(b, &x)?;
        let x = b.gelu(&x)?;
        self.out.apply(b, &x)
    }

    fn zero_id<B: Backend<Value = V>>(&self, b: &mut B) -> TokenMap<V> {
        let grid = self.config.token_grid();
        let z = b.constant(Tensor::zeros(&[grid.tokens(), self.config.dim]));
        TokenMap::with_grid(z, grid, self.config.dim)
    }

    /// Initializes streaming state from the reference frame and its mask.
    ///
    /// The reference frame passes through the trunk once, attending to its own
    /// encoder features, so that memory holds post-trunk features throughout.
    pub fn start<B: Backend<Value = V>>(
        &self,
        b: &mut B,
        frame: &V,
        mask: &ObjectMask,
        policy: MemoryPolicy,
        delta: usize,
    ) -> Result<StreamState<V>> {
        if mask.size() != self.config.grid {
            return Err(Error::dim("start", &[mask.size()], &[self.config.grid]));
        }
        let grid = self.config.token_grid();
        let encoded = self.encode(b, frame)?;
        let id = assign_id(b, &self.id_bank, mask, grid)?;
        let bank = MemoryBank::init::<B::Scalar>(encoded.clone(), Some(id.clone()), policy, delta)?;
        let mut prop = PropagationState::new(bank, self.blocks.len());
        let input = FrameFeatures {
            visual: encoded,
            id: self.zero_id(b),
        };
        let (out, inputs) = trunk_forward(b, input, &mut prop, &self.blocks)?;
        let bank = MemoryBank::init::<B::Scalar>(out.visual, Some(id.clone()), policy, delta)?;
        let mut propagation = PropagationState::new(bank, self.blocks.len());
        propagation.prev_visual = inputs.into_iter().map(Some).collect();
        propagation.prev_id = Some(id);
        Ok(StreamState {
            propagation,
            frame_index: 0,
            objects: mask.objects(),
        })
    }

    /// Segments the next frame and advances `state`.
    pub fn segment_frame<B: Backend<Value = V>>(
        &self,
        b: &mut B,
        frame: &V,
        state: &mut StreamState<V>,
    ) -> Result<FrameOutput<V>> {
        let t = state.frame_index + 1;
        let visual = self.encode(b, frame)?;
        let input = FrameFeatures {
            visual,
            id: self.zero_id(b),
        };
        let (out, inputs) = trunk_forward(b, input, &mut state.propagation, &self.blocks)?;
        let logits = self.decode(b, &out.visual, &out.id, frame)?;
        let mask = ObjectMask::from_logits(b.get(&logits), self.config.grid, state.objects)?;
        let id = assign_id(b, &self.id_bank, &mask, self.config.token_grid())?;
        let p = &mut state.propagation;
        p.prev_visual = inputs.into_iter().map(Some).collect();
        p.prev_id = Some(id.clone());
        p.bank.observe(b, Some(&self.blocks[0].long_term), t, out.visual, Some(id))?;
        state.frame_index = t;
        Ok(FrameOutput { logits, mask })
    }
}

/// Inference engine: weights bound once on an eager backend, plus one video's state.
#[derive(Clone, Debug)]
pub struct Tracker<T: Scalar = f64> {
    backend: Eager<T>,
    bound: BoundSegmenter<Arc<Tensor<T>>>,
    state: Option<StreamState<Arc<Tensor<T>>>>,
    policy: MemoryPolicy,
    delta: usize,
}

impl<T: Scalar> Tracker<T> {
    pub fn new(model: &Segmenter<T>, policy: MemoryPolicy, delta: usize) -> Result<Self> {
        if delta == 0 {
            return Err(Error::Validation("delta must be >= 1".into()));
        }
        let mut backend = Eager::new();
        let bound = model.bind(&mut backend);
        Ok(Self {
            backend,
            bound,
            state: None,
            policy,
            delta,
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.bound.config
    }

    pub fn reset(&mut self, frame: &Frame, mask: &ObjectMask) -> Result<()> {
        let f = self.frame_value(frame)?;
        self.state = Some(self.bound.start(&mut self.backend, &f, mask, self.policy, self.delta)?);
        Ok(())
    }

    fn frame_value(&mut self, frame: &Frame) -> Result<Arc<Tensor<T>>> {
        if frame.grid != self.bound.config.grid {
            return Err(Error::Config(format!(
                "frame is {0}x{0}, model expects {1}x{1}",
                frame.grid, self.bound.config.grid
            )));
        }
        Ok(self.backend.constant(frame.to_tensor()))
    }

    /// Segments the next frame; returns the logits and the predicted mask.
    pub fn step_logits(&mut self, frame: &Frame) -> Result<(Arc<Tensor<T>>, ObjectMask)> {
        let f = self.frame_value(frame)?;
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| Error::Usage("tracker has no reference frame; call reset first".into()))?;
        let out = self.bound.segment_frame(&mut self.backend, &f, state)?;
        Ok((out.logits, out.mask))
    }

    pub fn step(&mut self, frame: &Frame) -> Result<ObjectMask> {
        Ok(self.step_logits(frame)?.1)
    }

    pub fn memory_stats(&self) -> Option<MemoryStats> {
        self.state.as_ref().map(|s| s.propagation.bank.stats())
    }

    pub fn frame_index(&self) -> Option<usize> {
        self.state.as_ref().map(|s| s.frame_index)
    }
}

/// One-hot loss target over background plus the listed objects (0-based).
pub fn loss_target<T: Scalar>(mask: &ObjectMask, channels: usize, objects: &[usize]) -> Result<Arc<SegLossTarget<T>>> {
    if objects.iter().any(|&o| o + 1 >= channels) {
        return Err(Error::Usage(format!("objects {objects:?} outside {channels} channels")));
    }
    let mut target = Tensor::zeros(&[mask.labels().len(), channels]);
    for (p, &l) in mask.labels().iter().enumerate() {
        target.data_mut()[p * channels + l as usize] = T::one();
    }
    let mut list = vec![0];
    list.extend(objects.iter().map(|o| o + 1));
    Ok(Arc::new(SegLossTarget {
        target,
        channels: list,
        eps: LOSS_EPS,
    }))
}

/// `0.5 * BCE + 0.5 * soft Jaccard`, averaged over background and the listed objects.
pub fn frame_loss<B: Backend>(
    b: &mut B,
    logits: &B::Value,
    mask: &ObjectMask,
    objects: &[usize],
) -> Result<B::Value> {
    let channels = b.shape(logits).last().copied().unwrap_or(0);
    let target = loss_target(mask, channels, objects)?;
    b.seg_loss(logits, target)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub unroll: usize,
    pub delta: usize,
    /// Unrolls sample every k-th frame with k drawn from `1..=max_stride`.
    pub max_stride: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    pub seed: u64,
    pub policy: MemoryPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 0.1,
            momentum: 0.9,
            unroll: TRAIN_UNROLL,
            delta: TRAIN_DELTA,
            max_stride: 3,
            clip: 1.0,
            seed: 0,
            policy: MemoryPolicy::Mca,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unroll < 2 || self.delta == 0 || self.max_stride == 0 {
            return Err(Error::Config("unroll >= 2, delta >= 1 and max_stride >= 1 required".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) || self.clip < 0.0 {
            return Err(Error::Config("lr >= 0, momentum in [0, 1) and clip >= 0 required".into()));
        }
        Ok(())
    }
}

/// Momentum SGD state.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new<P: Parameters<T>>(model: &P) -> Self {
        let mut velocity = Vec::new();
        model.visit("", &mut |_, t| velocity.push(Tensor::zeros(t.shape())));
        Self { velocity }
    }

    /// `v = m v + g; w -= lr v`, after scaling `grads` down to norm `clip` if it is exceeded.
    pub fn step<P: Parameters<T>>(&mut self, model: &mut P, grads: &[Tensor<T>], cfg: &TrainConfig) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::Usage(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.velocity.len()
            )));
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        let scale = T::lit(if cfg.clip > 0.0 && norm > cfg.clip { cfg.clip / norm } else { 1.0 });
        let (lr, m) = (T::lit(cfg.lr), T::lit(cfg.momentum));
        let mut i = 0;
        let velocity = &mut self.velocity;
        model.visit_mut("", &mut |_, w| {
            let v = velocity[i].data_mut();
            for ((w, v), g) in w.data_mut().iter_mut().zip(v).zip(grads[i].data()) {
                *v = m * *v + *g * scale;
                *w = *w - lr * *v;
            }
            i += 1;
        });
        Ok(())
    }
}

/// Frames of one training unroll.
#[derive(Clone, Debug)]
pub struct Unroll {
    pub video: usize,
    pub frames: Vec<usize>,
}

pub fn sample_unroll<R: Rng>(rng: &mut R, videos: &[VideoSequence], cfg: &TrainConfig) -> Result<Unroll> {
    let usable: Vec<usize> = (0..videos.len()).filter(|&i| videos[i].len() >= cfg.unroll).collect();
    if usable.is_empty() {
        return Err(Error::Validation(format!("no training video has {} frames", cfg.unroll)));
    }
    let video = usable[rng.gen_range(0..usable.len())];
    let len = videos[video].len();
    let max_stride = cfg.max_stride.min((len - 1) / (cfg.unroll - 1)).max(1);
    let stride = rng.gen_range(1..=max_stride);
    let span = (cfg.unroll - 1) * stride;
    let start = rng.gen_range(0..len - span);
    Ok(Unroll {
        video,
        frames: (0..cfg.unroll).map(|i| start + i * stride).collect(),
    })
}

/// Loss of one unroll on a fresh tape. The first frame is the reference;
/// later frames are segmented from predicted masks.
pub fn unroll_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Segmenter<T>,
    video: &VideoSequence,
    frames: &[usize],
    cfg: &TrainConfig,
) -> Result<crate::autodiff::Var> {
    let bound = model.bind(g);
    let reference = &video.masks[frames[0]];
    let keep: Vec<bool> = (0..reference.objects()).map(|k| reference.area(k) > 0).collect();
    let tracked: Vec<usize> = (0..keep.len()).filter(|&k| keep[k]).collect();
    let f0 = g.constant(video.frames[frames[0]].to_tensor());
    let mut state = bound.start(g, &f0, reference, cfg.policy, cfg.delta)?;
    let mut total = None;
    for &t in &frames[1..] {
        let f = g.constant(video.frames[t].to_tensor());
        let out = bound.segment_frame(g, &f, &mut state)?;
        let l = frame_loss(g, &out.logits, &video.masks[t].restrict(&keep), &tracked)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(&acc, &l)?,
        });
    }
    let total = total.expect("unroll >= 2");
    g.scale(&total, T::lit(1.0 / (frames.len() - 1) as f64))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// `step,loss` rows with LF endings.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "{i},{l:.10e}");
        }
        s
    }
}

/// Trains in place. `on_step` sees each step's loss as it is computed.
pub fn train<T: Scalar>(
    model: &mut Segmenter<T>,
    videos: &[VideoSequence],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    for v in videos {
        if v.script.grid != model.config.grid {
            return Err(Error::Config(format!(
                "video '{}' is {}x{}, model expects {}",
                v.script.name, v.script.grid, v.script.grid, model.config.grid
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(model);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let unroll = sample_unroll(&mut rng, videos, cfg)?;
        let mut g = Graph::new();
        let loss = unroll_loss(&mut g, model, &videos[unroll.video], &unroll.frames, cfg)?;
        let value = g.get(&loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::Numeric {
                op: "train",
                reason: format!(
                    "loss {value} at step {step} (video '{}', frames {:?})",
                    videos[unroll.video].script.name, unroll.frames
                ),
            });
        }
        let grads = g.backward(loss)?.params();
        opt.step(model, &grads, cfg)?;
        report.losses.push(value);
        on_step(step, value);
    }
    Ok(report)
}

/// `|P ∩ G| / |P ∪ G|`, 1 when both are empty.
pub fn j_metric(pred: &[bool], gt: &[bool]) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(&p, &g)| p && g).count();
    let union = pred.iter().zip(gt).filter(|(&p, &g)| p || g).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mask cells with a 4-neighbor outside the mask or on the image edge.
pub fn boundary(mask: &[bool], size: usize) -> Vec<bool> {
    let at = |x: isize, y: isize| {
        x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size && mask[y as usize * size + x as usize]
    };
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as isize, (i / size) as isize);
            mask[i] && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|&(dx, dy)| !at(x + dx, y + dy))
        })
        .collect()
}

const TOLERANCE_DISK: [(isize, isize); 5] = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)];

fn matched_fraction(from: &[bool], to: &[bool], size: usize) -> f64 {
    let n = from.iter().filter(|&&v| v).count();
    let hit = (0..size * size)
        .filter(|&i| from[i])
        .filter(|&i| {
            let (x, y) = ((i % size) as isize, (i / size) as isize);
            TOLERANCE_DISK.iter().any(|&(dx, dy)| {
                let (u, v) = (x + dx, y + dy);
                u >= 0 && v >= 0 && (u as usize) < size && (v as usize) < size && to[v as usize * size + u as usize]
            })
        })
        .count();
    hit as f64 / n as f64
}

/// Boundary F-measure with a 1-pixel matching radius.
pub fn f_metric(pred: &[bool], gt: &[bool], size: usize) -> f64 {
    let bp = boundary(pred, size);
    let bg = boundary(gt, size);
    match (bp.iter().any(|&v| v), bg.iter().any(|&v| v)) {
        (false, false) => 1.0,
        (true, false) | (false, true) => 0.0,
        (true, true) => {
            let precision = matched_fraction(&bp, &bg, size);
            let recall = matched_fraction(&bg, &bp, size);
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JfScore {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

/// Mean J and F over the objects of one frame.
pub fn frame_scores(pred: &ObjectMask, gt: &ObjectMask) -> Result<JfScore> {
    if pred.size() != gt.size() || pred.objects() != gt.objects() {
        return Err(Error::dim(
            "frame_scores",
            &[pred.size(), pred.objects()],
            &[gt.size(), gt.objects()],
        ));
    }
    let n = gt.objects();
    if n == 0 {
        return Ok(JfScore { j: 1.0, f: 1.0, jf: 1.0 });
    }
    let (mut j, mut f) = (0.0, 0.0);
    for k in 0..n {
        let (p, g) = (pred.plane(k), gt.plane(k));
        j += j_metric(&p, &g);
        f += f_metric(&p, &g, gt.size());
    }
    let (j, f) = (j / n as f64, f / n as f64);
    Ok(JfScore { j, f, jf: (j + f) / 2.0 })
}

/// J, F and their mean, averaged over objects then frames.
pub fn jf_score(pred: &[ObjectMask], gt: &[ObjectMask]) -> Result<JfScore> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::dim("jf_score", &[pred.len()], &[gt.len()]));
    }
    let mut acc = JfScore::default();
    for (p, g) in pred.iter().zip(gt) {
        let s = frame_scores(p, g)?;
        acc.j += s.j;
        acc.f += s.f;
    }
    let n = gt.len() as f64;
    let (j, f) = (acc.j / n, acc.f / n);
    Ok(JfScore { j, f, jf: (j + f) / 2.0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub name: String,
    pub frames: usize,
    #[serde(flatten)]
    pub score: JfScore,
}

/// Streams a video from its first frame and scores frames 1.. against ground truth.
pub fn evaluate_video<T: Scalar>(
    model: &Segmenter<T>,
    video: &VideoSequence,
    policy: MemoryPolicy,
    delta: usize,
    mut on_frame: impl FnMut(usize, &ObjectMask),
) -> Result<VideoScore> {
    if video.script.grid != model.config.grid {
        return Err(Error::Config(format!(
            "video grid {} does not match model grid {}",
            video.script.grid, model.config.grid
        )));
    }
    if video.len() < 2 {
        return Err(Error::Validation("evaluation needs at least two frames".into()));
    }
    let mut tracker = Tracker::new(model, policy, delta)?;
    tracker.reset(&video.frames[0], &video.masks[0])?;
    let mut preds = Vec::with_capacity(video.len() - 1);
    for t in 1..video.len() {
        let m = tracker.step(&video.frames[t])?;
        on_frame(t, &m);
        preds.push(m);
    }
    Ok(VideoScore {
        name: video.script.name.clone(),
        frames: preds.len(),
        score: jf_score(&preds, &video.masks[1..])?,
    })
}

const CHECKPOINT_KIND: &str = "segmenter";

pub fn encode_checkpoint<T: Scalar>(model: &Segmenter<T>) -> Result<Vec<u8>> {
    let meta = serde_json::json!({ "kind": CHECKPOINT_KIND, "config": model.config });
    encode_stream(meta, &model.tensors())
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Segmenter<T>> {
    let (meta, tensors) = decode_stream::<T>(bytes)?;
    if meta["kind"] != CHECKPOINT_KIND {
        return Err(Error::Config(format!("not a segmenter checkpoint (kind {})", meta["kind"])));
    }
    let config: SegmenterConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
    let mut model = Segmenter::init(config, 0)?;
    model.load_tensors(&tensors)?;
    Ok(model)
}

/// Binary PGM (P5) of one object plane: 255 inside, 0 outside.
pub fn encode_pgm(plane: &[bool], size: usize) -> Vec<u8> {
    let mut out = format!("P5\n{size} {size}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| if v { 255u8 } else { 0 }));
    out
}

pub fn write_pgm(path: &Path, plane: &[bool], size: usize) -> Result<()> {
    std::fs::write(path, encode_pgm(plane, size))?;
    Ok(())
}
