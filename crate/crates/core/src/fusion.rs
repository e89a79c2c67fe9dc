//! Fusion operators between a target token map and a memory context.
//!
//! * cross-attention: `softmax(f_q(t) f_k(c)^T / sqrt(d_k)) f_v(c)`
//! * focal modulation: `f_q(t) * f_fm(GA(HC(c)))`
//! * modulated cross-attention: `softmax(f_q(t) f_k(c)^T / sqrt(d_k)) f_fm(GA(HC(c)))`
//!
//! Hierarchical contextualization (HC) projects the context with `f_z`, then
//! stacks `L` depthwise 3x3 convolutions with GeLU and appends a globally
//! pooled level. Gated aggregation (GA) sums levels `1..=L+1`, each scaled by
//! one channel of `f_g(c)`.

use rand::Rng;

use crate::autodiff::Backend;
use crate::error::{Error, Result};
use crate::params::{join, Parameters};
use crate::tensor::{DepthwiseKernel, LinearProjection, Scalar, Tensor};

pub const DEFAULT_FOCAL_LEVELS: usize = 2;
pub const FOCAL_KERNEL: usize = 3;

/// Spatial layout of a token sequence: `frames` stacked `h x w` grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(h: usize, w: usize) -> Self {
        Self { frames: 1, h, w }
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.h * self.w
    }

    pub fn per_frame(&self) -> usize {
        self.h * self.w
    }
}

/// Tokens `[T, D]` plus the grid they were flattened from, if any.
#[derive(Clone, Debug)]
pub struct TokenMap<V> {
    pub tokens: V,
    pub len: usize,
    pub dim: usize,
    pub grid: Option<Grid>,
}

impl<V: Clone> TokenMap<V> {
    pub fn with_grid(tokens: V, grid: Grid, dim: usize) -> Self {
        Self {
            tokens,
            len: grid.tokens(),
            dim,
            grid: Some(grid),
        }
    }

    /// A flat sequence without spatial structure.
    pub fn sequence(tokens: V, len: usize, dim: usize) -> Self {
        Self {
            tokens,
            len,
            dim,
            grid: None,
        }
    }

    pub fn replace_tokens(&self, tokens: V) -> Self {
        Self {
            tokens,
            ..self.clone()
        }
    }

    /// Builds a map from a backend value, reading `[T, D]` off its shape.
    pub fn from_value<B: Backend<Value = V>>(b: &B, tokens: V, grid: Option<Grid>) -> Result<Self> {
        let shape = b.shape(&tokens);
        let [len, dim] = shape[..] else {
            return Err(Error::Shape {
                shape,
                reason: "token map must be [T, D]".into(),
            });
        };
        if let Some(g) = grid {
            if g.tokens() != len {
                return Err(Error::Usage(format!(
                    "grid {g:?} holds {} tokens, tensor has {len}",
                    g.tokens()
                )));
            }
        }
        Ok(Self { tokens, len, dim, grid })
    }
}

/// Learned parameters of one fusion operator.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights<T = f64> {
    pub f_q: LinearProjection<T>,
    pub f_k: LinearProjection<T>,
    pub f_v: LinearProjection<T>,
    pub f_z: LinearProjection<T>,
    pub f_fm: LinearProjection<T>,
    /// `D -> L + 1` gating projection.
    pub f_g: LinearProjection<T>,
    pub kernels: Vec<DepthwiseKernel<T>>,
}

impl<T: Scalar> FusionWeights<T> {
    pub fn init<R: Rng>(dim: usize, levels: usize, rng: &mut R) -> Self {
        assert!(levels >= 1, "focal levels must be >= 1");
        Self {
            f_q: LinearProjection::init(dim, dim, rng),
            f_k: LinearProjection::init(dim, dim, rng),
            f_v: LinearProjection::init(dim, dim, rng),
            f_z: LinearProjection::init(dim, dim, rng),
            f_fm: LinearProjection::init(dim, dim, rng),
            f_g: LinearProjection::init(dim, levels + 1, rng),
            kernels: (0..levels)
                .map(|_| DepthwiseKernel::init(FOCAL_KERNEL, dim, rng))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.f_q.d_in()
    }

    pub fn levels(&self) -> usize {
        self.kernels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let l = self.levels();
        if l == 0 {
            return Err(Error::Validation("fusion needs at least one focal level".into()));
        }
        for (name, p) in [
            ("f_q", &self.f_q),
            ("f_k", &self.f_k),
            ("f_v", &self.f_v),
            ("f_z", &self.f_z),
            ("f_fm", &self.f_fm),
        ] {
            if p.d_in() != d || p.d_out() != d {
                return Err(Error::Validation(format!("{name} must be {d} -> {d}")));
            }
        }
        if self.f_g.d_in() != d || self.f_g.d_out() != l + 1 {
            return Err(Error::Validation(format!("f_g must be {d} -> {}", l + 1)));
        }
        if self.kernels.iter().any(|k| k.channels() != d) {
            return Err(Error::Validation(format!("depthwise kernels must have {d} channels")));
        }
        Ok(())
    }

    pub fn bind<B: Backend<Scalar = T>>(&self, b: &mut B) -> BoundFusion<B::Value> {
        BoundFusion {
            q: BoundLinear::bind(&self.f_q, b),
            k: BoundLinear::bind(&self.f_k, b),
            v: BoundLinear::bind(&self.f_v, b),
            z: BoundLinear::bind(&self.f_z, b),
            fm: BoundLinear::bind(&self.f_fm, b),
            g: BoundLinear::bind(&self.f_g, b),
            kernels: self.kernels.iter().map(|k| b.param(&k.weights)).collect(),
            dim: self.dim(),
            levels: self.levels(),
        }
    }
}

impl<T: Scalar> Parameters<T> for LinearProjection<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

impl<T: Scalar> Parameters<T> for FusionWeights<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.f_q.visit(&join(prefix, "f_q"), f);
        self.f_k.visit(&join(prefix, "f_k"), f);
        self.f_v.visit(&join(prefix, "f_v"), f);
        self.f_z.visit(&join(prefix, "f_z"), f);
        self.f_fm.visit(&join(prefix, "f_fm"), f);
        self.f_g.visit(&join(prefix, "f_g"), f);
        for (i, k) in self.kernels.iter().enumerate() {
            f(&join(prefix, &format!("dwconv{i}")), &k.weights);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.f_q.visit_mut(&join(prefix, "f_q"), f);
        self.f_k.visit_mut(&join(prefix, "f_k"), f);
        self.f_v.visit_mut(&join(prefix, "f_v"), f);
        self.f_z.visit_mut(&join(prefix, "f_z"), f);
        self.f_fm.visit_mut(&join(prefix, "f_fm"), f);
        self.f_g.visit_mut(&join(prefix, "f_g"), f);
        for (i, k) in self.kernels.iter_mut().enumerate() {
            f(&join(prefix, &format!("dwconv{i}")), &mut k.weights);
        }
    }
}

/// A [`LinearProjection`] registered on a backend.
#[derive(Clone, Debug)]
pub struct BoundLinear<V> {
    pub weight: V,
    pub bias: Option<V>,
}

impl<V: Clone> BoundLinear<V> {
    pub fn bind<B: Backend<Value = V>>(p: &LinearProjection<B::Scalar>, b: &mut B) -> Self {
        let weight = b.param(&p.weight);
        let bias = p.bias.as_ref().map(|t| b.param(t));
        Self { weight, bias }
    }

    pub fn apply<B: Backend<Value = V>>(&self, b: &mut B, x: &V) -> Result<V> {
        b.linear(x, &self.weight, self.bias.as_ref())
    }
}

/// [`FusionWeights`] registered on a backend.
#[derive(Clone, Debug)]
pub struct BoundFusion<V> {
    pub q: BoundLinear<V>,
    pub k: BoundLinear<V>,
    pub v: BoundLinear<V>,
    pub z: BoundLinear<V>,
    pub fm: BoundLinear<V>,
    pub g: BoundLinear<V>,
    pub kernels: Vec<V>,
    pub dim: usize,
    pub levels: usize,
}

/// Output of an attention-style fusion, with the row-stochastic weights used.
#[derive(Clone, Debug)]
pub struct Attended<V> {
    pub output: TokenMap<V>,
    /// `[T_target, T_context]`
    pub attention: V,
}

/// `Z^0 .. Z^L` as `[F, H, W, D]` maps plus the pooled `Z^{L+1}` as `[F, D]`.
#[derive(Clone, Debug)]
pub struct FocalLevels<V> {
    pub maps: Vec<V>,
    pub global: V,
    pub grid: Grid,
}

fn check_dims<V>(target: &TokenMap<V>, context: &TokenMap<V>, w: &BoundFusion<V>) -> Result<()> {
    if target.dim != w.dim || context.dim != w.dim {
        return Err(Error::dim(
            "fusion",
            &[target.len, target.dim],
            &[context.len, context.dim],
        ));
    }
    Ok(())
}

/// `softmax(f_q(target) f_k(context)^T / sqrt(d_k))`
pub fn attention_weights<B: Backend>(
    b: &mut B,
    target: &TokenMap<B::Value>,
    context: &TokenMap<B::Value>,
    w: &BoundFusion<B::Value>,
) -> Result<B::Value> {
    check_dims(target, context, w)?;
    let q = w.q.apply(b, &target.tokens)?;
    let k = w.k.apply(b, &context.tokens)?;
    let scores = b.matmul_nt(&q, &k)?;
    let scaled = b.scale(&scores, B::Scalar::lit(1.0 / (w.dim as f64).sqrt()))?;
    b.softmax_rows(&scaled)
}

pub fn cross_attention<B: Backend>(
    b: &mut B,
    target: &TokenMap<B::Value>,
    context: &TokenMap<B::Value>,
    w: &BoundFusion<B::Value>,
) -> Result<Attended<B::Value>> {
    let attention = attention_weights(b, target, context, w)?;
    let values = w.v.apply(b, &context.tokens)?;
    let out = b.matmul(&attention, &values)?;
    Ok(Attended {
        output: target.replace_tokens(out),
        attention,
    })
}

pub fn hierarchical_contextualization<B: Backend>(
    b: &mut B,
    context: &TokenMap<B::Value>,
    w: &BoundFusion<B::Value>,
) -> Result<FocalLevels<B::Value>> {
    let grid = context
        .grid
        .ok_or_else(|| Error::Usage("hierarchical contextualization needs grid dims".into()))?;
    if context.dim != w.dim {
        return Err(Error::dim("hierarchical_contextualization", &[context.len, context.dim], &[w.dim]));
    }
    let z0 = w.z.apply(b, &context.tokens)?;
    let mut level = b.reshape(&z0, &[grid.frames, grid.h, grid.w, w.dim])?;
    let mut maps = Vec::with_capacity(w.levels + 1);
    maps.push(level.clone());
    for k in &w.kernels {
        let conv = b.depthwise_conv(&level, k)?;
        level = b.gelu(&conv)?;
        maps.push(level.clone());
    }
    let pooled = b.avg_pool(&level)?;
    let global = b.reshape(&pooled, &[grid.frames, w.dim])?;
    Ok(FocalLevels { maps, global, grid })
}

/// `Z^out = sum_{l=1}^{L+1} G^l * Z^l`, with `Z^{L+1}` broadcast over each frame.
pub fn gated_aggregation<B: Backend>(
    b: &mut B,
    levels: &FocalLevels<B::Value>,
    context: &TokenMap<B::Value>,
    w: &BoundFusion<B::Value>,
) -> Result<B::Value> {
    let gates = w.g.apply(b, &context.tokens)?;
    let gate_channels = b.shape(&gates)[1];
    let l = levels.maps.len() - 1;
    if gate_channels != l + 1 {
        return Err(Error::Usage(format!(
            "{gate_channels} gate channels for {} aggregated levels",
            l + 1
        )));
    }
    let n = levels.grid.tokens();
    let mut acc: Option<B::Value> = None;
    for (i, map) in levels.maps.iter().enumerate().skip(1) {
        let flat = b.reshape(map, &[n, w.dim])?;
        let term = b.gate(&flat, &gates, i - 1)?;
        acc = Some(match acc {
            Some(a) => b.add(&a, &term)?,
            None => term,
        });
    }
    let global = b.repeat_rows(&levels.global, levels.grid.per_frame())?;
    let term = b.gate(&global, &gates, l)?;
    match acc {
        Some(a) => b.add(&a, &term),
        None => Ok(term),
    }
}

/// `f_fm(GA(HC(context)))` as `[T_context, D]` tokens.
pub fn modulator<B: Backend>(
    b: &mut B,
    context: &TokenMap<B::Value>,
    w: &BoundFusion<B::Value>,
) -> Result<B::Value> {
    let levels = hierarchical_contextualization(b, context, w)?;
    let z_out = gated_aggregation(b, &levels, context, w)?;
    w.fm.apply(b, &z_out)
}

pub fn focal_modulation<B: Backend>(
    b: &mut B,
    target: &TokenMap<B::Value>,
    context: &TokenMap<B::Value>,
    w: &BoundFusion<B::Value>,
) -> Result<TokenMap<B::Value>> {
    check_dims(target, context, w)?;
    if target.len != context.len {
        return Err(Error::dim(
            "focal_modulation",
            &[target.len, target.dim],
            &[context.len, context.dim],
        ));
    }
    let q = w.q.apply(b, &target.tokens)?;
    let m = modulator(b, context, w)?;
    let out = b.mul(&q, &m)?;
    Ok(target.replace_tokens(out))
}

pub fn modulated_cross_attention<B: Backend>(
    b: &mut B,
    target: &TokenMap<B::Value>,
    context: &TokenMap<B::Value>,
    w: &BoundFusion<B::Value>,
) -> Result<Attended<B::Value>> {
    let attention = attention_weights(b, target, context, w)?;
    let values = modulator(b, context, w)?;
    let out = b.matmul(&attention, &values)?;
    Ok(Attended {
        output: target.replace_tokens(out),
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eager;
    use crate::tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type E = Eager<f64>;

    fn map(b: &mut E, t: Tensor, h: usize, w: usize) -> TokenMap<<E as Backend>::Value> {
        let d = t.shape()[1];
        TokenMap::with_grid(b.constant(t), Grid::new(h, w), d)
    }

    #[test]
    fn single_key_attention_returns_value_projection() {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let w = FusionWeights::<f64>::init(4, 2, &mut r);
        let mut b = E::new();
        let bw = w.bind(&mut b);
        let target = map(&mut b, Tensor::uniform(&[6, 4], 1.0, &mut r), 2, 3);
        let ctx_t = Tensor::uniform(&[1, 4], 1.0, &mut r);
        let context = map(&mut b, ctx_t.clone(), 1, 1);
        let out = cross_attention(&mut b, &target, &context, &bw).unwrap();
        let v = tensor::linear(&ctx_t, &w.f_v).unwrap();
        for i in 0..6 {
            for (a, e) in b.get(&out.output.tokens).row(i).iter().zip(v.row(0)) {
                assert!((a - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identical_context_tokens_give_uniform_attention() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let w = FusionWeights::<f64>::init(3, 1, &mut r);
        let mut b = E::new();
        let bw = w.bind(&mut b);
        let row = Tensor::<f64>::uniform(&[1, 3], 1.0, &mut r);
        let ctx = Tensor::from_fn(&[5, 3], |i| row.data()[i % 3]);
        let target = map(&mut b, Tensor::uniform(&[2, 3], 1.0, &mut r), 1, 2);
        let context = map(&mut b, ctx, 1, 5);
        let out = cross_attention(&mut b, &target, &context, &bw).unwrap();
        let v = tensor::linear(&row, &w.f_v).unwrap();
        for i in 0..2 {
            for (a, e) in b.get(&out.output.tokens).row(i).iter().zip(v.row(0)) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let w = FusionWeights::<f64>::init(4, 1, &mut r);
        let mut b = E::new();
        let bw = w.bind(&mut b);
        let target = map(&mut b, Tensor::zeros(&[2, 4]), 1, 2);
        let context = map(&mut b, Tensor::zeros(&[2, 3]), 1, 2);
        assert!(matches!(
            cross_attention(&mut b, &target, &context, &bw),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn missing_grid_is_usage_error() {
        let mut r = ChaCha8Rng::seed_from_u64(13);
        let w = FusionWeights::<f64>::init(2, 1, &mut r);
        let mut b = E::new();
        let bw = w.bind(&mut b);
        let flat = TokenMap::sequence(b.constant(Tensor::zeros(&[3, 2])), 3, 2);
        assert!(matches!(
            hierarchical_contextualization(&mut b, &flat, &bw),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn zero_context_propagates_zero_levels() {
        let mut r = ChaCha8Rng::seed_from_u64(14);
        let mut w = FusionWeights::<f64>::init(4, 2, &mut r);
        w.f_z.bias = Some(Tensor::zeros(&[4]));
        let mut b = E::new();
        let bw = w.bind(&mut b);
        let context = map(&mut b, Tensor::zeros(&[9, 4]), 3, 3);
        let levels = hierarchical_contextualization(&mut b, &context, &bw).unwrap();
        assert_eq!(levels.maps.len(), 3);
        for m in &levels.maps {
            assert!(b.get(m).data().iter().all(|&v| v == 0.0));
        }
        assert!(b.get(&levels.global).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn focal_modulation_zero_cases() {
        let mut r = ChaCha8Rng::seed_from_u64(15);
        let mut w = FusionWeights::<f64>::init(4, 2, &mut r);
        let mut b = E::new();
        let target = map(&mut b, Tensor::zeros(&[4, 4]), 2, 2);
        let context = map(&mut b, Tensor::uniform(&[4, 4], 1.0, &mut r), 2, 2);
        w.f_q.bias = Some(Tensor::zeros(&[4]));
        let bw = w.bind(&mut b);
        let out = focal_modulation(&mut b, &target, &context, &bw).unwrap();
        assert!(b.get(&out.tokens).data().iter().all(|&v| v == 0.0));

        for p in [&mut w.f_z, &mut w.f_g, &mut w.f_fm] {
            p.bias = Some(Tensor::zeros(&[p.d_out()]));
        }
        let bw = w.bind(&mut b);
        let target = map(&mut b, Tensor::uniform(&[4, 4], 1.0, &mut r), 2, 2);
        let zero_ctx = map(&mut b, Tensor::zeros(&[4, 4]), 2, 2);
        let out = focal_modulation(&mut b, &target, &zero_ctx, &bw).unwrap();
        assert!(b.get(&out.tokens).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn validate_catches_gate_width() {
        let mut r = ChaCha8Rng::seed_from_u64(16);
        let mut w = FusionWeights::<f64>::init(4, 2, &mut r);
        assert!(w.validate().is_ok());
        w.f_g = LinearProjection::init(4, 2, &mut r);
        assert!(w.validate().is_err());
    }
}
