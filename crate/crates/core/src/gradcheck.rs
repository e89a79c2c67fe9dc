//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Each component builds a scalar loss from a list of parameter tensors on a
//! fresh tape; the analytic gradient of every entry is compared with
//! `(L(x + h) - L(x - h)) / 2h`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Backend, Graph, SegLossTarget, Var};
use crate::eltt::{trunk_forward, ELSTTBlock, FrameFeatures, PropagationState};
use crate::error::Result;
use crate::fusion::{
    cross_attention, focal_modulation, gated_aggregation, hierarchical_contextualization,
    modulated_cross_attention, BoundLinear, FusionWeights, Grid, TokenMap,
};
use crate::memory::{MemoryBank, MemoryPolicy};
use crate::params::Parameters;
use crate::tensor::{LinearProjection, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub component: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// A loss over parameters registered, in order, on the given tape.
pub type LossFn<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn evaluate(params: &[Tensor<f64>], loss: &LossFn) -> Result<(Graph<f64>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t)).collect();
    let out = loss(&mut g, &vars)?;
    Ok((g, out))
}

/// Checks every entry of every tensor in `params`.
///
/// `corrupt` scales the analytic gradient by 1.01, as a negative control.
pub fn check(name: &str, params: &[Tensor<f64>], loss: &LossFn, corrupt: bool) -> Result<GradReport> {
    let (g, out) = evaluate(params, loss)?;
    let mut analytic = g.backward(out)?.params();
    if corrupt {
        for t in &mut analytic {
            for v in t.data_mut() {
                *v *= 1.01;
            }
        }
    }
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut work = params.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let (gp, op) = evaluate(&work, loss)?;
            let lp = gp.get(&op).data()[0];
            work[i].data_mut()[j] = orig - FD_STEP;
            let (gm, om) = evaluate(&work, loss)?;
            let lm = gm.get(&om).data()[0];
            work[i].data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grad.data()[j], numeric));
            entries += 1;
        }
    }
    Ok(GradReport {
        component: name.to_string(),
        entries,
        max_rel_error: worst,
    })
}

fn fusion_tensors(w: &FusionWeights<f64>) -> Vec<Tensor<f64>> {
    w.tensors().into_iter().map(|(_, t)| t).collect()
}

/// Rebuilds bound fusion weights from vars in [`Parameters::visit`] order.
fn fusion_from_vars(vars: &[Var], levels: usize, dim: usize) -> (crate::fusion::BoundFusion<Var>, usize) {
    let mut i = 0;
    let mut lin = || {
        let l = BoundLinear {
            weight: vars[i],
            bias: Some(vars[i + 1]),
        };
        i += 2;
        l
    };
    let (q, k, v, z, fm, g) = (lin(), lin(), lin(), lin(), lin(), lin());
    let kernels = vars[12..12 + levels].to_vec();
    (
        crate::fusion::BoundFusion {
            q,
            k,
            v,
            z,
            fm,
            g,
            kernels,
            dim,
            levels,
        },
        12 + levels,
    )
}

/// Random readout: `sum(out * r)`, so every output entry carries gradient.
fn readout(g: &mut Graph<f64>, out: &Var, r: &Tensor<f64>) -> Result<Var> {
    let r = g.constant(r.clone());
    let p = g.mul(out, &r)?;
    g.sum(&p)
}

/// Every fusion operator, the propagation stack of `depth` blocks and the loss.
pub fn run_all(seed: u64, depth: usize, corrupt: bool) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, levels) = (3, 2);
    let (h, w) = (2, 3);
    let n = h * w;
    let weights = FusionWeights::<f64>::init(d, levels, &mut rng);
    let target = Tensor::<f64>::uniform(&[n, d], 1.0, &mut rng);
    let context = Tensor::<f64>::uniform(&[2 * n, d], 1.0, &mut rng);
    let ctx_grid = Grid { frames: 2, h, w };
    let mut reports = Vec::new();

    let mut params = fusion_tensors(&weights);
    params.push(target.clone());
    params.push(context.clone());
    let np = params.len();
    let r_out = Tensor::<f64>::uniform(&[n, d], 1.0, &mut rng);
    let r_ctx = Tensor::<f64>::uniform(&[2 * n, d], 1.0, &mut rng);

    type Op = fn(&mut Graph<f64>, &TokenMap<Var>, &TokenMap<Var>, &crate::fusion::BoundFusion<Var>) -> Result<Var>;
    let ops: [(&str, Op, bool); 5] = [
        ("cross_attention", |g, t, c, w| Ok(cross_attention(g, t, c, w)?.output.tokens), true),
        (
            "hierarchical_contextualization",
            |g, _, c, w| {
                let lv = hierarchical_contextualization(g, c, w)?;
                let mut acc = g.reshape(&lv.maps[lv.maps.len() - 1], &[c.len, c.dim])?;
                for m in &lv.maps[1..lv.maps.len() - 1] {
                    let flat = g.reshape(m, &[c.len, c.dim])?;
                    acc = g.add(&acc, &flat)?;
                }
                let glob = g.repeat_rows(&lv.global, c.grid.expect("grid").per_frame())?;
                g.add(&acc, &glob)
            },
            false,
        ),
        (
            "gated_aggregation",
            |g, _, c, w| {
                let lv = hierarchical_contextualization(g, c, w)?;
                gated_aggregation(g, &lv, c, w)
            },
            false,
        ),
        ("focal_modulation", |g, _, c, w| Ok(focal_modulation(g, c, c, w)?.tokens), false),
        (
            "modulated_cross_attention",
            |g, t, c, w| Ok(modulated_cross_attention(g, t, c, w)?.output.tokens),
            true,
        ),
    ];
    for (name, op, on_target) in ops {
        let r = if on_target { r_out.clone() } else { r_ctx.clone() };
        let loss = move |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
            let (bw, _) = fusion_from_vars(vars, levels, d);
            let t = TokenMap::with_grid(vars[np - 2], Grid::new(h, w), d);
            let c = TokenMap::with_grid(vars[np - 1], ctx_grid, d);
            let out = op(g, &t, &c, &bw)?;
            readout(g, &out, &r)
        };
        reports.push(check(name, &params, &loss, corrupt)?);
    }

    reports.push(check_stack(&mut rng, depth, corrupt)?);
    reports.push(check_seg_loss(&mut rng, corrupt)?);
    Ok(reports)
}

/// Gradients of the segmentation loss over a linear head on top of the block stack,
/// with an MCA-updated memory bank, with respect to every block parameter.
fn check_stack(rng: &mut ChaCha8Rng, depth: usize, corrupt: bool) -> Result<GradReport> {
    let (d, levels, h, w, classes) = (3, 2, 2, 2, 3);
    let n = h * w;
    let blocks: Vec<ELSTTBlock<f64>> = (0..depth).map(|_| ELSTTBlock::init(d, levels, rng)).collect();
    let head = LinearProjection::<f64>::init(d, classes, rng);
    let frames: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::uniform(&[n, d], 1.0, rng)).collect();
    let ids: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::uniform(&[n, d], 1.0, rng)).collect();
    let target = Tensor::from_fn(&[n, classes], |i| if (i / classes) % classes == i % classes { 1.0 } else { 0.0 });
    let target = Arc::new(SegLossTarget {
        target,
        channels: (0..classes).collect(),
        eps: 1e-7,
    });
    let mut params = Vec::new();
    for blk in &blocks {
        params.extend(blk.tensors().into_iter().map(|(_, t)| t));
    }
    let per_block = params.len() / depth.max(1);
    params.push(head.weight.clone());
    params.push(head.bias.clone().expect("bias"));
    let np = params.len();
    let grid = Grid::new(h, w);
    let loss = move |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        // rebind blocks from vars by walking a template in visit order
        let bound: Vec<_> = (0..depth)
            .map(|i| bind_block_from(&vars[i * per_block..(i + 1) * per_block], d, levels))
            .collect();
        let hw = BoundLinear {
            weight: vars[np - 2],
            bias: Some(vars[np - 1]),
        };
        let tm = |g: &mut Graph<f64>, t: &Tensor<f64>| TokenMap::with_grid(g.constant(t.clone()), grid, d);
        let reference = tm(g, &frames[0]);
        let ref_id = tm(g, &ids[0]);
        let mut bank = MemoryBank::init::<f64>(reference, Some(ref_id), MemoryPolicy::Mca, 1)?;
        for t in 1..3 {
            let v = tm(g, &frames[t]);
            let id = tm(g, &ids[t]);
            bank.observe(g, Some(&bound[0].long_term), t, v, Some(id))?;
        }
        let mut state = PropagationState::new(bank, depth);
        for p in state.prev_visual.iter_mut() {
            *p = Some(tm(g, &frames[2]));
        }
        state.prev_id = Some(tm(g, &ids[2]));
        let input = FrameFeatures {
            visual: tm(g, &frames[3]),
            id: tm(g, &ids[3]),
        };
        let (out, _) = trunk_forward(g, input, &mut state, &bound)?;
        let sum = g.add(&out.visual.tokens, &out.id.tokens)?;
        let logits = hw.apply(g, &sum)?;
        g.seg_loss(&logits, target.clone())
    };
    check(&format!("eltt_stack(depth={depth})"), &params, &loss, corrupt)
}

/// Binds one block from vars listed in [`ELSTTBlock`] visit order.
fn bind_block_from(vars: &[Var], d: usize, levels: usize) -> crate::eltt::BoundBlock<Var> {
    let (short_term, a) = fusion_from_vars(vars, levels, d);
    let (long_term, b) = fusion_from_vars(&vars[a..], levels, d);
    let (self_prop, c) = fusion_from_vars(&vars[a + b..], levels, d);
    let mut i = a + b + c;
    let mut lin = || {
        let l = BoundLinear {
            weight: vars[i],
            bias: Some(vars[i + 1]),
        };
        i += 2;
        l
    };
    let ffn = crate::eltt::BoundFeedForward { up: lin(), down: lin() };
    let (id_short, id_long, id_self) = (lin(), lin(), lin());
    let id_ffn = crate::eltt::BoundFeedForward { up: lin(), down: lin() };
    crate::eltt::BoundBlock {
        short_term,
        long_term,
        self_prop,
        ffn,
        id_short,
        id_long,
        id_self,
        id_ffn,
    }
}

fn check_seg_loss(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<GradReport> {
    let logits = Tensor::<f64>::uniform(&[12, 4], 3.0, rng);
    let target = Tensor::from_fn(&[12, 4], |i| if (i / 4 + 1) % 4 == i % 4 { 1.0 } else { 0.0 });
    let target = Arc::new(SegLossTarget {
        target,
        channels: vec![0, 1, 3],
        eps: 1e-7,
    });
    let loss = move |g: &mut Graph<f64>, vars: &[Var]| g.seg_loss(&vars[0], target.clone());
    check("seg_loss", &[logits], &loss, corrupt)
}
