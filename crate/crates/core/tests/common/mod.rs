//! Explicit-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use mavos::fusion::FusionWeights;
use mavos::tensor::{DepthwiseKernel, LinearProjection, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.len() / t.shape()[0]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn max_diff(a: &Mat, t: &Tensor) -> f64 {
    let b = to_mat(t);
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(&b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn linear(x: &Mat, p: &LinearProjection) -> Mat {
    let (din, dout) = (p.weight.shape()[0], p.weight.shape()[1]);
    let w = p.weight.data();
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|o| {
                    let mut s = p.bias.as_ref().map_or(0.0, |b| b.data()[o]);
                    for k in 0..din {
                        s += row[k] * w[k * dout + o];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn attention(target: &Mat, context: &Mat, w: &FusionWeights) -> Mat {
    let q = linear(target, &w.f_q);
    let k = linear(context, &w.f_k);
    let d = w.dim() as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            softmax(&scores)
        })
        .collect()
}

pub fn apply_attention(a: &Mat, v: &Mat) -> Mat {
    a.iter()
        .map(|ai| {
            (0..v[0].len())
                .map(|c| ai.iter().zip(v).map(|(w, vr)| w * vr[c]).sum())
                .collect()
        })
        .collect()
}

pub fn cross_attention(target: &Mat, context: &Mat, w: &FusionWeights) -> Mat {
    apply_attention(&attention(target, context, w), &linear(context, &w.f_v))
}

/// Zero-padded cross-correlation, applied independently to each `h x w` frame.
pub fn dwconv(x: &Mat, frames: usize, h: usize, w: usize, k: &DepthwiseKernel) -> Mat {
    let ks = k.size() as isize;
    let r = ks / 2;
    let d = x[0].len();
    let kw = k.weights.data();
    let mut out = vec![vec![0.0; d]; x.len()];
    for f in 0..frames {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                for c in 0..d {
                    let mut s = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (sy, sx) = (y + dy, xx + dx);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let src = f * h * w + sy as usize * w + sx as usize;
                            let ki = ((dy + r) * ks + dx + r) as usize * d + c;
                            s += x[src][c] * kw[ki];
                        }
                    }
                    out[f * h * w + y as usize * w + xx as usize][c] = s;
                }
            }
        }
    }
    out
}

/// `Z^0..Z^L` token matrices and the per-frame pooled level.
pub fn hierarchical(context: &Mat, frames: usize, h: usize, w: usize, wt: &FusionWeights) -> (Vec<Mat>, Mat) {
    let mut levels = vec![linear(context, &wt.f_z)];
    for k in &wt.kernels {
        let conv = dwconv(levels.last().unwrap(), frames, h, w, k);
        levels.push(conv.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect());
    }
    let last = levels.last().unwrap();
    let d = last[0].len();
    let global = (0..frames)
        .map(|f| {
            (0..d)
                .map(|c| (0..h * w).map(|p| last[f * h * w + p][c]).sum::<f64>() / (h * w) as f64)
                .collect()
        })
        .collect();
    (levels, global)
}

pub fn gated(context: &Mat, frames: usize, h: usize, w: usize, wt: &FusionWeights) -> Mat {
    let (levels, global) = hierarchical(context, frames, h, w, wt);
    let gates = linear(context, &wt.f_g);
    let l = wt.levels();
    let d = context[0].len();
    (0..context.len())
        .map(|n| {
            (0..d)
                .map(|c| {
                    let mut s = 0.0;
                    for lev in 1..=l {
                        s += gates[n][lev - 1] * levels[lev][n][c];
                    }
                    s + gates[n][l] * global[n / (h * w)][c]
                })
                .collect()
        })
        .collect()
}

pub fn modulator(context: &Mat, frames: usize, h: usize, w: usize, wt: &FusionWeights) -> Mat {
    linear(&gated(context, frames, h, w, wt), &wt.f_fm)
}

pub fn focal_modulation(target: &Mat, context: &Mat, frames: usize, h: usize, w: usize, wt: &FusionWeights) -> Mat {
    let q = linear(target, &wt.f_q);
    let m = modulator(context, frames, h, w, wt);
    q.iter()
        .zip(&m)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).collect())
        .collect()
}

pub fn mca(target: &Mat, context: &Mat, frames: usize, h: usize, w: usize, wt: &FusionWeights) -> Mat {
    apply_attention(&attention(target, context, wt), &modulator(context, frames, h, w, wt))
}

/// Relative error with absolute comparison for gradients below `1e-6`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
