//! End-to-end acceptance run. Criteria execute one after another so that the
//! latency measurements never share the CPU with other tests.

mod common;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::process::{Command, ExitCode};
use std::time::Instant;

use common::*;
use mavos::autodiff::{Backend, Eager};
use mavos::bench::{self, BenchConfig, BenchRow};
use mavos::fusion::{
    attention_weights, cross_attention, focal_modulation, gated_aggregation, hierarchical_contextualization,
    modulated_cross_attention, modulator, FusionWeights, Grid, TokenMap,
};
use mavos::gradcheck;
use mavos::memory::{MemoryBank, MemoryPolicy, EVAL_DELTA, TRAIN_DELTA};
use mavos::segmenter::{
    encode_checkpoint, evaluate_video, f_metric, j_metric, train, Segmenter, SegmenterConfig, TrainConfig, Tracker,
    TRAIN_UNROLL,
};
use mavos::synthgen::{generate, standard_suite, training_suite, VideoSequence};
use mavos::tensor::{DepthwiseKernel, LinearProjection, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type E = Eager<f64>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn fingerprint(bytes: &[u8]) -> u64 {
    let mut h = DefaultHasher::new();
    bytes.hash(&mut h);
    h.finish()
}

// 1 ---------------------------------------------------------------------------

fn memory_constancy() -> Outcome {
    let start = Instant::now();
    let video = generate(&standard_suite(7)[2]).unwrap();
    let model = Segmenter::<f64>::init(SegmenterConfig::default(), 0).unwrap();
    let hw = model.config.token_grid().tokens();
    let delta = EVAL_DELTA;
    let mut mismatches = Vec::new();

    // MCA through the full streaming pipeline
    let mut tracker = Tracker::new(&model, MemoryPolicy::Mca, delta).unwrap();
    tracker.reset(&video.frames[0], &video.masks[0]).unwrap();
    for t in 1..video.len() {
        tracker.step(&video.frames[t]).unwrap();
        let stored = tracker.memory_stats().unwrap().token_count;
        if t >= delta && stored != 2 * hw {
            mismatches.push(format!("mca t={t}: {stored} != {}", 2 * hw));
        }
    }

    // FullBank fed with encoder features of every frame
    let mut b = E::new();
    let bound = model.bind(&mut b);
    let encode = |b: &mut E, t: usize| {
        let f = b.constant(video.frames[t].to_tensor());
        bound.encode(b, &f).unwrap()
    };
    let first = encode(&mut b, 0);
    let mut bank = MemoryBank::init::<f64>(first.clone(), Some(first), MemoryPolicy::FullBank, delta).unwrap();
    for t in 1..video.len() {
        let v = encode(&mut b, t);
        bank.observe(&mut b, None, t, v.clone(), Some(v)).unwrap();
        let stored = bank.stats().token_count;
        if stored != (1 + t / delta) * hw {
            mismatches.push(format!("full t={t}: {stored} != {}", (1 + t / delta) * hw));
        }
    }

    let secs = start.elapsed().as_secs_f64();
    let pass = mismatches.is_empty() && secs < 600.0;
    outcome(
        pass,
        format!(
            "{} frames per policy, {} mismatches{}, {secs:.1}s",
            video.len(),
            mismatches.len(),
            mismatches.first().map_or(String::new(), |m| format!(" (first: {m})"))
        ),
    )
}

// 2 ---------------------------------------------------------------------------

fn latency_shape() -> Outcome {
    let cfg = BenchConfig { lengths: vec![2001], repetitions: 15, ..BenchConfig::default() };
    let rows = bench::run(&cfg, |_| {}).unwrap();
    let of = |p: MemoryPolicy| -> Vec<BenchRow> { rows.iter().filter(|r| r.policy == p).cloned().collect() };
    let (mca, full) = (of(MemoryPolicy::Mca), of(MemoryPolicy::FullBank));
    let (flat, slope, median) = bench::is_flat(&mca, 100, 2000);
    let at = |rs: &[BenchRow], t: usize| rs.iter().find(|r| r.frame_index == t).map_or(f64::NAN, |r| r.ms_per_frame);
    let (f100, f2000) = (at(&full, 100), at(&full, 2000));
    let growth = f2000 / f100;
    outcome(
        flat && growth >= 3.0 && cfg.repetitions >= 5,
        format!(
            "mca slope*L {:.4} ms vs 0.2*median {:.4} ms; full {f100:.3} -> {f2000:.3} ms ({growth:.2}x)",
            slope.abs() * 2000.0,
            0.2 * median
        ),
    )
}

// 3, 4, 6 ---------------------------------------------------------------------

struct Case {
    frames: usize,
    h: usize,
    w: usize,
    d: usize,
    weights: FusionWeights,
    target: Tensor,
    context: Tensor,
}

fn case(seed: u64) -> Case {
    let mut r = ChaCha8Rng::seed_from_u64(1_000 + seed);
    let (h, w) = (r.gen_range(1..=6), r.gen_range(1..=6));
    let frames = r.gen_range(1..=3);
    let d = r.gen_range(1..=16);
    let levels = r.gen_range(1..=3);
    let n = h * w;
    Case {
        frames,
        h,
        w,
        d,
        weights: FusionWeights::init(d, levels, &mut r),
        target: Tensor::uniform(&[n, d], 2.0, &mut r),
        context: Tensor::uniform(&[frames * n, d], 2.0, &mut r),
    }
}

fn maps(b: &mut E, c: &Case) -> (TokenMap<<E as Backend>::Value>, TokenMap<<E as Backend>::Value>) {
    let grid = Grid { frames: 1, h: c.h, w: c.w };
    let t = TokenMap::with_grid(b.constant(c.target.clone()), grid, c.d);
    let ctx = TokenMap::with_grid(b.constant(c.context.clone()), Grid { frames: c.frames, ..grid }, c.d);
    (t, ctx)
}

const INSTANCES: u64 = 150;

fn operator_correctness() -> Outcome {
    let mut worst = [0.0f64; 5];
    for seed in 0..INSTANCES {
        let c = case(seed);
        let (tm, cm) = (to_mat(&c.target), to_mat(&c.context));
        let mut b = E::new();
        let w = c.weights.bind(&mut b);
        let (t, ctx) = maps(&mut b, &c);

        let ca = cross_attention(&mut b, &t, &ctx, &w).unwrap().output.tokens;
        worst[0] = worst[0].max(max_diff(&common::cross_attention(&tm, &cm, &c.weights), b.get(&ca)));

        let levels = hierarchical_contextualization(&mut b, &ctx, &w).unwrap();
        let (want_levels, want_global) = hierarchical(&cm, c.frames, c.h, c.w, &c.weights);
        for (want, got) in want_levels.iter().zip(&levels.maps) {
            let flat = b.get(got).reshape(&[c.frames * c.h * c.w, c.d]).unwrap();
            worst[1] = worst[1].max(max_diff(want, &flat));
        }
        worst[1] = worst[1].max(max_diff(&want_global, b.get(&levels.global)));

        let ga = gated_aggregation(&mut b, &levels, &ctx, &w).unwrap();
        worst[2] = worst[2].max(max_diff(&gated(&cm, c.frames, c.h, c.w, &c.weights), b.get(&ga)));

        // focal modulation pairs each context token with a same-shaped target
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let ft = Tensor::uniform(c.context.shape(), 2.0, &mut r);
        let ftm = TokenMap { tokens: b.constant(ft.clone()), ..ctx.clone() };
        let fm = focal_modulation(&mut b, &ftm, &ctx, &w).unwrap().tokens;
        let want = common::focal_modulation(&to_mat(&ft), &cm, c.frames, c.h, c.w, &c.weights);
        worst[3] = worst[3].max(max_diff(&want, b.get(&fm)));

        let m = modulated_cross_attention(&mut b, &t, &ctx, &w).unwrap().output.tokens;
        worst[4] = worst[4].max(max_diff(&mca(&tm, &cm, c.frames, c.h, c.w, &c.weights), b.get(&m)));
    }
    let names = ["CA", "HC", "GA", "FM", "MCA"];
    let detail = names.iter().zip(&worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    outcome(worst.iter().all(|&w| w < 1e-10), format!("{INSTANCES} instances, max abs diff: {detail}"))
}

fn reduction_anchor() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let c = case(seed);
        let d = c.d;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut w = FusionWeights::init(d, 1, &mut r);
        w.kernels = vec![DepthwiseKernel::delta(3, d)];
        w.f_g = LinearProjection::new(Tensor::zeros(&[d, 2]), Some(Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap())).unwrap();
        let mut b = E::new();
        let bw = w.bind(&mut b);
        let (t, ctx) = maps(&mut b, &c);
        let got = modulated_cross_attention(&mut b, &t, &ctx, &bw).unwrap().output.tokens;

        // plain cross-attention whose value projection is f_fm . GeLU . f_z
        let cm = to_mat(&c.context);
        let z: Mat = linear(&cm, &w.f_z).iter().map(|row| row.iter().map(|&v| gelu(v)).collect()).collect();
        let values = linear(&z, &w.f_fm);
        let a = attention(&to_mat(&c.target), &cm, &w);
        let want = apply_attention(&a, &values);
        worst = worst.max(max_diff(&want, b.get(&got)));
        let m = modulator(&mut b, &ctx, &bw).unwrap();
        worst = worst.max(max_diff(&values, b.get(&m)));
    }
    outcome(worst < 1e-12, format!("{INSTANCES} instances, max abs diff {worst:.1e}"))
}

fn softmax_rows() -> Outcome {
    let (mut worst, mut rows) = (0.0f64, 0usize);
    for seed in 0..INSTANCES {
        let c = case(seed);
        let mut b = E::new();
        let w = c.weights.bind(&mut b);
        let (t, ctx) = maps(&mut b, &c);
        let maps = [
            attention_weights(&mut b, &t, &ctx, &w).unwrap(),
            modulated_cross_attention(&mut b, &t, &ctx, &w).unwrap().attention,
            attention_weights(&mut b, &ctx, &ctx, &w).unwrap(),
        ];
        for a in maps {
            let a = b.get(&a);
            let (m, _) = a.rows_cols();
            for r in 0..m {
                worst = worst.max((a.row(r).iter().sum::<f64>() - 1.0).abs());
                rows += 1;
            }
        }
    }
    outcome(worst < 1e-9, format!("{rows} rows, max |sum - 1| {worst:.1e}"))
}

// 5 ---------------------------------------------------------------------------

fn gradient_integrity() -> Outcome {
    let reports = gradcheck::run_all(0, 3, false).unwrap();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.component.as_str()).collect();
    let control = gradcheck::run_all(0, 3, true).unwrap().iter().all(|r| !r.passed());
    outcome(
        failed.is_empty() && control,
        format!(
            "{} components, worst rel err {worst:.2e}, failures {failed:?}, corrupted control rejected: {control}",
            reports.len()
        ),
    )
}

// 7 ---------------------------------------------------------------------------

fn metric_fixtures() -> Outcome {
    let n = 64;
    let sq = |x0: usize, s: usize| -> Vec<bool> { (0..n).map(|i| i % 8 >= x0 && i % 8 < x0 + s && i / 8 < s).collect() };
    let a = sq(0, 3);
    let b = sq(5, 3);
    let empty = vec![false; n];
    let mut p = vec![false; n];
    let mut g = vec![false; n];
    p[..4].iter_mut().for_each(|v| *v = true);
    g[2..8].iter_mut().for_each(|v| *v = true);
    let checks = [
        ("J identical", j_metric(&a, &a), 1.0),
        ("F identical", f_metric(&a, &a, 8), 1.0),
        ("J disjoint", j_metric(&a, &b), 0.0),
        ("F disjoint", f_metric(&a, &b, 8), 0.0),
        ("J empty vs nonempty", j_metric(&empty, &a), 0.0),
        ("F empty vs nonempty", f_metric(&empty, &a, 8), 0.0),
        ("J 2/8 fixture", j_metric(&p, &g), 0.25),
    ];
    let bad: Vec<String> = checks.iter().filter(|c| c.1 != c.2).map(|c| format!("{} = {}", c.0, c.1)).collect();
    outcome(bad.is_empty(), format!("{} fixtures, failures {bad:?}", checks.len()))
}

// 8 ---------------------------------------------------------------------------

/// Model and recipe used for the learning criterion.
fn learning_setup() -> (SegmenterConfig, TrainConfig) {
    let model = SegmenterConfig { stride: 8, ..SegmenterConfig::default() };
    let train = TrainConfig {
        steps: 6000,
        lr: 0.1,
        unroll: TRAIN_UNROLL,
        delta: TRAIN_DELTA,
        seed: 0,
        ..TrainConfig::default()
    };
    (model, train)
}

fn desk_scale_learning() -> Outcome {
    let start = Instant::now();
    let (mcfg, tcfg) = learning_setup();
    let videos: Vec<VideoSequence> = training_suite(11, 64, 64).iter().map(|s| generate(s).unwrap()).collect();
    let mut model = Segmenter::<f64>::init(mcfg, 1).unwrap();
    let report = train(&mut model, &videos, &tcfg, |step, _| {
        if (step + 1) % 1000 == 0 {
            eprintln!("    trained {} steps ({:.0}s)", step + 1, start.elapsed().as_secs_f64());
        }
    })
    .unwrap();
    let tail = &report.losses[report.losses.len() - 100..];
    let final_loss = tail.iter().sum::<f64>() / tail.len() as f64;

    let held_out: Vec<VideoSequence> = standard_suite(99).iter().map(|s| generate(s).unwrap()).collect();
    let mut parts = Vec::new();
    let mut total = 0.0;
    let mut long_mca = 0.0;
    for v in &held_out {
        let s = evaluate_video(&model, v, MemoryPolicy::Mca, EVAL_DELTA, |_, _| {}).unwrap();
        parts.push(format!("{} {:.3}", s.name, s.score.jf));
        total += s.score.jf;
        if s.name == "long" {
            long_mca = s.score.jf;
        }
    }
    let mean = total / held_out.len() as f64;
    let long = held_out.iter().find(|v| v.script.name == "long").unwrap();
    let long_full = evaluate_video(&model, long, MemoryPolicy::FullBank, EVAL_DELTA, |_, _| {}).unwrap().score.jf;

    // re-segmenting the reference frame right after initialization
    let short = &held_out[0];
    let mut tracker = Tracker::new(&model, MemoryPolicy::Mca, EVAL_DELTA).unwrap();
    tracker.reset(&short.frames[0], &short.masks[0]).unwrap();
    let again = tracker.step(&short.frames[0]).unwrap();
    let ref_j = (0..short.masks[0].objects())
        .map(|k| j_metric(&again.plane(k), &short.masks[0].plane(k)))
        .sum::<f64>()
        / short.masks[0].objects() as f64;

    let secs = start.elapsed().as_secs_f64();
    let gap = (long_mca - long_full).abs();
    outcome(
        mean >= 0.80 && gap <= 0.05 && ref_j >= 0.9 && secs < 7200.0,
        format!(
            "mean J&F {mean:.3} [{}]; long mca {long_mca:.3} vs full {long_full:.3} (gap {gap:.3}); reference J {ref_j:.3}; final loss {final_loss:.4}; {secs:.0}s",
            parts.join(", ")
        ),
    )
}

// 9 ---------------------------------------------------------------------------

fn determinism() -> Outcome {
    let cfg = SegmenterConfig { stride: 16, dim: 16, ..SegmenterConfig::default() };
    let videos: Vec<VideoSequence> = training_suite(5, 4, 24).iter().map(|s| generate(s).unwrap()).collect();
    let tc = TrainConfig { steps: 12, seed: 9, ..TrainConfig::default() };
    let run = || {
        let mut m = Segmenter::<f64>::init(cfg.clone(), 2).unwrap();
        let r = train(&mut m, &videos, &tc, |_, _| {}).unwrap();
        (fingerprint(&encode_checkpoint(&m).unwrap()), fingerprint(r.to_csv().as_bytes()))
    };
    let (a, b) = (run(), run());

    let bc = BenchConfig { lengths: vec![60], sample_every: 20, repetitions: 1, seed: 4, ..BenchConfig::default() };
    let strip = |rows: Vec<BenchRow>| -> Vec<(String, usize, usize, usize, usize)> {
        rows.into_iter()
            .map(|r| (r.policy.to_string(), r.video_length, r.frame_index, r.tokens_stored, r.logical_bytes))
            .collect()
    };
    let (ba, bb) = (strip(bench::run(&bc, |_| {}).unwrap()), strip(bench::run(&bc, |_| {}).unwrap()));
    outcome(
        a == b && ba == bb,
        format!("checkpoint {:016x}/{:016x}, loss csv {:016x}/{:016x}, bench rows equal: {}", a.0, b.0, a.1, b.1, ba == bb),
    )
}

// 10 --------------------------------------------------------------------------

fn focal_level_ablation() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_mavos");
    let dir = tempfile::tempdir().unwrap();
    let path = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let run = |args: &[&str]| Command::new(bin).args(args).output().unwrap();
    let config = path("ablation.json");
    std::fs::write(
        &config,
        r#"{"model":{"dim":16},"train":{"steps":20,"seed":3},"eval":{"levels":[1,2,3],"delta":10}}"#,
    )
    .unwrap();
    let gen = run(&["gen", "--suite", "train", "--videos", "3", "--frames", "24", "--out", &path("train")]);
    let gen2 = run(&["gen", "--suite", "short", "--seed", "42", "--out", &path("eval")]);
    if !gen.status.success() || !gen2.status.success() {
        return outcome(false, "dataset generation failed");
    }
    for l in ["1", "2", "3"] {
        let ck = path(&format!("model_L{l}.bin"));
        let o = run(&["--config", &config, "train", "--data", &path("train"), "--checkpoint", &ck, "--levels", l]);
        if !o.status.success() {
            return outcome(false, format!("train L={l}: {}", String::from_utf8_lossy(&o.stderr)));
        }
    }
    let out = path("ablation_report.json");
    let o = run(&["--config", &config, "eval", "--data", &path("eval"), "--checkpoint", &path("model_L{levels}.bin"), "--out", &out]);
    if !o.status.success() {
        return outcome(false, format!("eval: {}", String::from_utf8_lossy(&o.stderr)));
    }
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let runs = v["ablation"].as_array().cloned().unwrap_or_default();
    let per_l: Vec<String> = runs
        .iter()
        .filter_map(|r| Some(format!("L={} J&F {:.3}", r["levels"].as_u64()?, r["mean"]["jf"].as_f64()?)))
        .collect();
    outcome(per_l.len() == 3, per_l.join(", "))
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        ("memory constancy", memory_constancy),
        ("latency flat under MCA, growing under FullBank", latency_shape),
        ("operator correctness against loop oracles", operator_correctness),
        ("MCA reduces to cross-attention", reduction_anchor),
        ("finite-difference gradients", gradient_integrity),
        ("attention rows are normalized", softmax_rows),
        ("metric fixtures", metric_fixtures),
        ("desk-scale learning", desk_scale_learning),
        ("bit determinism", determinism),
        ("focal-level ablation harness", focal_level_ablation),
    ];
    let filter: Vec<usize> = std::env::var("MAVOS_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.contains(&id) {
            println!("criterion {id:>2} SKIP {name}");
            continue;
        }
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict} {name}: {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
