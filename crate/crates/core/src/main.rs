use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use mavos::bench::{self, BenchConfig};
use mavos::gradcheck::{self, GRAD_TOLERANCE};
use mavos::memory::{MemoryPolicy, EVAL_DELTA};
use mavos::segmenter::{
    decode_checkpoint, encode_checkpoint, evaluate_video, jf_score, train, write_pgm, JfScore, Segmenter,
    SegmenterConfig, TrainConfig, VideoScore,
};
use mavos::synthgen::{self, generate, standard_suite, training_suite, VideoSequence, SUITE_NAMES};
use mavos::{Error, Precision, Result, Scalar};

#[derive(Parser)]
#[command(name = "mavos", version, about = "Streaming video object segmentation with a fixed-size memory")]
struct Cli {
    /// JSON file with `model`, `train`, `eval` and `bench` sections; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic dataset files.
    Gen(GenArgs),
    /// Train a segmenter on dataset files.
    Train(TrainArgs),
    /// Stream videos through a checkpoint and report J, F and J&F.
    Eval(EvalArgs),
    /// Sweep memory policies over video lengths and write per-frame CSV.
    Bench(BenchArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradArgs),
}

#[derive(Args)]
struct GenArgs {
    /// `standard`, `train`, or one standard scene name.
    #[arg(long, default_value = "standard")]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "f64")]
    precision: Precision,
    /// Number of clips in the `train` suite.
    #[arg(long, default_value_t = 64)]
    videos: usize,
    /// Clip length in the `train` suite.
    #[arg(long, default_value_t = 64)]
    frames: usize,
}

#[derive(Args, Default)]
struct ModelFlags {
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset files or directories of `.mavs` files.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Seed for sampling unrolls.
    #[arg(long)]
    seed: Option<u64>,
    /// Seed for the initial weights; defaults to the sampling seed.
    #[arg(long)]
    init_seed: Option<u64>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Checkpoint path; `{levels}` is replaced by the focal level count when ablating.
    #[arg(long, required_unless_present = "gt_as_prediction")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    policy: Option<MemoryPolicy>,
    #[arg(long)]
    delta: Option<usize>,
    /// Focal level counts to evaluate, e.g. `1,2,3`.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<usize>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for per-frame, per-object PGM mask dumps.
    #[arg(long)]
    dump_pgm: Option<PathBuf>,
    /// Score the ground truth against itself; no model is run.
    #[arg(long)]
    gt_as_prediction: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<MemoryPolicy>>,
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    #[arg(long)]
    delta: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    sample_every: Option<usize>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// Negative control: perturbs every analytic gradient by 1%.
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    policy: Option<MemoryPolicy>,
    delta: Option<usize>,
    levels: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: SegmenterConfig,
    train: TrainConfig,
    eval: EvalConfig,
    bench: BenchConfig,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn apply_model_flags(m: &mut SegmenterConfig, f: &ModelFlags) {
    if let Some(v) = f.stride {
        m.stride = v;
    }
    if let Some(v) = f.dim {
        m.dim = v;
    }
    if let Some(v) = f.levels {
        m.levels = v;
    }
    if let Some(v) = f.blocks {
        m.blocks = v;
    }
}

/// Cap on worker threads: `MAVOS_THREADS`, else the available parallelism.
fn worker_threads() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("MAVOS_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => n.min(avail.max(n)),
        _ => avail,
    }
}

fn dataset_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "mavs"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Validation("no dataset files found".into()));
    }
    Ok(out)
}

fn load_videos(paths: &[PathBuf]) -> Result<Vec<VideoSequence>> {
    dataset_files(paths)?.iter().map(|p| synthgen::import::<f64>(p)).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let scripts = match a.suite.as_str() {
        "standard" => standard_suite(a.seed),
        "train" => training_suite(a.seed, a.videos, a.frames),
        name => {
            let i = SUITE_NAMES
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Validation(format!("unknown suite '{name}'")))?;
            vec![standard_suite(a.seed).swap_remove(i)]
        }
    };
    fs::create_dir_all(&a.out)?;
    for s in &scripts {
        let video = generate(s)?;
        let bytes = match a.precision {
            Precision::F32 => synthgen::encode_dataset::<f32>(&video)?,
            Precision::F64 => synthgen::encode_dataset::<f64>(&video)?,
        };
        let path = a.out.join(format!("{}.mavs", s.name));
        fs::write(&path, bytes)?;
        println!("{} {} frames", path.display(), s.frame_count);
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, cfg: FileConfig) -> Result<()> {
    let mut model_cfg = cfg.model;
    apply_model_flags(&mut model_cfg, &a.model);
    let mut tc = cfg.train;
    if let Some(v) = a.steps {
        tc.steps = v;
    }
    if let Some(v) = a.lr {
        tc.lr = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    let videos = load_videos(&a.data)?;
    let init_seed = a.init_seed.unwrap_or(tc.seed);
    let mut model = Segmenter::<f64>::init(model_cfg, init_seed)?;
    let report = train(&mut model, &videos, &tc, |step, loss| {
        if step % 100 == 0 || step + 1 == tc.steps {
            eprintln!("step {step} loss {loss:.6}");
        }
    })?;
    let bytes = encode_checkpoint(&model)?;
    write_file(&a.checkpoint, &bytes)?;
    let manifest = json!({
        "kind": "segmenter",
        "precision": f64::PRECISION,
        "model": model.config,
        "init_seed": init_seed,
        "train": tc,
        "videos": videos.iter().map(|v| &v.script.name).collect::<Vec<_>>(),
        "final_loss": report.losses.last(),
        "bytes": bytes.len(),
    });
    let manifest_path = PathBuf::from(format!("{}.json", a.checkpoint.display()));
    write_file(&manifest_path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    if let Some(p) = &a.loss_csv {
        write_file(p, report.to_csv().as_bytes())?;
    }
    println!("wrote {}", a.checkpoint.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    levels: Option<usize>,
    policy: MemoryPolicy,
    delta: usize,
    videos: Vec<VideoScore>,
    mean: JfScore,
}

fn mean_score(videos: &[VideoScore]) -> JfScore {
    let n = videos.len() as f64;
    let j = videos.iter().map(|v| v.score.j).sum::<f64>() / n;
    let f = videos.iter().map(|v| v.score.f).sum::<f64>() / n;
    JfScore { j, f, jf: (j + f) / 2.0 }
}

/// Scores videos on up to `threads` workers; results keep input order.
fn score_videos(
    videos: &[VideoSequence],
    threads: usize,
    score: &(dyn Fn(&VideoSequence) -> Result<VideoScore> + Sync),
) -> Result<Vec<VideoScore>> {
    let threads = threads.clamp(1, videos.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<VideoScore>>>> =
        videos.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= videos.len() {
                    break;
                }
                *results[i].lock().expect("poisoned") = Some(score(&videos[i]));
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().expect("poisoned").expect("scored"))
        .collect()
}

fn cmd_eval(a: &EvalArgs, cfg: FileConfig) -> Result<()> {
    let policy = a.policy.or(cfg.eval.policy).unwrap_or(MemoryPolicy::Mca);
    let delta = a.delta.or(cfg.eval.delta).unwrap_or(EVAL_DELTA);
    let videos = load_videos(&a.data)?;
    let threads = worker_threads();
    let mut reports = Vec::new();
    if a.gt_as_prediction {
        let scores = score_videos(&videos, threads, &|v| {
            Ok(VideoScore {
                name: v.script.name.clone(),
                frames: v.len() - 1,
                score: jf_score(&v.masks[1..], &v.masks[1..])?,
            })
        })?;
        reports.push(EvalReport {
            levels: None,
            policy,
            delta,
            mean: mean_score(&scores),
            videos: scores,
        });
    } else {
        let ckpt = a.checkpoint.as_ref().expect("clap enforces checkpoint").display().to_string();
        let levels: Vec<Option<usize>> = match a.levels.clone().or(cfg.eval.levels) {
            Some(ls) if !ls.is_empty() => ls.into_iter().map(Some).collect(),
            _ => vec![None],
        };
        for l in levels {
            let path = match l {
                Some(l) => ckpt.replace("{levels}", &l.to_string()),
                None => ckpt.clone(),
            };
            let model = decode_checkpoint::<f64>(&fs::read(&path)?)?;
            if let Some(l) = l {
                if model.config.levels != l {
                    return Err(Error::Config(format!(
                        "{path} has {} focal levels, expected {l}",
                        model.config.levels
                    )));
                }
            }
            let dump = a.dump_pgm.clone();
            if let Some(d) = &dump {
                fs::create_dir_all(d)?;
            }
            let scores = score_videos(&videos, threads, &|v| {
                let mut io_err = None;
                let s = evaluate_video(&model, v, policy, delta, |t, m| {
                    if let (Some(d), None) = (&dump, &io_err) {
                        for k in 0..m.objects() {
                            let p = d.join(format!("{}_{t:05}_obj{k}.pgm", v.script.name));
                            if let Err(e) = write_pgm(&p, &m.plane(k), m.size()) {
                                io_err = Some(e);
                            }
                        }
                    }
                })?;
                match io_err {
                    Some(e) => Err(e),
                    None => Ok(s),
                }
            })?;
            reports.push(EvalReport {
                levels: Some(model.config.levels),
                policy,
                delta,
                mean: mean_score(&scores),
                videos: scores,
            });
        }
    }
    for r in &reports {
        let tag = r.levels.map_or(String::new(), |l| format!("L={l} "));
        for v in &r.videos {
            println!("{tag}{}: J {:.4} F {:.4} J&F {:.4}", v.name, v.score.j, v.score.f, v.score.jf);
        }
        println!("{tag}mean: J {:.4} F {:.4} J&F {:.4}", r.mean.j, r.mean.f, r.mean.jf);
    }
    let value = if reports.len() == 1 {
        serde_json::to_value(&reports[0])?
    } else {
        json!({ "ablation": reports })
    };
    let text = serde_json::to_string_pretty(&value)?;
    match &a.out {
        Some(p) => write_file(p, text.as_bytes())?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs, cfg: FileConfig) -> Result<()> {
    let mut bc = cfg.bench;
    if let Some(v) = &a.policies {
        bc.policies = v.clone();
    }
    if let Some(v) = &a.lengths {
        bc.lengths = v.clone();
    }
    if let Some(v) = a.delta {
        bc.delta = v;
    }
    if let Some(v) = a.repetitions {
        bc.repetitions = v;
    }
    if let Some(v) = a.sample_every {
        bc.sample_every = v;
    }
    if let Some(v) = a.precision {
        bc.precision = v;
    }
    if let Some(v) = a.seed {
        bc.seed = v;
    }
    let mut m = bc.model_config();
    apply_model_flags(&mut m, &a.model);
    bc.stride = m.stride;
    bc.dim = m.dim;
    bc.levels = m.levels;
    bc.validate()?;
    // fail on an unwritable path before the sweep, not after
    write_file(&a.out, bench::CSV_HEADER.as_bytes())?;
    let rows = bench::run(&bc, |r| {
        eprintln!(
            "{} len {} t {} tokens {} ms {:.4}",
            r.policy, r.video_length, r.frame_index, r.tokens_stored, r.ms_per_frame
        )
    })?;
    write_file(&a.out, bench::to_csv(&rows).as_bytes())?;
    println!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn cmd_gradcheck(a: &GradArgs) -> Result<bool> {
    let reports = gradcheck::run_all(a.seed, a.depth, a.corrupt_gradient)?;
    let mut ok = true;
    let mut out = std::io::stdout().lock();
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{:<36} entries {:>5}  max rel err {:.3e}  {verdict}",
            r.component, r.entries, r.max_rel_error
        );
        ok &= r.passed();
    }
    let _ = writeln!(out, "tolerance {GRAD_TOLERANCE:.0e}");
    Ok(ok)
}

fn exit_code(e: &Error) -> ExitCode {
    match e {
        Error::Io(_) | Error::Format { .. } => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = load_config(cli.config.as_deref()).and_then(|cfg| match &cli.command {
        Command::Gen(a) => cmd_gen(a).map(|_| true),
        Command::Train(a) => cmd_train(a, cfg).map(|_| true),
        Command::Eval(a) => cmd_eval(a, cfg).map(|_| true),
        Command::Bench(a) => cmd_bench(a, cfg).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
