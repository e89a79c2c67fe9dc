//! Synthetic videos of moving shapes with exact ground-truth masks.
//!
//! Objects move on a torus so long sequences never empty the scene. Absence
//! comes only from explicit visibility intervals.
//!
//! # Dataset file
//!
//! All integers little-endian.
//!
//! ```text
//! magic      4 bytes  b"MAVS"
//! version    u16      1
//! hdr_len    u32
//! header     hdr_len  UTF-8 JSON: {"precision", "grid", "frame_count", "objects", "script"}
//! frames     frame_count * 3 * G * G bytes; per frame the R plane, then G, then B
//! masks      per frame, per object: u32 run count n, then n u32 run lengths
//! ```
//!
//! Mask runs walk the `G x G` plane in row-major order and alternate between
//! "outside" and "inside", starting with "outside" (a leading zero-length run
//! is allowed). Run lengths must sum to `G * G`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmenter::{ObjectMask, MAX_OBJECTS};
use crate::tensor::{Precision, Scalar, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"MAVS";
pub const DATASET_VERSION: u16 = 1;
pub const DEFAULT_GRID: usize = 64;
pub const BACKGROUND: [u8; 3] = [128, 128, 128];

const PALETTE: [[u8; 3]; 8] = [
    [230, 40, 40],
    [40, 200, 60],
    [50, 80, 230],
    [240, 220, 40],
    [220, 60, 220],
    [40, 220, 230],
    [250, 140, 20],
    [20, 20, 20],
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Shape {
    Circle { radius: f64 },
    Rect { width: f64, height: f64 },
}

impl Shape {
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match *self {
            Shape::Circle { radius } => dx * dx + dy * dy < radius * radius,
            Shape::Rect { width, height } => dx.abs() < width / 2.0 && dy.abs() < height / 2.0,
        }
    }

    fn extent(&self) -> f64 {
        match *self {
            Shape::Circle { radius } => 2.0 * radius,
            Shape::Rect { width, height } => width.max(height),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectScript {
    pub shape: Shape,
    /// Center at frame 0, in pixels.
    pub start: [f64; 2],
    /// Pixels per frame.
    pub velocity: [f64; 2],
    pub color: [u8; 3],
    /// Higher is drawn on top.
    pub z: i32,
    /// Half-open `[from, to)` frame ranges in which the object is present.
    pub visible: Vec<[usize; 2]>,
}

impl ObjectScript {
    pub fn center(&self, frame: usize, grid: usize) -> [f64; 2] {
        let g = grid as f64;
        let t = frame as f64;
        [
            (self.start[0] + self.velocity[0] * t).rem_euclid(g),
            (self.start[1] + self.velocity[1] * t).rem_euclid(g),
        ]
    }

    pub fn is_visible(&self, frame: usize) -> bool {
        self.visible.iter().any(|&[a, b]| frame >= a && frame < b)
    }

    /// Whether pixel `(x, y)` lies inside the shape at `frame`, ignoring visibility.
    pub fn covers(&self, x: usize, y: usize, frame: usize, grid: usize) -> bool {
        let g = grid as f64;
        let [cx, cy] = self.center(frame, grid);
        let wrap = |d: f64| (d + g / 2.0).rem_euclid(g) - g / 2.0;
        self.shape.contains(wrap(x as f64 + 0.5 - cx), wrap(y as f64 + 0.5 - cy))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScript {
    pub name: String,
    pub frame_count: usize,
    pub grid: usize,
    pub seed: u64,
    pub background: [u8; 3],
    pub objects: Vec<ObjectScript>,
}

impl SceneScript {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.frame_count == 0 {
            return Err(Error::Validation("grid and frame_count must be positive".into()));
        }
        if self.objects.len() > MAX_OBJECTS {
            return Err(Error::Validation(format!(
                "{} objects exceed the limit of {MAX_OBJECTS}",
                self.objects.len()
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.shape.extent() <= 0.0 || o.shape.extent() >= self.grid as f64 {
                return Err(Error::Validation(format!("object {i} size must lie in (0, grid)")));
            }
            if o.start.iter().chain(&o.velocity).any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("object {i} has non-finite motion")));
            }
            if o.color == self.background {
                return Err(Error::Validation(format!("object {i} color equals the background")));
            }
            for &[a, b] in &o.visible {
                if a >= b || b > self.frame_count {
                    return Err(Error::Validation(format!(
                        "object {i} visibility [{a}, {b}) outside [0, {})",
                        self.frame_count
                    )));
                }
            }
        }
        for i in 0..self.objects.len() {
            for j in i + 1..self.objects.len() {
                if self.objects[i].color == self.objects[j].color {
                    return Err(Error::Validation(format!("objects {i} and {j} share a color")));
                }
            }
        }
        Ok(())
    }

    /// Object indices in paint order, bottom first.
    fn paint_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.objects.len()).collect();
        order.sort_by_key(|&i| (self.objects[i].z, i));
        order
    }
}

/// One RGB frame, 8 bits per channel, interleaved `[y][x][c]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub grid: usize,
    pub rgb: Vec<u8>,
}

impl Frame {
    /// `[G, G, 3]` with values in `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.rgb.iter().map(|&v| T::lit(v as f64 / 255.0)).collect();
        Tensor::from_vec(&[self.grid, self.grid, 3], data).expect("frame size")
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.grid + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub script: SceneScript,
    pub frames: Vec<Frame>,
    pub masks: Vec<ObjectMask>,
}

impl VideoSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn objects(&self) -> usize {
        self.script.objects.len()
    }
}

/// Renders one frame with the painter's algorithm.
pub fn render_frame(script: &SceneScript, t: usize) -> (Frame, ObjectMask) {
    let g = script.grid;
    let mut rgb = Vec::with_capacity(g * g * 3);
    let mut labels = vec![0u8; g * g];
    let order = script.paint_order();
    for y in 0..g {
        for x in 0..g {
            let mut color = script.background;
            for &i in &order {
                let o = &script.objects[i];
                if o.is_visible(t) && o.covers(x, y, t, g) {
                    color = o.color;
                    labels[y * g + x] = i as u8 + 1;
                }
            }
            rgb.extend_from_slice(&color);
        }
    }
    let mask = ObjectMask::from_labels(g, script.objects.len(), labels).expect("labels in range");
    (Frame { grid: g, rgb }, mask)
}

pub fn generate(script: &SceneScript) -> Result<VideoSequence> {
    script.validate()?;
    let (frames, masks) = (0..script.frame_count).map(|t| render_frame(script, t)).unzip();
    Ok(VideoSequence {
        script: script.clone(),
        frames,
        masks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    Plain,
    Occlusion,
    Disappearance,
}

/// Parameters for [`random_script`].
#[derive(Clone, Debug)]
pub struct SceneRecipe {
    pub name: String,
    pub frame_count: usize,
    pub grid: usize,
    pub objects: usize,
    pub kind: SceneKind,
    /// Smallest circle radius; rectangles scale with it.
    pub min_radius: f64,
    pub max_radius: f64,
    pub max_speed: f64,
}

impl SceneRecipe {
    pub fn new(name: &str, frame_count: usize, objects: usize, kind: SceneKind) -> Self {
        Self {
            name: name.into(),
            frame_count,
            grid: DEFAULT_GRID,
            objects,
            kind,
            min_radius: 9.0,
            max_radius: 13.0,
            max_speed: 1.0,
        }
    }

    /// Switches to a `grid x grid` canvas with radii scaled from the default grid.
    pub fn with_grid(mut self, grid: usize) -> Self {
        let k = grid as f64 / self.grid as f64;
        self.grid = grid;
        self.min_radius *= k;
        self.max_radius *= k;
        self
    }
}

fn random_visibility(rng: &mut ChaCha8Rng, frames: usize) -> Vec<[usize; 2]> {
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let on = rng.gen_range(frames / 16 + 8..frames / 5 + 16);
        let end = (start + on).min(frames);
        out.push([start, end]);
        let gap = rng.gen_range(frames / 64 + 4..frames / 16 + 12);
        start = end + gap;
        if start >= frames {
            return out;
        }
    }
}

/// Draws a random scene. Every object is at least half visible in frame 0.
pub fn random_script(recipe: &SceneRecipe, seed: u64) -> SceneScript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = recipe.grid as f64;
    let mut colors = PALETTE.to_vec();
    colors.shuffle(&mut rng);
    loop {
        let objects: Vec<ObjectScript> = (0..recipe.objects)
            .map(|i| {
                let r = rng.gen_range(recipe.min_radius..=recipe.max_radius);
                let shape = if rng.gen_bool(0.5) {
                    Shape::Circle { radius: r }
                } else {
                    Shape::Rect {
                        width: rng.gen_range(1.6 * r..=2.0 * r),
                        height: rng.gen_range(1.6 * r..=2.0 * r),
                    }
                };
                let speed = match recipe.kind {
                    SceneKind::Occlusion => recipe.max_speed,
                    _ => rng.gen_range(0.25 * recipe.max_speed..=recipe.max_speed),
                };
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let visible = match recipe.kind {
                    SceneKind::Disappearance if i > 0 || recipe.objects == 1 => {
                        random_visibility(&mut rng, recipe.frame_count)
                    }
                    _ => vec![[0, recipe.frame_count]],
                };
                ObjectScript {
                    shape,
                    start: [rng.gen_range(0.0..g), rng.gen_range(0.0..g)],
                    velocity: [speed * angle.cos(), speed * angle.sin()],
                    color: colors[i],
                    z: i as i32,
                    visible,
                }
            })
            .collect();
        let script = SceneScript {
            name: recipe.name.clone(),
            frame_count: recipe.frame_count,
            grid: recipe.grid,
            seed,
            background: BACKGROUND,
            objects,
        };
        if first_frame_ok(&script) {
            return script;
        }
    }
}

fn first_frame_ok(script: &SceneScript) -> bool {
    let (_, mask) = render_frame(script, 0);
    let g = script.grid;
    script.objects.iter().enumerate().all(|(i, o)| {
        let full = (0..g * g).filter(|&p| o.covers(p % g, p / g, 0, g)).count();
        2 * mask.area(i) >= full && full > 0
    })
}

/// Names of the scripts in [`standard_suite`], in order.
pub const SUITE_NAMES: [&str; 5] = ["short", "long", "verylong", "occlusion", "disappearance"];

pub fn suite_recipes() -> Vec<SceneRecipe> {
    vec![
        SceneRecipe::new("short", 64, 2, SceneKind::Plain),
        SceneRecipe::new("long", 1024, 3, SceneKind::Plain),
        SceneRecipe::new("verylong", 4096, 2, SceneKind::Plain),
        SceneRecipe {
            max_speed: 1.5,
            ..SceneRecipe::new("occlusion", 256, 4, SceneKind::Occlusion)
        },
        SceneRecipe::new("disappearance", 1024, 3, SceneKind::Disappearance),
    ]
}

/// The fixed catalog: short, long, very long, occlusion-heavy and disappearance-heavy.
pub fn standard_suite(seed: u64) -> Vec<SceneScript> {
    suite_recipes()
        .iter()
        .enumerate()
        .map(|(i, r)| random_script(r, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
        .collect()
}

/// Short clips with mixed difficulty, for training.
pub fn training_suite(seed: u64, videos: usize, frames: usize) -> Vec<SceneScript> {
    let kinds = [SceneKind::Plain, SceneKind::Occlusion, SceneKind::Disappearance];
    (0..videos)
        .map(|i| {
            let kind = kinds[i % kinds.len()];
            let objects = 1 + (i / kinds.len()) % MAX_OBJECTS;
            let mut recipe = SceneRecipe::new(&format!("train{i:03}"), frames, objects, kind);
            if kind == SceneKind::Occlusion {
                recipe.max_speed = 1.5;
            }
            random_script(&recipe, seed.wrapping_mul(7_919).wrapping_add(i as u64))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    precision: Precision,
    grid: usize,
    frame_count: usize,
    objects: usize,
    script: SceneScript,
}

fn push_rle(out: &mut Vec<u8>, plane: impl Iterator<Item = bool>) {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for v in plane {
        if v != current {
            runs.push(len);
            current = v;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    out.extend_from_slice(&(runs.len() as u32).to_le_bytes());
    for r in runs {
        out.extend_from_slice(&r.to_le_bytes());
    }
}

/// Serializes a sequence; `T` fixes the scalar type readers must load it as.
pub fn encode_dataset<T: Scalar>(seq: &VideoSequence) -> Result<Vec<u8>> {
    let g = seq.script.grid;
    let header = DatasetHeader {
        precision: T::PRECISION,
        grid: g,
        frame_count: seq.len(),
        objects: seq.objects(),
        script: seq.script.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(10 + json.len() + seq.len() * g * g * 3);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for f in &seq.frames {
        for c in 0..3 {
            out.extend(f.rgb.iter().skip(c).step_by(3));
        }
    }
    for m in &seq.masks {
        for k in 0..seq.objects() {
            push_rle(&mut out, m.labels().iter().map(|&l| l as usize == k + 1));
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.bytes.len(), format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_dataset<T: Scalar>(bytes: &[u8]) -> Result<VideoSequence> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::format(0, "bad magic, expected MAVS"));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if version != DATASET_VERSION {
        return Err(Error::format(4, format!("unsupported dataset version {version}")));
    }
    let hdr_len = r.u32("header length")? as usize;
    let header: DatasetHeader = serde_json::from_slice(r.take(hdr_len, "header")?)
        .map_err(|e| Error::format(10, format!("bad header json: {e}")))?;
    if header.precision != T::PRECISION {
        return Err(Error::Config(format!(
            "dataset was written for {} scalars, cannot import as {}",
            header.precision,
            T::PRECISION
        )));
    }
    let g = header.grid;
    if g == 0 || header.script.grid != g || header.script.frame_count != header.frame_count
        || header.script.objects.len() != header.objects || header.objects > MAX_OBJECTS
    {
        return Err(Error::format(10, "header fields disagree with the script"));
    }
    let plane = g * g;
    let mut frames = Vec::with_capacity(header.frame_count);
    for _ in 0..header.frame_count {
        let raw = r.take(3 * plane, "frame payload")?;
        let mut rgb = vec![0u8; 3 * plane];
        for c in 0..3 {
            for p in 0..plane {
                rgb[p * 3 + c] = raw[c * plane + p];
            }
        }
        frames.push(Frame { grid: g, rgb });
    }
    let mut masks = Vec::with_capacity(header.frame_count);
    for _ in 0..header.frame_count {
        let mut labels = vec![0u8; plane];
        for k in 0..header.objects {
            let at = r.pos;
            let n = r.u32("run count")? as usize;
            let mut p = 0usize;
            for run in 0..n {
                let len = r.u32("run length")? as usize;
                if p + len > plane {
                    return Err(Error::format(r.pos - 4, "mask runs overflow the plane"));
                }
                if run % 2 == 1 {
                    for l in &mut labels[p..p + len] {
                        if *l != 0 {
                            return Err(Error::format(r.pos - 4, "overlapping object masks"));
                        }
                        *l = k as u8 + 1;
                    }
                }
                p += len;
            }
            if p != plane {
                return Err(Error::format(at, format!("mask runs cover {p} of {plane} pixels")));
            }
        }
        masks.push(ObjectMask::from_labels(g, header.objects, labels)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, "trailing bytes after masks"));
    }
    Ok(VideoSequence {
        script: header.script,
        frames,
        masks,
    })
}

pub fn export<T: Scalar>(seq: &VideoSequence, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset::<T>(seq)?)?;
    Ok(())
}

pub fn import<T: Scalar>(path: &Path) -> Result<VideoSequence> {
    decode_dataset::<T>(&fs::read(path)?)
}
