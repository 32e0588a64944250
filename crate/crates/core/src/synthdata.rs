//! Synthetic moving-shape videos with exact ground truth.
//!
//! Objects are textured squares, discs or diamonds translating by whole
//! pixels over a textured static background. The foreground is drawn last,
//! so its ground-truth mask is its full in-frame shape. Every object also
//! yields a detection per frame on its visible pixels.
//!
//! The default benchmark adds distractors drawn from the same shape and
//! appearance distribution as the foreground but appearing only after the
//! first frame; a single frame cannot tell them apart from the foreground.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Mask;
use crate::io::VideoSample;
use crate::pruning::Detection;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Disc,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Disc, ShapeKind::Diamond];

    /// Whether local pixel `(u, v)` of a `size`-wide footprint is covered.
    fn covers(self, size: usize, u: usize, v: usize) -> bool {
        // doubled coordinates keep the centre on the half-pixel grid
        let c = size as i64 - 1;
        let du = (2 * u as i64 - c).abs();
        let dv = (2 * v as i64 - c).abs();
        let s = size as i64;
        match self {
            ShapeKind::Square => true,
            ShapeKind::Disc => du * du + dv * dv <= s * s,
            ShapeKind::Diamond => du + dv <= s,
        }
    }
}

/// Blocky colour texture: `base` plus per-cell offsets in `±contrast`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Texture {
    pub base: [f64; 3],
    pub contrast: f64,
    pub cell: usize,
    pub seed: u64,
}

impl Texture {
    fn sample(&self, u: i64, v: i64, ch: usize) -> f64 {
        let cell = self.cell.max(1) as i64;
        let h = hash(&[self.seed, u.div_euclid(cell) as u64, v.div_euclid(cell) as u64, ch as u64]);
        self.base[ch] + self.contrast * (2.0 * unit(h) - 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub kind: ShapeKind,
    pub size: usize,
    /// Top-left corner on frame 0; may lie outside the frame.
    pub start: (i64, i64),
    /// Pixels per frame; positions are rounded to whole pixels.
    pub velocity: (f64, f64),
    pub texture: Texture,
    /// First frame on which the object exists.
    pub visible_from: usize,
}

impl ObjectSpec {
    pub fn position(&self, t: usize) -> (i64, i64) {
        (
            self.start.0 + (self.velocity.0 * t as f64).round() as i64,
            self.start.1 + (self.velocity.1 * t as f64).round() as i64,
        )
    }

    pub fn is_static(&self) -> bool {
        self.velocity == (0.0, 0.0)
    }

    /// In-frame footprint on frame `t`, empty before `visible_from`.
    pub fn footprint(&self, t: usize, width: usize, height: usize) -> Mask {
        if t < self.visible_from {
            return Mask::empty(width, height);
        }
        let (px, py) = self.position(t);
        Mask::from_fn(width, height, |x, y| {
            let (u, v) = (x as i64 - px, y as i64 - py);
            (0..self.size as i64).contains(&u)
                && (0..self.size as i64).contains(&v)
                && self.kind.covers(self.size, u as usize, v as usize)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub foreground: ObjectSpec,
    /// Drawn in order, all beneath the foreground.
    pub distractors: Vec<ObjectSpec>,
    pub background: Texture,
    /// Half-width of the static per-pixel noise.
    pub noise: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(Error::config("scene needs a non-empty frame size and frame count"));
        }
        for (i, o) in std::iter::once(&self.foreground).chain(&self.distractors).enumerate() {
            if o.size == 0 || o.size > self.width.min(self.height) {
                return Err(Error::config(format!(
                    "object {i} of size {} does not fit a {}×{} frame",
                    o.size, self.width, self.height
                )));
            }
        }
        if self.foreground.visible_from != 0
            || self.foreground.footprint(0, self.width, self.height).is_empty()
        {
            return Err(Error::config("foreground must be visible on frame 0"));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::config(format!("noise {} outside [0, 1)", self.noise)));
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED, |acc, &p| splitmix(acc ^ splitmix(p)))
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Renders the scene. `seed` drives the static noise field only; the
/// textures carry their own seeds.
pub fn gen_video(id: &str, spec: &SceneSpec, seed: u64) -> Result<VideoSample> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let plane = w * h;
    // back to front: distractors, then the foreground
    let layers: Vec<&ObjectSpec> = spec.distractors.iter().chain([&spec.foreground]).collect();
    let fg_layer = layers.len() - 1;
    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    let mut detections = Vec::new();
    for t in 0..spec.frames {
        let mut data = vec![0.0; 3 * plane];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    data[ch * plane + y * w + x] = spec.background.sample(x as i64, y as i64, ch);
                }
            }
        }
        let footprints: Vec<Mask> = layers.iter().map(|o| o.footprint(t, w, h)).collect();
        for (o, fp) in layers.iter().zip(&footprints) {
            let (px, py) = o.position(t);
            for y in 0..h {
                for x in 0..w {
                    if fp.get(x, y) {
                        for ch in 0..3 {
                            data[ch * plane + y * w + x] =
                                o.texture.sample(x as i64 - px, y as i64 - py, ch);
                        }
                    }
                }
            }
        }
        for i in 0..plane {
            for ch in 0..3 {
                let n = spec.noise * (2.0 * unit(hash(&[seed, i as u64, ch as u64])) - 1.0);
                let v = (data[ch * plane + i] + n).clamp(0.0, 1.0);
                // stored frames are 8-bit, so quantize up front
                data[ch * plane + i] = (v * 255.0).round() / 255.0;
            }
        }
        frames.push(Tensor::new([3, h, w], data)?);
        masks.push(footprints[fg_layer].clone());

        let mut covered = Mask::empty(w, h);
        let mut per_frame = Vec::new();
        for (layer, fp) in footprints.iter().enumerate().rev() {
            let visible = fp.and(&covered.not())?;
            covered = covered.or(fp)?;
            if !visible.is_empty() {
                let hint = if layer == fg_layer { 0 } else { layer as i64 + 1 };
                per_frame.push(Detection::from_mask(t, visible, hint)?);
            }
        }
        per_frame.sort_by_key(|d| d.track_hint);
        detections.extend(per_frame);
    }
    Ok(VideoSample {
        id: id.to_string(),
        frames,
        masks,
        detections,
    })
}

/// Base colour range of benchmark objects; backgrounds stay darker.
const OBJECT_TONES: (f64, f64) = (0.55, 0.95);
const BACKGROUND_TONES: (f64, f64) = (0.05, 0.45);

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub train_videos: usize,
    pub test_videos: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub noise: f64,
    pub min_size: usize,
    pub max_size: usize,
    /// Largest per-axis speed in pixels per frame.
    pub max_speed: f64,
    pub max_distractors: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            train_videos: 20,
            test_videos: 8,
            frames: 16,
            width: 64,
            height: 64,
            noise: 0.02,
            min_size: 14,
            max_size: 22,
            max_speed: 0.8,
            max_distractors: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
}

fn random_texture(rng: &mut ChaCha8Rng, range: (f64, f64), contrast: f64, cell: usize) -> Texture {
    Texture {
        base: [0; 3].map(|_| rng.gen_range(range.0..range.1)),
        contrast,
        cell,
        seed: rng.gen(),
    }
}

/// Uniform start coordinate keeping `[start + round(v·t), +size)` inside
/// `[0, extent)` for every frame.
fn random_start(rng: &mut ChaCha8Rng, v: f64, size: usize, extent: usize, frames: usize) -> i64 {
    let shifts = (0..frames).map(|t| (v * t as f64).round() as i64);
    let lo = -shifts.clone().min().unwrap_or(0);
    let hi = extent as i64 - size as i64 - shifts.max().unwrap_or(0);
    if hi <= lo {
        lo.min(hi).max(0)
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn random_object(rng: &mut ChaCha8Rng, cfg: &BenchmarkConfig, visible_from: usize) -> ObjectSpec {
    let kind = ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())];
    let size = rng.gen_range(cfg.min_size..=cfg.max_size.max(cfg.min_size));
    let mut speed = || {
        if cfg.max_speed > 0.0 {
            rng.gen_range(-cfg.max_speed..=cfg.max_speed)
        } else {
            0.0
        }
    };
    let velocity = (speed(), speed());
    let start = (
        random_start(rng, velocity.0, size, cfg.width, cfg.frames),
        random_start(rng, velocity.1, size, cfg.height, cfg.frames),
    );
    ObjectSpec {
        kind,
        size,
        start,
        velocity,
        texture: random_texture(rng, OBJECT_TONES, 0.1, 3),
        visible_from,
    }
}

fn overlaps_over_time(a: &ObjectSpec, b: &ObjectSpec, frames: usize) -> bool {
    (b.visible_from..frames).any(|t| {
        let (ax, ay) = a.position(t);
        let (bx, by) = b.position(t);
        let sep = |p: i64, q: i64, sp: usize, sq: usize| p + sp as i64 <= q || q + sq as i64 <= p;
        !(sep(ax, bx, a.size, b.size) || sep(ay, by, a.size, b.size))
    })
}

/// One benchmark scene: a foreground on frame 0 and late-appearing
/// look-alike distractors that avoid overlapping it.
pub fn random_scene(rng: &mut ChaCha8Rng, cfg: &BenchmarkConfig) -> SceneSpec {
    let foreground = random_object(rng, cfg, 0);
    let n = if cfg.max_distractors == 0 || cfg.frames < 2 {
        0
    } else {
        rng.gen_range(1..=cfg.max_distractors)
    };
    let mut distractors: Vec<ObjectSpec> = Vec::with_capacity(n);
    for _ in 0..n {
        let from = rng.gen_range(1..=(cfg.frames / 2).max(1));
        let mut candidate = random_object(rng, cfg, from);
        for _ in 0..32 {
            let clear = !overlaps_over_time(&foreground, &candidate, cfg.frames)
                && distractors.iter().all(|d| !overlaps_over_time(d, &candidate, cfg.frames));
            if clear {
                break;
            }
            candidate = random_object(rng, cfg, from);
        }
        distractors.push(candidate);
    }
    SceneSpec {
        width: cfg.width,
        height: cfg.height,
        frames: cfg.frames,
        foreground,
        distractors,
        background: random_texture(rng, BACKGROUND_TONES, 0.15, 8),
        noise: cfg.noise,
    }
}

fn gen_split(seed: u64, stream: u64, prefix: &str, count: usize, cfg: &BenchmarkConfig) -> Result<Vec<VideoSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..count)
        .map(|i| {
            let scene = random_scene(&mut rng, cfg);
            let noise_seed = rng.gen();
            gen_video(&format!("{prefix}_{i:03}"), &scene, noise_seed)
        })
        .collect()
}

/// Train and test splits drawn from separate random streams of `seed`.
pub fn gen_benchmark(cfg: &BenchmarkConfig, seed: u64) -> Result<Benchmark> {
    if cfg.train_videos == 0 || cfg.test_videos == 0 {
        return Err(Error::config("benchmark needs at least one train and one test video"));
    }
    if cfg.min_size == 0 || cfg.max_size > cfg.width.min(cfg.height) || cfg.min_size > cfg.max_size {
        return Err(Error::config(format!(
            "object sizes {}..={} do not fit a {}×{} frame",
            cfg.min_size, cfg.max_size, cfg.width, cfg.height
        )));
    }
    Ok(Benchmark {
        train: gen_split(seed, 1, "train", cfg.train_videos, cfg)?,
        test: gen_split(seed, 2, "test", cfg.test_videos, cfg)?,
    })
}

/// A dominant square entering from the left edge and a small static
/// square that appears on frame 1.
pub fn pruning_scene(frames: usize) -> SceneSpec {
    let tex = |base: [f64; 3], seed| Texture {
        base,
        contrast: 0.15,
        cell: 3,
        seed,
    };
    SceneSpec {
        width: 64,
        height: 64,
        frames,
        foreground: ObjectSpec {
            kind: ShapeKind::Square,
            size: 24,
            start: (-6, 20),
            velocity: (2.0, 0.0),
            texture: tex([0.8, 0.3, 0.3], 11),
            visible_from: 0,
        },
        distractors: vec![ObjectSpec {
            kind: ShapeKind::Square,
            size: 6,
            start: (52, 4),
            velocity: (0.0, 0.0),
            texture: tex([0.75, 0.35, 0.3], 12),
            visible_from: 1,
        }],
        background: tex([0.3, 0.5, 0.6], 13),
        noise: 0.02,
    }
}
