//! Pair sampling, augmentation and the SGD training loop.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{crop_image, frame_size, rotate_image, rotate_mask, BBox, Heatmap, Image, Mask};
use crate::io::VideoSample;
use crate::model::{AdNet, ModelConfig, Mode, Variant};
use crate::tensor::{ops, Tape, Tensor};

/// Probability that a pair is left unrotated.
pub const P_NO_ROTATION: f64 = 0.51;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Horizon of the poly schedule.
    pub max_iter: usize,
    /// Iterations actually run; at most `max_iter`.
    pub iterations: usize,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub crop: bool,
    pub rotate: bool,
    /// Side of the square network input after cropping.
    pub input_size: usize,
    /// Loss history keeps one record every `log_every` iterations.
    pub log_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.005,
            max_iter: 40_000,
            iterations: 2_000,
            poly_power: 0.9,
            weight_decay: 0.0005,
            batch_size: 4,
            seed: 0,
            crop: true,
            rotate: true,
            input_size: 64,
            log_every: 10,
            model: ModelConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl TrainConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "base_lr" => self.base_lr = parse_value(key, value)?,
            "max_iter" => self.max_iter = parse_value(key, value)?,
            "iterations" => self.iterations = parse_value(key, value)?,
            "poly_power" => self.poly_power = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "crop" => self.crop = parse_bool(key, value)?,
            "rotate" => self.rotate = parse_bool(key, value)?,
            "input_size" => self.input_size = parse_value(key, value)?,
            "log_every" => self.log_every = parse_value(key, value)?,
            "variant" => self.model.variant = value.parse()?,
            "encoder_channels" => self.model.encoder_channels = parse_list(key, value)?,
            "encoder_strides" => self.model.encoder_strides = parse_list(key, value)?,
            "fusion_dim" => self.model.fusion_dim = parse_value(key, value)?,
            "dropout" => self.model.dropout = parse_value(key, value)?,
            "leaky_slope" => self.model.leaky_slope = parse_value(key, value)?,
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// The config as `key = value` lines accepted by [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let m = &self.model;
        for (k, v) in [
            ("base_lr", self.base_lr.to_string()),
            ("max_iter", self.max_iter.to_string()),
            ("iterations", self.iterations.to_string()),
            ("poly_power", self.poly_power.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("crop", self.crop.to_string()),
            ("rotate", self.rotate.to_string()),
            ("input_size", self.input_size.to_string()),
            ("log_every", self.log_every.to_string()),
            ("variant", m.variant.to_string()),
            ("encoder_channels", join(&m.encoder_channels)),
            ("encoder_strides", join(&m.encoder_strides)),
            ("fusion_dim", m.fusion_dim.to_string()),
            ("dropout", m.dropout.to_string()),
            ("leaky_slope", m.leaky_slope.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if !(self.poly_power > 0.0) {
            return Err(Error::config(format!("poly_power {} must be positive", self.poly_power)));
        }
        if self.batch_size == 0 || self.max_iter == 0 || self.log_every == 0 {
            return Err(Error::config("batch_size, max_iter and log_every must be at least 1"));
        }
        if self.iterations > self.max_iter {
            return Err(Error::config(format!(
                "iterations {} exceed the schedule horizon {}",
                self.iterations, self.max_iter
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        self.model.validate()?;
        if self.input_size == 0 || self.input_size % self.model.stride() != 0 {
            return Err(Error::config(format!(
                "input_size {} must be a positive multiple of the encoder stride {}",
                self.input_size,
                self.model.stride()
            )));
        }
        Ok(())
    }

    /// `base_lr·(1 − iter/max_iter)^poly_power`, zero past the horizon.
    pub fn poly_lr(&self, iter: usize) -> f64 {
        if iter > self.max_iter {
            warn!("iteration {iter} past schedule horizon {}, lr clamped to 0", self.max_iter);
            return 0.0;
        }
        let frac = 1.0 - iter as f64 / self.max_iter as f64;
        self.base_lr * frac.powf(self.poly_power)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub anchor: Image,
    pub anchor_mask: Mask,
    pub target: Image,
    pub target_mask: Mask,
    pub video_id: String,
    pub anchor_index: usize,
    pub target_index: usize,
}

/// Frame 0 as the anchor and a uniformly drawn frame (0 included) as the
/// target.
pub fn sample_pair(video: &VideoSample, rng: &mut impl Rng) -> Result<TrainPair> {
    if video.is_empty() {
        return Err(Error::input(format!("video {} has no frames", video.id)));
    }
    if video.masks.len() != video.len() {
        return Err(Error::input(format!(
            "video {} needs one mask per frame for training",
            video.id
        )));
    }
    let t = rng.gen_range(0..video.len());
    Ok(TrainPair {
        anchor: video.frames[0].clone(),
        anchor_mask: video.masks[0].clone(),
        target: video.frames[t].clone(),
        target_mask: video.masks[t].clone(),
        video_id: video.id.clone(),
        anchor_index: 0,
        target_index: t,
    })
}

/// `k` in `0..8` for a `k·45°` rotation.
pub fn sample_rotation(rng: &mut impl Rng) -> u8 {
    let u: f64 = rng.gen();
    if u < P_NO_ROTATION {
        0
    } else {
        let step = (1.0 - P_NO_ROTATION) / 7.0;
        (1 + ((u - P_NO_ROTATION) / step) as u8).min(7)
    }
}

/// Region around the tight foreground box with each side pushed out by
/// `(f − 1)` box extents, `f` uniform in `[1, 2]`, clipped to the frame.
pub fn sample_crop(mask: &Mask, rng: &mut impl Rng) -> BBox {
    let (w, h) = (mask.width(), mask.height());
    let Some(b) = mask.bbox() else {
        return BBox { x0: 0, y0: 0, x1: w, y1: h };
    };
    let (bw, bh) = (b.width() as f64, b.height() as f64);
    let mut grow = |extent: f64| (rng.gen_range(1.0..=2.0) - 1.0) * extent;
    let (l, r, t, btm) = (grow(bw), grow(bw), grow(bh), grow(bh));
    BBox {
        x0: (b.x0 as f64 - l).floor().max(0.0) as usize,
        y0: (b.y0 as f64 - t).floor().max(0.0) as usize,
        x1: ((b.x1 as f64 + r).ceil() as usize).min(w),
        y1: ((b.y1 as f64 + btm).ceil() as usize).min(h),
    }
}

fn crop_resize(frame: &Image, mask: &Mask, b: &BBox, size: usize) -> Result<(Image, Mask)> {
    let f = crop_image(frame, b)?;
    let f = ops::bilinear_resize(&f, size, size)?;
    Ok((f, mask.crop(b).resize_nearest(size, size)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub crop: bool,
    pub rotate: bool,
    pub input_size: usize,
}

/// Independent foreground crops for the two frames, resized to the input
/// size, then one shared rotation.
pub fn augment(pair: &TrainPair, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<TrainPair> {
    let mut out = pair.clone();
    let s = cfg.input_size;
    for (frame, mask) in [
        (&mut out.anchor, &mut out.anchor_mask),
        (&mut out.target, &mut out.target_mask),
    ] {
        let (h, w) = frame_size(frame)?;
        let b = if cfg.crop {
            sample_crop(mask, rng)
        } else {
            BBox { x0: 0, y0: 0, x1: w, y1: h }
        };
        if cfg.crop || (h, w) != (s, s) {
            let (f, m) = crop_resize(frame, mask, &b, s)?;
            *frame = f;
            *mask = m;
        }
    }
    if cfg.rotate {
        let k = sample_rotation(rng);
        if k != 0 {
            out.anchor = rotate_image(&out.anchor, k)?;
            out.target = rotate_image(&out.target, k)?;
            out.anchor_mask = rotate_mask(&out.anchor_mask, k);
            out.target_mask = rotate_mask(&out.target_mask, k);
        }
    }
    Ok(out)
}

/// Mean clamped binary cross-entropy; `pred` is bilinearly upsampled to
/// the mask size when needed.
pub fn bce_loss(pred: &Heatmap, gt: &Mask) -> Result<f64> {
    let (pw, ph, gw, gh) = (pred.width(), pred.height(), gt.width(), gt.height());
    let pred = if (pw, ph) == (gw, gh) {
        pred.clone()
    } else {
        if pw * gh != ph * gw {
            return Err(Error::shape(format!(
                "heatmap {pw}×{ph} and mask {gw}×{gh} differ in aspect ratio"
            )));
        }
        pred.resize(gw, gh)?
    };
    ops::bce(&pred.to_tensor(), &gt.to_tensor())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("iteration,lr,loss\n");
    for r in history {
        let _ = writeln!(s, "{},{:.10e},{:.10e}", r.iteration, r.lr, r.loss);
    }
    s
}

/// Loss and parameter gradients for one pair at input resolution.
pub fn pair_gradients(
    model: &AdNet,
    pair: &TrainPair,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let a = tape.constant(pair.anchor.clone());
    let c = tape.constant(pair.target.clone());
    let out = model.forward_var(&mut tape, &params, a, c, Mode::Train(rng))?;
    let (h, w) = frame_size(&pair.target)?;
    let up = tape.bilinear_resize(out, h, w)?;
    let target = tape.constant(pair.target_mask.to_tensor());
    let loss = tape.bce(up, target)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let g = params
        .vars()
        .into_iter()
        .zip(model.params().tensors())
        .map(|(v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    Ok((value, g))
}

/// `w ← w − lr·(g + weight_decay·w)` for every parameter.
pub fn sgd_step(model: &mut AdNet, grads: &[Tensor], lr: f64, weight_decay: f64) {
    for (w, g) in model.params_mut().tensors_mut().into_iter().zip(grads) {
        for (wi, &gi) in w.data_mut().iter_mut().zip(g.data()) {
            *wi -= lr * (gi + weight_decay * *wi);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: AdNet,
    pub history: Vec<LossRecord>,
}

/// Runs `config.iterations` SGD steps from a fresh model seeded by
/// `config.seed`.
pub fn train(config: &TrainConfig, dataset: &[VideoSample]) -> Result<TrainOutput> {
    config.validate()?;
    let model = AdNet::new(config.model.clone(), config.seed)?;
    train_from(model, config, dataset)
}

/// Continues training `model`. Batches are drawn from a master generator
/// seeded by the config; every sample gets its own derived generator for
/// augmentation and dropout.
pub fn train_from(mut model: AdNet, config: &TrainConfig, dataset: &[VideoSample]) -> Result<TrainOutput> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    if let Some(v) = dataset.iter().find(|v| v.is_empty() || v.masks.len() != v.len()) {
        return Err(Error::input(format!("video {} lacks frames or masks", v.id)));
    }
    let aug = AugmentConfig {
        crop: config.crop,
        rotate: config.rotate,
        input_size: config.input_size,
    };
    // stream 0 seeds the weights, stream 1 the data order
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    master.set_stream(1);
    let mut history = Vec::new();
    let batch = config.batch_size as f64;
    for iter in 0..config.iterations {
        let lr = config.poly_lr(iter);
        let mut sum: Option<Vec<Tensor>> = None;
        let mut loss_sum = 0.0;
        for _ in 0..config.batch_size {
            let video = &dataset[master.gen_range(0..dataset.len())];
            let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
            let pair = augment(&sample_pair(video, &mut rng)?, &aug, &mut rng)?;
            let (loss, grads) = pair_gradients(&model, &pair, &mut rng)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    iteration: iter,
                    video: video.id.clone(),
                });
            }
            loss_sum += loss;
            match sum.as_mut() {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads = sum.expect("batch_size >= 1");
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x /= batch);
        }
        sgd_step(&mut model, &grads, lr, config.weight_decay);
        let loss = loss_sum / batch;
        if iter % config.log_every == 0 || iter + 1 == config.iterations {
            history.push(LossRecord { iteration: iter, lr, loss });
            if iter % (config.log_every * 10) == 0 {
                info!("iter {iter} lr {lr:.6} loss {loss:.5}");
            }
        }
    }
    Ok(TrainOutput { model, history })
}

/// Base learning rate that trains from scratch within the default 2000 iterations.
pub const DESK_LR: f64 = 0.1;

/// The default schedule with `DESK_LR`, for benchmark-scale runs from scratch.
pub fn desk_config(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        base_lr: DESK_LR,
        model: ModelConfig::default().with_variant(variant),
        ..TrainConfig::default()
    }
}
