//! Video inference with multi-scale and mirrored test-time augmentation.
//!
//! Each augmentation variant resizes both frames by a scale factor and
//! optionally mirrors them. Heatmaps are un-mirrored, resized back to the
//! frame size, averaged over the mirror pair within a scale and then over
//! scales. The anchor embedding of every variant is computed once per video.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{frame_size, Heatmap, Image, Mask};
use crate::io::{frame_file_name, write_heatmap, write_mask, VideoSample};
use crate::model::{AdNet, FrameEmbedding};
use crate::tensor::ops;

/// What inference needs from a segmentation model.
pub trait PairModel {
    type Embedding;

    /// Input sides must be multiples of this.
    fn stride(&self) -> usize;

    /// Whether `predict` uses the anchor at all.
    fn needs_anchor(&self) -> bool;

    fn encode_anchor(&self, frame: &Image) -> Result<Self::Embedding>;

    /// Heatmap for `frame`, at any resolution with the frame's aspect.
    fn predict(&self, anchor: Option<&Self::Embedding>, frame: &Image) -> Result<Heatmap>;
}

impl PairModel for AdNet {
    type Embedding = FrameEmbedding;

    fn stride(&self) -> usize {
        AdNet::stride(self)
    }

    fn needs_anchor(&self) -> bool {
        self.variant().needs_anchor()
    }

    fn encode_anchor(&self, frame: &Image) -> Result<FrameEmbedding> {
        self.encode(frame)
    }

    fn predict(&self, anchor: Option<&FrameEmbedding>, frame: &Image) -> Result<Heatmap> {
        self.predict_with_anchor(anchor, frame)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceConfig {
    pub scales: Vec<f64>,
    pub mirror: bool,
    pub threshold: f64,
    /// Reuse anchor embeddings across frames.
    pub cache_anchor: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            scales: vec![0.75, 1.0, 1.5],
            mirror: true,
            threshold: 0.5,
            cache_anchor: true,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::config("at least one inference scale is required"));
        }
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::config(format!("scale {s} must be positive")));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }

    /// Number of `(scale, mirror)` variants per frame.
    pub fn variant_count(&self) -> usize {
        self.scales.len() * if self.mirror { 2 } else { 1 }
    }

    fn variants(&self) -> Vec<(f64, bool)> {
        let flips: &[bool] = if self.mirror { &[false, true] } else { &[false] };
        self.scales
            .iter()
            .flat_map(|&s| flips.iter().map(move |&f| (s, f)))
            .collect()
    }
}

/// `side·scale` rounded to the nearest multiple of `stride`.
pub fn scaled_side(side: usize, scale: f64, stride: usize) -> Result<usize> {
    let n = (side as f64 * scale / stride as f64).round() as usize * stride;
    if n == 0 {
        return Err(Error::config(format!(
            "scale {scale} shrinks a side of {side} below the encoder stride {stride}"
        )));
    }
    Ok(n)
}

fn prepare(frame: &Image, scale: f64, flip: bool, stride: usize) -> Result<Image> {
    let (h, w) = frame_size(frame)?;
    let (sh, sw) = (scaled_side(h, scale, stride)?, scaled_side(w, scale, stride)?);
    let mut x = if (sh, sw) == (h, w) {
        frame.clone()
    } else {
        ops::bilinear_resize(frame, sh, sw)?
    };
    if flip {
        x = ops::flip_horizontal(&x)?;
    }
    Ok(x)
}

/// Anchor embeddings for every variant, or `None`s when the model ignores
/// the anchor.
fn anchor_embeddings<M: PairModel>(
    model: &M,
    anchor: &Image,
    cfg: &InferenceConfig,
) -> Result<Vec<Option<M::Embedding>>> {
    cfg.variants()
        .into_iter()
        .map(|(s, f)| {
            if model.needs_anchor() {
                Ok(Some(model.encode_anchor(&prepare(anchor, s, f, model.stride())?)?))
            } else {
                Ok(None)
            }
        })
        .collect()
}

fn aggregate<M: PairModel>(
    model: &M,
    anchors: &[Option<M::Embedding>],
    frame: &Image,
    cfg: &InferenceConfig,
) -> Result<Heatmap> {
    let (h, w) = frame_size(frame)?;
    let per_scale = if cfg.mirror { 2 } else { 1 };
    let mut total = vec![0.0; h * w];
    for (chunk, anchors) in cfg.variants().chunks(per_scale).zip(anchors.chunks(per_scale)) {
        let mut acc = vec![0.0; h * w];
        for (&(s, flip), a) in chunk.iter().zip(anchors) {
            let x = prepare(frame, s, flip, model.stride())?;
            let mut out = model.predict(a.as_ref(), &x)?;
            if flip {
                out = out.flip_horizontal();
            }
            if (out.width(), out.height()) != (w, h) {
                out = out.resize(w, h)?;
            }
            for (a, v) in acc.iter_mut().zip(out.data()) {
                *a += v;
            }
        }
        for (t, a) in total.iter_mut().zip(&acc) {
            *t += a / chunk.len() as f64;
        }
    }
    let n = cfg.scales.len() as f64;
    Heatmap::new(w, h, total.into_iter().map(|v| (v / n).clamp(0.0, 1.0)).collect())
}

/// Augmented heatmap of `frame` against `anchor` at the frame's size.
pub fn tta_aggregate<M: PairModel>(
    model: &M,
    anchor: &Image,
    frame: &Image,
    cfg: &InferenceConfig,
) -> Result<Heatmap> {
    cfg.validate()?;
    if frame_size(anchor)? != frame_size(frame)? {
        return Err(Error::input("anchor and frame sizes differ"));
    }
    let anchors = anchor_embeddings(model, anchor, cfg)?;
    aggregate(model, &anchors, frame, cfg)
}

/// Foreground where the value reaches `threshold`.
pub fn binarize(h: &Heatmap, threshold: f64) -> Mask {
    h.binarize(threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub heatmaps: Vec<Heatmap>,
    pub masks: Vec<Mask>,
}

/// Segments every frame, frame 0 included, against frame 0.
pub fn segment_video<M: PairModel>(
    model: &M,
    video: &VideoSample,
    cfg: &InferenceConfig,
) -> Result<Segmentation> {
    cfg.validate()?;
    video.frame_size()?;
    let anchor = &video.frames[0];
    let cached = if cfg.cache_anchor {
        Some(anchor_embeddings(model, anchor, cfg)?)
    } else {
        None
    };
    let mut heatmaps = Vec::with_capacity(video.len());
    for frame in &video.frames {
        let h = match &cached {
            Some(a) => aggregate(model, a, frame, cfg)?,
            None => aggregate(model, &anchor_embeddings(model, anchor, cfg)?, frame, cfg)?,
        };
        heatmaps.push(h);
    }
    let masks = heatmaps.iter().map(|h| binarize(h, cfg.threshold)).collect();
    Ok(Segmentation { heatmaps, masks })
}

/// `<out>/<id>/heatmaps/%05d.pgm` (16-bit) and `<out>/<id>/masks/%05d.pgm`.
pub fn write_segmentation(out: &Path, id: &str, seg: &Segmentation) -> Result<()> {
    let dir = out.join(id);
    for (t, (h, m)) in seg.heatmaps.iter().zip(&seg.masks).enumerate() {
        write_heatmap(&dir.join("heatmaps").join(frame_file_name(t, "pgm")), h)?;
        write_mask(&dir.join("masks").join(frame_file_name(t, "pgm")), m)?;
    }
    Ok(())
}
