//! Segmentation and saliency scores plus the embedding-drift analysis.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::{Heatmap, Mask};
use crate::io::VideoSample;
use crate::model::AdNet;

/// Weight of precision in the saliency F-measure.
pub const BETA_SQ: f64 = 0.3;
/// Frames scoring above this count towards recall.
pub const RECALL_THRESHOLD: f64 = 0.5;

fn check_same(a: &Mask, b: &Mask) -> Result<()> {
    if a.same_size(b) {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "masks {}×{} and {}×{} differ",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )))
    }
}

/// Intersection over union; 1 when both masks are empty.
pub fn region_similarity(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with at least one 4-neighbour outside the mask; the
/// frame border counts as outside.
pub fn boundary(mask: &Mask) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    Mask::from_fn(w, h, |x, y| {
        mask.get(x, y)
            && (x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1))
    })
}

/// `ceil(0.008 · diagonal)` pixels.
pub fn default_tolerance(width: usize, height: usize) -> usize {
    (0.008 * ((width * width + height * height) as f64).sqrt()).ceil() as usize
}

/// Fraction of `from` pixels lying within Euclidean distance `r` of some
/// `to` pixel.
fn matched_fraction(from: &Mask, to: &Mask, r: usize) -> f64 {
    let (w, h) = (from.width() as i64, from.height() as i64);
    let r = r as i64;
    let offsets: Vec<(i64, i64)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect();
    let (mut total, mut hit) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if !from.get(x as usize, y as usize) {
                continue;
            }
            total += 1;
            let found = offsets.iter().any(|&(dx, dy)| {
                let (u, v) = (x + dx, y + dy);
                u >= 0 && v >= 0 && u < w && v < h && to.get(u as usize, v as usize)
            });
            hit += found as usize;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Boundary F-measure with matching tolerance `tol_radius`.
pub fn contour_accuracy(pred: &Mask, gt: &Mask, tol_radius: usize) -> Result<f64> {
    check_same(pred, gt)?;
    let (bp, bg) = (boundary(pred), boundary(gt));
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let precision = matched_fraction(&bp, &bg, tol_radius);
    let recall = matched_fraction(&bg, &bp, tol_radius);
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqStats {
    pub mean: f64,
    pub recall: f64,
    /// Mean of the first quarter of frames minus mean of the last quarter.
    pub decay: f64,
}

pub fn sequence_stats(values: &[f64]) -> Result<SeqStats> {
    if values.is_empty() {
        return Err(Error::input("sequence statistics need at least one value"));
    }
    let n = values.len();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let bin = n.div_ceil(4);
    Ok(SeqStats {
        mean: mean(values),
        recall: values.iter().filter(|&&v| v > RECALL_THRESHOLD).count() as f64 / n as f64,
        decay: mean(&values[..bin]) - mean(&values[n - bin..]),
    })
}

pub fn mae(heatmap: &Heatmap, gt: &Mask) -> Result<f64> {
    if (heatmap.width(), heatmap.height()) != (gt.width(), gt.height()) {
        return Err(Error::shape(format!(
            "heatmap {}×{} and mask {}×{} differ",
            heatmap.width(),
            heatmap.height(),
            gt.width(),
            gt.height()
        )));
    }
    let sum: f64 = heatmap
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(sum / heatmap.data().len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub max_f: f64,
}

impl PrCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall,f\n");
        for p in &self.points {
            let _ = writeln!(s, "{:.6},{:.6},{:.6},{:.6}", p.threshold, p.precision, p.recall, p.f_measure);
        }
        s
    }
}

fn check_pairs(heatmaps: &[&Heatmap], gts: &[&Mask]) -> Result<()> {
    if heatmaps.is_empty() {
        return Err(Error::input("precision-recall needs at least one heatmap"));
    }
    if heatmaps.len() != gts.len() {
        return Err(Error::input(format!(
            "{} heatmaps but {} ground-truth masks",
            heatmaps.len(),
            gts.len()
        )));
    }
    for (h, g) in heatmaps.iter().zip(gts) {
        if (h.width(), h.height()) != (g.width(), g.height()) {
            return Err(Error::shape("heatmap and mask sizes differ"));
        }
    }
    Ok(())
}

fn pr_at(heatmaps: &[&Heatmap], gts: &[&Mask], threshold: f64) -> PrPoint {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (h, g) in heatmaps.iter().zip(gts) {
        for (&p, &y) in h.data().iter().zip(g.data()) {
            match (p >= threshold, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    let denom = BETA_SQ * precision + recall;
    let f_measure = if denom == 0.0 {
        0.0
    } else {
        (1.0 + BETA_SQ) * precision * recall / denom
    };
    PrPoint {
        threshold,
        precision,
        recall,
        f_measure,
    }
}

/// Dataset-level precision and recall at one threshold.
pub fn pr_point(heatmaps: &[&Heatmap], gts: &[&Mask], threshold: f64) -> Result<PrPoint> {
    check_pairs(heatmaps, gts)?;
    Ok(pr_at(heatmaps, gts, threshold))
}

/// Precision and recall at `n_thresholds` evenly spaced thresholds from 0
/// to 1, counts pooled over the whole dataset.
pub fn pr_curve(heatmaps: &[&Heatmap], gts: &[&Mask], n_thresholds: usize) -> Result<PrCurve> {
    check_pairs(heatmaps, gts)?;
    if n_thresholds < 2 {
        return Err(Error::config("a PR curve needs at least two thresholds"));
    }
    let points: Vec<PrPoint> = (0..n_thresholds)
        .map(|i| pr_at(heatmaps, gts, i as f64 / (n_thresholds - 1) as f64))
        .collect();
    let max_f = points.iter().map(|p| p.f_measure).fold(0.0, f64::max);
    Ok(PrCurve { points, max_f })
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    let denom = (na * nb).sqrt();
    if denom == 0.0 {
        return if na == nb { 0.0 } else { 1.0 };
    }
    1.0 - (dot / denom).clamp(-1.0, 1.0)
}

/// Strict-majority block vote down to `width × height`.
pub fn downsample_majority(mask: &Mask, width: usize, height: usize) -> Result<Mask> {
    if width == 0 || height == 0 || mask.width() % width != 0 || mask.height() % height != 0 {
        return Err(Error::shape(format!(
            "mask {}×{} does not tile into {width}×{height} blocks",
            mask.width(),
            mask.height()
        )));
    }
    let (bx, by) = (mask.width() / width, mask.height() / height);
    Ok(Mask::from_fn(width, height, |x, y| {
        let mut n = 0;
        for v in y * by..(y + 1) * by {
            for u in x * bx..(x + 1) * bx {
                n += mask.get(u, v) as usize;
            }
        }
        2 * n > bx * by
    }))
}

/// Cosine distance between the mean foreground embedding of each frame and
/// that of frame 0. Frames without foreground at embedding resolution give
/// `None`.
pub fn embedding_drift(model: &AdNet, video: &VideoSample) -> Result<Vec<Option<f64>>> {
    if !video.has_masks() || video.masks.len() != video.len() {
        return Err(Error::input(format!("video {} needs ground-truth masks for drift", video.id)));
    }
    let mut means = Vec::with_capacity(video.len());
    for (frame, gt) in video.frames.iter().zip(&video.masks) {
        let e = model.encode(frame)?;
        let m = downsample_majority(gt, e.width(), e.height())?;
        let mut acc = vec![0.0; e.channels()];
        let mut n = 0usize;
        for y in 0..e.height() {
            for x in 0..e.width() {
                if m.get(x, y) {
                    n += 1;
                    for (a, v) in acc.iter_mut().zip(e.pixel(x, y)) {
                        *a += v;
                    }
                }
            }
        }
        means.push((n > 0).then(|| acc.iter().map(|a| a / n as f64).collect::<Vec<_>>()));
    }
    let anchor = means[0].clone();
    Ok(means
        .iter()
        .map(|m| match (&anchor, m) {
            (Some(a), Some(b)) => Some(cosine_distance(a, b)),
            _ => None,
        })
        .collect())
}

/// Mean of the available values in the last `ceil(n/4)` frames.
pub fn late_mean(series: &[Option<f64>]) -> Option<f64> {
    let n = series.len();
    let vals: Vec<f64> = series[n - n.div_ceil(4)..].iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn drift_csv(rows: &[(String, Vec<Option<f64>>)]) -> String {
    let mut s = String::from("video,frame,drift\n");
    for (id, series) in rows {
        for (t, d) in series.iter().enumerate() {
            match d {
                Some(d) => {
                    let _ = writeln!(s, "{id},{t},{d:.10}");
                }
                None => {
                    let _ = writeln!(s, "{id},{t},");
                }
            }
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameScore {
    pub video: String,
    pub frame: usize,
    pub j: f64,
    pub f: f64,
    /// Present when a heatmap was scored.
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceReport {
    pub video: String,
    pub j: SeqStats,
    pub f: SeqStats,
    pub mae: Option<f64>,
}

/// Predictions for one video; `heatmaps` may be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPrediction {
    pub id: String,
    pub masks: Vec<Mask>,
    pub heatmaps: Vec<Heatmap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub frames: Vec<FrameScore>,
    pub sequences: Vec<SequenceReport>,
    /// Means over sequences of the per-sequence statistics.
    pub j: SeqStats,
    pub f: SeqStats,
    pub mae: Option<f64>,
    pub pr: Option<PrCurve>,
}

fn mean_stats(s: &[SeqStats]) -> SeqStats {
    let n = s.len() as f64;
    SeqStats {
        mean: s.iter().map(|x| x.mean).sum::<f64>() / n,
        recall: s.iter().map(|x| x.recall).sum::<f64>() / n,
        decay: s.iter().map(|x| x.decay).sum::<f64>() / n,
    }
}

/// Scores predictions against ground truth matched by video id.
pub fn evaluate(preds: &[VideoPrediction], gts: &[VideoSample]) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::input("nothing to evaluate"));
    }
    let by_id: HashMap<&str, &VideoSample> = gts.iter().map(|v| (v.id.as_str(), v)).collect();
    let mut frames = Vec::new();
    let mut sequences = Vec::new();
    let mut pr_h = Vec::new();
    let mut pr_g = Vec::new();
    let with_heatmaps = preds.iter().all(|p| !p.heatmaps.is_empty());
    for p in preds {
        let gt = by_id
            .get(p.id.as_str())
            .ok_or_else(|| Error::input(format!("no ground truth for video {}", p.id)))?;
        if gt.masks.len() != p.masks.len() {
            return Err(Error::input(format!(
                "video {}: {} predicted masks but {} ground-truth masks",
                p.id,
                p.masks.len(),
                gt.masks.len()
            )));
        }
        if !p.heatmaps.is_empty() && p.heatmaps.len() != p.masks.len() {
            return Err(Error::input(format!("video {}: heatmap count differs from mask count", p.id)));
        }
        let mut js = Vec::new();
        let mut fs = Vec::new();
        let mut maes = Vec::new();
        for (t, (pm, gm)) in p.masks.iter().zip(&gt.masks).enumerate() {
            let j = region_similarity(pm, gm)?;
            let f = contour_accuracy(pm, gm, default_tolerance(gm.width(), gm.height()))?;
            let e = match p.heatmaps.get(t) {
                Some(h) => Some(mae(h, gm)?),
                None => None,
            };
            js.push(j);
            fs.push(f);
            maes.extend(e);
            frames.push(FrameScore {
                video: p.id.clone(),
                frame: t,
                j,
                f,
                mae: e,
            });
        }
        if with_heatmaps {
            pr_h.extend(p.heatmaps.iter());
            pr_g.extend(gt.masks.iter());
        }
        sequences.push(SequenceReport {
            video: p.id.clone(),
            j: sequence_stats(&js)?,
            f: sequence_stats(&fs)?,
            mae: (!maes.is_empty()).then(|| maes.iter().sum::<f64>() / maes.len() as f64),
        });
    }
    let j = mean_stats(&sequences.iter().map(|s| s.j).collect::<Vec<_>>());
    let f = mean_stats(&sequences.iter().map(|s| s.f).collect::<Vec<_>>());
    let mae = if with_heatmaps {
        let v: Vec<f64> = sequences.iter().filter_map(|s| s.mae).collect();
        Some(v.iter().sum::<f64>() / v.len() as f64)
    } else {
        None
    };
    let pr = if with_heatmaps {
        Some(pr_curve(&pr_h, &pr_g, 255)?)
    } else {
        None
    };
    Ok(EvalReport {
        frames,
        sequences,
        j,
        f,
        mae,
        pr,
    })
}

impl EvalReport {
    pub fn frames_csv(&self) -> String {
        let mut s = String::from("video,frame,j,f,mae\n");
        for r in &self.frames {
            let mae = r.mae.map(|m| format!("{m:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{},{:.6},{:.6},{}", r.video, r.frame, r.j, r.f, mae);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "videos      {}", self.sequences.len());
        let _ = writeln!(s, "frames      {}", self.frames.len());
        let _ = writeln!(s, "J mean      {:.3}", self.j.mean);
        let _ = writeln!(s, "J recall    {:.3}", self.j.recall);
        let _ = writeln!(s, "J decay     {:.3}", self.j.decay);
        let _ = writeln!(s, "F mean      {:.3}", self.f.mean);
        let _ = writeln!(s, "F recall    {:.3}", self.f.recall);
        let _ = writeln!(s, "F decay     {:.3}", self.f.decay);
        if let Some(m) = self.mae {
            let _ = writeln!(s, "MAE         {m:.4}");
        }
        if let Some(pr) = &self.pr {
            let _ = writeln!(s, "max F-beta  {:.4}", pr.max_f);
        }
        s
    }
}
