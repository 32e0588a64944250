//! Instance pruning: removes small, nearly static detected instances from
//! predicted masks when a clearly dominant instance is present.
//!
//! Detections arrive from an external detector. [`small_static`] finds
//! instances whose box recurs (IoU above a threshold) on more than
//! `support` detections while staying below a size scale derived from the
//! whole video ([`size_low`]). Per frame, [`pruning_mask`] removes those
//! instances when they are under a third of the frame's dominant instance.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::image::{BBox, Mask};

/// Default IoU above which two detections count as the same static instance.
pub const STATIC_IOU: f64 = 0.6;
/// Default IoU for linking detections on consecutive frames.
pub const LINK_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame: usize,
    pub bbox: BBox,
    pub mask: Mask,
    pub area: usize,
    /// Identity suggested by the producer; `-1` when unknown.
    pub track_hint: i64,
}

impl Detection {
    /// Derives the tight box and area from a non-empty instance mask.
    pub fn from_mask(frame: usize, mask: Mask, track_hint: i64) -> Result<Self> {
        let bbox = mask
            .bbox()
            .ok_or_else(|| Error::input(format!("empty instance mask on frame {frame}")))?;
        Ok(Detection {
            frame,
            bbox,
            area: mask.count(),
            mask,
            track_hint,
        })
    }

    pub fn iou(&self, other: &Detection) -> f64 {
        self.bbox.iou(&other.bbox)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: usize,
    pub detections: Vec<Detection>,
}

impl Track {
    pub fn first_frame(&self) -> usize {
        self.detections[0].frame
    }

    pub fn last_frame(&self) -> usize {
        self.detections[self.detections.len() - 1].frame
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

/// Greedy IoU linking between consecutive frames.
///
/// For each transition `t-1 → t`, candidate pairs are taken in descending
/// IoU order; a pair links when both ends are free and the IoU reaches
/// `link_iou`. Unmatched detections start new tracks.
pub fn link_trajectories(detections: &[Detection], link_iou: f64) -> Vec<Track> {
    let mut tracks: Vec<Track> = Vec::new();
    if detections.is_empty() {
        return tracks;
    }
    let last = detections.iter().map(|d| d.frame).max().expect("non-empty");
    // indices of tracks that ended on the previous frame
    let mut open: Vec<usize> = Vec::new();
    for frame in 0..=last {
        let current: Vec<&Detection> = detections.iter().filter(|d| d.frame == frame).collect();
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (oi, &t) in open.iter().enumerate() {
            let tail = tracks[t].detections.last().expect("tracks are non-empty");
            for (ci, d) in current.iter().enumerate() {
                let iou = tail.iou(d);
                if iou >= link_iou && iou > 0.0 {
                    pairs.push((iou, oi, ci));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_used = vec![false; open.len()];
        let mut det_track: Vec<Option<usize>> = vec![None; current.len()];
        for (_, oi, ci) in pairs {
            if !track_used[oi] && det_track[ci].is_none() {
                track_used[oi] = true;
                det_track[ci] = Some(open[oi]);
            }
        }
        let mut next_open = Vec::with_capacity(current.len());
        for (ci, d) in current.iter().enumerate() {
            let t = match det_track[ci] {
                Some(t) => t,
                None => {
                    tracks.push(Track {
                        id: tracks.len(),
                        detections: Vec::new(),
                    });
                    tracks.len() - 1
                }
            };
            tracks[t].detections.push((*d).clone());
            next_open.push(t);
        }
        open = next_open;
    }
    tracks
}

/// Area of the `n_frames`-th largest detection, or the smallest area when
/// there are fewer detections than frames.
pub fn size_low(detections: &[Detection], n_frames: usize) -> Result<usize> {
    if detections.is_empty() {
        return Err(Error::input("size_low needs at least one detection"));
    }
    let mut areas: Vec<usize> = detections.iter().map(|d| d.area).collect();
    areas.sort_unstable();
    let m = areas.len();
    Ok(if m >= n_frames && n_frames > 0 {
        areas[m - n_frames]
    } else {
        areas[0]
    })
}

/// Indices of detections that overlap (IoU > `iou_thr`) more than
/// `support` detections, themselves included, and whose area is below
/// `size_thr`.
pub fn small_static(
    detections: &[Detection],
    iou_thr: f64,
    support: f64,
    size_thr: usize,
) -> Vec<usize> {
    detections
        .iter()
        .enumerate()
        .filter(|(_, bi)| {
            let count = detections.iter().filter(|bj| bi.iou(bj) > iou_thr).count();
            count as f64 > support && bi.area < size_thr
        })
        .map(|(i, _)| i)
        .collect()
}

/// Keep mask for one frame: everything except the small static instances
/// that are under a third of a clearly dominant instance.
///
/// `frame_detections` are all detections on the frame; `small_static_set`
/// those of them (or of the video) flagged by [`small_static`].
pub fn pruning_mask(
    frame_idx: usize,
    predicted: &Mask,
    small_static_set: &[&Detection],
    frame_detections: &[&Detection],
    size_thr: usize,
) -> Result<Mask> {
    let mut sorted: Vec<&Detection> = frame_detections
        .iter()
        .copied()
        .filter(|d| d.frame == frame_idx)
        .collect();
    sorted.sort_by(|a, b| b.area.cmp(&a.area));
    let target = match sorted.as_slice() {
        [first, rest @ ..]
            if first.area > size_thr && rest.first().map_or(true, |s| first.area > 2 * s.area) =>
        {
            Some(first.area)
        }
        _ => None,
    };
    let mut removal = Mask::empty(predicted.width(), predicted.height());
    if let Some(target) = target {
        for d in small_static_set.iter().filter(|d| d.frame == frame_idx) {
            // area < target/3 without rounding
            if 3 * d.area < target {
                removal = removal.or(&d.mask).map_err(|_| {
                    Error::input(format!(
                        "instance mask on frame {frame_idx} does not match the predicted mask size"
                    ))
                })?;
            }
        }
    }
    Ok(removal.not())
}

/// Applies instance pruning to one predicted mask per frame.
pub fn apply_pruning(predicted: &[Mask], detections: &[Detection]) -> Result<Vec<Mask>> {
    let n = predicted.len();
    if let Some(d) = detections.iter().find(|d| d.frame >= n) {
        return Err(Error::input(format!(
            "detection on frame {} but only {n} predicted masks",
            d.frame
        )));
    }
    for d in detections {
        if !d.mask.same_size(&predicted[d.frame]) {
            return Err(Error::input(format!(
                "instance mask {}×{} on frame {} does not match the predicted mask {}×{}",
                d.mask.width(),
                d.mask.height(),
                d.frame,
                predicted[d.frame].width(),
                predicted[d.frame].height()
            )));
        }
    }
    if detections.is_empty() {
        return Ok(predicted.to_vec());
    }
    let threshold = size_low(detections, n)?;
    let flagged: HashSet<usize> = small_static(detections, STATIC_IOU, 0.5 * n as f64, threshold)
        .into_iter()
        .collect();
    predicted
        .iter()
        .enumerate()
        .map(|(t, mask)| {
            let on_frame: Vec<&Detection> = detections.iter().filter(|d| d.frame == t).collect();
            let flagged_here: Vec<&Detection> = detections
                .iter()
                .enumerate()
                .filter(|(i, d)| d.frame == t && flagged.contains(i))
                .map(|(_, d)| d)
                .collect();
            let keep = pruning_mask(t, mask, &flagged_here, &on_frame, threshold)?;
            mask.and(&keep)
        })
        .collect()
}
