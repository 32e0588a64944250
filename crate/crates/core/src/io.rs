//! Netpbm image files, dataset directories and detection lists.
//!
//! A dataset root holds one directory per video:
//!
//! ```text
//! <root>/<video_id>/frames/00000.ppm
//! <root>/<video_id>/masks/00000.pgm
//! <root>/<video_id>/detections.txt
//! ```
//!
//! Detection lines read `frame_idx track_hint x0 y0 x1 y1 mask_path`, with
//! the mask path relative to the detection file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{frame_size, BBox, Heatmap, Image, Mask};
use crate::pruning::Detection;
use crate::tensor::Tensor;

/// One video with optional ground truth and detections.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub frames: Vec<Image>,
    /// Ground-truth masks, one per frame, or empty when unavailable.
    pub masks: Vec<Mask>,
    pub detections: Vec<Detection>,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn has_masks(&self) -> bool {
        !self.masks.is_empty()
    }

    /// `(height, width)` of the frames, checking they all agree.
    pub fn frame_size(&self) -> Result<(usize, usize)> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::input(format!("video {} has no frames", self.id)))?;
        let size = frame_size(first)?;
        for (t, f) in self.frames.iter().enumerate() {
            if frame_size(f)? != size {
                return Err(Error::input(format!(
                    "video {}: frame {t} is {:?}, frame 0 is {:?}",
                    self.id,
                    frame_size(f)?,
                    size
                )));
            }
        }
        Ok(size)
    }
}

fn quantize(v: f64, max: f64) -> u16 {
    (v.clamp(0.0, 1.0) * max).round() as u16
}

#[derive(Debug)]
struct Netpbm {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    samples: Vec<u16>,
}

fn parse_netpbm(path: &Path, bytes: &[u8]) -> Result<Netpbm> {
    let bad = |m: &str| Error::format(path, m.to_string());
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(bad("not a netpbm file"));
    }
    let magic = [bytes[0], bytes[1]];
    let channels = match magic[1] {
        b'5' => 1,
        b'6' => 3,
        _ => return Err(bad("unsupported netpbm magic, expected P5 or P6")),
    };
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header value out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("malformed header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("invalid dimensions or maxval"));
    }
    let (width, height) = (width as usize, height as usize);
    let n = width * height * channels;
    let wide = maxval > 255;
    let body = &bytes[pos..];
    let need = if wide { 2 * n } else { n };
    if body.len() < need {
        return Err(bad("truncated pixel data"));
    }
    let samples = if wide {
        body[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        body[..n].iter().map(|&b| b as u16).collect()
    };
    Ok(Netpbm {
        magic,
        width,
        height,
        maxval: maxval as u32,
        samples,
    })
}

fn read_netpbm(path: &Path) -> Result<Netpbm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_netpbm(path, &bytes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// 24-bit colour frame with values in `[0, 1]`.
pub fn write_ppm(path: &Path, frame: &Image) -> Result<()> {
    let (c, h, w) = frame.dims3("ppm")?;
    if c != 3 {
        return Err(Error::shape(format!("ppm needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = frame.data();
    for i in 0..h * w {
        for ch in 0..3 {
            out.push(quantize(d[ch * h * w + i], 255.0) as u8);
        }
    }
    write_bytes(path, &out)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let img = read_netpbm(path)?;
    if img.magic[1] != b'6' {
        return Err(Error::format(path, "expected a P6 pixmap"));
    }
    let (h, w) = (img.height, img.width);
    let max = img.maxval as f64;
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + i] = img.samples[3 * i + ch] as f64 / max;
        }
    }
    Tensor::new([3, h, w], data)
}

/// 8-bit graymap, 0 for background and 255 for foreground.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.data().iter().map(|&b| if b { 255u8 } else { 0 }));
    write_bytes(path, &out)
}

/// Reads a graymap and marks samples at or above half range as foreground.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = read_netpbm(path)?;
    if img.magic[1] != b'5' {
        return Err(Error::format(path, "expected a P5 graymap"));
    }
    let cut = (img.maxval + 1) / 2;
    Mask::new(
        img.width,
        img.height,
        img.samples.iter().map(|&s| s as u32 >= cut).collect(),
    )
}

/// 16-bit graymap storing `round(p·65535)`.
pub fn write_heatmap(path: &Path, heatmap: &Heatmap) -> Result<()> {
    let mut out = format!("P5\n{} {}\n65535\n", heatmap.width(), heatmap.height()).into_bytes();
    for &p in heatmap.data() {
        out.extend_from_slice(&quantize(p, 65535.0).to_be_bytes());
    }
    write_bytes(path, &out)
}

pub fn read_heatmap(path: &Path) -> Result<Heatmap> {
    let img = read_netpbm(path)?;
    if img.magic[1] != b'5' {
        return Err(Error::format(path, "expected a P5 graymap"));
    }
    let max = img.maxval as f64;
    Heatmap::new(
        img.width,
        img.height,
        img.samples.iter().map(|&s| s as f64 / max).collect(),
    )
}

/// Sorted regular files in `dir` with the given extension.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn frame_file_name(t: usize, ext: &str) -> String {
    format!("{t:05}.{ext}")
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| Error::format(path, format!("line {}: {m}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let num = |i: usize| -> Result<usize> {
            fields[i].parse().map_err(|_| bad(&format!("bad integer {:?}", fields[i])))
        };
        let frame = num(0)?;
        let track_hint: i64 = fields[1]
            .parse()
            .map_err(|_| bad(&format!("bad track hint {:?}", fields[1])))?;
        let bbox = BBox {
            x0: num(2)?,
            y0: num(3)?,
            x1: num(4)?,
            y1: num(5)?,
        };
        let mask = read_mask(&base.join(fields[6]))?;
        let det = Detection::from_mask(frame, mask, track_hint).map_err(|_| bad("empty instance mask"))?;
        if det.bbox != bbox {
            return Err(bad("box does not tightly bound its instance mask"));
        }
        out.push(det);
    }
    out.sort_by_key(|d| d.frame);
    Ok(out)
}

/// Writes `detections.txt` into `dir` with instance masks under
/// `dir/instances/`.
pub fn write_detections(dir: &Path, detections: &[Detection]) -> Result<()> {
    let mut text = String::new();
    let mut per_frame = std::collections::HashMap::new();
    for d in detections {
        let k = per_frame.entry(d.frame).or_insert(0usize);
        let rel = format!("instances/{:05}_{:03}.pgm", d.frame, *k);
        *k += 1;
        write_mask(&dir.join(&rel), &d.mask)?;
        let b = d.bbox;
        text.push_str(&format!(
            "{} {} {} {} {} {} {}\n",
            d.frame, d.track_hint, b.x0, b.y0, b.x1, b.y1, rel
        ));
    }
    write_bytes(&dir.join("detections.txt"), text.as_bytes())
}

pub fn save_video(root: &Path, video: &VideoSample) -> Result<()> {
    let dir = root.join(&video.id);
    for (t, f) in video.frames.iter().enumerate() {
        write_ppm(&dir.join("frames").join(frame_file_name(t, "ppm")), f)?;
    }
    for (t, m) in video.masks.iter().enumerate() {
        write_mask(&dir.join("masks").join(frame_file_name(t, "pgm")), m)?;
    }
    write_detections(&dir, &video.detections)
}

pub fn save_dataset(root: &Path, videos: &[VideoSample]) -> Result<()> {
    videos.iter().try_for_each(|v| save_video(root, v))
}

/// Loads one video directory; masks and detections are optional.
pub fn load_video(dir: &Path) -> Result<VideoSample> {
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::input(format!("{} is not a video directory", dir.display())))?;
    let frames = list_files(&dir.join("frames"), "ppm")?
        .iter()
        .map(|p| read_ppm(p))
        .collect::<Result<Vec<_>>>()?;
    if frames.is_empty() {
        return Err(Error::input(format!("video {id} has no frames")));
    }
    let mask_dir = dir.join("masks");
    let masks = if mask_dir.is_dir() {
        let masks = list_files(&mask_dir, "pgm")?
            .iter()
            .map(|p| read_mask(p))
            .collect::<Result<Vec<_>>>()?;
        if masks.len() != frames.len() {
            return Err(Error::input(format!(
                "video {id}: {} frames but {} masks",
                frames.len(),
                masks.len()
            )));
        }
        masks
    } else {
        Vec::new()
    };
    let det_path = dir.join("detections.txt");
    let detections = if det_path.is_file() {
        read_detections(&det_path)?
    } else {
        Vec::new()
    };
    let video = VideoSample {
        id,
        frames,
        masks,
        detections,
    };
    let (h, w) = video.frame_size()?;
    if let Some(t) = video
        .masks
        .iter()
        .position(|m| m.width() != w || m.height() != h)
    {
        return Err(Error::input(format!("video {}: mask {t} size differs from its frame", video.id)));
    }
    Ok(video)
}

/// Every video directory under `root`, in lexicographic order.
pub fn load_dataset(root: &Path) -> Result<Vec<VideoSample>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join("frames").is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::input(format!("no videos under {}", root.display())));
    }
    dirs.iter().map(|d| load_video(d)).collect()
}
