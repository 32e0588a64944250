//! Raster types shared across the pipeline: RGB frames (3×H×W tensors),
//! binary masks and probability heatmaps, with the geometric transforms used
//! by augmentation and test-time resizing.

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

/// An RGB frame stored as a 3×H×W tensor with values in `[0, 1]`.
pub type Image = Tensor;

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let iy = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "mask {width}×{height} needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Mask {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Mask {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn same_size(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn check_size(&self, other: &Mask, what: &str) -> Result<()> {
        if !self.same_size(other) {
            return Err(Error::shape(format!(
                "{what}: masks {}×{} and {}×{} differ",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.check_size(other, "mask and")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect();
        Mask::new(self.width, self.height, data)
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.check_size(other, "mask or")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect();
        Mask::new(self.width, self.height, data)
    }

    pub fn not(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| !v).collect(),
        }
    }

    /// Tight bounding box of the foreground, `None` when empty.
    pub fn bbox(&self) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    let bb = b.get_or_insert(BBox {
                        x0: x,
                        y0: y,
                        x1: x + 1,
                        y1: y + 1,
                    });
                    bb.x0 = bb.x0.min(x);
                    bb.y0 = bb.y0.min(y);
                    bb.x1 = bb.x1.max(x + 1);
                    bb.y1 = bb.y1.max(y + 1);
                }
            }
        }
        b
    }

    /// 0/1 tensor of shape 1×H×W.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Tensor::new([1, self.height, self.width], data).expect("mask dims")
    }

    pub fn flip_horizontal(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    pub fn crop(&self, b: &BBox) -> Mask {
        Mask::from_fn(b.width(), b.height(), |x, y| self.get(b.x0 + x, b.y0 + y))
    }

    /// Nearest-neighbour resize using half-pixel centres.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Mask {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Mask::from_fn(width, height, |x, y| {
            let ix = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
            let iy = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            self.get(ix, iy)
        })
    }
}

/// Per-pixel foreground probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Heatmap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "heatmap {width}×{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Heatmap {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Heatmap {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Accepts H×W or 1×H×W tensors.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape()[..] {
            [h, w] | [1, h, w] => Heatmap::new(w, h, t.data().to_vec()),
            _ => Err(Error::shape(format!(
                "heatmap tensor must be H×W or 1×H×W, got {:?}",
                t.shape()
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, self.height, self.width], self.data.clone()).expect("heatmap dims")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn flip_horizontal(&self) -> Heatmap {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Heatmap { data, ..*self }
    }

    pub fn resize(&self, width: usize, height: usize) -> Result<Heatmap> {
        let t = ops::bilinear_resize(&self.to_tensor(), height, width)?;
        Heatmap::from_tensor(&t)
    }

    /// Foreground where the value reaches `threshold` (ties included).
    pub fn binarize(&self, threshold: f64) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v >= threshold).collect(),
        }
    }
}

/// Height and width of a 3×H×W (or C×H×W) frame.
pub fn frame_size(frame: &Image) -> Result<(usize, usize)> {
    let (_, h, w) = frame.dims3("frame")?;
    Ok((h, w))
}

pub fn crop_image(frame: &Image, b: &BBox) -> Result<Image> {
    let (c, h, w) = frame.dims3("crop")?;
    if b.x1 > w || b.y1 > h || b.width() == 0 || b.height() == 0 {
        return Err(Error::shape(format!("crop box {b:?} outside {w}×{h} frame")));
    }
    let mut data = Vec::with_capacity(c * b.area());
    for ch in 0..c {
        for y in b.y0..b.y1 {
            let row = (ch * h + y) * w;
            data.extend_from_slice(&frame.data()[row + b.x0..row + b.x1]);
        }
    }
    Tensor::new([c, b.height(), b.width()], data)
}

/// Source coordinate in the input for output pixel `(x, y)` under a
/// counter-clockwise rotation by `k·45°` about the frame centre.
fn rotation_source(k: u8, w: usize, h: usize, x: usize, y: usize) -> (f64, f64) {
    const R: f64 = std::f64::consts::FRAC_1_SQRT_2;
    // (cos, sin) with exact values on the axes
    let (c, s) = match k % 8 {
        0 => (1.0, 0.0),
        1 => (R, R),
        2 => (0.0, 1.0),
        3 => (-R, R),
        4 => (-1.0, 0.0),
        5 => (-R, -R),
        6 => (0.0, -1.0),
        _ => (R, -R),
    };
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let dx = x as f64 - cx;
    let dy = y as f64 - cy;
    // inverse rotation; image y axis points down so the visual rotation is
    // counter-clockwise
    (cx + c * dx - s * dy, cy + s * dx + c * dy)
}

/// Rotates every channel by `k·45°`, bilinear sampling, zero outside.
pub fn rotate_image(frame: &Image, k: u8) -> Result<Image> {
    let (ch, h, w) = frame.dims3("rotate")?;
    if k % 8 == 0 {
        return Ok(frame.clone());
    }
    let d = frame.data();
    let mut out = vec![0.0; ch * h * w];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = rotation_source(k, w, h, x, y);
            let eps = 1e-9;
            if sx < -eps || sy < -eps || sx > w as f64 - 1.0 + eps || sy > h as f64 - 1.0 + eps {
                continue;
            }
            let sx = sx.clamp(0.0, w as f64 - 1.0);
            let sy = sy.clamp(0.0, h as f64 - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..ch {
                let p = &d[c * h * w..(c + 1) * h * w];
                let v = if fx == 0.0 && fy == 0.0 {
                    p[y0 * w + x0]
                } else {
                    let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                    let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                    top * (1.0 - fy) + bot * fy
                };
                out[(c * h + y) * w + x] = v;
            }
        }
    }
    Tensor::new([ch, h, w], out)
}

/// Rotates a mask by `k·45°` with nearest-neighbour sampling.
pub fn rotate_mask(mask: &Mask, k: u8) -> Mask {
    if k % 8 == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width(), mask.height());
    Mask::from_fn(w, h, |x, y| {
        let (sx, sy) = rotation_source(k, w, h, x, y);
        let (rx, ry) = (sx.round(), sy.round());
        if rx < 0.0 || ry < 0.0 || rx > (w - 1) as f64 || ry > (h - 1) as f64 {
            false
        } else {
            mask.get(rx as usize, ry as usize)
        }
    })
}
