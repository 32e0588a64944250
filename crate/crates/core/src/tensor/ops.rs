//! Forward kernels and their vector-Jacobian products.
//!
//! Every `*_backward` function takes the upstream gradient and whatever
//! forward values it needs, and returns gradients for the inputs.

use super::Tensor;
use crate::error::{Error, Result};

fn check_finite(t: &Tensor, op: &str) {
    debug_assert!(t.is_finite(), "{op} produced a non-finite value");
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul: inner dimensions of {:?} and {:?} disagree",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    let out = Tensor::new([m, n], out)?;
    check_finite(&out, "matmul");
    Ok(out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2("transpose")?;
    let d = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new([c, r], out)
}

/// Returns `(dA, dB)` for `C = A·B`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let da = matmul(grad, &transpose(b)?)?;
    let db = matmul(&transpose(a)?, grad)?;
    Ok((da, db))
}

/// Row-wise softmax, stabilised by subtracting each row's maximum.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let (r, s) = m.dims2("softmax_rows")?;
    let mut out = m.data().to_vec();
    for row in out.chunks_mut(s.max(1)).take(r) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    let out = Tensor::new([r, s], out)?;
    check_finite(&out, "softmax_rows");
    Ok(out)
}

/// Gradient of the row softmax given its output `y`.
pub fn softmax_rows_backward(y: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let (_, s) = y.dims2("softmax_rows_backward")?;
    same_shape(y, grad, "softmax_rows_backward")?;
    let mut out = vec![0.0; y.numel()];
    for ((o, yr), gr) in out
        .chunks_mut(s)
        .zip(y.data().chunks(s))
        .zip(grad.data().chunks(s))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *ov = yv * (gv - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeometry {
    pub fn new(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, w) = x.dims3("conv2d input")?;
        let (c_out, kc, kh, kw) = match kernel.shape()[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d kernel must be C_out×C_in×k×k, got {:?}",
                    kernel.shape()
                )))
            }
        };
        if kc != c_in {
            return Err(Error::shape(format!(
                "conv2d: kernel {:?} expects {kc} input channels, input {:?} has {c_in}",
                kernel.shape(),
                x.shape()
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!(
                "conv2d: kernel must be square with odd size, got {kh}×{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d: stride must be at least 1"));
        }
        if kh > h + 2 * pad || kh > w + 2 * pad {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}×{kh} larger than padded input {}×{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Conv2dGeometry {
            c_in,
            c_out,
            k: kh,
            h,
            w,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kh) / stride + 1,
            stride,
            pad,
        })
    }

    /// Output positions `o` for which `o*stride + offset - pad` lands inside
    /// `0..in_len`.
    fn valid(&self, out_len: usize, in_len: usize, offset: usize) -> std::ops::Range<usize> {
        let (s, pad) = (self.stride, self.pad);
        let lo = if pad > offset {
            (pad - offset).div_ceil(s)
        } else {
            0
        };
        let hi = if in_len + pad > offset {
            ((in_len - 1 + pad - offset) / s + 1).min(out_len)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

/// 2-D cross-correlation of a C_in×H×W input with a C_out×C_in×k×k kernel.
pub fn conv2d(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = Conv2dGeometry::new(x, kernel, stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != g.c_out {
            return Err(Error::shape(format!(
                "conv2d: bias of {} values for {} output channels",
                b.numel(),
                g.c_out
            )));
        }
    }
    let (xd, kd) = (x.data(), kernel.data());
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.c_out * plane];
    for o in 0..g.c_out {
        let y = &mut out[o * plane..(o + 1) * plane];
        if let Some(b) = bias {
            y.fill(b.data()[o]);
        }
        for ci in 0..g.c_in {
            let xin = &xd[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let rows = g.valid(g.out_h, g.h, ky);
                for kx in 0..g.k {
                    let wv = kd[((o * g.c_in + ci) * g.k + ky) * g.k + kx];
                    let cols = g.valid(g.out_w, g.w, kx);
                    for oy in rows.clone() {
                        let iy = oy * g.stride + ky - g.pad;
                        let xrow = &xin[iy * g.w..(iy + 1) * g.w];
                        let yrow = &mut y[oy * g.out_w..(oy + 1) * g.out_w];
                        for ox in cols.clone() {
                            yrow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::new([g.c_out, g.out_h, g.out_w], out)?;
    check_finite(&out, "conv2d");
    Ok(out)
}

pub struct Conv2dGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    grad: &Tensor,
) -> Result<Conv2dGrads> {
    let g = Conv2dGeometry::new(x, kernel, stride, pad)?;
    if grad.shape() != [g.c_out, g.out_h, g.out_w] {
        return Err(Error::shape(format!(
            "conv2d_backward: upstream gradient {:?} does not match output {:?}",
            grad.shape(),
            [g.c_out, g.out_h, g.out_w]
        )));
    }
    let (xd, kd, gd) = (x.data(), kernel.data(), grad.data());
    let plane = g.out_h * g.out_w;
    let mut dx = vec![0.0; x.numel()];
    let mut dk = vec![0.0; kernel.numel()];
    let mut db = vec![0.0; g.c_out];
    for o in 0..g.c_out {
        let gy = &gd[o * plane..(o + 1) * plane];
        db[o] = gy.iter().sum();
        for ci in 0..g.c_in {
            let base = ci * g.h * g.w;
            for ky in 0..g.k {
                let rows = g.valid(g.out_h, g.h, ky);
                for kx in 0..g.k {
                    let widx = ((o * g.c_in + ci) * g.k + ky) * g.k + kx;
                    let wv = kd[widx];
                    let cols = g.valid(g.out_w, g.w, kx);
                    let mut acc = 0.0;
                    for oy in rows.clone() {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = base + iy * g.w;
                        let grow = &gy[oy * g.out_w..(oy + 1) * g.out_w];
                        for ox in cols.clone() {
                            let ix = row + ox * g.stride + kx - g.pad;
                            acc += grow[ox] * xd[ix];
                            dx[ix] += wv * grow[ox];
                        }
                    }
                    dk[widx] = acc;
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: Tensor::new(x.shape().to_vec(), dx)?,
        kernel: Tensor::new(kernel.shape().to_vec(), dk)?,
        bias: Tensor::new([g.c_out], db)?,
    })
}

/// Sampling taps along one axis for align-corners-false bilinear resizing.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Bilinear resize of every channel of a C×H×W tensor (half-pixel centres,
/// edge clamping).
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3("bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize: output size must be at least 1×1"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let xd = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &xd[ch * h * w..(ch + 1) * h * w];
        for y in &ty {
            let (r0, r1) = (&plane[y.lo * w..], &plane[y.hi * w..]);
            for t in &tx {
                let top = r0[t.lo] * (1.0 - t.frac) + r0[t.hi] * t.frac;
                let bot = r1[t.lo] * (1.0 - t.frac) + r1[t.hi] * t.frac;
                out.push(top * (1.0 - y.frac) + bot * y.frac);
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

pub fn bilinear_resize_backward(input_shape: &[usize], grad: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match input_shape[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("bilinear_resize_backward: input must be C×H×W")),
    };
    let (gc, out_h, out_w) = grad.dims3("bilinear_resize_backward")?;
    if gc != c {
        return Err(Error::shape("bilinear_resize_backward: channel mismatch"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(grad.clone());
    }
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let gd = grad.data();
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        let gplane = &gd[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, y) in ty.iter().enumerate() {
            for (ox, t) in tx.iter().enumerate() {
                let g = gplane[oy * out_w + ox];
                let (top, bot) = (g * (1.0 - y.frac), g * y.frac);
                plane[y.lo * w + t.lo] += top * (1.0 - t.frac);
                plane[y.lo * w + t.hi] += top * t.frac;
                plane[y.hi * w + t.lo] += bot * (1.0 - t.frac);
                plane[y.hi * w + t.hi] += bot * t.frac;
            }
        }
    }
    Tensor::new([c, h, w], dx)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Tensor, slope: f64, grad: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { slope * g })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    })
}

pub fn sigmoid_backward(y: &Tensor, grad: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&p, &g)| g * p * (1.0 - p))
        .collect();
    Tensor::new(y.shape().to_vec(), data).expect("same shape")
}

fn zip_with(a: &Tensor, b: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(a, b, op)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "mul", |x, y| x * y)
}

/// Concatenates tensors along their first axis. Remaining axes must agree.
pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?;
    let tail = &first.shape()[1..];
    let mut lead = 0;
    let mut data = Vec::new();
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[1..] != tail {
            return Err(Error::shape(format!(
                "concat: shape {:?} incompatible with {:?}",
                p.shape(),
                first.shape()
            )));
        }
        lead += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![lead];
    shape.extend_from_slice(tail);
    Tensor::new(shape, data)
}

/// Mirrors a C×H×W tensor along its width axis.
pub fn flip_horizontal(x: &Tensor) -> Result<Tensor> {
    let (_, _, w) = x.dims3("flip_horizontal")?;
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Lower clamp bound for probabilities inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy with predictions clamped to
/// `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(pred, target, "bce")?;
    let n = pred.numel() as f64;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / n)
}

/// Gradient of [`bce`] with respect to the prediction. Zero where the clamp
/// is active.
pub fn bce_backward(pred: &Tensor, target: &Tensor, upstream: f64) -> Result<Tensor> {
    same_shape(pred, target, "bce_backward")?;
    let n = pred.numel() as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            if p < BCE_EPS || p > 1.0 - BCE_EPS {
                0.0
            } else {
                upstream * (p - y) / (p * (1.0 - p)) / n
            }
        })
        .collect();
    Tensor::new(pred.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = Tensor::zeros([m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(&[i, p]) * b.get(&[p, j]);
                }
                out.set(&[i, j], s);
            }
        }
        out
    }

    #[test]
    fn matmul_small_example() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c, naive_matmul(&a, &b));
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let m = Tensor::from_rows(&[&[1.5, -2.0, 0.25], &[3.0, 4.0, 5.0], &[-1.0, 0.0, 2.0]]);
        assert_eq!(matmul(&Tensor::identity(3), &m).unwrap(), m);
        assert_eq!(matmul(&Tensor::zeros([3, 3]), &m).unwrap(), Tensor::zeros([3, 3]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros([2, 3]), &Tensor::zeros([2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_known_row() {
        let u = softmax_rows(&Tensor::zeros([1, 4])).unwrap();
        assert_eq!(u.data(), &[0.25; 4]);
        let y = softmax_rows(&Tensor::from_rows(&[&[1.0, 2.0, 3.0]])).unwrap();
        // exp(k) / (e + e^2 + e^3), evaluated independently
        let expect = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let x = Tensor::from_rows(&[&[0.3, -1.2, 2.5, 0.0]]);
        let shifted = x.map(|v| v + 17.25);
        let a = softmax_rows(&x).unwrap();
        let b = softmax_rows(&shifted).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let y = softmax_rows(&Tensor::from_rows(&[&[1000.0, 999.0]])).unwrap();
        assert!(y.is_finite());
        assert!((y.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv_identity_zero_and_average() {
        let x = Tensor::new([1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let one = Tensor::ones([1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &one, None, 1, 0).unwrap(), x);
        let zero = Tensor::zeros([1, 1, 3, 3]);
        assert_eq!(conv2d(&x, &zero, None, 1, 1).unwrap(), Tensor::zeros([1, 3, 3]));
        let avg = Tensor::full([1, 1, 3, 3], 1.0 / 9.0);
        let y = conv2d(&x, &avg, None, 1, 1).unwrap();
        assert!((y.get(&[0, 1, 1]) - 5.0).abs() < 1e-12);
        // corner window covers 1,2,4,5
        assert!((y.get(&[0, 0, 0]) - 12.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn conv_output_size_and_errors() {
        let x = Tensor::zeros([2, 9, 7]);
        let k = Tensor::zeros([4, 2, 3, 3]);
        let y = conv2d(&x, &k, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[4, 5, 4]);
        let big = Tensor::zeros([1, 2, 5, 5]);
        assert!(matches!(
            conv2d(&Tensor::zeros([2, 2, 2]), &big, None, 1, 0),
            Err(Error::Shape(_))
        ));
        let even = Tensor::zeros([1, 2, 2, 2]);
        assert!(conv2d(&x, &even, None, 1, 0).is_err());
    }

    #[test]
    fn bilinear_two_by_two_upsample() {
        let x = Tensor::new([1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        assert_eq!(y.get(&[0, 0, 0]), 0.0);
        assert_eq!(y.get(&[0, 0, 3]), 1.0);
        assert_eq!(y.get(&[0, 3, 0]), 2.0);
        assert_eq!(y.get(&[0, 3, 3]), 3.0);
        // centre (i + 0.5) / 2 - 0.5 for i = 1 gives 0.25 on both axes
        assert!((y.get(&[0, 1, 1]) - (0.25 + 2.0 * 0.25)).abs() < 1e-15);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let x = Tensor::new([2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(bilinear_resize(&x, 3, 2).unwrap(), x);
        let c = Tensor::full([1, 5, 3], 0.7);
        let y = bilinear_resize(&c, 11, 4).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn bce_known_values() {
        let half = Tensor::full([4], 0.5);
        let gt = Tensor::new([4], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        assert!((bce(&half, &gt).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let p = Tensor::new([2], vec![0.9, 0.2]).unwrap();
        let y = Tensor::new([2], vec![1.0, 0.0]).unwrap();
        assert!((bce(&p, &y).unwrap() - 0.164_252_033_486_018_07).abs() < 1e-12);
        assert!(bce(&gt, &gt).unwrap() < 1e-6);
    }
}
