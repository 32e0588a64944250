//! The segmentation network: a convolutional encoder, three parallel
//! branches over the current-frame embedding (skip, intra-frame non-local,
//! anchor diffusion), channel concatenation, and a 1×1 fusion/classifier
//! head.
//!
//! Everything is written against [`Tape`] so the same code path serves
//! training and inference. The tape-free helpers at the bottom
//! ([`transition_matrix`], [`anchor_diffuse`], [`intra_frame`]) evaluate the
//! same kernels directly on [`FrameEmbedding`] values.

mod checkpoint;
mod config;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{ModelConfig, Variant};

use crate::error::{Error, Result};
use crate::image::{Heatmap, Image};
use crate::tensor::{ops, Tape, Tensor, Var};

/// Weights and bias of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    fn init(c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        let data = (0..c_out * c_in * k * k)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        ConvParams {
            weight: Tensor::new([c_out, c_in, k, k], data).expect("init shape"),
            bias: Tensor::zeros([c_out]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdNetParams {
    pub encoder: Vec<ConvParams>,
    /// 1×1 convolution from the concatenated branches to `fusion_dim`.
    pub fusion: ConvParams,
    /// 1×1 convolution from `fusion_dim` to a single channel.
    pub classifier: ConvParams,
}

impl AdNetParams {
    /// Parameter names in storage order, paired with their expected shapes.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = config.in_channels;
        for (i, &c_out) in config.encoder_channels.iter().enumerate() {
            let k = config.kernel;
            out.push((format!("encoder.{i}.weight"), vec![c_out, c_in, k, k]));
            out.push((format!("encoder.{i}.bias"), vec![c_out]));
            c_in = c_out;
        }
        let fused = config.variant.branch_count() * config.embed_dim();
        out.push(("fusion.weight".into(), vec![config.fusion_dim, fused, 1, 1]));
        out.push(("fusion.bias".into(), vec![config.fusion_dim]));
        out.push(("classifier.weight".into(), vec![1, config.fusion_dim, 1, 1]));
        out.push(("classifier.bias".into(), vec![1]));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in self.encoder.iter().chain([&self.fusion, &self.classifier]) {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in self
            .encoder
            .iter_mut()
            .chain([&mut self.fusion, &mut self.classifier])
        {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out
    }

    /// Rebuilds parameters from tensors in [`AdNetParams::layout`] order.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let layout = Self::layout(config);
        if tensors.len() != layout.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut take = || ConvParams {
            weight: it.next().expect("counted"),
            bias: it.next().expect("counted"),
        };
        let encoder = (0..config.encoder_channels.len()).map(|_| take()).collect();
        let fusion = take();
        let classifier = take();
        Ok(AdNetParams {
            encoder,
            fusion,
            classifier,
        })
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}

/// Pixel embeddings of one frame: an `hw × c` matrix plus its grid size.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbedding {
    matrix: Tensor,
    h: usize,
    w: usize,
}

impl FrameEmbedding {
    pub fn new(matrix: Tensor, h: usize, w: usize) -> Result<Self> {
        let (rows, _) = matrix.dims2("frame embedding")?;
        if rows != h * w {
            return Err(Error::shape(format!(
                "embedding has {rows} rows for a {h}×{w} grid"
            )));
        }
        Ok(FrameEmbedding { matrix, h, w })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// Embedding vector at grid position `(x, y)`.
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let c = self.channels();
        let row = y * self.w + x;
        &self.matrix.data()[row * c..(row + 1) * c]
    }

    fn check_compatible(&self, other: &FrameEmbedding) -> Result<()> {
        if (self.h, self.w) != (other.h, other.w) || self.matrix.shape() != other.matrix.shape() {
            return Err(Error::shape(format!(
                "embeddings {}×{}×{} and {}×{}×{} differ",
                self.h,
                self.w,
                self.channels(),
                other.h,
                other.w,
                other.channels()
            )));
        }
        Ok(())
    }
}

/// Row-stochastic `hw × hw` correspondence matrix between an anchor frame
/// (rows) and the current frame (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix(Tensor);

impl TransitionMatrix {
    pub fn new(matrix: Tensor) -> Result<Self> {
        let (r, c) = matrix.dims2("transition matrix")?;
        if r != c {
            return Err(Error::shape(format!("transition matrix must be square, got {r}×{c}")));
        }
        Ok(TransitionMatrix(matrix))
    }

    pub fn matrix(&self) -> &Tensor {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.shape()[0]
    }
}

/// `softmax_rows(X_0·X_tᵀ / √c)`.
pub fn transition_matrix(x0: &FrameEmbedding, xt: &FrameEmbedding) -> Result<TransitionMatrix> {
    x0.check_compatible(xt)?;
    let scale = 1.0 / (xt.channels() as f64).sqrt();
    let logits = ops::matmul(&x0.matrix, &ops::transpose(&xt.matrix)?)?.map(|v| v * scale);
    TransitionMatrix::new(ops::softmax_rows(&logits)?)
}

/// `P·X_t`, laid out on the anchor grid.
pub fn anchor_diffuse(p: &TransitionMatrix, xt: &FrameEmbedding) -> Result<FrameEmbedding> {
    if p.size() != xt.h * xt.w {
        return Err(Error::shape(format!(
            "transition matrix of size {} for an embedding with {} pixels",
            p.size(),
            xt.h * xt.w
        )));
    }
    FrameEmbedding::new(ops::matmul(&p.0, &xt.matrix)?, xt.h, xt.w)
}

/// Non-local self-attention of a frame with itself.
pub fn intra_frame(xt: &FrameEmbedding) -> Result<FrameEmbedding> {
    anchor_diffuse(&transition_matrix(xt, xt)?, xt)
}

/// Whether dropout is active for a forward pass.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

/// Parameter handles on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    encoder: Vec<(Var, Var)>,
    fusion: (Var, Var),
    classifier: (Var, Var),
}

impl BoundParams {
    /// Handles in [`AdNetParams::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.encoder
            .iter()
            .chain([&self.fusion, &self.classifier])
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

/// An embedding living on a tape, kept both as an `hw × c` matrix and as a
/// `c × h × w` grid.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingVar {
    pub matrix: Var,
    pub grid: Var,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdNet {
    config: ModelConfig,
    params: AdNetParams,
}

impl AdNet {
    /// Fan-in scaled uniform weights, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = config.in_channels;
        let mut encoder = Vec::new();
        for &c_out in &config.encoder_channels {
            encoder.push(ConvParams::init(c_out, c_in, config.kernel, &mut rng));
            c_in = c_out;
        }
        let fused = config.variant.branch_count() * config.embed_dim();
        let fusion = ConvParams::init(config.fusion_dim, fused, 1, &mut rng);
        let classifier = ConvParams::init(1, config.fusion_dim, 1, &mut rng);
        Ok(AdNet {
            config,
            params: AdNetParams {
                encoder,
                fusion,
                classifier,
            },
        })
    }

    pub fn from_parts(config: ModelConfig, params: AdNetParams) -> Result<Self> {
        config.validate()?;
        let layout = AdNetParams::layout(&config);
        for ((name, shape), t) in layout.iter().zip(params.tensors()) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(AdNet { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &AdNetParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut AdNetParams {
        &mut self.params
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn stride(&self) -> usize {
        self.config.stride()
    }

    /// Records every parameter on `tape` (as trainable leaves when
    /// `trainable`).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let mut pair = |c: &ConvParams| (put(&c.weight), put(&c.bias));
        let encoder = self.params.encoder.iter().map(&mut pair).collect();
        let fusion = pair(&self.params.fusion);
        let classifier = pair(&self.params.classifier);
        BoundParams {
            encoder,
            fusion,
            classifier,
        }
    }

    /// Handles for parameters already on a tape, in
    /// [`AdNetParams::tensors`] order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundParams> {
        let n = self.params.encoder.len();
        if vars.len() != 2 * n + 4 {
            return Err(Error::shape(format!(
                "model has {} parameter tensors, got {} handles",
                2 * n + 4,
                vars.len()
            )));
        }
        Ok(BoundParams {
            encoder: (0..n).map(|i| (vars[2 * i], vars[2 * i + 1])).collect(),
            fusion: (vars[2 * n], vars[2 * n + 1]),
            classifier: (vars[2 * n + 2], vars[2 * n + 3]),
        })
    }

    fn check_frame(&self, frame: &Tensor) -> Result<(usize, usize)> {
        let (c, h, w) = frame.dims3("encoder input")?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "encoder expects {} channels, frame has {c}",
                self.config.in_channels
            )));
        }
        let s = self.stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::shape(format!(
                "frame {h}×{w} is not divisible by the encoder stride {s}; pad it to a multiple of {s}"
            )));
        }
        Ok((h / s, w / s))
    }

    pub fn encode_var(&self, tape: &mut Tape, p: &BoundParams, image: Var) -> Result<EmbeddingVar> {
        let (h, w) = self.check_frame(tape.value(image))?;
        let last = p.encoder.len() - 1;
        let pad = self.config.kernel / 2;
        let mut x = image;
        for (i, (&(wt, b), &s)) in p.encoder.iter().zip(&self.config.encoder_strides).enumerate() {
            x = tape.conv2d(x, wt, Some(b), s, pad)?;
            if i != last {
                x = tape.leaky_relu(x, self.config.leaky_slope);
            }
        }
        let c = self.config.embed_dim();
        let flat = tape.reshape(x, &[c, h * w])?;
        let matrix = tape.transpose(flat)?;
        Ok(EmbeddingVar {
            matrix,
            grid: x,
            h,
            w,
        })
    }

    /// `softmax_rows(X_0·X_tᵀ/√c)·X_t` as a `c × h × w` grid.
    fn diffuse_var(&self, tape: &mut Tape, x0: &EmbeddingVar, xt: &EmbeddingVar) -> Result<Var> {
        let c = self.config.embed_dim();
        let xt_t = tape.transpose(xt.matrix)?;
        let logits = tape.matmul(x0.matrix, xt_t)?;
        let scaled = tape.scale(logits, 1.0 / (c as f64).sqrt());
        let p = tape.softmax_rows(scaled)?;
        let out = tape.matmul(p, xt.matrix)?;
        let cols = tape.transpose(out)?;
        tape.reshape(cols, &[c, xt.h, xt.w])
    }

    /// Branch outputs concatenated along channels, `(k·c) × h × w`.
    pub fn fused_features_var(
        &self,
        tape: &mut Tape,
        xt: &EmbeddingVar,
        x0: Option<&EmbeddingVar>,
    ) -> Result<Var> {
        let variant = self.config.variant;
        let mut parts = vec![xt.grid];
        if variant.uses_intra() {
            parts.push(self.diffuse_var(tape, xt, xt)?);
        }
        if variant.needs_anchor() {
            let x0 = x0.ok_or_else(|| {
                Error::input(format!("variant {variant} needs an anchor embedding"))
            })?;
            if (x0.h, x0.w) != (xt.h, xt.w) {
                return Err(Error::shape(format!(
                    "anchor grid {}×{} differs from current grid {}×{}",
                    x0.h, x0.w, xt.h, xt.w
                )));
            }
            if variant.uses_diffusion() {
                parts.push(self.diffuse_var(tape, x0, xt)?);
            }
            if variant.uses_raw_anchor() {
                parts.push(x0.grid);
            }
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat(&parts)
        }
    }

    /// Fusion conv, leaky-ReLU, dropout, classifier conv, sigmoid. Returns a
    /// `1 × h × w` probability map.
    pub fn head_var(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        fused: Var,
        mode: Mode<'_>,
    ) -> Result<Var> {
        let (fw, fb) = p.fusion;
        let mut x = tape.conv2d(fused, fw, Some(fb), 1, 0)?;
        x = tape.leaky_relu(x, self.config.leaky_slope);
        if let Mode::Train(rng) = mode {
            let rate = self.config.dropout;
            if rate > 0.0 {
                let keep = 1.0 / (1.0 - rate);
                let shape = tape.value(x).shape().to_vec();
                let n = tape.value(x).numel();
                let mask: Vec<f64> = (0..n)
                    .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                let m = tape.constant(Tensor::new(shape, mask)?);
                x = tape.mul(x, m)?;
            }
        }
        let (cw, cb) = p.classifier;
        let logits = tape.conv2d(x, cw, Some(cb), 1, 0)?;
        Ok(tape.sigmoid(logits))
    }

    /// Full pair forward on a tape; returns the `1 × h × w` heatmap at
    /// embedding resolution.
    pub fn forward_var(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        anchor: Var,
        current: Var,
        mode: Mode<'_>,
    ) -> Result<Var> {
        let (ah, aw) = (tape.value(anchor).shape().to_vec(), tape.value(current).shape().to_vec());
        if ah != aw {
            return Err(Error::input(format!(
                "anchor {ah:?} and current {aw:?} frames differ in size"
            )));
        }
        let xt = self.encode_var(tape, p, current)?;
        let x0 = if self.config.variant.needs_anchor() {
            Some(self.encode_var(tape, p, anchor)?)
        } else {
            None
        };
        let fused = self.fused_features_var(tape, &xt, x0.as_ref())?;
        self.head_var(tape, p, fused, mode)
    }

    pub fn encode(&self, frame: &Image) -> Result<FrameEmbedding> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(frame.clone());
        let e = self.encode_var(&mut tape, &p, x)?;
        FrameEmbedding::new(tape.value(e.matrix).clone(), e.h, e.w)
    }

    /// Fused pre-classifier features for a current frame and an optional
    /// anchor embedding.
    pub fn fused_features(
        &self,
        anchor: Option<&FrameEmbedding>,
        current: &Image,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(current.clone());
        let xt = self.encode_var(&mut tape, &p, x)?;
        let x0 = anchor.map(|a| embedding_on_tape(&mut tape, a)).transpose()?;
        let fused = self.fused_features_var(&mut tape, &xt, x0.as_ref())?;
        Ok(tape.value(fused).clone())
    }

    /// Heatmap for the concatenation of `xt` with precomputed branch outputs.
    pub fn fuse_and_classify(
        &self,
        xt: &FrameEmbedding,
        branches: &[&FrameEmbedding],
        mode: Mode<'_>,
    ) -> Result<Heatmap> {
        let expected = self.config.variant.branch_count();
        if branches.len() + 1 != expected {
            return Err(Error::shape(format!(
                "variant {} fuses {expected} embeddings, got {}",
                self.config.variant,
                branches.len() + 1
            )));
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let mut parts = vec![embedding_on_tape(&mut tape, xt)?.grid];
        for b in branches {
            xt.check_compatible(b)?;
            parts.push(embedding_on_tape(&mut tape, b)?.grid);
        }
        let fused = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat(&parts)?
        };
        let out = self.head_var(&mut tape, &p, fused, mode)?;
        Heatmap::from_tensor(tape.value(out))
    }

    /// Heatmap at embedding resolution for a current frame against a cached
    /// anchor embedding (`None` for variants that ignore the anchor).
    pub fn predict_with_anchor(
        &self,
        anchor: Option<&FrameEmbedding>,
        current: &Image,
    ) -> Result<Heatmap> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(current.clone());
        let xt = self.encode_var(&mut tape, &p, x)?;
        let x0 = anchor.map(|a| embedding_on_tape(&mut tape, a)).transpose()?;
        let fused = self.fused_features_var(&mut tape, &xt, x0.as_ref())?;
        let out = self.head_var(&mut tape, &p, fused, Mode::Eval)?;
        Heatmap::from_tensor(tape.value(out))
    }

    /// Heatmap at embedding resolution for an (anchor, current) frame pair.
    pub fn forward(&self, anchor: &Image, current: &Image, mode: Mode<'_>) -> Result<Heatmap> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let a = tape.constant(anchor.clone());
        let c = tape.constant(current.clone());
        let out = self.forward_var(&mut tape, &p, a, c, mode)?;
        Heatmap::from_tensor(tape.value(out))
    }
}

fn embedding_on_tape(tape: &mut Tape, e: &FrameEmbedding) -> Result<EmbeddingVar> {
    let matrix = tape.constant(e.matrix.clone());
    let cols = tape.transpose(matrix)?;
    let grid = tape.reshape(cols, &[e.channels(), e.h, e.w])?;
    Ok(EmbeddingVar {
        matrix,
        grid,
        h: e.h,
        w: e.w,
    })
}
