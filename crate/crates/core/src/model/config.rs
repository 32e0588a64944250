use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which embeddings reach the fusion layer (the ablation ladder).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// `X_t` only.
    Baseline,
    /// `X_t` and the intra-frame non-local output.
    Intra,
    /// `X_t` and the raw anchor embedding `X_0`.
    Anchor,
    /// `X_t` and the anchor-diffused encoding `P·X_t`.
    AnchorDiffusion,
    /// `X_t`, intra-frame, and anchor-diffused encodings.
    AdNet,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Intra,
        Variant::Anchor,
        Variant::AnchorDiffusion,
        Variant::AdNet,
    ];

    pub fn uses_intra(self) -> bool {
        matches!(self, Variant::Intra | Variant::AdNet)
    }

    pub fn uses_diffusion(self) -> bool {
        matches!(self, Variant::AnchorDiffusion | Variant::AdNet)
    }

    pub fn uses_raw_anchor(self) -> bool {
        self == Variant::Anchor
    }

    pub fn needs_anchor(self) -> bool {
        self.uses_diffusion() || self.uses_raw_anchor()
    }

    /// Number of `c`-wide embeddings concatenated before fusion.
    pub fn branch_count(self) -> usize {
        1 + usize::from(self.uses_intra())
            + usize::from(self.uses_diffusion())
            + usize::from(self.uses_raw_anchor())
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Intra => "intra",
            Variant::Anchor => "anchor",
            Variant::AnchorDiffusion => "anchor-diffusion",
            Variant::AdNet => "adnet",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Variant::Baseline => 0,
            Variant::Intra => 1,
            Variant::Anchor => 2,
            Variant::AnchorDiffusion => 3,
            Variant::AdNet => 4,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Variant::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown variant '{s}' (expected baseline, intra, anchor, anchor-diffusion or adnet)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub in_channels: usize,
    /// Output width of each encoder layer; the last entry is the embedding
    /// width `c`.
    pub encoder_channels: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    /// Square kernel size of every encoder layer (odd).
    pub kernel: usize,
    pub fusion_dim: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::AdNet,
            in_channels: 3,
            encoder_channels: vec![16, 32, 32, 32],
            encoder_strides: vec![2, 2, 2, 1],
            kernel: 3,
            fusion_dim: 128,
            leaky_slope: 0.01,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn embed_dim(&self) -> usize {
        *self.encoder_channels.last().expect("validated config has layers")
    }

    /// Total downsampling factor of the encoder.
    pub fn stride(&self) -> usize {
        self.encoder_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() {
            return Err(Error::config("encoder needs at least one layer"));
        }
        if self.encoder_channels.len() != self.encoder_strides.len() {
            return Err(Error::config(format!(
                "{} encoder widths but {} strides",
                self.encoder_channels.len(),
                self.encoder_strides.len()
            )));
        }
        if self.encoder_channels.iter().chain(&self.encoder_strides).any(|&v| v == 0) {
            return Err(Error::config("encoder widths and strides must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config(format!("kernel size {} must be odd", self.kernel)));
        }
        if self.in_channels == 0 || self.fusion_dim == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::config("leaky slope must be finite"));
        }
        Ok(())
    }
}
