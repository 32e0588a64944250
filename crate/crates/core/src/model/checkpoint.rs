//! Binary checkpoint format. All integers are little-endian `u32`, floats
//! little-endian `f64`.
//!
//! ```text
//! magic        8 bytes  "ADNETCKP"
//! version      u32      1
//! variant      u8       0 baseline, 1 intra, 2 anchor, 3 anchor-diffusion, 4 adnet
//! in_channels  u32
//! kernel       u32
//! n_layers     u32
//! widths       u32 × n_layers
//! strides      u32 × n_layers
//! fusion_dim   u32
//! leaky_slope  f64
//! dropout      f64
//! n_params     u32
//! per parameter:
//!   name_len u32, name (UTF-8), rank u32, dims u32 × rank, values f64 × product(dims)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{AdNet, AdNetParams, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ADNETCKP";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn write_checkpoint(model: &AdNet, out: &mut impl Write) -> std::io::Result<()> {
    let cfg = model.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(cfg.variant.code());
    put_u32(&mut buf, cfg.in_channels);
    put_u32(&mut buf, cfg.kernel);
    put_u32(&mut buf, cfg.encoder_channels.len());
    for &c in &cfg.encoder_channels {
        put_u32(&mut buf, c);
    }
    for &s in &cfg.encoder_strides {
        put_u32(&mut buf, s);
    }
    put_u32(&mut buf, cfg.fusion_dim);
    buf.extend_from_slice(&cfg.leaky_slope.to_le_bytes());
    buf.extend_from_slice(&cfg.dropout.to_le_bytes());

    let layout = AdNetParams::layout(cfg);
    put_u32(&mut buf, layout.len());
    for ((name, _), t) in layout.iter().zip(model.params().tensors()) {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.rank());
        for &d in t.shape() {
            put_u32(&mut buf, d);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<AdNet, String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err("not an adnet checkpoint (bad magic)".into());
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let code = c.u8()?;
    let variant = Variant::from_code(code).ok_or_else(|| format!("unknown variant code {code}"))?;
    let in_channels = c.u32()?;
    let kernel = c.u32()?;
    let n_layers = c.u32()?;
    if n_layers > 1024 {
        return Err(format!("implausible layer count {n_layers}"));
    }
    let encoder_channels = (0..n_layers).map(|_| c.u32()).collect::<std::result::Result<_, _>>()?;
    let encoder_strides = (0..n_layers).map(|_| c.u32()).collect::<std::result::Result<_, _>>()?;
    let fusion_dim = c.u32()?;
    let leaky_slope = c.f64()?;
    let dropout = c.f64()?;
    let config = ModelConfig {
        variant,
        in_channels,
        encoder_channels,
        encoder_strides,
        kernel,
        fusion_dim,
        leaky_slope,
        dropout,
    };
    config.validate().map_err(|e| e.to_string())?;

    let layout = AdNetParams::layout(&config);
    let n_params = c.u32()?;
    if n_params != layout.len() {
        return Err(format!(
            "config implies {} parameter tensors, file has {n_params}",
            layout.len()
        ));
    }
    let mut tensors = Vec::with_capacity(n_params);
    for (name, shape) in &layout {
        let len = c.u32()?;
        let got = std::str::from_utf8(c.take(len)?).map_err(|_| "parameter name is not UTF-8")?;
        if got != name {
            return Err(format!("expected parameter '{name}', found '{got}'"));
        }
        let rank = c.u32()?;
        let dims = (0..rank).map(|_| c.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        if &dims != shape {
            return Err(format!("{name}: expected shape {shape:?}, found {dims:?}"));
        }
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| c.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        tensors.push(Tensor::new(dims, data).map_err(|e| e.to_string())?);
    }
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - c.pos));
    }
    let params = AdNetParams::from_tensors(&config, tensors).map_err(|e| e.to_string())?;
    AdNet::from_parts(config, params).map_err(|e| e.to_string())
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<AdNet> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<checkpoint>", e))?;
    parse(&bytes).map_err(|m| Error::format("<checkpoint>", m))
}

pub fn save_checkpoint(model: &AdNet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<AdNet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|m| Error::format(path, m))
}
