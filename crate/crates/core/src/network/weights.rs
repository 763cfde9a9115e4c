//! Binary weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VSKW1"
//! per layer:  kind tag u8 | kernel 3 x u32 | c_in u32 | c_out u32
//!             | payload length in bytes u64 | payload (f32: weight then bias)
//! CRC32 of all payload bytes, u32
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{Layer, LayerKind, LayerSpec, Model, NetworkConfig};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 5] = b"VSKW1";
const RECORD_HEADER: usize = 1 + 3 * 4 + 4 + 4 + 8;

pub fn save_weights(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut crc = crc32fast::Hasher::new();
    out.write_all(WEIGHTS_MAGIC)?;
    for layer in model.layers() {
        let s = &layer.spec;
        out.write_all(&[s.kind.tag()])?;
        for k in s.kernel {
            out.write_all(&(k as u32).to_le_bytes())?;
        }
        out.write_all(&(s.in_channels as u32).to_le_bytes())?;
        out.write_all(&(s.out_channels as u32).to_le_bytes())?;
        let payload: Vec<u8> = layer
            .weight
            .iter()
            .chain(&layer.bias)
            .flat_map(|v| v.to_le_bytes())
            .collect();
        out.write_all(&(payload.len() as u64).to_le_bytes())?;
        out.write_all(&payload)?;
        crc.update(&payload);
    }
    out.write_all(&crc.finalize().to_le_bytes())?;
    out.flush()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn take(&mut self, n: usize) -> &[u8] {
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        s
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().unwrap())
    }
}

fn describe(kind: Option<LayerKind>, tag: u8, kernel: [usize; 3], cin: usize, cout: usize) -> String {
    let kind = kind.map_or_else(|| format!("tag {tag}"), |k| format!("{k:?}"));
    format!("{kind} {}x{}x{} {cin} -> {cout}", kernel[0], kernel[1], kernel[2])
}

/// Loads a weight file, checking every record against the layer plan of `config`.
pub fn load_weights(path: impl AsRef<Path>, config: &NetworkConfig) -> Result<Model> {
    config.validate()?;
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if !bytes.starts_with(WEIGHTS_MAGIC) {
        return Err(Error::Format("not a weight file (bad magic)".into()));
    }
    let mut r = Reader { buf: &bytes, pos: WEIGHTS_MAGIC.len() };
    let mut crc = crc32fast::Hasher::new();
    let plan = config.layer_plan();
    let mut layers = Vec::with_capacity(plan.len());
    for (i, spec) in plan.iter().enumerate() {
        // the trailing checksum is never part of a record
        if r.remaining() < RECORD_HEADER + 4 {
            return Err(Error::Format(format!(
                "layer {i}: record truncated (file holds fewer than the {} layers of this config)",
                plan.len()
            )));
        }
        let tag = r.take(1)[0];
        let kernel = [r.u32() as usize, r.u32() as usize, r.u32() as usize];
        let cin = r.u32() as usize;
        let cout = r.u32() as usize;
        let len = r.u64() as usize;
        let kind = LayerKind::from_tag(tag);
        let found = LayerSpec { kind: kind.unwrap_or(spec.kind), role: spec.role, kernel, in_channels: cin, out_channels: cout };
        if kind.is_none() || found != *spec {
            return Err(Error::Format(format!(
                "layer {i}: shape mismatch, config expects `{}` but file has `{}`",
                describe(Some(spec.kind), spec.kind.tag(), spec.kernel, spec.in_channels, spec.out_channels),
                describe(kind, tag, kernel, cin, cout)
            )));
        }
        let (nw, nb) = spec.param_shape();
        if len != 4 * (nw + nb) {
            return Err(Error::Format(format!(
                "layer {i}: payload holds {len} bytes, expected {}",
                4 * (nw + nb)
            )));
        }
        if r.remaining() < len + 4 {
            return Err(Error::Format(format!(
                "layer {i}: payload truncated ({} of {len} bytes)",
                r.remaining().saturating_sub(4).min(len)
            )));
        }
        let payload = r.take(len);
        crc.update(payload);
        let mut values = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()));
        let weight: Vec<f32> = values.by_ref().take(nw).collect();
        let bias: Vec<f32> = values.collect();
        layers.push(Layer { spec: *spec, weight, bias });
    }
    if r.remaining() != 4 {
        return Err(Error::Format(format!(
            "{} unexpected bytes after layer {}",
            r.remaining().saturating_sub(4),
            plan.len() - 1
        )));
    }
    let stored = r.u32();
    if stored != crc.finalize() {
        return Err(Error::Format("payload checksum mismatch".into()));
    }
    Model::from_layers(config, layers)
}
