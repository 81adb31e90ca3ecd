//! On-disk formats for maps, export streams and weight blobs, plus PLY output.
//!
//! All binary formats are little-endian and end with a CRC32 (IEEE) of every
//! preceding byte. The checksum is verified before anything else is parsed.
//!
//! Map file (`C3DM`, version 1):
//!
//! ```text
//! magic "C3DM" | version u32 | K u64 | D_f u32 | D_g u32 | step u32
//! delta mode u8: 0 = static (value f64) | 1 = dynamic (ratio f64, min f64, max f64)
//! seed u64
//! bounds: min 3 x f64 | max 3 x f64   (running bounds of every ingested position;
//!                                      +inf / -inf when nothing was ingested)
//! K x { position 3 x f32 | created u32 | updated u32 | semantic D_f x f32 | geometric D_g x f32 }
//! crc32 u32
//! ```
//!
//! Export stream (`C3DS`, version 1):
//!
//! ```text
//! magic "C3DS" | version u32 | dim u32 | record count u64
//! records: tag u8 = 0, timestep u32                                  (separator)
//!          tag u8 = 1, timestep u32, position 3 x f32, dim x f32    (token)
//! crc32 u32
//! ```
//!
//! Weight blob (`C3DW`, version 1):
//!
//! ```text
//! magic "C3DW" | version u32 | tensor count u32
//! tensors: name length u16, UTF-8 name, rows u32, cols u32, rows x cols f32 (row-major)
//! crc32 u32
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::codec::{u32_field, verify_crc, Reader, Writer};
use crate::error::{Error, Result};
use crate::fusion::{ExportRecord, ExportStream, PosEmbedConfig, Projector};
use crate::geom::Aabb;
use crate::memory::{MemoryState, MemoryToken, ThresholdPolicy};

pub const MAP_MAGIC: [u8; 4] = *b"C3DM";
pub const MAP_VERSION: u32 = 1;
pub const STREAM_MAGIC: [u8; 4] = *b"C3DS";
pub const STREAM_VERSION: u32 = 1;
pub const WEIGHTS_MAGIC: [u8; 4] = *b"C3DW";
pub const WEIGHTS_VERSION: u32 = 1;

fn check_magic_version(r: &mut Reader<'_>, magic: [u8; 4], expected: u32, what: &str) -> Result<()> {
    if r.bytes(4, "magic")? != magic {
        return Err(Error::format(0, format!("bad magic, expected {what}")));
    }
    let version = r.u32("version")?;
    if version != expected {
        return Err(Error::Version { found: version, expected });
    }
    Ok(())
}

fn expect_end(r: &Reader<'_>, what: &str) -> Result<()> {
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), format!("{} unexpected trailing bytes in {what}", r.remaining())));
    }
    Ok(())
}

pub fn encode_map(state: &MemoryState) -> Result<Vec<u8>> {
    let record = 20 + 4 * (state.dim_f + state.dim_g);
    let mut w = Writer::with_capacity(64 + record * state.tokens.len());
    w.bytes(&MAP_MAGIC);
    w.u32(MAP_VERSION);
    w.u64(state.tokens.len() as u64);
    w.u32(u32_field(state.dim_f, "semantic dim")?);
    w.u32(u32_field(state.dim_g, "geometric dim")?);
    w.u32(state.step);
    match state.policy {
        ThresholdPolicy::Static { value } => {
            w.u8(0);
            w.f64(value);
        }
        ThresholdPolicy::Dynamic { ratio, min, max } => {
            w.u8(1);
            w.f64(ratio);
            w.f64(min);
            w.f64(max);
        }
    }
    w.u64(state.seed);
    for v in state.aabb.min.iter().chain(&state.aabb.max) {
        w.f64(*v);
    }
    for (i, t) in state.tokens.iter().enumerate() {
        if t.semantic.len() != state.dim_f || t.geometric.len() != state.dim_g {
            return Err(Error::InvalidInput(format!("token {i} does not match the map dimensions")));
        }
        w.f32s(&t.position);
        w.u32(t.created_step);
        w.u32(t.updated_step);
        w.f32s(&t.semantic);
        w.f32s(&t.geometric);
    }
    Ok(w.finish_with_crc())
}

pub fn decode_map(buf: &[u8]) -> Result<MemoryState> {
    let payload = verify_crc(buf, "map file")?;
    let mut r = Reader::new(payload);
    check_magic_version(&mut r, MAP_MAGIC, MAP_VERSION, "C3DM")?;
    let count = r.u64("token count")?;
    let dim_f = r.u32("semantic dim")? as usize;
    let dim_g = r.u32("geometric dim")? as usize;
    let step = r.u32("step")?;
    let mode_at = r.offset();
    let policy = match r.u8("threshold mode")? {
        0 => ThresholdPolicy::Static { value: r.f64("threshold")? },
        1 => ThresholdPolicy::Dynamic { ratio: r.f64("ratio")?, min: r.f64("min")?, max: r.f64("max")? },
        m => return Err(Error::format(mode_at, format!("unknown threshold mode {m}"))),
    };
    policy.validate().map_err(|e| Error::format(mode_at, e.to_string()))?;
    let seed = r.u64("seed")?;
    let bounds_at = r.offset();
    let mut aabb = Aabb::empty();
    for v in aabb.min.iter_mut().chain(aabb.max.iter_mut()) {
        *v = r.f64("bounds")?;
    }
    if aabb != Aabb::empty() && !(aabb.min.iter().chain(&aabb.max).all(|v| v.is_finite()) && !aabb.is_empty()) {
        return Err(Error::format(bounds_at, "bounds are neither empty nor a finite box"));
    }

    let record = 20 + 4 * (dim_f as u64 + dim_g as u64);
    let need = count.checked_mul(record);
    if need != Some(r.remaining() as u64) {
        return Err(Error::format(
            r.offset(),
            format!("{count} tokens of {record} bytes do not fit the {} payload bytes left", r.remaining()),
        ));
    }
    let mut tokens = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let p = r.f32s(3, "position")?;
        tokens.push(MemoryToken {
            position: [p[0], p[1], p[2]],
            created_step: r.u32("created step")?,
            updated_step: r.u32("updated step")?,
            semantic: r.f32s(dim_f, "semantic")?,
            geometric: r.f32s(dim_g, "geometric")?,
        });
    }
    expect_end(&r, "map file")?;
    if let Some(i) = tokens.iter().position(|t| !aabb.contains(&t.position)) {
        return Err(Error::format(bounds_at, format!("token {i} lies outside the stored bounds")));
    }
    Ok(MemoryState { tokens, step, dim_f, dim_g, aabb, policy, seed })
}

pub fn save_map(state: &MemoryState, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_map(state)?)?;
    Ok(())
}

pub fn load_map(path: impl AsRef<Path>) -> Result<MemoryState> {
    decode_map(&fs::read(path)?)
}

pub fn encode_stream(stream: &ExportStream) -> Result<Vec<u8>> {
    let mut w = Writer::with_capacity(24 + stream.records.len() * (21 + 4 * stream.dim));
    w.bytes(&STREAM_MAGIC);
    w.u32(STREAM_VERSION);
    w.u32(u32_field(stream.dim, "stream dim")?);
    w.u64(stream.records.len() as u64);
    for rec in &stream.records {
        match rec {
            ExportRecord::Separator { timestep } => {
                w.u8(0);
                w.u32(*timestep);
            }
            ExportRecord::Token { timestep, position, features } => {
                if features.len() != stream.dim {
                    return Err(Error::InvalidInput("stream token width differs from the stream dim".into()));
                }
                w.u8(1);
                w.u32(*timestep);
                w.f32s(position);
                w.f32s(features);
            }
        }
    }
    Ok(w.finish_with_crc())
}

pub fn decode_stream(buf: &[u8]) -> Result<ExportStream> {
    let payload = verify_crc(buf, "export stream")?;
    let mut r = Reader::new(payload);
    check_magic_version(&mut r, STREAM_MAGIC, STREAM_VERSION, "C3DS")?;
    let dim = r.u32("dim")? as usize;
    let count = r.u64("record count")?;
    let mut records = Vec::new();
    for _ in 0..count {
        let at = r.offset();
        let rec = match r.u8("record tag")? {
            0 => ExportRecord::Separator { timestep: r.u32("timestep")? },
            1 => {
                let timestep = r.u32("timestep")?;
                let p = r.f32s(3, "position")?;
                ExportRecord::Token { timestep, position: [p[0], p[1], p[2]], features: r.f32s(dim, "features")? }
            }
            t => return Err(Error::format(at, format!("unknown record tag {t}"))),
        };
        records.push(rec);
    }
    expect_end(&r, "export stream")?;
    Ok(ExportStream { dim, records })
}

pub fn save_stream(stream: &ExportStream, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_stream(stream)?)?;
    Ok(())
}

pub fn load_stream(path: impl AsRef<Path>) -> Result<ExportStream> {
    decode_stream(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

/// Named matrices, stored in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightBlob {
    pub tensors: BTreeMap<String, Tensor>,
}

impl WeightBlob {
    pub fn insert(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f32>) -> Result<()> {
        if rows * cols != data.len() {
            return Err(Error::InvalidInput(format!("tensor {name}: {rows}x{cols} with {} values", data.len())));
        }
        self.tensors.insert(name.to_owned(), Tensor { rows, cols, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    fn require(&self, name: &str, rows: usize, cols: usize) -> Result<&Tensor> {
        let t = self.get(name).ok_or_else(|| Error::Config(format!("weight blob has no tensor {name}")))?;
        if (t.rows, t.cols) != (rows, cols) {
            return Err(Error::Config(format!("tensor {name} is {}x{}, expected {rows}x{cols}", t.rows, t.cols)));
        }
        Ok(t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(&WEIGHTS_MAGIC);
        w.u32(WEIGHTS_VERSION);
        w.u32(u32_field(self.tensors.len(), "tensor count")?);
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::InvalidInput(format!("tensor name too long: {name}")))?;
            w.u16(len);
            w.bytes(name.as_bytes());
            w.u32(u32_field(t.rows, "rows")?);
            w.u32(u32_field(t.cols, "cols")?);
            w.f32s(&t.data);
        }
        Ok(w.finish_with_crc())
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let payload = verify_crc(buf, "weight blob")?;
        let mut r = Reader::new(payload);
        check_magic_version(&mut r, WEIGHTS_MAGIC, WEIGHTS_VERSION, "C3DW")?;
        let count = r.u32("tensor count")?;
        let mut blob = WeightBlob::default();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let at = r.offset();
            let name = std::str::from_utf8(r.bytes(len, "name")?)
                .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
                .to_owned();
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            let n = rows.checked_mul(cols).ok_or_else(|| Error::format(r.offset(), "tensor size overflows"))?;
            let data = r.f32s(n, "tensor data")?;
            blob.tensors.insert(name, Tensor { rows, cols, data });
        }
        expect_end(&r, "weight blob")?;
        Ok(blob)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn put_projector(&mut self, p: &Projector) -> Result<()> {
        self.insert("projector.weight", p.dim_f, p.dim_g, p.weights.clone())?;
        self.insert("projector.bias", 1, p.dim_f, p.bias.clone())
    }

    pub fn projector(&self, dim_f: usize, dim_g: usize) -> Result<Projector> {
        let w = self.require("projector.weight", dim_f, dim_g)?;
        let b = self.require("projector.bias", 1, dim_f)?;
        Projector::new(dim_f, dim_g, w.data.clone(), b.data.clone())
    }

    /// Stores the numeric part of a positional embedding config. Values are
    /// kept as `f32`.
    pub fn put_pos_embed(&mut self, pe: &PosEmbedConfig) -> Result<()> {
        match pe {
            PosEmbedConfig::None => Ok(()),
            PosEmbedConfig::LearnableFourier { bases, projection } => {
                let flat = bases.iter().flatten().map(|v| *v as f32).collect();
                self.insert("pe.fourier.bases", bases.len(), 3, flat)?;
                if let Some(m) = projection {
                    let width = 2 * bases.len();
                    self.insert("pe.fourier.projection", m.len() / width.max(1), width, m.clone())?;
                }
                Ok(())
            }
            PosEmbedConfig::HRope { bands } => {
                self.insert("pe.hrope.bands", 1, bands.len(), bands.iter().map(|v| *v as f32).collect())
            }
            PosEmbedConfig::Rope4d { base } => self.insert("pe.rope4d.base", 1, 1, vec![*base as f32]),
        }
    }

    /// Reads back whichever positional embedding the blob holds, or `None`.
    pub fn pos_embed(&self) -> Result<PosEmbedConfig> {
        if let Some(b) = self.get("pe.fourier.bases") {
            if b.cols != 3 {
                return Err(Error::Config("pe.fourier.bases must have 3 columns".into()));
            }
            let bases = b.data.chunks_exact(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect();
            let projection = self.get("pe.fourier.projection").map(|t| t.data.clone());
            return Ok(PosEmbedConfig::LearnableFourier { bases, projection });
        }
        if let Some(b) = self.get("pe.hrope.bands") {
            return Ok(PosEmbedConfig::HRope { bands: b.data.iter().map(|v| *v as f64).collect() });
        }
        if let Some(b) = self.get("pe.rope4d.base") {
            let base = *b.data.first().ok_or_else(|| Error::Config("pe.rope4d.base is empty".into()))?;
            return Ok(PosEmbedConfig::Rope4d { base: base as f64 });
        }
        Ok(PosEmbedConfig::None)
    }
}

/// Stable per-step color so tokens created at the same step share a hue.
pub fn step_color(step: u32) -> [u8; 3] {
    // splitmix64 finalizer
    let mut z = (step as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    [z as u8, (z >> 8) as u8, (z >> 16) as u8]
}

pub fn ply_string(state: &MemoryState) -> String {
    let mut s = String::with_capacity(64 * state.tokens.len() + 256);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "comment cog3dmap token map at step {}", state.step);
    let _ = writeln!(s, "element vertex {}", state.tokens.len());
    for p in ["x", "y", "z"] {
        let _ = writeln!(s, "property float {p}");
    }
    for c in ["red", "green", "blue"] {
        let _ = writeln!(s, "property uchar {c}");
    }
    s.push_str("end_header\n");
    for t in &state.tokens {
        let [r, g, b] = step_color(t.created_step);
        let _ = writeln!(s, "{} {} {} {r} {g} {b}", t.position[0], t.position[1], t.position[2]);
    }
    s
}

pub fn export_ply(state: &MemoryState, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ply_string(state))?;
    Ok(())
}
