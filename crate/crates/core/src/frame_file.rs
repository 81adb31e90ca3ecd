//! Binary frame files (`C3DF`).
//!
//! Layout, all little-endian:
//!
//! | offset | field |
//! |-------:|-------|
//! | 0  | magic `C3DF` |
//! | 4  | version `u32` (= 1) |
//! | 8  | height `u32` |
//! | 12 | width `u32` |
//! | 16 | semantic dim `u32` |
//! | 20 | geometric dim `u32` |
//! | 24 | timestep `u32` |
//! | 28 | flags `u32`: bits 0-15 hold the patch size, 0 meaning the default |
//! | 32 | pointmap `f32[H*W*3]`, semantic `f32[H*W*Df]`, geometric `f32[H*W*Dg]` |
//! |    | valid mask, one bit per pixel, LSB first, padding bits zero |

use std::fs;
use std::path::Path;

use crate::codec::{u32_field, Reader, Writer};
use crate::error::{Error, Result};
use crate::patching::{FrameBundle, DEFAULT_PATCH_SIZE};

pub const FRAME_MAGIC: [u8; 4] = *b"C3DF";
pub const FRAME_VERSION: u32 = 1;
pub const FRAME_HEADER_LEN: usize = 32;
const PATCH_FLAG_MASK: u32 = 0xffff;

pub fn encode_frame(frame: &FrameBundle) -> Result<Vec<u8>> {
    frame.validate()?;
    if frame.patch_size > PATCH_FLAG_MASK as usize {
        return Err(Error::InvalidInput(format!("patch size {} does not fit the frame header", frame.patch_size)));
    }
    let n = frame.pixel_count();
    let mut w = Writer::with_capacity(FRAME_HEADER_LEN + 4 * n * (3 + frame.dim_f + frame.dim_g) + n.div_ceil(8));
    w.bytes(&FRAME_MAGIC);
    w.u32(FRAME_VERSION);
    w.u32(u32_field(frame.height, "height")?);
    w.u32(u32_field(frame.width, "width")?);
    w.u32(u32_field(frame.dim_f, "semantic dim")?);
    w.u32(u32_field(frame.dim_g, "geometric dim")?);
    w.u32(frame.timestep);
    w.u32(frame.patch_size as u32);
    w.f32s(&frame.pointmap);
    w.f32s(&frame.semantic);
    w.f32s(&frame.geometric);
    let mut mask = vec![0u8; n.div_ceil(8)];
    for (i, _) in frame.valid.iter().enumerate().filter(|(_, v)| **v) {
        mask[i / 8] |= 1 << (i % 8);
    }
    w.bytes(&mask);
    Ok(w.buf)
}

pub fn decode_frame(buf: &[u8]) -> Result<FrameBundle> {
    let mut r = Reader::new(buf);
    if r.bytes(4, "magic")? != FRAME_MAGIC {
        return Err(Error::format(0, "bad magic, expected C3DF"));
    }
    let version = r.u32("version")?;
    if version != FRAME_VERSION {
        return Err(Error::Version { found: version, expected: FRAME_VERSION });
    }
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    let dim_f = r.u32("semantic dim")? as usize;
    let dim_g = r.u32("geometric dim")? as usize;
    let timestep = r.u32("timestep")?;
    let flags = r.u32("flags")?;
    if flags & !PATCH_FLAG_MASK != 0 {
        return Err(Error::format(28, format!("reserved flag bits set: {flags:#010x}")));
    }
    let patch_size = match (flags & PATCH_FLAG_MASK) as usize {
        0 => DEFAULT_PATCH_SIZE,
        p => p,
    };

    let n = height
        .checked_mul(width)
        .ok_or_else(|| Error::format(8, "frame dimensions overflow"))?;
    let floats = n
        .checked_mul(3 + dim_f + dim_g)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::format(8, "frame payload size overflows"))?;
    let expected = FRAME_HEADER_LEN as u64 + floats as u64 + n.div_ceil(8) as u64;
    if buf.len() as u64 != expected {
        let at = expected.min(buf.len() as u64);
        return Err(Error::format(
            at,
            format!("header describes a {expected}-byte file but {} bytes are present", buf.len()),
        ));
    }

    let pointmap = r.f32s(n * 3, "pointmap")?;
    let semantic = r.f32s(n * dim_f, "semantic map")?;
    let geometric = r.f32s(n * dim_g, "geometric map")?;
    let mask_at = r.offset();
    let mask = r.bytes(n.div_ceil(8), "valid mask")?;
    let valid: Vec<bool> = (0..n).map(|i| mask[i / 8] >> (i % 8) & 1 == 1).collect();
    if n % 8 != 0 && mask[n / 8] >> (n % 8) != 0 {
        return Err(Error::format(mask_at + (n / 8) as u64, "padding bits of the valid mask are set"));
    }
    Ok(FrameBundle { height, width, dim_f, dim_g, pointmap, semantic, geometric, valid, timestep, patch_size })
}

pub fn save_frame(frame: &FrameBundle, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_frame(frame)?)?;
    Ok(())
}

pub fn load_frame(path: impl AsRef<Path>) -> Result<FrameBundle> {
    decode_frame(&fs::read(path)?)
}
