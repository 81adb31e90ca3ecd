//! Patch pooling: dense per-pixel maps to one token per image patch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Point3;

/// Merged patch edge that turns a 512x384 frame into a 16x12 grid.
pub const DEFAULT_PATCH_SIZE: usize = 32;

/// One frame's dense outputs. All arrays are row-major over pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle {
    pub height: usize,
    pub width: usize,
    pub dim_f: usize,
    pub dim_g: usize,
    /// `height * width * 3` world coordinates.
    pub pointmap: Vec<f32>,
    /// `height * width * dim_f`.
    pub semantic: Vec<f32>,
    /// `height * width * dim_g`.
    pub geometric: Vec<f32>,
    /// `height * width`; false pixels are ignored by pooling.
    pub valid: Vec<bool>,
    pub timestep: u32,
    pub patch_size: usize,
}

impl FrameBundle {
    /// A frame with every array zeroed and every pixel invalid.
    pub fn blank(height: usize, width: usize, dim_f: usize, dim_g: usize, patch_size: usize) -> Self {
        let n = height * width;
        FrameBundle {
            height,
            width,
            dim_f,
            dim_g,
            pointmap: vec![0.0; n * 3],
            semantic: vec![0.0; n * dim_f],
            geometric: vec![0.0; n * dim_g],
            valid: vec![false; n],
            timestep: 0,
            patch_size,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    pub fn point(&self, pixel: usize) -> Point3 {
        let o = pixel * 3;
        [self.pointmap[o], self.pointmap[o + 1], self.pointmap[o + 2]]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pixel_count();
        if self.patch_size == 0 {
            return Err(Error::InvalidFrame("patch size must be positive".into()));
        }
        if !self.height.is_multiple_of(self.patch_size) || !self.width.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidFrame(format!(
                "frame {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch_size
            )));
        }
        let check = |name: &str, len: usize, want: usize| {
            if len != want {
                Err(Error::InvalidFrame(format!("{name} has {len} values, expected {want}")))
            } else {
                Ok(())
            }
        };
        check("pointmap", self.pointmap.len(), n * 3)?;
        check("semantic map", self.semantic.len(), n * self.dim_f)?;
        check("geometric map", self.geometric.len(), n * self.dim_g)?;
        check("valid mask", self.valid.len(), n)?;
        for px in (0..n).filter(|&px| self.valid[px]) {
            let finite = self.pointmap[px * 3..px * 3 + 3].iter().all(|v| v.is_finite())
                && self.semantic[px * self.dim_f..(px + 1) * self.dim_f].iter().all(|v| v.is_finite())
                && self.geometric[px * self.dim_g..(px + 1) * self.dim_g].iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidFrame(format!("valid pixel {px} holds a non-finite value")));
            }
        }
        Ok(())
    }

    /// Valid pixel indices of patch `(row, col)`, row-major within the patch.
    fn patch_pixels(&self, row: usize, col: usize) -> impl Iterator<Item = usize> + '_ {
        let p = self.patch_size;
        let w = self.width;
        (row * p..(row + 1) * p)
            .flat_map(move |y| (col * p..(col + 1) * p).map(move |x| y * w + x))
            .filter(move |&px| self.valid[px])
    }
}

/// A pooled patch observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchToken {
    pub position: Point3,
    pub semantic: Vec<f32>,
    pub geometric: Vec<f32>,
    /// `(row, col)` in the patch grid.
    pub coord: (u32, u32),
}

/// All pooled tokens of one frame, in row-major patch order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokenSet {
    pub tokens: Vec<PatchToken>,
    pub grid: (usize, usize),
    pub timestep: u32,
    pub dim_f: usize,
    pub dim_g: usize,
}

impl PatchTokenSet {
    pub fn new(dim_f: usize, dim_g: usize, timestep: u32) -> Self {
        PatchTokenSet { tokens: Vec::new(), grid: (0, 0), timestep, dim_f, dim_g }
    }

    /// Builds a set from loose `(position, semantic, geometric)` triples,
    /// assigning coordinates along a single grid row.
    pub fn from_triples(
        dim_f: usize,
        dim_g: usize,
        timestep: u32,
        triples: impl IntoIterator<Item = (Point3, Vec<f32>, Vec<f32>)>,
    ) -> Self {
        let tokens: Vec<PatchToken> = triples
            .into_iter()
            .enumerate()
            .map(|(i, (position, semantic, geometric))| PatchToken {
                position,
                semantic,
                geometric,
                coord: (0, i as u32),
            })
            .collect();
        let grid = (1, tokens.len());
        PatchTokenSet { tokens, grid, timestep, dim_f, dim_g }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn positions(&self) -> Vec<Point3> {
        self.tokens.iter().map(|t| t.position).collect()
    }
}

/// How per-pixel geometric features are reduced to one vector per patch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GeomPatchEncoder {
    /// Masked mean, the same reduction used for positions and semantics.
    #[default]
    MaskedMean,
    /// Component-wise maximum over the valid pixels of the patch.
    StridedMax,
    /// Masked mean followed by `weights * x + bias`; `weights` is
    /// `dim_g x dim_g`, row-major.
    External { weights: Vec<f32>, bias: Vec<f32> },
}

/// Per-patch geometric vectors in row-major patch order; `None` marks a patch
/// with no valid pixel.
pub fn encode_geometry(frame: &FrameBundle, encoder: &GeomPatchEncoder) -> Result<Vec<Option<Vec<f32>>>> {
    let dg = frame.dim_g;
    if let GeomPatchEncoder::External { weights, bias } = encoder {
        if weights.len() != dg * dg || bias.len() != dg {
            return Err(Error::Config(format!(
                "external encoder expects {}x{} weights and {} biases, got {} and {}",
                dg,
                dg,
                dg,
                weights.len(),
                bias.len()
            )));
        }
    }
    frame.validate()?;
    let (rows, cols) = frame.grid();
    let mut out = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let g = match encoder {
                GeomPatchEncoder::MaskedMean => masked_mean(frame, row, col, &frame.geometric, dg),
                GeomPatchEncoder::StridedMax => masked_max(frame, row, col),
                GeomPatchEncoder::External { weights, bias } => {
                    masked_mean(frame, row, col, &frame.geometric, dg).map(|m| affine(weights, bias, &m))
                }
            };
            out.push(g);
        }
    }
    Ok(out)
}

/// Pools a frame into patch tokens. Patches without a valid pixel are dropped.
pub fn pool_patches(frame: &FrameBundle, encoder: &GeomPatchEncoder) -> Result<PatchTokenSet> {
    let geometry = encode_geometry(frame, encoder)?;
    let (rows, cols) = frame.grid();
    let mut tokens = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let Some(position) = masked_mean(frame, row, col, &frame.pointmap, 3) else {
                continue;
            };
            let semantic = masked_mean(frame, row, col, &frame.semantic, frame.dim_f).unwrap_or_default();
            let geometric = geometry[row * cols + col].clone().ok_or_else(|| {
                Error::InternalInvariantViolation(format!("patch ({row},{col}) pooled without geometry"))
            })?;
            tokens.push(PatchToken {
                position: [position[0], position[1], position[2]],
                semantic,
                geometric,
                coord: (row as u32, col as u32),
            });
        }
    }
    Ok(PatchTokenSet { tokens, grid: (rows, cols), timestep: frame.timestep, dim_f: frame.dim_f, dim_g: frame.dim_g })
}

fn masked_mean(frame: &FrameBundle, row: usize, col: usize, data: &[f32], dim: usize) -> Option<Vec<f32>> {
    let mut acc = vec![0.0f64; dim];
    let mut count = 0usize;
    for px in frame.patch_pixels(row, col) {
        for (a, v) in acc.iter_mut().zip(&data[px * dim..(px + 1) * dim]) {
            *a += *v as f64;
        }
        count += 1;
    }
    if count == 0 {
        return None;
    }
    let n = count as f64;
    Some(acc.into_iter().map(|a| (a / n) as f32).collect())
}

fn masked_max(frame: &FrameBundle, row: usize, col: usize) -> Option<Vec<f32>> {
    let dg = frame.dim_g;
    let mut out: Option<Vec<f32>> = None;
    for px in frame.patch_pixels(row, col) {
        let g = &frame.geometric[px * dg..(px + 1) * dg];
        match out.as_mut() {
            None => out = Some(g.to_vec()),
            Some(m) => {
                for (a, v) in m.iter_mut().zip(g) {
                    *a = a.max(*v);
                }
            }
        }
    }
    out
}

fn affine(weights: &[f32], bias: &[f32], x: &[f32]) -> Vec<f32> {
    let n = bias.len();
    (0..n)
        .map(|i| {
            let mut s = 0.0f64;
            for (w, v) in weights[i * n..(i + 1) * n].iter().zip(x) {
                s += *w as f64 * *v as f64;
            }
            (s + bias[i] as f64) as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_frame(h: usize, w: usize, df: usize, dg: usize, p: usize) -> FrameBundle {
        let mut f = FrameBundle::blank(h, w, df, dg, p);
        f.valid.iter_mut().for_each(|v| *v = true);
        f
    }

    #[test]
    fn default_resolution_gives_192_tokens() {
        let f = full_frame(384, 512, 2, 2, DEFAULT_PATCH_SIZE);
        let set = pool_patches(&f, &GeomPatchEncoder::MaskedMean).unwrap();
        assert_eq!(set.grid, (12, 16));
        assert_eq!(set.len(), 192);
        // Row-major order with unique coordinates.
        for (i, t) in set.tokens.iter().enumerate() {
            assert_eq!(t.coord, ((i / 16) as u32, (i % 16) as u32));
        }
    }

    #[test]
    fn constant_pointmap_pools_to_constant() {
        let mut f = full_frame(8, 8, 1, 1, 4);
        for px in 0..64 {
            f.pointmap[px * 3..px * 3 + 3].copy_from_slice(&[1.5, -2.0, 0.25]);
        }
        let set = pool_patches(&f, &GeomPatchEncoder::MaskedMean).unwrap();
        assert!(set.tokens.iter().all(|t| t.position == [1.5, -2.0, 0.25]));
    }

    #[test]
    fn two_by_two_patch_mean() {
        let mut f = full_frame(2, 2, 1, 1, 2);
        f.pointmap = vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let set = pool_patches(&f, &GeomPatchEncoder::MaskedMean).unwrap();
        assert_eq!(set.tokens[0].position, [0.5, 0.5, 0.0]);
    }

    #[test]
    fn non_divisible_frame_is_rejected() {
        let f = full_frame(10, 8, 1, 1, 4);
        assert!(matches!(pool_patches(&f, &GeomPatchEncoder::MaskedMean), Err(Error::InvalidFrame(_))));
    }

    #[test]
    fn empty_patches_are_dropped() {
        let mut f = full_frame(4, 8, 1, 1, 4);
        // Invalidate the whole left patch.
        for y in 0..4 {
            for x in 0..4 {
                f.valid[y * 8 + x] = false;
            }
        }
        let set = pool_patches(&f, &GeomPatchEncoder::MaskedMean).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.tokens[0].coord, (0, 1));

        let none = FrameBundle::blank(4, 8, 1, 1, 4);
        assert!(pool_patches(&none, &GeomPatchEncoder::MaskedMean).unwrap().is_empty());
    }

    #[test]
    fn masked_pixels_are_ignored_even_if_nan() {
        let mut f = full_frame(2, 2, 1, 1, 2);
        f.pointmap[0] = f32::NAN;
        assert!(pool_patches(&f, &GeomPatchEncoder::MaskedMean).is_err());
        f.valid[0] = false;
        let set = pool_patches(&f, &GeomPatchEncoder::MaskedMean).unwrap();
        assert!(set.tokens[0].position.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn strided_max_is_componentwise() {
        let mut g = full_frame(2, 2, 1, 2, 2);
        g.valid = vec![true, true, false, false];
        g.geometric = vec![1.0, 0.0, 0.0, 2.0, 9.0, 9.0, 9.0, 9.0];
        let out = encode_geometry(&g, &GeomPatchEncoder::StridedMax).unwrap();
        assert_eq!(out, vec![Some(vec![1.0, 2.0])]);
    }

    #[test]
    fn masked_mean_of_constant_geometry() {
        let mut f = full_frame(4, 4, 1, 3, 2);
        f.geometric.iter_mut().for_each(|v| *v = 0.75);
        let out = encode_geometry(&f, &GeomPatchEncoder::MaskedMean).unwrap();
        assert!(out.iter().all(|g| g.as_deref() == Some(&[0.75f32, 0.75, 0.75][..])));
    }

    #[test]
    fn identity_external_matches_masked_mean() {
        let mut f = full_frame(4, 4, 1, 2, 2);
        for (i, v) in f.geometric.iter_mut().enumerate() {
            *v = (i as f32 * 0.37).sin();
        }
        let ext = GeomPatchEncoder::External { weights: vec![1.0, 0.0, 0.0, 1.0], bias: vec![0.0, 0.0] };
        assert_eq!(
            encode_geometry(&f, &ext).unwrap(),
            encode_geometry(&f, &GeomPatchEncoder::MaskedMean).unwrap()
        );
    }

    #[test]
    fn external_shape_mismatch_is_config_error() {
        let f = full_frame(2, 2, 1, 2, 2);
        let ext = GeomPatchEncoder::External { weights: vec![1.0; 3], bias: vec![0.0; 2] };
        assert!(matches!(encode_geometry(&f, &ext), Err(Error::Config(_))));
    }
}
