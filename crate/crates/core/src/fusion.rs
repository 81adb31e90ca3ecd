//! Token fusion, positional embeddings and the time-ordered export stream.
//!
//! A map token is turned into a decoder input by adding a projection of its
//! geometric feature to its semantic feature, `v = f + (W g + b)`, and then
//! optionally applying a positional embedding. Arithmetic runs in `f64`;
//! outputs are rounded to `f32`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::memory::{MemoryState, MemoryToken};

/// Affine map from geometric to semantic feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub dim_f: usize,
    pub dim_g: usize,
    /// `dim_f x dim_g`, row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Projector {
    pub fn new(dim_f: usize, dim_g: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        let p = Projector { dim_f, dim_g, weights, bias };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(dim_f: usize, dim_g: usize) -> Self {
        Projector { dim_f, dim_g, weights: vec![0.0; dim_f * dim_g], bias: vec![0.0; dim_f] }
    }

    /// Weights drawn uniformly from `[-scale, scale]`, zero bias.
    pub fn seeded(dim_f: usize, dim_g: usize, seed: u64, scale: f32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..dim_f * dim_g).map(|_| rng.random_range(-scale..=scale)).collect();
        Projector { dim_f, dim_g, weights, bias: vec![0.0; dim_f] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.dim_f * self.dim_g || self.bias.len() != self.dim_f {
            return Err(Error::Config(format!(
                "projector {}x{} needs {} weights and {} biases, got {} and {}",
                self.dim_f,
                self.dim_g,
                self.dim_f * self.dim_g,
                self.dim_f,
                self.weights.len(),
                self.bias.len()
            )));
        }
        if !self.weights.iter().chain(&self.bias).all(|v| v.is_finite()) {
            return Err(Error::Config("projector holds a non-finite value".into()));
        }
        Ok(())
    }

    fn apply(&self, g: &[f32]) -> Vec<f64> {
        (0..self.dim_f)
            .map(|i| {
                let row = &self.weights[i * self.dim_g..(i + 1) * self.dim_g];
                let mut s = 0.0f64;
                for (w, x) in row.iter().zip(g) {
                    s += *w as f64 * *x as f64;
                }
                s + self.bias[i] as f64
            })
            .collect()
    }
}

/// Positional embedding applied after fusion.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum PosEmbedConfig {
    #[default]
    None,
    /// Adds `[sin(B p), cos(B p)]`; when `2 * bases.len() != dim_f` the
    /// sinusoids are first mapped through `projection` (`dim_f x 2B`, row-major).
    LearnableFourier { bases: Vec<[f64; 3]>, projection: Option<Vec<f32>> },
    /// Rotates feature pairs by `freq * p_axis` for every (band, axis) group.
    HRope { bands: Vec<f64> },
    /// Rotary embedding over `(t, x, y, z)` with a geometric frequency schedule.
    Rope4d { base: f64 },
}

impl PosEmbedConfig {
    /// Checks that this embedding can be applied to `dim`-wide vectors.
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            PosEmbedConfig::None => Ok(()),
            PosEmbedConfig::LearnableFourier { bases, projection } => {
                if bases.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::Config("fourier bases must be finite".into()));
                }
                let width = 2 * bases.len();
                match projection {
                    None if width == dim => Ok(()),
                    None => Err(Error::Config(format!(
                        "{width} fourier features need a projection to {dim} dims"
                    ))),
                    Some(m) if m.len() == dim * width && m.iter().all(|v| v.is_finite()) => Ok(()),
                    Some(m) => Err(Error::Config(format!(
                        "fourier projection needs {} finite values, got {}",
                        dim * width,
                        m.len()
                    ))),
                }
            }
            PosEmbedConfig::HRope { bands } => {
                let groups = 3 * bands.len();
                if bands.is_empty() || !dim.is_multiple_of(2 * groups) {
                    return Err(Error::Config(format!(
                        "hrope with {} bands needs a dimension divisible by {}, got {dim}",
                        bands.len(),
                        2 * groups.max(1)
                    )));
                }
                Ok(())
            }
            PosEmbedConfig::Rope4d { base } => {
                if !dim.is_multiple_of(8) || !(base.is_finite() && *base > 0.0) {
                    return Err(Error::Config(format!(
                        "4d rope needs a dimension divisible by 8 and a positive base, got {dim} and {base}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// `v = f + (W g + b)`.
pub fn fuse(token: &MemoryToken, proj: &Projector) -> Result<Vec<f32>> {
    if token.semantic.len() != proj.dim_f || token.geometric.len() != proj.dim_g {
        return Err(Error::Config(format!(
            "token dims ({}, {}) do not match projector ({}, {})",
            token.semantic.len(),
            token.geometric.len(),
            proj.dim_f,
            proj.dim_g
        )));
    }
    Ok(proj
        .apply(&token.geometric)
        .into_iter()
        .zip(&token.semantic)
        .map(|(pg, f)| (*f as f64 + pg) as f32)
        .collect())
}

/// `[sin(b_1 . p), .., sin(b_B . p), cos(b_1 . p), .., cos(b_B . p)]`.
pub fn fourier_pe(p: &Point3, bases: &[[f64; 3]]) -> Vec<f64> {
    let phase: Vec<f64> = bases
        .iter()
        .map(|b| b[0] * p[0] as f64 + b[1] * p[1] as f64 + b[2] * p[2] as f64)
        .collect();
    phase.iter().map(|a| a.sin()).chain(phase.iter().map(|a| a.cos())).collect()
}

/// Rotates each consecutive pair `(v[2i], v[2i+1])` of `chunk` by `angle(i)`.
fn rotate_pairs(chunk: &mut [f64], angle: impl Fn(usize) -> f64) {
    for (i, pair) in chunk.chunks_exact_mut(2).enumerate() {
        let (s, c) = angle(i).sin_cos();
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
}

/// Multi-band rotary embedding over 3D positions. Groups are laid out
/// band-major, then by axis `x, y, z`; every pair in a group turns by
/// `band * p[axis]`.
pub fn hrope(v: &[f32], p: &Point3, bands: &[f64]) -> Result<Vec<f32>> {
    PosEmbedConfig::HRope { bands: bands.to_vec() }.validate(v.len())?;
    let group = v.len() / (3 * bands.len());
    let mut out: Vec<f64> = v.iter().map(|x| *x as f64).collect();
    for (g, chunk) in out.chunks_exact_mut(group).enumerate() {
        let freq = bands[g / 3];
        let coord = p[g % 3] as f64;
        rotate_pairs(chunk, |_| freq * coord);
    }
    Ok(out.into_iter().map(|x| x as f32).collect())
}

/// Rotary embedding over `(t, x, y, z)`. The vector is split into four equal
/// groups; pair `j` of a group with `m` pairs turns by `coord * base^(-j/m)`.
pub fn rope4d(v: &[f32], coords: [f64; 4], base: f64) -> Result<Vec<f32>> {
    PosEmbedConfig::Rope4d { base }.validate(v.len())?;
    let group = v.len() / 4;
    let pairs = group / 2;
    let mut out: Vec<f64> = v.iter().map(|x| *x as f64).collect();
    for (g, chunk) in out.chunks_exact_mut(group).enumerate() {
        let coord = coords[g];
        rotate_pairs(chunk, |j| coord * base.powf(-(j as f64) / pairs as f64));
    }
    Ok(out.into_iter().map(|x| x as f32).collect())
}

/// Fuses a token and applies the configured positional embedding.
pub fn embed_token(token: &MemoryToken, proj: &Projector, pe: &PosEmbedConfig) -> Result<Vec<f32>> {
    let fused = fuse(token, proj)?;
    match pe {
        PosEmbedConfig::None => Ok(fused),
        PosEmbedConfig::LearnableFourier { bases, projection } => {
            let feats = fourier_pe(&token.position, bases);
            let add: Vec<f64> = match projection {
                None => feats,
                Some(m) => {
                    let w = feats.len();
                    (0..fused.len())
                        .map(|i| m[i * w..(i + 1) * w].iter().zip(&feats).map(|(a, b)| *a as f64 * b).sum())
                        .collect()
                }
            };
            Ok(fused.iter().zip(add).map(|(v, a)| (*v as f64 + a) as f32).collect())
        }
        PosEmbedConfig::HRope { bands } => hrope(&fused, &token.position, bands),
        PosEmbedConfig::Rope4d { base } => {
            let p = token.position;
            rope4d(&fused, [token.updated_step as f64, p[0] as f64, p[1] as f64, p[2] as f64], *base)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExportRecord {
    /// Marks the start of the tokens last observed at `timestep`.
    Separator { timestep: u32 },
    Token { timestep: u32, position: Point3, features: Vec<f32> },
}

/// Decoder-ready token sequence grouped by the step each token was last seen.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExportStream {
    pub dim: usize,
    pub records: Vec<ExportRecord>,
}

impl ExportStream {
    pub fn token_count(&self) -> usize {
        self.records.iter().filter(|r| matches!(r, ExportRecord::Token { .. })).count()
    }

    pub fn separator_count(&self) -> usize {
        self.records.len() - self.token_count()
    }
}

/// Builds the export stream: tokens stably sorted by `updated_step`, a
/// separator before each new timestep, each token fused and embedded.
pub fn export(state: &MemoryState, proj: &Projector, pe: &PosEmbedConfig) -> Result<ExportStream> {
    proj.validate()?;
    pe.validate(proj.dim_f)?;
    let mut order: Vec<usize> = (0..state.tokens.len()).collect();
    order.sort_by_key(|&i| state.tokens[i].updated_step);

    let mut records = Vec::with_capacity(state.tokens.len() + state.step as usize);
    let mut current = None;
    for i in order {
        let token = &state.tokens[i];
        let ts = token.updated_step;
        if current != Some(ts) {
            records.push(ExportRecord::Separator { timestep: ts });
            current = Some(ts);
        }
        records.push(ExportRecord::Token {
            timestep: ts,
            position: token.position,
            features: embed_token(token, proj, pe)?,
        });
    }
    Ok(ExportStream { dim: proj.dim_f, records })
}
