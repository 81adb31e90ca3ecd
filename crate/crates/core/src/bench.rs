//! Frame sources, the build pipeline and the token-count experiments.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::frame_file::load_frame;
use crate::geom::{distance, Point3};
use crate::memory::{MemoryState, StepReport, ThresholdPolicy};
use crate::patching::{pool_patches, FrameBundle, GeomPatchEncoder};
use crate::scene::{render_frame, RenderOptions, SceneSpec};
use crate::spatial::SpatialIndex;

/// Frames fetched ahead of the sequential map update.
const PREFETCH: usize = 8;

/// Where frames come from, in dataset order.
#[derive(Debug, Clone)]
pub enum FrameSource {
    Scene { spec: SceneSpec, opts: RenderOptions },
    /// Frame files sorted by name. `patch_size` overrides the header value.
    Files { paths: Vec<PathBuf>, patch_size: Option<usize> },
}

impl FrameSource {
    /// Collects every `*.c3df` file of `dir`, sorted by file name.
    pub fn from_dir(dir: impl AsRef<Path>, patch_size: Option<usize>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.retain(|p| p.extension().is_some_and(|e| e == "c3df"));
        paths.sort();
        if paths.is_empty() {
            return Err(Error::format(0, format!("no .c3df frame files in {}", dir.display())));
        }
        Ok(FrameSource::Files { paths, patch_size })
    }

    pub fn len(&self) -> usize {
        match self {
            FrameSource::Scene { spec, .. } => spec.trajectory.len(),
            FrameSource::Files { paths, .. } => paths.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, idx: usize) -> Result<FrameBundle> {
        match self {
            FrameSource::Scene { spec, opts } => render_frame(spec, idx, opts),
            FrameSource::Files { paths, patch_size } => {
                let path = paths
                    .get(idx)
                    .ok_or_else(|| Error::InvalidInput(format!("frame {idx} out of range")))?;
                let mut f = load_frame(path).map_err(|e| match e {
                    Error::Format { offset, message } => {
                        Error::Format { offset, message: format!("{}: {message}", path.display()) }
                    }
                    other => other,
                })?;
                if let Some(p) = patch_size {
                    f.patch_size = *p;
                }
                Ok(f)
            }
        }
    }

    /// `(dim_f, dim_g)` of the frames this source produces.
    pub fn dims(&self) -> Result<(usize, usize)> {
        match self {
            FrameSource::Scene { opts, .. } => Ok((opts.dim_f, opts.dim_g)),
            FrameSource::Files { .. } => {
                let f = self.frame(0)?;
                Ok((f.dim_f, f.dim_g))
            }
        }
    }

    /// Patch-grid size of one frame, the per-frame token count of plain
    /// concatenation.
    pub fn patches_per_frame(&self) -> Result<usize> {
        let (h, w, p) = match self {
            FrameSource::Scene { spec, opts } => (spec.camera.height, spec.camera.width, opts.patch_size),
            FrameSource::Files { .. } => {
                let f = self.frame(0)?;
                (f.height, f.width, f.patch_size)
            }
        };
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::InvalidFrame(format!("frame {h}x{w} is not divisible by patch size {p}")));
        }
        Ok((h / p) * (w / p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildConfig {
    pub policy: ThresholdPolicy,
    pub encoder: GeomPatchEncoder,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig { policy: ThresholdPolicy::default(), encoder: GeomPatchEncoder::MaskedMean, seed: 0 }
    }
}

/// Runs the map update over `indices` of `source`, in the given order.
/// Frames are rendered or loaded in parallel batches; steps run in order.
pub fn build_map(source: &FrameSource, indices: &[usize], cfg: &BuildConfig) -> Result<(MemoryState, Vec<StepReport>)> {
    let (dim_f, dim_g) = source.dims()?;
    let mut state = MemoryState::new(dim_f, dim_g, cfg.policy, cfg.seed)?;
    let mut reports = Vec::with_capacity(indices.len());
    for batch in indices.chunks(PREFETCH) {
        let tokens: Vec<_> = batch
            .par_iter()
            .map(|&i| source.frame(i).and_then(|f| pool_patches(&f, &cfg.encoder)))
            .collect::<Result<_>>()?;
        for t in &tokens {
            reports.push(state.step(t)?);
        }
    }
    Ok((state, reports))
}

pub fn build_all(source: &FrameSource, cfg: &BuildConfig) -> Result<(MemoryState, Vec<StepReport>)> {
    let indices: Vec<usize> = (0..source.len()).collect();
    build_map(source, &indices, cfg)
}

/// Token count of the compacted map versus concatenating every frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub frames: usize,
    pub patches_per_frame: usize,
    pub baseline_tokens: usize,
    pub map_tokens: usize,
    pub reduction: f64,
}

pub fn reduction(map_tokens: usize, frames: usize, patches_per_frame: usize) -> f64 {
    let baseline = frames * patches_per_frame;
    if baseline == 0 {
        return 0.0;
    }
    1.0 - map_tokens as f64 / baseline as f64
}

/// Reduction after every step of a build.
pub fn reduction_curve(reports: &[StepReport], patches_per_frame: usize) -> Vec<f64> {
    reports
        .iter()
        .enumerate()
        .map(|(i, r)| reduction(r.total_after, i + 1, patches_per_frame))
        .collect()
}

pub fn compare(source: &FrameSource, cfg: &BuildConfig) -> Result<(CompareReport, Vec<StepReport>)> {
    let (state, reports) = build_all(source, cfg)?;
    let ppf = source.patches_per_frame()?;
    let frames = source.len();
    Ok((
        CompareReport {
            frames,
            patches_per_frame: ppf,
            baseline_tokens: frames * ppf,
            map_tokens: state.len(),
            reduction: reduction(state.len(), frames, ppf),
        },
        reports,
    ))
}

/// Symmetric Chamfer distance: the mean of the two directed average
/// nearest-neighbour distances. Infinite if exactly one set is empty.
pub fn chamfer(a: &[Point3], b: &[Point3]) -> Result<f64> {
    if a.is_empty() && b.is_empty() {
        return Ok(0.0);
    }
    if a.is_empty() || b.is_empty() {
        return Ok(f64::INFINITY);
    }
    let directed = |from: &[Point3], to: &[Point3]| -> Result<f64> {
        let idx = SpatialIndex::build(to, chamfer_cell(to))?;
        let nearest: Vec<f64> = from.par_iter().map(|p| idx.min_distance(p).0).collect();
        let sum: f64 = nearest.iter().sum();
        Ok(sum / from.len() as f64)
    };
    Ok(0.5 * (directed(a, b)? + directed(b, a)?))
}

fn chamfer_cell(points: &[Point3]) -> f64 {
    let diag = crate::geom::Aabb::from_points(points.iter()).diagonal();
    (diag / (points.len() as f64).cbrt()).max(1e-6)
}

/// Brute-force Chamfer distance, used to cross-check [`chamfer`].
pub fn chamfer_naive(a: &[Point3], b: &[Point3]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    let directed = |from: &[Point3], to: &[Point3]| {
        from.iter()
            .map(|p| to.iter().map(|q| distance(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    0.5 * (directed(a, b) + directed(b, a))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub frames: usize,
    pub tokens: usize,
    pub reduction: f64,
    /// Chamfer distance to the previous row's map; absent on the first row.
    pub chamfer_to_previous: Option<f64>,
}

/// Evenly spaced frame indices `floor(i * n / count)`.
pub fn even_indices(n: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > n {
        return Err(Error::InvalidInput(format!("cannot pick {count} frames out of {n}")));
    }
    Ok((0..count).map(|i| i * n / count).collect())
}

/// Builds one map per frame count over the same trajectory.
pub fn framesweep(source: &FrameSource, counts: &[usize], cfg: &BuildConfig) -> Result<Vec<SweepRow>> {
    let ppf = source.patches_per_frame()?;
    let mut rows = Vec::with_capacity(counts.len());
    let mut previous: Option<Vec<Point3>> = None;
    for &count in counts {
        let indices = even_indices(source.len(), count)?;
        let (state, _) = build_map(source, &indices, cfg)?;
        let positions = state.positions();
        let chamfer_to_previous = previous.as_ref().map(|p| chamfer(p, &positions)).transpose()?;
        rows.push(SweepRow {
            frames: count,
            tokens: state.len(),
            reduction: reduction(state.len(), count, ppf),
            chamfer_to_previous,
        });
        previous = Some(positions);
    }
    Ok(rows)
}
