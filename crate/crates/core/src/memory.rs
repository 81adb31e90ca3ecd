//! The token map and its per-frame recurrence.
//!
//! Each step compares the incoming patch tokens against the previous map.
//! Map tokens with a new observation closer than the distance threshold are
//! replaced by the mean of those observations, the others are kept as they
//! are, and observations farther than the threshold from every previous map
//! token are appended. Both the distance test and the addition test are
//! evaluated against the map as it was before the step.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{is_finite3, Aabb, Point3};
use crate::patching::{PatchToken, PatchTokenSet};
use crate::spatial::SpatialIndex;

/// Fixed threshold used when nothing else is configured, in scene units.
pub const DEFAULT_STATIC_DELTA: f64 = 0.2;
/// Scene-scale ratio that maps a ~6.7 m room diagonal to 0.2 m.
pub const DEFAULT_DYNAMIC_RATIO: f64 = 0.03;
/// Token cap applied when a map is handed to a downstream consumer.
pub const DEFAULT_TOKEN_BUDGET: usize = 8000;

/// Below this many map tokens the per-token work runs on the calling thread.
const PARALLEL_MIN_TOKENS: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryToken {
    pub position: Point3,
    pub semantic: Vec<f32>,
    pub geometric: Vec<f32>,
    pub created_step: u32,
    pub updated_step: u32,
}

impl MemoryToken {
    fn from_patch(patch: &PatchToken, step: u32) -> Self {
        MemoryToken {
            position: patch.position,
            semantic: patch.semantic.clone(),
            geometric: patch.geometric.clone(),
            created_step: step,
            updated_step: step,
        }
    }
}

/// How the distance threshold is chosen at each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    Static { value: f64 },
    /// `clamp(ratio * diagonal, min, max)` where `diagonal` spans the current
    /// map positions and the incoming patch positions.
    Dynamic { ratio: f64, min: f64, max: f64 },
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Static { value: DEFAULT_STATIC_DELTA }
    }
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        match *self {
            ThresholdPolicy::Static { value } if pos(value) => Ok(()),
            ThresholdPolicy::Static { value } => Err(Error::Config(format!("static threshold must be > 0, got {value}"))),
            ThresholdPolicy::Dynamic { ratio, min, max } if pos(ratio) && pos(min) && pos(max) && min <= max => Ok(()),
            ThresholdPolicy::Dynamic { ratio, min, max } => Err(Error::Config(format!(
                "dynamic threshold needs ratio > 0 and 0 < min <= max, got ratio={ratio} min={min} max={max}"
            ))),
        }
    }

    /// Threshold for a scene whose positions span `bounds`.
    pub fn resolve(&self, bounds: &Aabb) -> f64 {
        match *self {
            ThresholdPolicy::Static { value } => value,
            ThresholdPolicy::Dynamic { ratio, min, max } => (ratio * bounds.diagonal()).clamp(min, max),
        }
    }
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdPolicy::Static { value } => write!(f, "static:{value}"),
            ThresholdPolicy::Dynamic { ratio, min, max } => write!(f, "dynamic:{ratio},{min},{max}"),
        }
    }
}

impl FromStr for ThresholdPolicy {
    type Err = Error;

    /// Accepts `static:V` or `dynamic:RATIO,MIN,MAX`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse threshold policy {s:?}; use static:V or dynamic:RATIO,MIN,MAX"));
        let (mode, params) = s.split_once(':').ok_or_else(bad)?;
        let nums: Vec<f64> = params
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let policy = match (mode.trim(), nums.as_slice()) {
            ("static", [value]) => ThresholdPolicy::Static { value: *value },
            ("dynamic", [ratio, min, max]) => ThresholdPolicy::Dynamic { ratio: *ratio, min: *min, max: *max },
            _ => return Err(bad()),
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// Wall-clock time spent in each phase of a step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PhaseTimings {
    pub index: Duration,
    pub distances: Duration,
    pub updates: Duration,
    pub additions: Duration,
    pub total: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    /// Step number the map reached (unchanged for a skipped frame).
    pub step: u32,
    pub retained: usize,
    pub updated: usize,
    pub added: usize,
    pub total_before: usize,
    pub total_after: usize,
    pub delta_used: f64,
    /// Set when the frame had no usable patch and the map was left untouched.
    pub skipped: bool,
    pub timing: PhaseTimings,
}

/// Disjoint split of the previous map's indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partition {
    pub updated: Vec<usize>,
    pub retained: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    pub tokens: Vec<MemoryToken>,
    pub step: u32,
    pub dim_f: usize,
    pub dim_g: usize,
    /// Running bounds over every patch position ingested so far.
    pub aabb: Aabb,
    pub policy: ThresholdPolicy,
    pub seed: u64,
}

impl MemoryState {
    pub fn new(dim_f: usize, dim_g: usize, policy: ThresholdPolicy, seed: u64) -> Result<Self> {
        policy.validate()?;
        Ok(MemoryState { tokens: Vec::new(), step: 0, dim_f, dim_g, aabb: Aabb::empty(), policy, seed })
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

    /// Checks the structural invariants of the map.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InternalInvariantViolation(m));
        if (self.step == 0) != self.tokens.is_empty() {
            return fail(format!("step {} with {} tokens", self.step, self.tokens.len()));
        }
        for (i, t) in self.tokens.iter().enumerate() {
            if t.semantic.len() != self.dim_f || t.geometric.len() != self.dim_g {
                return fail(format!("token {i} has wrong feature dimensions"));
            }
            if !is_finite3(&t.position)
                || !t.semantic.iter().all(|v| v.is_finite())
                || !t.geometric.iter().all(|v| v.is_finite())
            {
                return fail(format!("token {i} holds a non-finite value"));
            }
            if t.created_step > t.updated_step || t.updated_step > self.step {
                return fail(format!("token {i} has inconsistent steps"));
            }
            if !self.aabb.contains(&t.position) {
                return fail(format!("token {i} lies outside the tracked bounds"));
            }
        }
        Ok(())
    }

    /// Integrates one frame's patch tokens. On error the map is unchanged.
    pub fn step(&mut self, frame: &PatchTokenSet) -> Result<StepReport> {
        let started = Instant::now();
        validate_frame(self, frame)?;
        let total_before = self.tokens.len();

        if frame.is_empty() {
            log::warn!("frame {} has no valid patch; map left unchanged", frame.timestep);
            let bounds = Aabb::from_points(self.tokens.iter().map(|t| &t.position));
            return Ok(StepReport {
                step: self.step,
                retained: total_before,
                updated: 0,
                added: 0,
                total_before,
                total_after: total_before,
                delta_used: self.policy.resolve(&bounds),
                skipped: true,
                timing: PhaseTimings { total: started.elapsed(), ..Default::default() },
            });
        }

        let step = self.step.checked_add(1).ok_or_else(|| Error::InvalidFrame("step counter overflow".into()))?;
        let delta = effective_delta(self, frame)?;

        let t = Instant::now();
        let new_index = SpatialIndex::build(&frame.positions(), delta)?;
        let old_index = SpatialIndex::build(&self.positions(), delta)?;
        let index_time = t.elapsed();

        let t = Instant::now();
        let d = distances_below(&self.tokens, &new_index, delta);
        let split = partition(self.tokens.len(), &d, delta)?;
        let distances_time = t.elapsed();

        // Additions are judged against the pre-update map.
        let t = Instant::now();
        let additions = select_additions(frame, delta, &old_index);
        let additions_time = t.elapsed();

        let t = Instant::now();
        let compute = |&k: &usize| -> Result<(usize, MemoryToken)> {
            let nbhd = neighborhood(&self.tokens[k], frame, delta, &new_index)?;
            let members: Vec<&PatchToken> = nbhd.iter().map(|&i| &frame.tokens[i as usize]).collect();
            Ok((k, update_token(&self.tokens[k], &members, step)?))
        };
        let updated: Vec<(usize, MemoryToken)> = if split.updated.len() >= PARALLEL_MIN_TOKENS {
            split.updated.par_iter().map(compute).collect::<Result<_>>()?
        } else {
            split.updated.iter().map(compute).collect::<Result<_>>()?
        };
        let updates_time = t.elapsed();

        for (k, token) in updated {
            self.tokens[k] = token;
        }
        self.tokens
            .extend(additions.iter().map(|&i| MemoryToken::from_patch(&frame.tokens[i], step)));
        for p in frame.tokens.iter().map(|t| &t.position) {
            self.aabb.extend(p);
        }
        self.step = step;

        Ok(StepReport {
            step,
            retained: split.retained.len(),
            updated: split.updated.len(),
            added: additions.len(),
            total_before,
            total_after: self.tokens.len(),
            delta_used: delta,
            skipped: false,
            timing: PhaseTimings {
                index: index_time,
                distances: distances_time,
                updates: updates_time,
                additions: additions_time,
                total: started.elapsed(),
            },
        })
    }

    /// Uniform random subset of at most `budget` tokens, keeping relative
    /// order. The same seed always selects the same tokens.
    pub fn subsample(&self, budget: usize, seed: u64) -> Result<MemoryState> {
        if budget == 0 {
            return Err(Error::InvalidInput("token budget must be positive".into()));
        }
        if self.tokens.len() <= budget {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = rand::seq::index::sample(&mut rng, self.tokens.len(), budget).into_vec();
        keep.sort_unstable();
        let mut out = MemoryState { tokens: Vec::with_capacity(budget), ..self.clone_header() };
        out.tokens.extend(keep.into_iter().map(|i| self.tokens[i].clone()));
        Ok(out)
    }

    fn clone_header(&self) -> MemoryState {
        MemoryState {
            tokens: Vec::new(),
            step: self.step,
            dim_f: self.dim_f,
            dim_g: self.dim_g,
            aabb: self.aabb,
            policy: self.policy,
            seed: self.seed,
        }
    }
}

fn validate_frame(state: &MemoryState, frame: &PatchTokenSet) -> Result<()> {
    if frame.dim_f != state.dim_f || frame.dim_g != state.dim_g {
        return Err(Error::InvalidFrame(format!(
            "frame dims ({}, {}) do not match map dims ({}, {})",
            frame.dim_f, frame.dim_g, state.dim_f, state.dim_g
        )));
    }
    for (i, t) in frame.tokens.iter().enumerate() {
        if t.semantic.len() != state.dim_f || t.geometric.len() != state.dim_g {
            return Err(Error::InvalidFrame(format!("patch token {i} has wrong feature dimensions")));
        }
        if !is_finite3(&t.position) || !t.semantic.iter().chain(&t.geometric).all(|v| v.is_finite()) {
            return Err(Error::InvalidFrame(format!("patch token {i} holds a non-finite value")));
        }
    }
    Ok(())
}

/// Distance threshold for integrating `new_tokens` into `state`.
pub fn effective_delta(state: &MemoryState, new_tokens: &PatchTokenSet) -> Result<f64> {
    if new_tokens.is_empty() {
        return Err(Error::InvalidFrame("no patch tokens to integrate".into()));
    }
    let bounds = Aabb::from_points(state.tokens.iter().map(|t| &t.position))
        .union(&Aabb::from_points(new_tokens.tokens.iter().map(|t| &t.position)));
    Ok(state.policy.resolve(&bounds))
}

/// For every map token, the distance to the nearest new patch token.
/// `index` must be built over the new patch positions.
pub fn min_distances(old: &[MemoryToken], index: &SpatialIndex) -> Vec<f64> {
    let nearest = |t: &MemoryToken| index.min_distance(&t.position).0;
    if old.len() >= PARALLEL_MIN_TOKENS {
        old.par_iter().map(nearest).collect()
    } else {
        old.iter().map(nearest).collect()
    }
}

/// Like [`min_distances`], but any distance of at least `delta` is reported
/// as infinity. The partition only compares against `delta`, so the split is
/// the same while far tokens skip the exhaustive search.
fn distances_below(old: &[MemoryToken], index: &SpatialIndex, delta: f64) -> Vec<f64> {
    let nearest = |t: &MemoryToken| index.nearest_within(&t.position, delta).map_or(f64::INFINITY, |(d, _)| d);
    if old.len() >= PARALLEL_MIN_TOKENS {
        old.par_iter().map(nearest).collect()
    } else {
        old.iter().map(nearest).collect()
    }
}

/// Splits `0..len` by `d[k] < delta`. A distance equal to `delta` is retained.
pub fn partition(len: usize, d: &[f64], delta: f64) -> Result<Partition> {
    if d.len() != len {
        return Err(Error::InternalInvariantViolation(format!(
            "{} distances for {} map tokens",
            d.len(),
            len
        )));
    }
    let mut out = Partition::default();
    for (k, &dk) in d.iter().enumerate() {
        if dk < delta {
            out.updated.push(k);
        } else {
            out.retained.push(k);
        }
    }
    Ok(out)
}

/// Indices of the new tokens strictly within `delta` of `old_token`,
/// ascending. Fails if there are none: only call this for tokens that the
/// partition marked for update.
pub fn neighborhood(
    old_token: &MemoryToken,
    new_tokens: &PatchTokenSet,
    delta: f64,
    index: &SpatialIndex,
) -> Result<Vec<u32>> {
    debug_assert_eq!(index.len(), new_tokens.len());
    let ids = index.radius_query(&old_token.position, delta);
    if ids.is_empty() {
        return Err(Error::InternalInvariantViolation(format!(
            "token at {:?} was marked for update but has no neighbor within {delta}",
            old_token.position
        )));
    }
    Ok(ids)
}

/// Replaces a token by the component-wise mean of its neighborhood. The old
/// values do not enter the mean; only the creation step survives.
pub fn update_token(old_token: &MemoryToken, nbhd: &[&PatchToken], step: u32) -> Result<MemoryToken> {
    if nbhd.is_empty() {
        return Err(Error::InternalInvariantViolation("update with an empty neighborhood".into()));
    }
    let n = nbhd.len() as f64;
    let mut pos = [0.0f64; 3];
    let mut sem = vec![0.0f64; old_token.semantic.len()];
    let mut geo = vec![0.0f64; old_token.geometric.len()];
    for t in nbhd {
        for (a, v) in pos.iter_mut().zip(&t.position) {
            *a += *v as f64;
        }
        for (a, v) in sem.iter_mut().zip(&t.semantic) {
            *a += *v as f64;
        }
        for (a, v) in geo.iter_mut().zip(&t.geometric) {
            *a += *v as f64;
        }
    }
    Ok(MemoryToken {
        position: [(pos[0] / n) as f32, (pos[1] / n) as f32, (pos[2] / n) as f32],
        semantic: sem.into_iter().map(|a| (a / n) as f32).collect(),
        geometric: geo.into_iter().map(|a| (a / n) as f32).collect(),
        created_step: old_token.created_step,
        updated_step: step,
    })
}

/// Indices (in frame order) of new tokens at distance `>= delta` from every
/// position in `index_over_old`. Everything is selected when the map is empty.
pub fn select_additions(new_tokens: &PatchTokenSet, delta: f64, index_over_old: &SpatialIndex) -> Vec<usize> {
    new_tokens
        .tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| !index_over_old.any_within(&t.position, delta))
        .map(|(i, _)| i)
        .collect()
}
