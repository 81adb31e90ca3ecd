//! Shared test oracles and random instance generators.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cog3dmap::geom::distance;
use cog3dmap::patching::{FrameBundle, PatchTokenSet};
use cog3dmap::{MemoryState, MemoryToken, Point3, ThresholdPolicy};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Outcome of the all-pairs reference update.
pub struct Reference {
    pub tokens: Vec<MemoryToken>,
    pub updated: Vec<usize>,
    pub retained: Vec<usize>,
    pub added: Vec<usize>,
}

/// O(K * |new|) map update written directly from the definitions: every
/// comparison scans every pair, with no spatial index involved.
pub fn reference_step(old: &[MemoryToken], frame: &PatchTokenSet, delta: f64, step: u32) -> Reference {
    let new = &frame.tokens;
    let mut tokens = Vec::with_capacity(old.len() + new.len());
    let (mut updated, mut retained) = (Vec::new(), Vec::new());
    for (k, o) in old.iter().enumerate() {
        let d_k = new.iter().map(|n| distance(&o.position, &n.position)).fold(f64::INFINITY, f64::min);
        if d_k < delta {
            updated.push(k);
            let nbhd: Vec<_> = new.iter().filter(|n| distance(&o.position, &n.position) < delta).collect();
            assert!(!nbhd.is_empty());
            let count = nbhd.len() as f64;
            let mut p = [0.0f64; 3];
            let mut f = vec![0.0f64; o.semantic.len()];
            let mut g = vec![0.0f64; o.geometric.len()];
            for n in &nbhd {
                for a in 0..3 {
                    p[a] += n.position[a] as f64;
                }
                for (i, v) in n.semantic.iter().enumerate() {
                    f[i] += *v as f64;
                }
                for (i, v) in n.geometric.iter().enumerate() {
                    g[i] += *v as f64;
                }
            }
            tokens.push(MemoryToken {
                position: p.map(|s| (s / count) as f32),
                semantic: f.iter().map(|s| (s / count) as f32).collect(),
                geometric: g.iter().map(|s| (s / count) as f32).collect(),
                created_step: o.created_step,
                updated_step: step,
            });
        } else {
            retained.push(k);
            tokens.push(o.clone());
        }
    }
    let mut added = Vec::new();
    for (j, n) in new.iter().enumerate() {
        if old.iter().all(|o| distance(&o.position, &n.position) >= delta) {
            added.push(j);
            tokens.push(MemoryToken {
                position: n.position,
                semantic: n.semantic.clone(),
                geometric: n.geometric.clone(),
                created_step: step,
                updated_step: step,
            });
        }
    }
    Reference { tokens, updated, retained, added }
}

/// Bitwise token equality, so that `-0.0 != 0.0` and NaNs would be caught.
pub fn same_bits(a: &[MemoryToken], b: &[MemoryToken]) -> bool {
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            bits(&x.position) == bits(&y.position)
                && bits(&x.semantic) == bits(&y.semantic)
                && bits(&x.geometric) == bits(&y.geometric)
                && x.created_step == y.created_step
                && x.updated_step == y.updated_step
        })
}

/// A randomized multi-frame instance.
pub struct Sequence {
    pub dim_f: usize,
    pub dim_g: usize,
    pub delta: f64,
    pub frames: Vec<PatchTokenSet>,
}

fn random_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()
}

/// Frames of random patch tokens that drift through a shared region, so
/// that updates, retains and additions all occur. Half of the instances
/// snap coordinates to a 1/8 grid with a threshold that is a multiple of
/// the grid step, which produces exact `d == delta` ties.
pub fn random_sequence(seed: u64, max_tokens: usize) -> Sequence {
    let mut r = rng(seed);
    let dim_f = r.random_range(0..6);
    let dim_g = r.random_range(0..4);
    let snapped = r.random_bool(0.5);
    let delta = if snapped {
        [0.25, 0.5, 0.75][r.random_range(0..3)]
    } else {
        r.random_range(0.05..0.6)
    };
    let extent: f32 = r.random_range(0.5..3.0);
    let n_frames = r.random_range(2..10);
    let per_frame = (max_tokens / n_frames).clamp(1, 200);
    let mut frames = Vec::with_capacity(n_frames);
    let mut center = [0.0f32; 3];
    for t in 0..n_frames {
        let n = r.random_range(1..=per_frame);
        let spread: f32 = r.random_range(0.1..1.0) * extent;
        let triples: Vec<_> = (0..n)
            .map(|_| {
                let mut p: Point3 = [0.0; 3];
                for a in 0..3 {
                    p[a] = center[a] + r.random_range(-spread..spread);
                    if snapped {
                        p[a] = (p[a] * 8.0).round() / 8.0;
                    }
                }
                if r.random_bool(0.1) && t > 0 {
                    // Re-observe a coordinate of the previous frame exactly.
                    let prev: &PatchTokenSet = &frames[t - 1];
                    p = prev.tokens[r.random_range(0..prev.len())].position;
                }
                (p, random_vec(&mut r, dim_f), random_vec(&mut r, dim_g))
            })
            .collect();
        frames.push(PatchTokenSet::from_triples(dim_f, dim_g, t as u32 + 1, triples));
        for c in &mut center {
            *c += r.random_range(-0.3..0.3) * extent;
        }
    }
    Sequence { dim_f, dim_g, delta, frames }
}

/// A dense frame with random geometry, features and validity mask.
pub fn random_frame(seed: u64) -> FrameBundle {
    let mut r = rng(seed);
    let patch = [1, 2, 4, 8][r.random_range(0..4)];
    let h = patch * r.random_range(1..6);
    let w = patch * r.random_range(1..6);
    let dim_f = r.random_range(1..8);
    let dim_g = r.random_range(0..4);
    let mut f = FrameBundle::blank(h, w, dim_f, dim_g, patch);
    f.pointmap = random_vec(&mut r, h * w * 3).iter().map(|v| v * 5.0).collect();
    f.semantic = random_vec(&mut r, h * w * dim_f);
    f.geometric = random_vec(&mut r, h * w * dim_g);
    let p_valid = r.random_range(0.0..1.0);
    f.valid = (0..h * w).map(|_| r.random_bool(p_valid)).collect();
    f.timestep = 1;
    f
}

/// A map built by stepping a random sequence, with a random policy and seed.
pub fn random_state(seed: u64, max_tokens: usize) -> MemoryState {
    let mut r = rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let seq = random_sequence(seed, max_tokens);
    let policy = if r.random_bool(0.5) {
        ThresholdPolicy::Static { value: seq.delta }
    } else {
        ThresholdPolicy::Dynamic { ratio: r.random_range(0.01..0.2), min: 0.01, max: r.random_range(0.1..1.0) }
    };
    let mut state = MemoryState::new(seq.dim_f, seq.dim_g, policy, r.random()).unwrap();
    let steps = r.random_range(0..=seq.frames.len());
    for frame in &seq.frames[..steps] {
        state.step(frame).unwrap();
    }
    state
}
