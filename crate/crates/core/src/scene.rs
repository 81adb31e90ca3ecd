//! Deterministic synthetic scenes rendered straight into frame bundles.
//!
//! A scene is a handful of axis-aligned boxes and infinite planes viewed by a
//! pinhole camera moving along a trajectory. Each pixel ray is intersected
//! with every primitive; the nearest hit gives the pointmap entry (world
//! coordinates), the primitive's surface id picks a fixed pseudo-random
//! semantic vector, and the surface normal fills the geometric vector.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::FrameBundle;

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Solid box; seen from inside it acts as a room.
    Box { min: [f64; 3], max: [f64; 3], surface_id: u32, color: [f32; 3] },
    Plane { point: [f64; 3], normal: [f64; 3], surface_id: u32, color: [f32; 3] },
}

impl Primitive {
    fn surface(&self) -> (u32, [f32; 3]) {
        match self {
            Primitive::Box { surface_id, color, .. } | Primitive::Plane { surface_id, color, .. } => {
                (*surface_id, *color)
            }
        }
    }

    /// Nearest hit with `t > 0` along `origin + t * dir`, and the outward
    /// surface normal there.
    fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, [f64; 3])> {
        match self {
            Primitive::Plane { point, normal, .. } => {
                let n = normalize(*normal)?;
                let denom = dot(n, dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = dot(n, sub(*point, origin)) / denom;
                (t > HIT_EPS).then_some((t, n))
            }
            Primitive::Box { min, max, .. } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut near_axis = (0, 0.0);
                let mut far_axis = (0, 0.0);
                for a in 0..3 {
                    if dir[a].abs() < 1e-15 {
                        if origin[a] < min[a] || origin[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let t0 = (min[a] - origin[a]) / dir[a];
                    let t1 = (max[a] - origin[a]) / dir[a];
                    // Entering through the face the ray meets first.
                    let (lo, hi, lo_sign) = if t0 < t1 { (t0, t1, -1.0) } else { (t1, t0, 1.0) };
                    if lo > t_near {
                        t_near = lo;
                        near_axis = (a, lo_sign);
                    }
                    if hi < t_far {
                        t_far = hi;
                        far_axis = (a, -lo_sign);
                    }
                }
                if t_near > t_far {
                    return None;
                }
                let axis_normal = |(a, s): (usize, f64)| {
                    let mut n = [0.0; 3];
                    n[a] = s;
                    n
                };
                if t_near > HIT_EPS {
                    Some((t_near, axis_normal(near_axis)))
                } else if t_far > HIT_EPS {
                    Some((t_far, axis_normal(far_axis)))
                } else {
                    None
                }
            }
        }
    }

    /// Distance from `p` to this primitive's surface.
    pub fn surface_distance(&self, p: [f64; 3]) -> f64 {
        match self {
            Primitive::Plane { point, normal, .. } => match normalize(*normal) {
                Some(n) => dot(n, sub(p, *point)).abs(),
                None => f64::INFINITY,
            },
            Primitive::Box { min, max, .. } => {
                let mut outside = 0.0f64;
                let mut inside_gap = f64::INFINITY;
                for a in 0..3 {
                    let below = min[a] - p[a];
                    let above = p[a] - max[a];
                    let d = below.max(above);
                    if d > 0.0 {
                        outside += d * d;
                    }
                    inside_gap = inside_gap.min((p[a] - min[a]).abs()).min((max[a] - p[a]).abs());
                }
                if outside > 0.0 {
                    outside.sqrt()
                } else {
                    inside_gap
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub eye: [f64; 3],
    pub target: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    /// Circle of `radius` around `center`, raised by `height`, always looking
    /// at `center`.
    Orbit { center: [f64; 3], radius: f64, height: f64, n_frames: usize, revolutions: f64 },
    Waypoints { poses: Vec<Pose> },
}

impl Trajectory {
    pub fn len(&self) -> usize {
        match self {
            Trajectory::Orbit { n_frames, .. } => *n_frames,
            Trajectory::Waypoints { poses } => poses.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pose(&self, frame_idx: usize) -> Result<Pose> {
        if frame_idx >= self.len() {
            return Err(Error::InvalidInput(format!("frame {frame_idx} is past the end of a {}-frame trajectory", self.len())));
        }
        match self {
            Trajectory::Waypoints { poses } => Ok(poses[frame_idx]),
            Trajectory::Orbit { center, radius, height, n_frames, revolutions } => {
                // Integer revolution counts revisit bit-identical poses.
                let turn = if revolutions.fract() == 0.0 && *revolutions >= 0.0 && *revolutions < 1e9 {
                    let k = (frame_idx as u128 * *revolutions as u128) % *n_frames as u128;
                    k as f64 / *n_frames as f64
                } else {
                    (revolutions * frame_idx as f64 / *n_frames as f64).fract()
                };
                let (s, c) = (TAU * turn).sin_cos();
                Ok(Pose {
                    eye: [center[0] + radius * c, center[1] + radius * s, center[2] + height],
                    target: *center,
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Vertical field of view in degrees.
    pub fov_deg: f64,
    pub height: usize,
    pub width: usize,
}

/// Declarative scene description, loadable from TOML or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub trajectory: Trajectory,
    pub camera: Camera,
    /// Standard deviation of the per-coordinate position jitter.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Frame layout requested from the renderer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderOptions {
    pub dim_f: usize,
    pub dim_g: usize,
    pub patch_size: usize,
}

impl SceneSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let spec: SceneSpec = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectory.is_empty() {
            return Err(Error::Config("trajectory has no frames".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        let c = &self.camera;
        if !(c.fov_deg > 0.0 && c.fov_deg < 180.0) || c.height == 0 || c.width == 0 {
            return Err(Error::Config(format!("degenerate camera {c:?}")));
        }
        Ok(())
    }

    /// A closed 4 x 4 x 2.6 room with a table and a cabinet, orbited at
    /// 1.2 m radius. Every surface in view is static.
    pub fn static_room(n_frames: usize, revolutions: f64, height: usize, width: usize) -> Self {
        SceneSpec {
            primitives: vec![
                Primitive::Box { min: [-2.0, -2.0, 0.0], max: [2.0, 2.0, 2.6], surface_id: 1, color: [0.8, 0.8, 0.75] },
                Primitive::Box { min: [-0.5, -0.4, 0.0], max: [0.5, 0.4, 0.75], surface_id: 2, color: [0.55, 0.35, 0.2] },
                Primitive::Box { min: [1.3, -1.9, 0.0], max: [1.9, -0.9, 1.8], surface_id: 3, color: [0.2, 0.3, 0.6] },
            ],
            trajectory: Trajectory::Orbit { center: [0.0, 0.0, 0.6], radius: 1.2, height: 0.9, n_frames, revolutions },
            camera: Camera { fov_deg: 70.0, height, width },
            noise_sigma: 0.0,
            seed: 7,
        }
    }
}

/// Renders frame `frame_idx`. The result depends only on the arguments.
pub fn render_frame(spec: &SceneSpec, frame_idx: usize, opts: &RenderOptions) -> Result<FrameBundle> {
    spec.validate()?;
    let pose = spec.trajectory.pose(frame_idx)?;
    let cam = &spec.camera;
    let forward = normalize(sub(pose.target, pose.eye)).ok_or_else(|| Error::Config("camera eye equals target".into()))?;
    let right = normalize(cross(forward, [0.0, 0.0, 1.0]))
        .ok_or_else(|| Error::Config("camera looks straight up or down".into()))?;
    let up = cross(right, forward);
    let tan_y = (cam.fov_deg.to_radians() * 0.5).tan();
    let tan_x = tan_y * cam.width as f64 / cam.height as f64;

    let mut frame = FrameBundle::blank(cam.height, cam.width, opts.dim_f, opts.dim_g, opts.patch_size);
    frame.timestep = u32::try_from(frame_idx + 1).map_err(|_| Error::InvalidInput("frame index too large".into()))?;

    let semantics: Vec<(u32, Vec<f32>)> = spec
        .primitives
        .iter()
        .map(|p| {
            let (id, color) = p.surface();
            (id, surface_feature(spec.seed, id, color, opts.dim_f))
        })
        .collect();

    let mut jitter = (spec.noise_sigma > 0.0).then(|| {
        let rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (frame_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        (rng, Normal::new(0.0, spec.noise_sigma).expect("sigma validated"))
    });

    for y in 0..cam.height {
        let v = 1.0 - 2.0 * (y as f64 + 0.5) / cam.height as f64;
        for x in 0..cam.width {
            let u = 2.0 * (x as f64 + 0.5) / cam.width as f64 - 1.0;
            let dir = normalize(add(forward, add(scale(right, u * tan_x), scale(up, v * tan_y)))).expect("non-zero ray");
            let mut best: Option<(f64, [f64; 3], usize)> = None;
            for (pi, prim) in spec.primitives.iter().enumerate() {
                if let Some((t, n)) = prim.intersect(pose.eye, dir) {
                    if best.is_none_or(|(bt, _, _)| t < bt) {
                        best = Some((t, n, pi));
                    }
                }
            }
            let px = y * cam.width + x;
            let Some((t, normal, pi)) = best else { continue };
            let mut hit = add(pose.eye, scale(dir, t));
            if let Some((rng, dist)) = jitter.as_mut() {
                for c in hit.iter_mut() {
                    *c += dist.sample(rng);
                }
            }
            frame.valid[px] = true;
            for a in 0..3 {
                frame.pointmap[px * 3 + a] = hit[a] as f32;
            }
            frame.semantic[px * opts.dim_f..(px + 1) * opts.dim_f].copy_from_slice(&semantics[pi].1);
            for (k, g) in frame.geometric[px * opts.dim_g..(px + 1) * opts.dim_g].iter_mut().enumerate() {
                *g = if k < 3 { normal[k] as f32 } else { 0.0 };
            }
        }
    }
    Ok(frame)
}

/// Fixed per-surface semantic vector: color in the first channels, seeded
/// uniform noise in the rest.
fn surface_feature(seed: u64, surface_id: u32, color: [f32; 3], dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ surface_id as u64);
    (0..dim)
        .map(|k| {
            let r: f32 = rng.random_range(-1.0..1.0);
            if k < 3 {
                color[k]
            } else {
                r
            }
        })
        .collect()
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(a, a).sqrt();
    (n > 1e-12 && n.is_finite()).then(|| scale(a, 1.0 / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    const OPTS: RenderOptions = RenderOptions { dim_f: 6, dim_g: 4, patch_size: 8 };

    fn plane_scene() -> SceneSpec {
        SceneSpec {
            primitives: vec![Primitive::Plane {
                point: [0.0, 5.0, 0.0],
                normal: [0.0, -1.0, 0.0],
                surface_id: 4,
                color: [1.0, 0.0, 0.0],
            }],
            trajectory: Trajectory::Waypoints { poses: vec![Pose { eye: [0.0, 0.0, 1.0], target: [0.0, 1.0, 1.0] }] },
            camera: Camera { fov_deg: 60.0, height: 16, width: 24 },
            noise_sigma: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn facing_a_plane_fills_every_pixel() {
        let f = render_frame(&plane_scene(), 0, &OPTS).unwrap();
        assert!(f.valid.iter().all(|v| *v));
        for px in 0..f.pixel_count() {
            assert_eq!(&f.geometric[px * 4..px * 4 + 4], &[0.0, -1.0, 0.0, 0.0]);
            assert!((f.pointmap[px * 3 + 1] - 5.0).abs() < 1e-5);
        }
    }

    #[test]
    fn no_primitives_means_no_valid_pixels() {
        let mut s = plane_scene();
        s.primitives.clear();
        let f = render_frame(&s, 0, &OPTS).unwrap();
        assert!(f.valid.iter().all(|v| !*v));
    }

    #[test]
    fn degenerate_cameras_are_config_errors() {
        let mut s = plane_scene();
        s.camera.fov_deg = 0.0;
        assert!(matches!(render_frame(&s, 0, &OPTS), Err(Error::Config(_))));
        let mut s = plane_scene();
        s.trajectory = Trajectory::Waypoints { poses: vec![Pose { eye: [0.0; 3], target: [0.0; 3] }] };
        assert!(matches!(render_frame(&s, 0, &OPTS), Err(Error::Config(_))));
        let mut s = plane_scene();
        s.trajectory = Trajectory::Waypoints { poses: vec![Pose { eye: [0.0; 3], target: [0.0, 0.0, 1.0] }] };
        assert!(matches!(render_frame(&s, 0, &OPTS), Err(Error::Config(_))));
        assert!(render_frame(&plane_scene(), 1, &OPTS).is_err());
    }

    #[test]
    fn room_points_lie_on_surfaces() {
        let s = SceneSpec::static_room(8, 1.0, 24, 32);
        for i in 0..8 {
            let f = render_frame(&s, i, &OPTS).unwrap();
            assert!(f.valid.iter().all(|v| *v), "the room is closed");
            for px in 0..f.pixel_count() {
                let p = f.point(px).map(|c| c as f64);
                let d = s.primitives.iter().map(|pr| pr.surface_distance(p)).fold(f64::INFINITY, f64::min);
                assert!(d < 1e-5, "pixel {px} is {d} off every surface");
            }
        }
    }

    #[test]
    fn rendering_is_deterministic_including_noise() {
        let mut s = SceneSpec::static_room(4, 1.0, 16, 16);
        s.noise_sigma = 0.01;
        assert_eq!(render_frame(&s, 2, &OPTS).unwrap(), render_frame(&s, 2, &OPTS).unwrap());
        assert_ne!(render_frame(&s, 2, &OPTS).unwrap().pointmap, render_frame(&s, 1, &OPTS).unwrap().pointmap);
    }

    #[test]
    fn second_revolution_repeats_the_first_bitwise() {
        let s = SceneSpec::static_room(8, 2.0, 16, 16);
        for i in 0..4 {
            let a = render_frame(&s, i, &OPTS).unwrap();
            let b = render_frame(&s, i + 4, &OPTS).unwrap();
            assert_eq!(a.pointmap, b.pointmap);
            assert_eq!(a.semantic, b.semantic);
        }
    }

    #[test]
    fn scene_spec_parses_from_toml() {
        let text = r#"
            noise_sigma = 0.0
            seed = 3
            [camera]
            fov_deg = 60.0
            height = 32
            width = 32
            [trajectory]
            kind = "orbit"
            center = [0.0, 0.0, 1.0]
            radius = 1.0
            height = 0.5
            n_frames = 10
            revolutions = 1.0
            [[primitives]]
            kind = "box"
            min = [-2.0, -2.0, 0.0]
            max = [2.0, 2.0, 3.0]
            surface_id = 1
            color = [0.5, 0.5, 0.5]
        "#;
        let s: SceneSpec = toml::from_str(text).unwrap();
        s.validate().unwrap();
        assert_eq!(s.trajectory.len(), 10);
    }
}
