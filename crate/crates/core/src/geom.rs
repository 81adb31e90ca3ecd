//! Small fixed-size vector helpers shared by the map, the index and the renderer.

use serde::{Deserialize, Serialize};

/// A position at rest. Arithmetic on positions is carried out in `f64`.
pub type Point3 = [f32; 3];

/// Euclidean distance between two stored positions, evaluated in `f64`.
///
/// Every distance comparison in the crate goes through this function so that
/// two code paths asking the same question get bit-identical answers.
#[inline]
pub fn distance(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

#[inline]
pub fn is_finite3(p: &Point3) -> bool {
    p.iter().all(|c| c.is_finite())
}

/// Axis-aligned bounding box. An empty box has `min > max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Aabb {
    fn default() -> Self {
        Self::empty()
    }
}

impl Aabb {
    pub const fn empty() -> Self {
        Aabb { min: [f64::INFINITY; 3], max: [f64::NEG_INFINITY; 3] }
    }

    pub fn is_empty(&self) -> bool {
        (0..3).any(|i| self.min[i] > self.max[i])
    }

    pub fn extend(&mut self, p: &Point3) {
        for i in 0..3 {
            let c = p[i] as f64;
            self.min[i] = self.min[i].min(c);
            self.max[i] = self.max[i].max(c);
        }
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        let mut out = *self;
        for i in 0..3 {
            out.min[i] = out.min[i].min(other.min[i]);
            out.max[i] = out.max[i].max(other.max[i]);
        }
        out
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Point3>) -> Aabb {
        let mut b = Aabb::empty();
        for p in points {
            b.extend(p);
        }
        b
    }

    /// Length of the main diagonal; zero for an empty or degenerate box.
    pub fn diagonal(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..3 {
            let e = self.max[i] - self.min[i];
            s += e * e;
        }
        s.sqrt()
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|i| {
            let c = p[i] as f64;
            c >= self.min[i] && c <= self.max[i]
        })
    }
}
