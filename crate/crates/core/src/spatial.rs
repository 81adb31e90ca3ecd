//! Uniform-grid index for exact radius and nearest-point queries.
//!
//! Points are bucketed into cubic cells of edge `cell_size`, keyed by
//! `floor(p / cell_size)` per axis. Radius queries visit the box of cells
//! overlapping the query ball; nearest-point queries walk Chebyshev rings of
//! cells outwards from the query cell and stop once the ring lower bound
//! exceeds the best distance found. All answers are exact.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geom::{distance, is_finite3, Point3};

type CellKey = [i64; 3];

/// Relative slack on the ring lower bound. Cell keys come from a rounded
/// division, so a point may sit a few ulps on the wrong side of a cell face.
const RING_SLACK: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct SpatialIndex {
    cell_size: f64,
    cells: HashMap<CellKey, Vec<u32>>,
    points: Vec<Point3>,
    lo: CellKey,
    hi: CellKey,
}

impl SpatialIndex {
    pub fn build(points: &[Point3], cell_size: f64) -> Result<Self> {
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(Error::InvalidInput(format!("cell size must be positive and finite, got {cell_size}")));
        }
        if points.len() > u32::MAX as usize {
            return Err(Error::InvalidInput("too many points for a spatial index".into()));
        }
        let mut cells: HashMap<CellKey, Vec<u32>> = HashMap::with_capacity(points.len());
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (id, p) in points.iter().enumerate() {
            if !is_finite3(p) {
                return Err(Error::InvalidInput(format!("point {id} is not finite: {p:?}")));
            }
            let key = cell_of(p, cell_size);
            for a in 0..3 {
                lo[a] = lo[a].min(key[a]);
                hi[a] = hi[a].max(key[a]);
            }
            cells.entry(key).or_default().push(id as u32);
        }
        Ok(SpatialIndex { cell_size, cells, points: points.to_vec(), lo, hi })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    /// Number of occupied cells.
    pub fn occupied_cells(&self) -> usize {
        self.cells.len()
    }

    /// Ids stored in the cell with the given key, in ascending order.
    pub fn cell_contents(&self, key: [i64; 3]) -> &[u32] {
        self.cells.get(&key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn cell_key(&self, p: &Point3) -> [i64; 3] {
        cell_of(p, self.cell_size)
    }

    /// Ids of all points strictly closer than `radius` to `query`, ascending.
    pub fn radius_query(&self, query: &Point3, radius: f64) -> Vec<u32> {
        let mut out = Vec::new();
        self.visit_candidates(query, radius, |id| {
            if distance(query, &self.points[id as usize]) < radius {
                out.push(id);
            }
            true
        });
        out.sort_unstable();
        out
    }

    /// Whether any point lies strictly closer than `radius` to `query`.
    pub fn any_within(&self, query: &Point3, radius: f64) -> bool {
        let mut found = false;
        self.visit_candidates(query, radius, |id| {
            if distance(query, &self.points[id as usize]) < radius {
                found = true;
                return false;
            }
            true
        });
        found
    }

    /// Nearest point strictly closer than `radius`, ties to the smallest id.
    /// Only the cells overlapping the query ball are visited.
    pub fn nearest_within(&self, query: &Point3, radius: f64) -> Option<(f64, u32)> {
        let mut best: Option<(f64, u32)> = None;
        self.visit_candidates(query, radius, |id| {
            let d = distance(query, &self.points[id as usize]);
            if d < radius && best.is_none_or(|(bd, bi)| d < bd || (d == bd && id < bi)) {
                best = Some((d, id));
            }
            true
        });
        best
    }

    /// Exact nearest point: `(distance, id)`, or `(+inf, None)` when empty.
    /// Ties resolve to the smallest id.
    pub fn min_distance(&self, query: &Point3) -> (f64, Option<u32>) {
        if self.points.is_empty() || !is_finite3(query) {
            return (f64::INFINITY, None);
        }
        let center = self.cell_key(query);
        let mut best = (f64::INFINITY, None::<u32>);
        let consider = |id: u32, best: &mut (f64, Option<u32>)| {
            let d = distance(query, &self.points[id as usize]);
            match best.1 {
                Some(b) if d > best.0 || (d == best.0 && id > b) => {}
                _ => *best = (d, Some(id)),
            }
        };

        // Largest ring that can still contain an occupied cell.
        let max_ring = (0..3)
            .map(|a| (center[a].saturating_sub(self.lo[a])).max(self.hi[a].saturating_sub(center[a])))
            .max()
            .unwrap_or(0)
            .max(0);

        let mut ring: i64 = 0;
        loop {
            if ring > max_ring {
                break;
            }
            // Anything in ring >= k is at least (k - 1) cells away on some axis.
            if ring >= 1 {
                let lower = (ring - 1) as f64 * self.cell_size * (1.0 - RING_SLACK);
                if best.0 < lower {
                    break;
                }
            }
            if ring_cell_count(ring) > self.cells.len() as u128 {
                // Walking the ring costs more than scanning what is left.
                for (key, ids) in &self.cells {
                    if chebyshev(key, &center) >= ring {
                        for &id in ids {
                            consider(id, &mut best);
                        }
                    }
                }
                break;
            }
            for_each_ring_cell(center, ring, |key| {
                if let Some(ids) = self.cells.get(&key) {
                    for &id in ids {
                        consider(id, &mut best);
                    }
                }
            });
            ring += 1;
        }
        best
    }

    /// Calls `f` with every id whose cell could hold a point within `radius`.
    /// Stops early when `f` returns false.
    fn visit_candidates(&self, query: &Point3, radius: f64, mut f: impl FnMut(u32) -> bool) {
        if self.points.is_empty() || !(radius > 0.0) || !is_finite3(query) {
            return;
        }
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        let mut volume: u128 = 1;
        let mut bounded = radius.is_finite();
        for a in 0..3 {
            let q = query[a] as f64;
            let l = ((q - radius) / self.cell_size).floor();
            let h = ((q + radius) / self.cell_size).floor();
            if !(l.is_finite() && h.is_finite()) || l < i64::MIN as f64 || h > i64::MAX as f64 {
                bounded = false;
                break;
            }
            lo[a] = (l as i64).max(self.lo[a]);
            hi[a] = (h as i64).min(self.hi[a]);
            if lo[a] > hi[a] {
                return;
            }
            volume = volume.saturating_mul((hi[a] - lo[a] + 1) as u128);
        }
        if !bounded || volume > self.cells.len() as u128 {
            for ids in self.cells.values() {
                for &id in ids {
                    if !f(id) {
                        return;
                    }
                }
            }
            return;
        }
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    if let Some(ids) = self.cells.get(&[x, y, z]) {
                        for &id in ids {
                            if !f(id) {
                                return;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn cell_of(p: &Point3, cell_size: f64) -> CellKey {
    // `as` saturates, which keeps absurdly distant points in boundary cells.
    [
        (p[0] as f64 / cell_size).floor() as i64,
        (p[1] as f64 / cell_size).floor() as i64,
        (p[2] as f64 / cell_size).floor() as i64,
    ]
}

fn chebyshev(a: &CellKey, b: &CellKey) -> i64 {
    (0..3).map(|i| (a[i] - b[i]).abs()).max().unwrap_or(0)
}

fn ring_cell_count(ring: i64) -> u128 {
    if ring == 0 {
        return 1;
    }
    let outer = (2 * ring as u128 + 1).pow(3);
    let inner = (2 * ring as u128 - 1).pow(3);
    outer - inner
}

/// Visits every cell at Chebyshev distance exactly `ring` from `center`.
fn for_each_ring_cell(center: CellKey, ring: i64, mut f: impl FnMut(CellKey)) {
    if ring == 0 {
        f(center);
        return;
    }
    for dx in -ring..=ring {
        for dy in -ring..=ring {
            let on_shell = dx.abs() == ring || dy.abs() == ring;
            if on_shell {
                for dz in -ring..=ring {
                    f([center[0] + dx, center[1] + dy, center[2] + dz]);
                }
            } else {
                f([center[0] + dx, center[1] + dy, center[2] - ring]);
                f([center[0] + dx, center[1] + dy, center[2] + ring]);
            }
        }
    }
}
