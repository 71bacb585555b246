//! Uniform hash grid over 3D points for radius and k-nearest queries.

use std::collections::HashMap;

use nalgebra::Vector3;

type Key = (i64, i64, i64);

/// Append-only point index. Queries are exact; ties break toward the lower
/// insertion index so results never depend on hash order.
#[derive(Debug, Clone)]
pub struct SpatialGrid {
    cell: f64,
    points: Vec<Vector3<f64>>,
    cells: HashMap<Key, Vec<u32>>,
    lo: Key,
    hi: Key,
}

impl SpatialGrid {
    pub fn new(cell: f64) -> Self {
        assert!(cell > 0.0, "grid cell must be positive");
        Self {
            cell,
            points: Vec::new(),
            cells: HashMap::new(),
            lo: (i64::MAX, i64::MAX, i64::MAX),
            hi: (i64::MIN, i64::MIN, i64::MIN),
        }
    }

    pub fn from_points(cell: f64, points: impl IntoIterator<Item = Vector3<f64>>) -> Self {
        let mut grid = Self::new(cell);
        for p in points {
            grid.insert(p);
        }
        grid
    }

    #[inline]
    pub fn cell(&self) -> f64 {
        self.cell
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &Vector3<f64> {
        &self.points[i]
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    #[inline]
    fn key(&self, p: &Vector3<f64>) -> Key {
        (
            (p.x / self.cell).floor() as i64,
            (p.y / self.cell).floor() as i64,
            (p.z / self.cell).floor() as i64,
        )
    }

    /// Adds a point and returns its index.
    pub fn insert(&mut self, p: Vector3<f64>) -> usize {
        let i = self.points.len();
        let k = self.key(&p);
        self.lo = (self.lo.0.min(k.0), self.lo.1.min(k.1), self.lo.2.min(k.2));
        self.hi = (self.hi.0.max(k.0), self.hi.1.max(k.1), self.hi.2.max(k.2));
        self.cells.entry(k).or_default().push(i as u32);
        self.points.push(p);
        i
    }

    /// Calls `f` for every point in cells at Chebyshev ring `r` around `c`.
    fn visit_ring(&self, c: Key, r: i64, mut f: impl FnMut(u32)) {
        for dz in -r..=r {
            let z = c.2 + dz;
            if z < self.lo.2 || z > self.hi.2 {
                continue;
            }
            for dy in -r..=r {
                let y = c.1 + dy;
                if y < self.lo.1 || y > self.hi.1 {
                    continue;
                }
                let on_shell = dz.abs() == r || dy.abs() == r;
                let step = if on_shell { 1 } else { (2 * r).max(1) as usize };
                for dx in (-r..=r).step_by(step) {
                    if let Some(ids) = self.cells.get(&(c.0 + dx, y, z)) {
                        ids.iter().copied().for_each(&mut f);
                    }
                }
            }
        }
    }

    fn max_ring(&self, c: Key) -> i64 {
        [
            c.0 - self.lo.0,
            self.hi.0 - c.0,
            c.1 - self.lo.1,
            self.hi.1 - c.1,
            c.2 - self.lo.2,
            self.hi.2 - c.2,
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
        .max(0)
    }

    /// Nearest point within `radius`, as `(index, squared distance)`.
    pub fn nearest_within(&self, p: &Vector3<f64>, radius: f64) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let c = self.key(p);
        let rings = ((radius / self.cell).ceil() as i64).min(self.max_ring(c));
        let r2 = radius * radius;
        let mut best: Option<(u32, f64)> = None;
        for r in 0..=rings {
            self.visit_ring(c, r, |i| {
                let d2 = (self.points[i as usize] - p).norm_squared();
                if d2 <= r2 {
                    let better = match best {
                        None => true,
                        Some((bi, bd)) => d2 < bd || (d2 == bd && i < bi),
                    };
                    if better {
                        best = Some((i, d2));
                    }
                }
            });
        }
        best.map(|(i, d)| (i as usize, d))
    }

    /// Whether any point lies within `radius`.
    pub fn any_within(&self, p: &Vector3<f64>, radius: f64) -> bool {
        self.nearest_within(p, radius).is_some()
    }

    /// The `k` nearest points sorted by (distance, index).
    pub fn knn(&self, p: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let mut best: Vec<(u32, f64)> = Vec::with_capacity(k + 1);
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let c = self.key(p);
        let max_ring = self.max_ring(c);
        let mut r = 0;
        loop {
            self.visit_ring(c, r, |i| {
                let d2 = (self.points[i as usize] - p).norm_squared();
                let worse_than_all = best.len() == k && {
                    let (wi, wd) = best[k - 1];
                    d2 > wd || (d2 == wd && i > wi)
                };
                if !worse_than_all {
                    let pos = best
                        .iter()
                        .position(|&(bi, bd)| d2 < bd || (d2 == bd && i < bi))
                        .unwrap_or(best.len());
                    best.insert(pos, (i, d2));
                    best.truncate(k);
                }
            });
            // Anything outside ring r is at least r cells away.
            let reach = r as f64 * self.cell;
            if (best.len() == k && best[k - 1].1 <= reach * reach) || r >= max_ring {
                break;
            }
            r += 1;
        }
        best.into_iter().map(|(i, d)| (i as usize, d)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(points: &[Vector3<f64>], p: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points
            .iter()
            .enumerate()
            .map(|(i, q)| (i, (q - p).norm_squared()))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn knn_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let n = rng.gen_range(1..400);
            let pts: Vec<Vector3<f64>> = (0..n)
                .map(|_| Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..0.5)))
                .collect();
            let grid = SpatialGrid::from_points(rng.gen_range(0.05..0.8), pts.iter().copied());
            for _ in 0..20 {
                let q = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0));
                let k = rng.gen_range(1..15);
                assert_eq!(grid.knn(&q, k), brute_knn(&pts, &q, k), "trial {trial}");
            }
        }
    }

    #[test]
    fn nearest_within_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<Vector3<f64>> = (0..500)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let grid = SpatialGrid::from_points(0.3, pts.iter().copied());
        for _ in 0..200 {
            let q = Vector3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            let radius = rng.gen_range(0.01..0.7);
            let expected = brute_knn(&pts, &q, 1)
                .into_iter()
                .find(|&(_, d)| d <= radius * radius);
            assert_eq!(grid.nearest_within(&q, radius), expected);
        }
    }

    #[test]
    fn empty_grid_returns_nothing() {
        let grid = SpatialGrid::new(1.0);
        assert!(grid.knn(&Vector3::zeros(), 3).is_empty());
        assert!(grid.nearest_within(&Vector3::zeros(), 10.0).is_none());
    }
}
