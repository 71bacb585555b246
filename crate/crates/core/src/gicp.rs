//! Frame-to-map tracking by generalized ICP against the sparse gaussian map.
//!
//! Source points carry plane-like covariances estimated from their
//! neighbourhood; target covariances are the sparse gaussians' own
//! `R S Sᵀ Rᵀ`, so the map doubles as the registration model.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, UnitQuaternion, Vector3, Vector6};

use crate::densify::MissingMasks;
use crate::error::{Error, Result};
use crate::model::{FrequencyClass, Gaussian, GaussianMap, Pose, RgbdFrame};
use crate::spatial::SpatialGrid;

/// Variance floor when turning a covariance into gaussian scales.
const MIN_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    /// Camera-frame position.
    pub position: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

/// Downsampled frame cloud in camera coordinates.
#[derive(Debug, Clone, Default)]
pub struct TrackedCloud {
    pub points: Vec<CloudPoint>,
}

impl TrackedCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = &Vector3<f64>> {
        self.points.iter().map(|p| &p.position)
    }

    /// Positions mapped through `pose`.
    pub fn transformed(&self, pose: &Pose) -> Vec<Vector3<f64>> {
        self.positions().map(|p| pose.transform_point(p)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudConfig {
    pub voxel_size: f64,
    pub knn: usize,
    /// In-plane variance of the regularized covariance, meters².
    pub plane_variance: f64,
    /// Normal-direction variance relative to `plane_variance`.
    pub normal_ratio: f64,
}

impl Default for CloudConfig {
    fn default() -> Self {
        let voxel_size = 0.05;
        Self {
            voxel_size,
            knn: 10,
            plane_variance: (0.2 * voxel_size) * (0.2 * voxel_size),
            normal_ratio: 1e-3,
        }
    }
}

/// Replaces the eigenvalues of a sample covariance by `(1, 1, ratio)·scale`,
/// keeping its eigenvectors.
pub fn plane_regularize(cov: &Matrix3<f64>, scale: f64, ratio: f64) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(*cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut out = Matrix3::zeros();
    for (rank, &i) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        let lambda = if rank == 0 { ratio * scale } else { scale };
        out += v * v.transpose() * lambda;
    }
    (out + out.transpose()) * 0.5
}

/// Back-projects valid depth, keeps one centroid per occupied voxel and
/// attaches a plane-regularized neighbourhood covariance to each.
pub fn build_cloud(frame: &RgbdFrame, cfg: &CloudConfig) -> Result<TrackedCloud> {
    if !(cfg.voxel_size > 0.0) || cfg.knn < 3 {
        return Err(Error::invalid("voxel size must be positive and knn at least 3"));
    }
    let intr = &frame.intrinsics;
    let mut voxels: BTreeMap<(i64, i64, i64), (Vector3<f64>, usize)> = BTreeMap::new();
    let mut valid = 0usize;
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let d = *frame.depth.get(x, y);
            if !(d > 0.0) {
                continue;
            }
            valid += 1;
            let p = intr.back_project(x as f64, y as f64, d);
            let key = (
                (p.x / cfg.voxel_size).floor() as i64,
                (p.y / cfg.voxel_size).floor() as i64,
                (p.z / cfg.voxel_size).floor() as i64,
            );
            let e = voxels.entry(key).or_insert((Vector3::zeros(), 0));
            e.0 += p;
            e.1 += 1;
        }
    }
    if valid < cfg.knn {
        return Err(Error::InsufficientData(format!(
            "{valid} valid depth pixels, need at least {}",
            cfg.knn
        )));
    }
    let centroids: Vec<Vector3<f64>> = voxels.values().map(|(s, n)| s / *n as f64).collect();
    cloud_from_points(&centroids, cfg)
}

/// Attaches regularized kNN covariances to arbitrary points.
pub fn cloud_from_points(points: &[Vector3<f64>], cfg: &CloudConfig) -> Result<TrackedCloud> {
    if points.len() < cfg.knn {
        return Err(Error::InsufficientData(format!(
            "{} points after downsampling, need at least {}",
            points.len(),
            cfg.knn
        )));
    }
    let grid = SpatialGrid::from_points(2.0 * cfg.voxel_size, points.iter().copied());
    let points = points
        .iter()
        .map(|p| {
            let nn = grid.knn(p, cfg.knn);
            let mean = nn.iter().map(|&(i, _)| grid.point(i)).sum::<Vector3<f64>>() / nn.len() as f64;
            let mut cov = Matrix3::zeros();
            for &(i, _) in &nn {
                let d = grid.point(i) - mean;
                cov += d * d.transpose();
            }
            cov /= nn.len() as f64;
            CloudPoint {
                position: *p,
                covariance: plane_regularize(&cov, cfg.plane_variance, cfg.normal_ratio),
            }
        })
        .collect();
    Ok(TrackedCloud { points })
}

/// Registration target: gaussian means in a hash grid plus their covariances.
#[derive(Debug, Clone)]
pub struct TrackingTarget {
    grid: SpatialGrid,
    covariances: Vec<Matrix3<f64>>,
}

impl TrackingTarget {
    pub fn new(cell: f64) -> Self {
        Self {
            grid: SpatialGrid::new(cell),
            covariances: Vec::new(),
        }
    }

    pub fn from_points(cell: f64, points: &[Vector3<f64>], covariances: &[Matrix3<f64>]) -> Self {
        let mut t = Self::new(cell);
        for (p, c) in points.iter().zip(covariances) {
            t.grid.insert(*p);
            t.covariances.push(*c);
        }
        t
    }

    pub fn from_map(cell: f64, map: &GaussianMap) -> Result<Self> {
        let mut t = Self::new(cell);
        t.sync(map)?;
        Ok(t)
    }

    /// Indexes gaussians appended to `map` since the last call. The sparse map
    /// is append-only, so existing entries never need revisiting.
    pub fn sync(&mut self, map: &GaussianMap) -> Result<()> {
        if map.len() < self.len() {
            return Err(Error::invalid("tracking target is ahead of its map"));
        }
        for g in &map.gaussians[self.len()..] {
            self.grid.insert(g.mu);
            self.covariances.push(g.covariance()?.0);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GicpConfig {
    pub max_corr_dist: f64,
    pub max_iterations: usize,
    /// Stop once the tangent step norm falls below this.
    pub step_tolerance: f64,
    pub max_halvings: usize,
    pub min_correspondences: usize,
}

impl Default for GicpConfig {
    fn default() -> Self {
        Self {
            max_corr_dist: 0.3,
            max_iterations: 30,
            step_tolerance: 1e-6,
            max_halvings: 8,
            min_correspondences: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackResult {
    pub pose: Pose,
    pub iterations: usize,
    /// Sum of Mahalanobis residuals over the final correspondences.
    pub final_cost: f64,
    pub converged: bool,
    pub inlier_fraction: f64,
}

impl TrackResult {
    /// One log line: iterations, cost, inliers and the pose as TUM fields.
    pub fn log_line(&self, frame_index: usize) -> String {
        format!(
            "frame {frame_index} iters {} cost {:.6e} inliers {:.4} pose {}",
            self.iterations,
            self.final_cost,
            self.inlier_fraction,
            pose_fields(&self.pose)
        )
    }
}

/// `tx ty tz qx qy qz qw`.
pub fn pose_fields(p: &Pose) -> String {
    let q = p.rotation.quaternion();
    format!(
        "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
        p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w
    )
}

#[inline]
fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left update `exp(δ)·T` with δ = (v, ω).
fn retract(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let v = delta.fixed_rows::<3>(0).into_owned();
    let w = delta.fixed_rows::<3>(3).into_owned();
    let dr = UnitQuaternion::from_scaled_axis(w);
    let mut rotation = dr * pose.rotation;
    rotation.renormalize();
    Pose::new(rotation, dr * pose.translation + v)
}

struct Pair {
    source: usize,
    target: usize,
}

fn pair_cost(
    source: &TrackedCloud,
    target: &TrackingTarget,
    pairs: &[Pair],
    pose: &Pose,
) -> Result<f64> {
    let r = pose.rotation_matrix();
    let mut cost = 0.0;
    for pair in pairs {
        let sp = &source.points[pair.source];
        let tp = pose.transform_point(&sp.position);
        let d = target.grid.point(pair.target) - tp;
        let c = target.covariances[pair.target] + r * sp.covariance * r.transpose();
        let info = c
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular combined covariance".into()))?;
        cost += d.dot(&(info * d));
    }
    Ok(cost)
}

/// Aligns `source` (camera frame) to `target` (world), starting at `initial`.
pub fn gicp_align(
    source: &TrackedCloud,
    target: &TrackingTarget,
    initial: &Pose,
    cfg: &GicpConfig,
) -> Result<TrackResult> {
    if source.is_empty() {
        return Err(Error::invalid("empty source cloud"));
    }
    if target.len() < cfg.min_correspondences {
        return Err(Error::InsufficientData(format!(
            "target has {} points, need at least {}",
            target.len(),
            cfg.min_correspondences
        )));
    }
    let mut pose = *initial;
    let mut iterations = 0;
    let mut converged = false;
    let mut cost = f64::INFINITY;
    let mut inliers = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let pairs: Vec<Pair> = source
            .points
            .iter()
            .enumerate()
            .filter_map(|(i, sp)| {
                let tp = pose.transform_point(&sp.position);
                target
                    .grid
                    .nearest_within(&tp, cfg.max_corr_dist)
                    .map(|(j, _)| Pair { source: i, target: j })
            })
            .collect();
        inliers = pairs.len();
        if pairs.len() < cfg.min_correspondences {
            return Err(Error::Divergence {
                reason: format!("only {} correspondences", pairs.len()),
                last_pose: pose,
            });
        }

        let r = pose.rotation_matrix();
        let mut h = Matrix6::<f64>::zeros();
        let mut b = Vector6::<f64>::zeros();
        cost = 0.0;
        for pair in &pairs {
            let sp = &source.points[pair.source];
            let tp = pose.transform_point(&sp.position);
            let d = target.grid.point(pair.target) - tp;
            let c = target.covariances[pair.target] + r * sp.covariance * r.transpose();
            let info = c
                .try_inverse()
                .ok_or_else(|| Error::Numerical("singular combined covariance".into()))?;
            // ∂d/∂(v, ω) = [−I, [Tp]×]
            let mut j = nalgebra::Matrix3x6::<f64>::zeros();
            j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-Matrix3::identity()));
            j.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&tp));
            let jt_info = j.transpose() * info;
            h += jt_info * j;
            b += jt_info * d;
            cost += d.dot(&(info * d));
        }
        if !cost.is_finite() {
            return Err(Error::Numerical("non-finite registration cost".into()));
        }
        let Some(step) = h.cholesky().map(|c| -c.solve(&b)) else {
            return Err(Error::Numerical("degenerate registration system".into()));
        };

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let delta = step * scale;
            let candidate = retract(&pose, &delta);
            let c = pair_cost(source, target, &pairs, &candidate)?;
            if c <= cost {
                accepted = Some((candidate, c, delta.norm()));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((candidate, c, norm)) => {
                pose = candidate;
                cost = c;
                if norm < cfg.step_tolerance {
                    converged = true;
                    break;
                }
            }
            None => {
                // No descent along the step: already at the minimum for these pairs.
                converged = step.norm() < cfg.step_tolerance.sqrt();
                break;
            }
        }
    }

    Ok(TrackResult {
        pose,
        iterations,
        final_cost: cost.max(0.0),
        converged,
        inlier_fraction: inliers as f64 / source.len() as f64,
    })
}

/// Turns cloud points whose pixel falls inside `M_m` into sparse gaussians.
pub fn update_sparse_map(
    map: &mut GaussianMap,
    cloud: &TrackedCloud,
    pose: &Pose,
    missing: &MissingMasks,
    frame: &RgbdFrame,
    initial_opacity: f64,
) -> usize {
    let intr = &frame.intrinsics;
    let r = pose.rotation_matrix();
    let mut added = 0;
    for cp in &cloud.points {
        if cp.position.z <= 0.0 {
            continue;
        }
        let (u, v) = intr.project(&cp.position);
        let Some((x, y)) = intr.pixel_of(u, v) else {
            continue;
        };
        if !*missing.combined.get(x, y) {
            continue;
        }
        let world_cov = crate::model::Covariance3(r * cp.covariance * r.transpose());
        let (scale, rotation) = world_cov.to_scale_rotation(MIN_VARIANCE);
        let c = frame.color.get(x, y);
        map.push(Gaussian {
            mu: pose.transform_point(&cp.position),
            scale,
            rotation,
            opacity: initial_opacity,
            color: Vector3::new(c[0], c[1], c[2]).map(|v| v.clamp(0.0, 1.0)),
            frequency_class: FrequencyClass::Low,
        });
        added += 1;
    }
    added
}

/// Fraction of cloud points (placed by `pose`) with an indexed point within `dist`.
pub fn overlap_ratio(cloud: &TrackedCloud, pose: &Pose, index: &SpatialGrid, dist: f64) -> f64 {
    if cloud.is_empty() {
        return 0.0;
    }
    let hits = cloud
        .positions()
        .filter(|p| index.any_within(&pose.transform_point(p), dist))
        .count();
    hits as f64 / cloud.len() as f64
}
