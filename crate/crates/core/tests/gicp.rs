use fgs_core::gicp::{cloud_from_points, gicp_align, overlap_ratio, CloudConfig, GicpConfig, TrackingTarget};
use fgs_core::model::Pose;
use fgs_core::spatial::SpatialGrid;
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

mod common;
use common::plane_corner_points;

fn random_pose(rng: &mut impl Rng, max_deg: f64, max_t: f64) -> Pose {
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        .normalize();
    let angle = rng.gen_range(0.0..max_deg).to_radians();
    let t = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        .normalize()
        * rng.gen_range(0.0..max_t);
    Pose::new(UnitQuaternion::from_scaled_axis(axis * angle), t)
}

#[test]
fn isotropic_covariances_reach_the_point_to_point_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let noise = Normal::new(0.0, 0.002).unwrap();
    let src_pts = plane_corner_points(&mut rng, 800);
    let truth = random_pose(&mut rng, 5.0, 0.05);
    let tgt_pts: Vec<Vector3<f64>> = src_pts
        .iter()
        .map(|p| truth.transform_point(p) + Vector3::from_fn(|_, _| noise.sample(&mut rng)))
        .collect();

    let mut source = cloud_from_points(&src_pts, &CloudConfig::default()).unwrap();
    for p in &mut source.points {
        p.covariance = Matrix3::identity() * 1e-4;
    }
    let target = TrackingTarget::from_points(0.3, &tgt_pts, &vec![Matrix3::identity() * 1e-4; tgt_pts.len()]);
    let cfg = GicpConfig {
        max_iterations: 100,
        step_tolerance: 1e-12,
        ..Default::default()
    };
    let r = gicp_align(&source, &target, &Pose::identity(), &cfg).unwrap();

    // Closed-form point-to-point solution on the final correspondences.
    let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = src_pts
        .iter()
        .filter_map(|p| {
            target
                .grid()
                .nearest_within(&r.pose.transform_point(p), cfg.max_corr_dist)
                .map(|(j, _)| (*p, *target.grid().point(j)))
        })
        .collect();
    let n = pairs.len() as f64;
    let ps = pairs.iter().map(|(p, _)| p).sum::<Vector3<f64>>() / n;
    let qs = pairs.iter().map(|(_, q)| q).sum::<Vector3<f64>>() / n;
    let mut cross = Matrix3::zeros();
    for (p, q) in &pairs {
        cross += (q - qs) * (p - ps).transpose();
    }
    let svd = cross.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = u * d * vt;
    let trans = qs - rot * ps;
    let kabsch = Pose::new(UnitQuaternion::from_matrix(&rot), trans);

    assert!(r.pose.rotation_angle_to(&kabsch) < 1e-6);
    assert!((r.pose.translation - kabsch.translation).norm() < 1e-6);
}

#[test]
fn objective_never_increases_across_iterations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let src_pts = plane_corner_points(&mut rng, 1000);
    let truth = random_pose(&mut rng, 5.0, 0.05);
    let tgt_pts: Vec<Vector3<f64>> = src_pts.iter().map(|p| truth.transform_point(p)).collect();
    let cfg = CloudConfig::default();
    let source = cloud_from_points(&src_pts, &cfg).unwrap();
    let tcloud = cloud_from_points(&tgt_pts, &cfg).unwrap();
    let covs: Vec<Matrix3<f64>> = tcloud.points.iter().map(|p| p.covariance).collect();
    let target = TrackingTarget::from_points(0.3, &tgt_pts, &covs);
    let mut pose = Pose::identity();
    let mut last = f64::INFINITY;
    // One iteration at a time: the cost at each restart may only fall.
    for _ in 0..15 {
        let r = gicp_align(
            &source,
            &target,
            &pose,
            &GicpConfig {
                max_iterations: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.final_cost <= last * (1.0 + 1e-9) + 1e-12, "{} > {last}", r.final_cost);
        last = r.final_cost;
        pose = r.pose;
    }
}

#[test]
fn half_overlap_matches_exhaustive_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pts: Vec<Vector3<f64>> = (0..2000)
        .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 2.0))
        .collect();
    let cloud = cloud_from_points(&pts, &CloudConfig::default()).unwrap();
    let map: Vec<Vector3<f64>> = pts.iter().filter(|p| p.x < -0.05).copied().collect();
    let grid = SpatialGrid::from_points(0.3, map.iter().copied());
    let dist = 0.05;
    let ratio = overlap_ratio(&cloud, &Pose::identity(), &grid, dist);
    let brute = pts
        .iter()
        .filter(|p| map.iter().any(|q| (*p - q).norm() <= dist))
        .count() as f64
        / pts.len() as f64;
    assert!((ratio - brute).abs() < 1e-12);
    assert!((ratio - 0.5).abs() <= 0.02, "ratio {ratio}");
}

#[test]
fn overlap_is_monotone_in_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pts = plane_corner_points(&mut rng, 500);
    let cloud = cloud_from_points(&pts, &CloudConfig::default()).unwrap();
    let shifted = Pose::from_translation(Vector3::new(0.07, 0.02, 0.0));
    let grid = SpatialGrid::from_points(0.3, pts.iter().copied());
    let mut last = 0.0;
    for i in 0..30 {
        let r = overlap_ratio(&cloud, &shifted, &grid, i as f64 * 0.01);
        assert!(r >= last);
        last = r;
    }
    assert_eq!(last, 1.0);
}
