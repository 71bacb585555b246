//! Helpers shared by the integration tests: an untiled reference renderer
//! and random scene generators.
#![allow(dead_code)]

use fgs_core::image::{ColorImage, GrayImage, Image};
use fgs_core::model::{CameraIntrinsics, FrequencyClass, Gaussian, Pose};
use fgs_core::render::RenderConfig;
use nalgebra::{Matrix2, Matrix2x3, Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::Rng;

pub struct Reference {
    pub color: ColorImage,
    pub depth: GrayImage,
    pub opacity: GrayImage,
}

struct Splat {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    depth: f64,
    opacity: f64,
    color: Vector3<f64>,
    index: usize,
}

/// Evaluates every gaussian at every pixel, front to back, with no tiles and
/// no bounding boxes. Uses the same alpha clamp, significance cut and
/// transmittance stop as the production renderer.
pub fn reference_render(
    gaussians: &[Gaussian],
    pose: &Pose,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> Reference {
    let world_to_cam = pose.inverse();
    let w = world_to_cam.rotation.to_rotation_matrix().into_inner();
    let diag = (intr.width as f64).hypot(intr.height as f64) * cfg.cull_margin;
    let mut splats: Vec<Splat> = Vec::new();
    for (index, g) in gaussians.iter().enumerate() {
        let p = world_to_cam.rotation * g.mu + world_to_cam.translation;
        if p.z <= cfg.near_plane {
            continue;
        }
        let u = intr.fx * p.x / p.z + intr.cx;
        let v = intr.fy * p.y / p.z + intr.cy;
        if u < -diag || v < -diag || u > intr.width as f64 - 1.0 + diag || v > intr.height as f64 - 1.0 + diag {
            continue;
        }
        let r = g.rotation.to_rotation_matrix().into_inner();
        let s = Matrix3::from_diagonal(&g.scale);
        let cov = r * s * s.transpose() * r.transpose();
        let j = Matrix2x3::new(
            intr.fx / p.z,
            0.0,
            -intr.fx * p.x / (p.z * p.z),
            0.0,
            intr.fy / p.z,
            -intr.fy * p.y / (p.z * p.z),
        );
        let cov2 = j * w * cov * w.transpose() * j.transpose() + Matrix2::identity() * cfg.screen_blur;
        splats.push(Splat {
            mean: Vector2::new(u, v),
            conic: cov2.try_inverse().unwrap(),
            depth: p.z,
            opacity: g.opacity,
            color: g.color,
            index,
        });
    }
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));

    let (width, height) = (intr.width, intr.height);
    let mut color = Image::filled(width, height, [0.0; 3]);
    let mut depth = Image::filled(width, height, 0.0);
    let mut opacity = Image::filled(width, height, 0.0);
    for y in 0..height {
        for x in 0..width {
            let q = Vector2::new(x as f64, y as f64);
            let mut t = 1.0;
            let mut c = Vector3::zeros();
            let mut d = 0.0;
            let mut o = 0.0;
            for s in &splats {
                let delta = q - s.mean;
                let alpha = s.opacity * (-0.5 * delta.dot(&(s.conic * delta))).exp();
                if alpha < cfg.min_alpha || alpha <= 0.0 {
                    continue;
                }
                let alpha = alpha.min(cfg.alpha_clamp);
                c += s.color * alpha * t;
                d += s.depth * alpha * t;
                o += alpha * t;
                t *= 1.0 - alpha;
                if t < cfg.transmittance_stop {
                    break;
                }
            }
            *color.get_mut(x, y) = [c.x, c.y, c.z];
            *depth.get_mut(x, y) = d;
            *opacity.get_mut(x, y) = o;
        }
    }
    Reference {
        color,
        depth,
        opacity,
    }
}

pub fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    let q = nalgebra::Quaternion::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    UnitQuaternion::from_quaternion(q)
}

/// Gaussian somewhere in front of a camera at the origin looking down +z.
pub fn random_gaussian(rng: &mut impl Rng, opacity: std::ops::Range<f64>) -> Gaussian {
    let z = rng.gen_range(1.0..4.0);
    Gaussian {
        mu: Vector3::new(rng.gen_range(-0.6..0.6) * z, rng.gen_range(-0.6..0.6) * z, z),
        scale: Vector3::new(
            rng.gen_range(0.01..0.15),
            rng.gen_range(0.01..0.15),
            rng.gen_range(0.005..0.1),
        ),
        rotation: random_rotation(rng),
        opacity: rng.gen_range(opacity),
        color: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
        frequency_class: if rng.gen_bool(0.5) {
            FrequencyClass::High
        } else {
            FrequencyClass::Low
        },
    }
}

pub fn random_camera(rng: &mut impl Rng) -> Pose {
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    Pose::new(
        UnitQuaternion::from_scaled_axis(axis.normalize() * rng.gen_range(0.0..0.1)),
        Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)),
    )
}

pub fn small_intrinsics(w: usize, h: usize) -> CameraIntrinsics {
    CameraIntrinsics::new(w as f64 * 0.9, h as f64 * 0.9, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h)
        .unwrap()
}

/// Points on three mutually orthogonal unit faces meeting at a corner, placed
/// in front of the origin.
pub fn plane_corner_points(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|i| {
            let a = rng.gen_range(0.0..1.0);
            let b = rng.gen_range(0.0..1.0);
            let p = match i % 3 {
                0 => Vector3::new(a, b, 0.0),
                1 => Vector3::new(a, 0.0, b),
                _ => Vector3::new(0.0, a, b),
            };
            p + Vector3::new(-0.4, -0.4, 1.5)
        })
        .collect()
}
