//! EWA projection of 3D gaussians into pinhole image space, and its adjoint.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};

use crate::model::{CameraIntrinsics, Gaussian, Pose};

use super::RenderConfig;

/// A gaussian after projection into one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    /// Screen-space covariance including the low-pass floor, pixels².
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    /// Camera-frame z, meters.
    pub depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub source_index: usize,
}

/// Camera-dependent quantities reused by every gaussian in one pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct View {
    pub world_to_cam_r: Matrix3<f64>,
    pub world_to_cam_t: Vector3<f64>,
    pub intr: CameraIntrinsics,
}

impl View {
    pub fn new(camera_pose: &Pose, intr: &CameraIntrinsics) -> Self {
        let inv = camera_pose.inverse();
        Self {
            world_to_cam_r: inv.rotation_matrix(),
            world_to_cam_t: inv.translation,
            intr: *intr,
        }
    }
}

/// Rotation matrix of q/|q| for q = (w, x, y, z).
pub(crate) fn quat_to_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let q = q / q.norm();
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// d(loss)/dq for q = (w, x, y, z), given d(loss)/dR where R = R(q/|q|).
pub(crate) fn quat_matrix_adjoint(q: &Vector4<f64>, d_r: &Matrix3<f64>) -> Vector4<f64> {
    let norm = q.norm();
    let qn = q / norm;
    let (w, x, y, z) = (qn[0], qn[1], qn[2], qn[3]);
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    let g_unit = Vector4::new(
        d_r.component_mul(&dw).sum(),
        d_r.component_mul(&dx).sum(),
        d_r.component_mul(&dy).sum(),
        d_r.component_mul(&dz).sum(),
    );
    // through the normalization q -> q/|q|
    (g_unit - qn * qn.dot(&g_unit)) / norm
}

#[inline]
pub(crate) fn quat_coords(g: &Gaussian) -> Vector4<f64> {
    let q = g.rotation.quaternion();
    Vector4::new(q.w, q.i, q.j, q.k)
}

#[inline]
fn pinhole_jacobian(p: &Vector3<f64>, intr: &CameraIntrinsics) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    Matrix2x3::new(
        intr.fx * iz,
        0.0,
        -intr.fx * p.x * iz * iz,
        0.0,
        intr.fy * iz,
        -intr.fy * p.y * iz * iz,
    )
}

pub(crate) fn project_with_view(
    g: &Gaussian,
    source_index: usize,
    view: &View,
    cfg: &RenderConfig,
) -> Option<ProjectedGaussian> {
    let p = view.world_to_cam_r * g.mu + view.world_to_cam_t;
    if !(p.z > cfg.near_plane) {
        return None;
    }
    let intr = &view.intr;
    let (u, v) = intr.project(&p);
    let (w, h) = (intr.width as f64, intr.height as f64);
    let margin = cfg.cull_margin * w.hypot(h);
    if u < -margin || v < -margin || u > w - 1.0 + margin || v > h - 1.0 + margin {
        return None;
    }
    let r = quat_to_matrix(&quat_coords(g));
    let s2 = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
    let cov3 = r * s2 * r.transpose();
    let m = pinhole_jacobian(&p, intr) * view.world_to_cam_r;
    let mut cov2d = m * cov3 * m.transpose();
    cov2d = (cov2d + cov2d.transpose()) * 0.5 + Matrix2::identity() * cfg.screen_blur;
    let conic = cov2d.try_inverse()?;
    Some(ProjectedGaussian {
        mean2d: Vector2::new(u, v),
        cov2d,
        conic,
        depth: p.z,
        opacity: g.opacity,
        color: g.color,
        source_index,
    })
}

/// Projects one gaussian; `None` when it is culled.
pub fn project_gaussian(
    g: &Gaussian,
    camera_pose: &Pose,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> Option<ProjectedGaussian> {
    project_with_view(g, 0, &View::new(camera_pose, intr), cfg)
}

/// Screen-space adjoints accumulated by the rasterizer for one gaussian.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct ScreenGrad {
    pub mean2d: Vector2<f64>,
    /// Full (symmetric) gradient w.r.t. the conic matrix.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl std::ops::AddAssign for ScreenGrad {
    fn add_assign(&mut self, o: Self) {
        self.mean2d += o.mean2d;
        self.conic += o.conic;
        self.depth += o.depth;
        self.opacity += o.opacity;
        self.color += o.color;
    }
}

/// Gradients of a loss w.r.t. one gaussian's attributes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GaussianGrad {
    pub mu: Vector3<f64>,
    pub scale: Vector3<f64>,
    /// Ordered (w, x, y, z).
    pub rotation: Vector4<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl GaussianGrad {
    pub fn is_zero(&self) -> bool {
        self.mu == Vector3::zeros()
            && self.scale == Vector3::zeros()
            && self.rotation == Vector4::zeros()
            && self.opacity == 0.0
            && self.color == Vector3::zeros()
    }
}

/// Chains screen-space adjoints back to the 3D attributes.
pub(crate) fn project_backward(
    g: &Gaussian,
    proj: &ProjectedGaussian,
    sg: &ScreenGrad,
    view: &View,
) -> GaussianGrad {
    let intr = &view.intr;
    let w_rot = view.world_to_cam_r;
    let p = w_rot * g.mu + view.world_to_cam_t;
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;

    // conic = cov2d⁻¹  =>  dL/dcov2d = −conic · G · conic
    let g_conic = (sg.conic + sg.conic.transpose()) * 0.5;
    let g_cov2d = -(proj.conic * g_conic * proj.conic);

    let q = quat_coords(g);
    let r = quat_to_matrix(&q);
    let s2 = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
    let cov3 = r * s2 * r.transpose();
    let jac = pinhole_jacobian(&p, intr);
    let m = jac * w_rot;

    // cov2d = M C Mᵀ
    let g_cov3 = m.transpose() * g_cov2d * m;
    let g_m = 2.0 * g_cov2d * m * cov3;
    let g_j = g_m * w_rot.transpose();

    // J(p) entries: (0,0)=fx/z, (0,2)=−fx x/z², (1,1)=fy/z, (1,2)=−fy y/z²
    let (fx, fy) = (intr.fx, intr.fy);
    let mut g_p = Vector3::new(
        -fx * iz2 * g_j[(0, 2)],
        -fy * iz2 * g_j[(1, 2)],
        -fx * iz2 * g_j[(0, 0)] + 2.0 * fx * p.x * iz3 * g_j[(0, 2)] - fy * iz2 * g_j[(1, 1)]
            + 2.0 * fy * p.y * iz3 * g_j[(1, 2)],
    );
    // mean2d = (fx x/z + cx, fy y/z + cy)
    g_p.x += sg.mean2d.x * fx * iz;
    g_p.y += sg.mean2d.y * fy * iz;
    g_p.z += -sg.mean2d.x * fx * p.x * iz2 - sg.mean2d.y * fy * p.y * iz2;
    g_p.z += sg.depth;

    let g_mu = w_rot.transpose() * g_p;

    // C = R S² Rᵀ
    let g_cov3 = (g_cov3 + g_cov3.transpose()) * 0.5;
    let rtgr = r.transpose() * g_cov3 * r;
    let g_scale = Vector3::new(
        2.0 * g.scale.x * rtgr[(0, 0)],
        2.0 * g.scale.y * rtgr[(1, 1)],
        2.0 * g.scale.z * rtgr[(2, 2)],
    );
    let g_r = 2.0 * g_cov3 * r * s2;
    let g_q = quat_matrix_adjoint(&q, &g_r);

    GaussianGrad {
        mu: g_mu,
        scale: g_scale,
        rotation: g_q,
        opacity: sg.opacity,
        color: sg.color,
    }
}
