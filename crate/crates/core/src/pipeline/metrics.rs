//! Trajectory and image quality metrics.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::image::ColorImage;
use crate::model::Pose;

/// Value reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
/// Default timestamp tolerance when pairing trajectories, seconds.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;

/// A timestamped pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stamped {
    pub timestamp: f64,
    pub pose: Pose,
}

/// Pairs each estimate with the nearest-in-time truth entry within `tol`.
pub fn associate(estimate: &[Stamped], truth: &[Stamped], tol: f64) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let mut sorted: Vec<&Stamped> = truth.iter().collect();
    sorted.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let mut pairs = Vec::new();
    for e in estimate {
        let i = sorted.partition_point(|t| t.timestamp < e.timestamp);
        let best = [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter_map(|j| sorted.get(j))
            .min_by(|a, b| {
                (a.timestamp - e.timestamp)
                    .abs()
                    .total_cmp(&(b.timestamp - e.timestamp).abs())
            });
        if let Some(t) = best {
            if (t.timestamp - e.timestamp).abs() <= tol {
                pairs.push((e.pose.translation, t.pose.translation));
            }
        }
    }
    pairs
}

/// Rotation and translation taking `from` onto `to` in the least-squares sense.
pub fn umeyama_rigid(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = from.len() as f64;
    let mf = from.iter().sum::<Vector3<f64>>() / n;
    let mt = to.iter().sum::<Vector3<f64>>() / n;
    let mut cross = Matrix3::zeros();
    for (f, t) in from.iter().zip(to) {
        cross += (t - mt) * (f - mf).transpose();
    }
    let svd = cross.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    (r, mt - r * mf)
}

/// RMSE of translational residuals after rigid alignment of the estimate.
pub fn ate_rmse(estimate: &[Stamped], truth: &[Stamped]) -> Result<f64> {
    ate_rmse_with_tolerance(estimate, truth, ASSOCIATION_TOLERANCE)
}

pub fn ate_rmse_with_tolerance(estimate: &[Stamped], truth: &[Stamped], tol: f64) -> Result<f64> {
    let pairs = associate(estimate, truth, tol);
    if pairs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} associated pose pairs, need at least 2",
            pairs.len()
        )));
    }
    let (est, gt): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let (r, t) = umeyama_rigid(&est, &gt);
    let sum: f64 = est.iter().zip(&gt).map(|(e, g)| (r * e + t - g).norm_squared()).sum();
    Ok((sum / est.len() as f64).sqrt())
}

/// 10·log₁₀(1/MSE) over all pixels and channels, capped for identical inputs.
pub fn psnr(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    a.check_same_dims(b)?;
    if a.is_empty() {
        return Err(Error::invalid("PSNR of an empty image"));
    }
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (0..3).map(|c| (x[c] - y[c]).powi(2)).sum::<f64>())
        .sum();
    let mse = sum / (3 * a.len()) as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}
