//! Mapping objective: L1 colour and depth, SSIM, and the scale regularizer,
//! each with its gradient.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::image::{ColorImage, GrayImage, Image};
use crate::model::RgbdFrame;
use crate::render::{RenderAdjoint, RenderOutput};

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute deviation of the first two scales from their batch mean plus
/// mean distance of the third scale from `epsilon`.
pub fn regularization_loss(scales: &[Vector3<f64>], epsilon: f64) -> Result<f64> {
    if scales.is_empty() {
        return Err(Error::invalid("regularization needs at least one gaussian"));
    }
    let n = scales.len() as f64;
    let mean = scales.iter().map(|s| s.x + s.y).sum::<f64>() / (2.0 * n);
    let tangential: f64 = scales.iter().map(|s| (s.x - mean).abs() + (s.y - mean).abs()).sum();
    let normal: f64 = scales.iter().map(|s| (s.z - epsilon).abs()).sum();
    Ok((tangential + normal) / n)
}

/// Gradient of [`regularization_loss`] w.r.t. every scale entry.
pub fn regularization_grad(scales: &[Vector3<f64>], epsilon: f64) -> Vec<Vector3<f64>> {
    if scales.is_empty() {
        return Vec::new();
    }
    let n = scales.len() as f64;
    let mean = scales.iter().map(|s| s.x + s.y).sum::<f64>() / (2.0 * n);
    // every entry also moves the batch mean
    let through_mean: f64 =
        scales.iter().map(|s| sign(s.x - mean) + sign(s.y - mean)).sum::<f64>() / (2.0 * n);
    scales
        .iter()
        .map(|s| {
            Vector3::new(
                (sign(s.x - mean) - through_mean) / n,
                (sign(s.y - mean) - through_mean) / n,
                sign(s.z - epsilon) / n,
            )
        })
        .collect()
}

fn gaussian_taps(len: usize) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..len)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Window length along an axis: 11, or the largest odd size that fits.
fn window_len(n: usize) -> usize {
    if n >= SSIM_WINDOW {
        SSIM_WINDOW
    } else if n % 2 == 1 {
        n
    } else {
        n - 1
    }
}

/// Separable "valid" correlation: output is (w−kx+1)×(h−ky+1).
fn filter_valid(src: &[f64], w: usize, h: usize, kx: &[f64], ky: &[f64]) -> (Vec<f64>, usize, usize) {
    let ow = w - kx.len() + 1;
    let oh = h - ky.len() + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = kx.iter().zip(&line[x..]).map(|(k, v)| k * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for (j, k) in ky.iter().enumerate() {
            let row = &rows[(y + j) * ow..(y + j + 1) * ow];
            for x in 0..ow {
                out[y * ow + x] += k * row[x];
            }
        }
    }
    (out, ow, oh)
}

/// Transpose of [`filter_valid`]: scatters a valid-size map back to w×h.
fn filter_full(src: &[f64], ow: usize, oh: usize, kx: &[f64], ky: &[f64]) -> Vec<f64> {
    let w = ow + kx.len() - 1;
    let h = oh + ky.len() - 1;
    let mut cols = vec![0.0; ow * h];
    for y in 0..oh {
        for (j, k) in ky.iter().enumerate() {
            for x in 0..ow {
                cols[(y + j) * ow + x] += k * src[y * ow + x];
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = cols[y * ow + x];
            if v != 0.0 {
                for (i, k) in kx.iter().enumerate() {
                    out[y * w + x + i] += k * v;
                }
            }
        }
    }
    out
}

/// SSIM of one channel and, optionally, its gradient w.r.t. `a`.
fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let kx = gaussian_taps(window_len(w));
    let ky = gaussian_taps(window_len(h));
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (mu_a, ow, oh) = filter_valid(a, w, h, &kx, &ky);
    let (mu_b, _, _) = filter_valid(b, w, h, &kx, &ky);
    let (e_aa, _, _) = filter_valid(&aa, w, h, &kx, &ky);
    let (e_bb, _, _) = filter_valid(&bb, w, h, &kx, &ky);
    let (e_ab, _, _) = filter_valid(&ab, w, h, &kx, &ky);

    let count = (ow * oh) as f64;
    let mut total = 0.0;
    let mut d_mu = vec![0.0; ow * oh];
    let mut d_aa = vec![0.0; ow * oh];
    let mut d_ab = vec![0.0; ow * oh];
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let a1 = 2.0 * ma * mb + SSIM_C1;
        let a2 = 2.0 * cov + SSIM_C2;
        let b1 = ma * ma + mb * mb + SSIM_C1;
        let b2 = var_a + var_b + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            // S as a function of the raw moments μa, E[a²], E[ab]
            let inv = 1.0 / (b1 * b2);
            d_mu[i] = (2.0 * mb * a2 * inv - 2.0 * ma * s / b1 - 2.0 * mb * a1 * inv
                + 2.0 * ma * s / b2)
                / count;
            d_aa[i] = -s / b2 / count;
            d_ab[i] = 2.0 * a1 * inv / count;
        }
    }
    let value = total / count;
    if !want_grad {
        return (value, None);
    }
    let g_mu = filter_full(&d_mu, ow, oh, &kx, &ky);
    let g_aa = filter_full(&d_aa, ow, oh, &kx, &ky);
    let g_ab = filter_full(&d_ab, ow, oh, &kx, &ky);
    let grad = (0..w * h)
        .map(|p| g_mu[p] + 2.0 * a[p] * g_aa[p] + b[p] * g_ab[p])
        .collect();
    (value, Some(grad))
}

fn channel(img: &ColorImage, c: usize) -> Vec<f64> {
    img.as_slice().iter().map(|p| p[c]).collect()
}

/// Single-scale SSIM averaged over channels and valid 11×11 windows
/// (σ 1.5, k1 0.01, k2 0.03, unit dynamic range).
pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    a.check_same_dims(b)?;
    if a.is_empty() {
        return Err(Error::invalid("SSIM of an empty image"));
    }
    let (w, h) = a.dims();
    let sum: f64 = (0..3)
        .map(|c| ssim_channel(&channel(a, c), &channel(b, c), w, h, false).0)
        .sum();
    Ok(sum / 3.0)
}

/// SSIM of two grayscale images.
pub fn ssim_gray(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    a.check_same_dims(b)?;
    if a.is_empty() {
        return Err(Error::invalid("SSIM of an empty image"));
    }
    let (w, h) = a.dims();
    Ok(ssim_channel(a.as_slice(), b.as_slice(), w, h, false).0)
}

/// SSIM and its gradient w.r.t. every pixel of `a`.
pub fn ssim_with_grad(a: &ColorImage, b: &ColorImage) -> Result<(f64, ColorImage)> {
    a.check_same_dims(b)?;
    if a.is_empty() {
        return Err(Error::invalid("SSIM of an empty image"));
    }
    let (w, h) = a.dims();
    let mut grad = Image::filled(w, h, [0.0; 3]);
    let mut sum = 0.0;
    for c in 0..3 {
        let (v, g) = ssim_channel(&channel(a, c), &channel(b, c), w, h, true);
        sum += v;
        for (dst, g) in grad.as_mut_slice().iter_mut().zip(g.expect("gradient requested")) {
            dst[c] = g / 3.0;
        }
    }
    Ok((sum / 3.0, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Colour L1 weight; SSIM gets `1 − lambda_color`.
    pub lambda_color: f64,
    pub lambda_depth: f64,
    pub lambda_reg: f64,
    /// Target normal-direction scale of the regularizer, meters.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_color: 0.8,
            lambda_depth: 0.5,
            lambda_reg: 0.01,
            epsilon: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let unit = [self.lambda_color, self.lambda_depth, self.lambda_reg];
        if unit.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Config("loss weights must lie in [0, 1]".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("regularizer epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Unweighted terms and weighted total of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub color: f64,
    pub depth: f64,
    /// `1 − ssim`.
    pub ssim: f64,
    pub reg: f64,
}

/// Loss value, the adjoint images for the renderer and the regularizer
/// gradient for `scales`.
#[derive(Debug, Clone)]
pub struct MappingLoss {
    pub breakdown: LossBreakdown,
    pub adjoint: RenderAdjoint,
    pub scale_grad: Vec<Vector3<f64>>,
}

pub fn mapping_loss(
    render: &RenderOutput,
    frame: &RgbdFrame,
    scales: &[Vector3<f64>],
    weights: &LossWeights,
) -> Result<MappingLoss> {
    render.color.check_same_dims(&frame.color)?;
    let (w, h) = frame.color.dims();
    let n = (w * h) as f64;
    let mut adjoint = RenderAdjoint::zeros(w, h);

    let mut color = 0.0;
    for ((r, o), g) in render
        .color
        .as_slice()
        .iter()
        .zip(frame.color.as_slice())
        .zip(adjoint.color.as_mut_slice())
    {
        for c in 0..3 {
            let d = r[c] - o[c];
            color += d.abs();
            g[c] = weights.lambda_color * sign(d) / (3.0 * n);
        }
    }
    color /= 3.0 * n;

    let valid = frame.depth.as_slice().iter().filter(|&&d| d > 0.0).count();
    let mut depth = 0.0;
    if valid > 0 {
        let nv = valid as f64;
        for ((r, o), g) in render
            .depth
            .as_slice()
            .iter()
            .zip(frame.depth.as_slice())
            .zip(adjoint.depth.as_mut_slice())
        {
            if *o > 0.0 {
                let d = r - o;
                depth += d.abs();
                *g = weights.lambda_depth * sign(d) / nv;
            }
        }
        depth /= nv;
    }

    let ssim_weight = 1.0 - weights.lambda_color;
    let (s, s_grad) = ssim_with_grad(&render.color, &frame.color)?;
    if ssim_weight != 0.0 {
        for (g, sg) in adjoint.color.as_mut_slice().iter_mut().zip(s_grad.as_slice()) {
            for c in 0..3 {
                g[c] -= ssim_weight * sg[c];
            }
        }
    }

    let (reg, scale_grad) = if scales.is_empty() {
        (0.0, Vec::new())
    } else {
        let g = regularization_grad(scales, weights.epsilon)
            .into_iter()
            .map(|v| v * weights.lambda_reg)
            .collect();
        (regularization_loss(scales, weights.epsilon)?, g)
    };

    let total = weights.lambda_color * color
        + weights.lambda_depth * depth
        + ssim_weight * (1.0 - s)
        + weights.lambda_reg * reg;
    Ok(MappingLoss {
        breakdown: LossBreakdown {
            total,
            color,
            depth,
            ssim: 1.0 - s,
            reg,
        },
        adjoint,
        scale_grad,
    })
}
