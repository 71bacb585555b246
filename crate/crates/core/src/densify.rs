//! Where to add gaussians, how big to make them, and which ones to drop.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::frequency::{frequency_masks, sample_grid, FrequencyConfig, FrequencyMasks};
use crate::image::Mask;
use crate::model::{FrequencyClass, Gaussian, GaussianMap, Pose, RgbdFrame};
use crate::render::RenderOutput;

/// Opacity floor used when normalizing the alpha-weighted depth render.
const OPACITY_FLOOR: f64 = 1e-6;

/// Regions the current map fails to explain.
#[derive(Debug, Clone)]
pub struct MissingMasks {
    /// Accumulated opacity too low.
    pub insufficient: Mask,
    /// Observed surface clearly in front of the rendered one.
    pub depth_mismatch: Mask,
    /// Rendered colour off by more than the threshold, outside `insufficient`.
    pub color_mismatch: Mask,
    pub combined: Mask,
}

impl MissingMasks {
    /// Every pixel flagged as missing, as used for the very first frame.
    pub fn full(width: usize, height: usize) -> Self {
        let all = Mask::filled(width, height, true);
        let none = Mask::filled(width, height, false);
        Self {
            insufficient: all.clone(),
            depth_mismatch: none.clone(),
            color_mismatch: none,
            combined: all,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyConfig {
    pub opacity_threshold: f64,
    /// Meters.
    pub depth_diff_threshold: f64,
    /// Mean absolute per-channel difference.
    pub color_diff_threshold: f64,
    /// Radius factor for high-frequency spawns, in pixels of screen footprint.
    pub alpha_h: f64,
    /// Radius factor for low-frequency spawns.
    pub alpha_l: f64,
    /// Initial opacity of spawned gaussians.
    pub initial_opacity: f64,
    /// Ratio of the normal-direction scale to the in-plane radius.
    pub flatten: f64,
    pub prune_scale_max: f64,
    pub prune_opacity_min: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            opacity_threshold: 0.7,
            depth_diff_threshold: 0.1,
            color_diff_threshold: 0.1,
            alpha_h: 1.0,
            alpha_l: 4.0,
            initial_opacity: 0.9,
            flatten: 0.1,
            prune_scale_max: 0.5,
            prune_opacity_min: 0.05,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_h > 0.0 && self.alpha_h < self.alpha_l) {
            return Err(Error::Config(format!(
                "radius factors must satisfy 0 < alpha_h < alpha_l, got {} and {}",
                self.alpha_h, self.alpha_l
            )));
        }
        let positive = [
            self.opacity_threshold,
            self.depth_diff_threshold,
            self.color_diff_threshold,
            self.prune_scale_max,
            self.flatten,
        ];
        if positive.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Config("densification thresholds must be positive".into()));
        }
        if !(self.initial_opacity > 0.0 && self.initial_opacity <= 1.0) {
            return Err(Error::Config("initial opacity must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// How candidate sample points are laid out over a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DensifyMode {
    /// Frequency split: dense small gaussians on detail, sparse large on flat areas.
    #[default]
    Adaptive,
    /// Whole frame treated as high frequency.
    DenseSmall,
    /// Whole frame treated as low frequency.
    SparseLarge,
}

impl std::str::FromStr for DensifyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "dense-small" => Ok(Self::DenseSmall),
            "sparse-large" => Ok(Self::SparseLarge),
            other => Err(Error::Config(format!("unknown densify mode '{other}'"))),
        }
    }
}

/// Frequency masks for the given mode.
pub fn sampling_masks(
    frame: &RgbdFrame,
    mode: DensifyMode,
    cfg: &FrequencyConfig,
) -> Result<FrequencyMasks> {
    let (w, h) = (frame.width(), frame.height());
    match mode {
        DensifyMode::Adaptive => frequency_masks(frame, cfg),
        DensifyMode::DenseSmall => Ok(FrequencyMasks::uniform(
            w,
            h,
            true,
            cfg.high_spacing,
            cfg.low_spacing,
        )),
        DensifyMode::SparseLarge => Ok(FrequencyMasks::uniform(
            w,
            h,
            false,
            cfg.high_spacing,
            cfg.low_spacing,
        )),
    }
}

pub fn missing_masks(
    render: &RenderOutput,
    frame: &RgbdFrame,
    cfg: &DensifyConfig,
) -> Result<MissingMasks> {
    render.color.check_same_dims(&frame.color)?;
    let (w, h) = (frame.width(), frame.height());
    let mut insufficient = Mask::filled(w, h, false);
    let mut depth_mismatch = Mask::filled(w, h, false);
    let mut color_mismatch = Mask::filled(w, h, false);
    let mut combined = Mask::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let opacity = *render.opacity.get(x, y);
            let m_i = opacity < cfg.opacity_threshold;

            let observed = *frame.depth.get(x, y);
            let rendered = *render.depth.get(x, y) / opacity.max(OPACITY_FLOOR);
            let m_d = observed > 0.0 && observed + cfg.depth_diff_threshold < rendered;

            let rc = render.color.get(x, y);
            let oc = frame.color.get(x, y);
            let diff = (0..3).map(|c| (rc[c] - oc[c]).abs()).sum::<f64>() / 3.0;
            let m_c = diff > cfg.color_diff_threshold && !m_i;

            *insufficient.get_mut(x, y) = m_i;
            *depth_mismatch.get_mut(x, y) = m_d;
            *color_mismatch.get_mut(x, y) = m_c;
            *combined.get_mut(x, y) = m_i || m_d || m_c;
        }
    }
    Ok(MissingMasks {
        insufficient,
        depth_mismatch,
        color_mismatch,
        combined,
    })
}

/// Pixel a gaussian was spawned from, with its class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpawnSite {
    pub x: usize,
    pub y: usize,
    pub class: FrequencyClass,
}

/// Spawns new gaussians at lattice pixels of `M_h ∩ M_m` and `M_l ∩ M_m`.
///
/// Each gaussian is a flat disc facing the camera with in-plane radius
/// `α·d/f`, so its screen footprint is `α` pixels regardless of depth.
pub fn spawn_gaussians(
    frame: &RgbdFrame,
    pose: &Pose,
    masks: &FrequencyMasks,
    missing: &MissingMasks,
    cfg: &DensifyConfig,
) -> Result<Vec<Gaussian>> {
    Ok(spawn_with_sites(frame, pose, masks, missing, cfg)?
        .into_iter()
        .map(|(g, _)| g)
        .collect())
}

/// [`spawn_gaussians`] that also reports the source pixel of each spawn.
pub fn spawn_with_sites(
    frame: &RgbdFrame,
    pose: &Pose,
    masks: &FrequencyMasks,
    missing: &MissingMasks,
    cfg: &DensifyConfig,
) -> Result<Vec<(Gaussian, SpawnSite)>> {
    masks.high.check_same_dims(&missing.combined)?;
    masks.high.check_same_dims(&frame.depth)?;
    let effective = FrequencyMasks {
        high: masks.high.and(&missing.combined),
        low: masks.low.and(&missing.combined),
        ..masks.clone()
    };
    let (high, low) = sample_grid(&effective);
    let intr = &frame.intrinsics;
    let f = intr.focal();

    let mut out = Vec::with_capacity(high.len() + low.len());
    let classes = [
        (high, FrequencyClass::High, cfg.alpha_h),
        (low, FrequencyClass::Low, cfg.alpha_l),
    ];
    for (sites, class, alpha) in classes {
        for (x, y) in sites {
            let d = *frame.depth.get(x, y);
            if !(d > 0.0) {
                continue;
            }
            let p_cam = intr.back_project(x as f64, y as f64, d);
            let r = alpha * d / f;
            let c = frame.color.get(x, y);
            let g = Gaussian {
                mu: pose.transform_point(&p_cam),
                scale: Vector3::new(r, r, cfg.flatten * r),
                rotation: pose.rotation,
                opacity: cfg.initial_opacity,
                color: Vector3::new(c[0], c[1], c[2]).map(|v| v.clamp(0.0, 1.0)),
                frequency_class: class,
            };
            out.push((g, SpawnSite { x, y, class }));
        }
    }
    Ok(out)
}

/// Counts removed by each pruning rule, and which indices survived.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PruneReport {
    pub removed_large: usize,
    /// Transparent gaussians that were not already counted as too large.
    pub removed_transparent: usize,
    /// Keep flag of every pre-prune index.
    pub keep: Vec<bool>,
}

impl PruneReport {
    pub fn removed(&self) -> usize {
        self.removed_large + self.removed_transparent
    }
}

pub fn prune_keeps(g: &Gaussian, cfg: &DensifyConfig) -> bool {
    g.scale.max() <= cfg.prune_scale_max && g.opacity >= cfg.prune_opacity_min
}

/// Drops oversized or near-transparent gaussians and compacts the map.
pub fn prune(map: &mut GaussianMap, cfg: &DensifyConfig) -> PruneReport {
    let mut report = PruneReport::default();
    for g in map.iter() {
        if g.scale.max() > cfg.prune_scale_max {
            report.removed_large += 1;
        } else if g.opacity < cfg.prune_opacity_min {
            report.removed_transparent += 1;
        }
    }
    report.keep = map.retain(|g| prune_keeps(g, cfg));
    report
}
