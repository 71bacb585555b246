//! Run configuration: flat `key = value` text, every key also a CLI flag.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::densify::{DensifyConfig, DensifyMode};
use crate::error::{Error, Result};
use crate::frequency::FrequencyConfig;
use crate::gicp::{CloudConfig, GicpConfig};
use crate::optimize::{KeyframeStrategy, SelectionConfig};
use crate::optimize::OptimizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThreadMode {
    /// Tracking and mapping on separate threads.
    #[default]
    Parallel,
    /// Everything on the calling thread; bit-reproducible.
    Single,
}

impl FromStr for ThreadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Self::Parallel),
            "single" => Ok(Self::Single),
            other => Err(Error::Config(format!("unknown thread mode '{other}'"))),
        }
    }
}

impl Display for ThreadMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Parallel => "parallel",
            Self::Single => "single",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetKind {
    #[default]
    Tum,
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tum" => Ok(Self::Tum),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::Config(format!("unknown dataset format '{other}'"))),
        }
    }
}

impl Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Tum => "tum",
            Self::Synthetic => "synthetic",
        })
    }
}

/// Pinhole defaults for TUM sequences, which ship no calibration file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TumCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub depth_scale: f64,
}

impl Default for TumCamera {
    fn default() -> Self {
        Self {
            fx: 517.3,
            fy: 516.5,
            cx: 318.6,
            cy: 255.3,
            depth_scale: 5000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threads: ThreadMode,
    pub dataset: Option<PathBuf>,
    pub format: DatasetKind,
    pub out: Option<PathBuf>,
    pub debug_masks: bool,
    /// Stop after this many frames; 0 means the whole sequence.
    pub max_frames: usize,
    pub frequency: FrequencyConfig,
    pub densify_mode: DensifyMode,
    pub densify: DensifyConfig,
    /// Dense map pruning period, in keyframes.
    pub prune_every: usize,
    pub sparse_initial_opacity: f64,
    pub cloud: CloudConfig,
    pub gicp: GicpConfig,
    /// Below this overlap a frame becomes a tracking keyframe.
    pub overlap_threshold: f64,
    pub overlap_dist: f64,
    /// Frames since the last keyframe that force a mapping-only keyframe.
    pub mapping_keyframe_stride: usize,
    pub selection: SelectionConfig,
    pub iterations: usize,
    pub optimizer: OptimizerConfig,
    pub camera: TumCamera,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: ThreadMode::Parallel,
            dataset: None,
            format: DatasetKind::Tum,
            out: None,
            debug_masks: false,
            max_frames: 0,
            frequency: FrequencyConfig::default(),
            densify_mode: DensifyMode::Adaptive,
            densify: DensifyConfig::default(),
            prune_every: 10,
            sparse_initial_opacity: 0.5,
            cloud: CloudConfig::default(),
            gicp: GicpConfig::default(),
            overlap_threshold: 0.9,
            overlap_dist: 0.1,
            mapping_keyframe_stride: 10,
            selection: SelectionConfig::default(),
            iterations: 3,
            optimizer: OptimizerConfig::default(),
            camera: TumCamera::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad value '{value}' for {key}"))),
    }
}

fn strategy_name(s: KeyframeStrategy) -> &'static str {
    match s {
        KeyframeStrategy::Combined => "combined",
        KeyframeStrategy::CovisibleOnly => "covisible",
        KeyframeStrategy::RandomOnly => "random",
    }
}

fn mode_name(m: DensifyMode) -> &'static str {
    match m {
        DensifyMode::Adaptive => "adaptive",
        DensifyMode::DenseSmall => "dense-small",
        DensifyMode::SparseLarge => "sparse-large",
    }
}

impl PipelineConfig {
    /// Every recognised key, in file order.
    pub fn keys() -> Vec<String> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let k = key;
        match k {
            "seed" => self.seed = parse(k, v)?,
            "threads" => self.threads = v.parse()?,
            "dataset" => self.dataset = (!v.is_empty()).then(|| PathBuf::from(v)),
            "format" => self.format = v.parse()?,
            "out" => self.out = (!v.is_empty()).then(|| PathBuf::from(v)),
            "debug_masks" => self.debug_masks = parse_bool(k, v)?,
            "max_frames" => self.max_frames = parse(k, v)?,
            "freq.cutoff_d0" => {
                self.frequency.cutoff_d0 = if v == "auto" { None } else { Some(parse(k, v)?) }
            }
            "freq.high_spacing" => self.frequency.high_spacing = parse(k, v)?,
            "freq.low_spacing" => self.frequency.low_spacing = parse(k, v)?,
            "freq.histogram_bins" => self.frequency.histogram_bins = parse(k, v)?,
            "densify.mode" => self.densify_mode = v.parse()?,
            "densify.opacity_threshold" => self.densify.opacity_threshold = parse(k, v)?,
            "densify.depth_diff_threshold" => self.densify.depth_diff_threshold = parse(k, v)?,
            "densify.color_diff_threshold" => self.densify.color_diff_threshold = parse(k, v)?,
            "densify.alpha_h" => self.densify.alpha_h = parse(k, v)?,
            "densify.alpha_l" => self.densify.alpha_l = parse(k, v)?,
            "densify.initial_opacity" => self.densify.initial_opacity = parse(k, v)?,
            "densify.flatten" => self.densify.flatten = parse(k, v)?,
            "prune.every" => self.prune_every = parse(k, v)?,
            "prune.scale_max" => self.densify.prune_scale_max = parse(k, v)?,
            "prune.opacity_min" => self.densify.prune_opacity_min = parse(k, v)?,
            "sparse.initial_opacity" => self.sparse_initial_opacity = parse(k, v)?,
            "cloud.voxel_size" => self.cloud.voxel_size = parse(k, v)?,
            "cloud.knn" => self.cloud.knn = parse(k, v)?,
            "cloud.plane_variance" => self.cloud.plane_variance = parse(k, v)?,
            "cloud.normal_ratio" => self.cloud.normal_ratio = parse(k, v)?,
            "gicp.max_corr_dist" => self.gicp.max_corr_dist = parse(k, v)?,
            "gicp.max_iterations" => self.gicp.max_iterations = parse(k, v)?,
            "gicp.step_tolerance" => self.gicp.step_tolerance = parse(k, v)?,
            "gicp.max_halvings" => self.gicp.max_halvings = parse(k, v)?,
            "gicp.min_correspondences" => self.gicp.min_correspondences = parse(k, v)?,
            "keyframe.overlap_threshold" => self.overlap_threshold = parse(k, v)?,
            "keyframe.overlap_dist" => self.overlap_dist = parse(k, v)?,
            "keyframe.stride" => self.mapping_keyframe_stride = parse(k, v)?,
            "keyframe.covisible_threshold" => self.selection.covisible_threshold = parse(k, v)?,
            "keyframe.random_fraction" => self.selection.random_fraction = parse(k, v)?,
            "keyframe.strategy" => self.selection.strategy = v.parse()?,
            "opt.iterations" => self.iterations = parse(k, v)?,
            "opt.scene_scale" => self.optimizer.scene_scale = parse(k, v)?,
            "opt.beta1" => self.optimizer.beta1 = parse(k, v)?,
            "opt.beta2" => self.optimizer.beta2 = parse(k, v)?,
            "opt.adam_eps" => self.optimizer.adam_eps = parse(k, v)?,
            "lr.position" => self.optimizer.lr.position = parse(k, v)?,
            "lr.scale_log" => self.optimizer.lr.scale_log = parse(k, v)?,
            "lr.rotation" => self.optimizer.lr.rotation = parse(k, v)?,
            "lr.opacity_logit" => self.optimizer.lr.opacity_logit = parse(k, v)?,
            "lr.color" => self.optimizer.lr.color = parse(k, v)?,
            "loss.lambda_color" => self.optimizer.weights.lambda_color = parse(k, v)?,
            "loss.lambda_depth" => self.optimizer.weights.lambda_depth = parse(k, v)?,
            "loss.lambda_reg" => self.optimizer.weights.lambda_reg = parse(k, v)?,
            "loss.epsilon" => self.optimizer.weights.epsilon = parse(k, v)?,
            "render.alpha_clamp" => self.optimizer.render.alpha_clamp = parse(k, v)?,
            "render.transmittance_stop" => self.optimizer.render.transmittance_stop = parse(k, v)?,
            "render.min_alpha" => self.optimizer.render.min_alpha = parse(k, v)?,
            "render.tile_size" => self.optimizer.render.tile_size = parse(k, v)?,
            "render.near_plane" => self.optimizer.render.near_plane = parse(k, v)?,
            "render.screen_blur" => self.optimizer.render.screen_blur = parse(k, v)?,
            "camera.fx" => self.camera.fx = parse(k, v)?,
            "camera.fy" => self.camera.fy = parse(k, v)?,
            "camera.cx" => self.camera.cx = parse(k, v)?,
            "camera.cy" => self.camera.cy = parse(k, v)?,
            "camera.depth_scale" => self.camera.depth_scale = parse(k, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// All keys with their current values, as they would appear in a file.
    pub fn entries(&self) -> Vec<(String, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let f = &self.frequency;
        let d = &self.densify;
        let o = &self.optimizer;
        let list: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("dataset", path(&self.dataset)),
            ("format", self.format.to_string()),
            ("out", path(&self.out)),
            ("debug_masks", self.debug_masks.to_string()),
            ("max_frames", self.max_frames.to_string()),
            (
                "freq.cutoff_d0",
                f.cutoff_d0.map_or_else(|| "auto".to_string(), |c| c.to_string()),
            ),
            ("freq.high_spacing", f.high_spacing.to_string()),
            ("freq.low_spacing", f.low_spacing.to_string()),
            ("freq.histogram_bins", f.histogram_bins.to_string()),
            ("densify.mode", mode_name(self.densify_mode).to_string()),
            ("densify.opacity_threshold", d.opacity_threshold.to_string()),
            ("densify.depth_diff_threshold", d.depth_diff_threshold.to_string()),
            ("densify.color_diff_threshold", d.color_diff_threshold.to_string()),
            ("densify.alpha_h", d.alpha_h.to_string()),
            ("densify.alpha_l", d.alpha_l.to_string()),
            ("densify.initial_opacity", d.initial_opacity.to_string()),
            ("densify.flatten", d.flatten.to_string()),
            ("prune.every", self.prune_every.to_string()),
            ("prune.scale_max", d.prune_scale_max.to_string()),
            ("prune.opacity_min", d.prune_opacity_min.to_string()),
            ("sparse.initial_opacity", self.sparse_initial_opacity.to_string()),
            ("cloud.voxel_size", self.cloud.voxel_size.to_string()),
            ("cloud.knn", self.cloud.knn.to_string()),
            ("cloud.plane_variance", self.cloud.plane_variance.to_string()),
            ("cloud.normal_ratio", self.cloud.normal_ratio.to_string()),
            ("gicp.max_corr_dist", self.gicp.max_corr_dist.to_string()),
            ("gicp.max_iterations", self.gicp.max_iterations.to_string()),
            ("gicp.step_tolerance", self.gicp.step_tolerance.to_string()),
            ("gicp.max_halvings", self.gicp.max_halvings.to_string()),
            ("gicp.min_correspondences", self.gicp.min_correspondences.to_string()),
            ("keyframe.overlap_threshold", self.overlap_threshold.to_string()),
            ("keyframe.overlap_dist", self.overlap_dist.to_string()),
            ("keyframe.stride", self.mapping_keyframe_stride.to_string()),
            ("keyframe.covisible_threshold", self.selection.covisible_threshold.to_string()),
            ("keyframe.random_fraction", self.selection.random_fraction.to_string()),
            ("keyframe.strategy", strategy_name(self.selection.strategy).to_string()),
            ("opt.iterations", self.iterations.to_string()),
            ("opt.scene_scale", o.scene_scale.to_string()),
            ("opt.beta1", o.beta1.to_string()),
            ("opt.beta2", o.beta2.to_string()),
            ("opt.adam_eps", o.adam_eps.to_string()),
            ("lr.position", o.lr.position.to_string()),
            ("lr.scale_log", o.lr.scale_log.to_string()),
            ("lr.rotation", o.lr.rotation.to_string()),
            ("lr.opacity_logit", o.lr.opacity_logit.to_string()),
            ("lr.color", o.lr.color.to_string()),
            ("loss.lambda_color", o.weights.lambda_color.to_string()),
            ("loss.lambda_depth", o.weights.lambda_depth.to_string()),
            ("loss.lambda_reg", o.weights.lambda_reg.to_string()),
            ("loss.epsilon", o.weights.epsilon.to_string()),
            ("render.alpha_clamp", o.render.alpha_clamp.to_string()),
            ("render.transmittance_stop", o.render.transmittance_stop.to_string()),
            ("render.min_alpha", o.render.min_alpha.to_string()),
            ("render.tile_size", o.render.tile_size.to_string()),
            ("render.near_plane", o.render.near_plane.to_string()),
            ("render.screen_blur", o.render.screen_blur.to_string()),
            ("camera.fx", self.camera.fx.to_string()),
            ("camera.fy", self.camera.fy.to_string()),
            ("camera.cx", self.camera.cx.to_string()),
            ("camera.cy", self.camera.cy.to_string()),
            ("camera.depth_scale", self.camera.depth_scale.to_string()),
        ];
        list.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.densify.validate()?;
        self.optimizer.weights.validate()?;
        if self.mapping_keyframe_stride == 0 {
            return Err(Error::Config("keyframe.stride must be at least 1".into()));
        }
        if self.prune_every == 0 {
            return Err(Error::Config("prune.every must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_threshold) || !(self.overlap_dist > 0.0) {
            return Err(Error::Config("keyframe overlap settings out of range".into()));
        }
        if !(0.0..=1.0).contains(&self.selection.random_fraction) {
            return Err(Error::Config("keyframe.random_fraction must lie in [0, 1]".into()));
        }
        if self.frequency.high_spacing == 0 || self.frequency.low_spacing == 0 {
            return Err(Error::Config("sample spacings must be at least 1".into()));
        }
        if !(self.cloud.voxel_size > 0.0) || self.cloud.knn < 3 {
            return Err(Error::Config("cloud.voxel_size must be positive and cloud.knn at least 3".into()));
        }
        if !(self.sparse_initial_opacity > 0.0 && self.sparse_initial_opacity <= 1.0) {
            return Err(Error::Config("sparse.initial_opacity must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_preserves_everything() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 42;
        cfg.threads = ThreadMode::Single;
        cfg.densify_mode = DensifyMode::SparseLarge;
        cfg.selection.strategy = KeyframeStrategy::RandomOnly;
        cfg.frequency.cutoff_d0 = Some(7.5);
        cfg.dataset = Some("/tmp/data".into());
        let mut back = PipelineConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text("# header\n\nseed = 7 # trailing\n  opt.iterations=5\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.iterations, 5);
    }

    #[test]
    fn bad_input_is_rejected() {
        let mut cfg = PipelineConfig::default();
        assert!(cfg.apply_text("nonsense = 1").is_err());
        assert!(cfg.apply_text("seed").is_err());
        assert!(cfg.apply_text("seed = x").is_err());
        cfg.mapping_keyframe_stride = 0;
        assert!(cfg.validate().is_err());
        assert!(PipelineConfig::default().validate().is_ok());
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = PipelineConfig::default();
        let mut other = PipelineConfig::default();
        for (k, v) in cfg.entries() {
            other.set(&k, &v).unwrap();
        }
        assert_eq!(cfg, other);
    }
}
