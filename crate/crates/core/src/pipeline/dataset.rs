//! RGB-D sequences: TUM directories, generated scenes written to disk, and
//! in-memory frames.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{CameraIntrinsics, RgbdFrame};

use super::config::{DatasetKind, TumCamera};
use super::io::{load_color_png, load_depth_png, load_trajectory, save_color_png, save_depth_png, save_trajectory};
use super::metrics::Stamped;
use super::synthetic::SyntheticSequence;

/// Maximum colour/depth timestamp gap for a pair, seconds.
pub const ASSOCIATION_WINDOW: f64 = 0.02;
/// Depth counts per meter in TUM-style 16-bit PNGs.
pub const TUM_DEPTH_SCALE: f64 = 5000.0;

#[derive(Debug, Clone)]
enum FrameSource {
    Memory(Arc<RgbdFrame>),
    Files { color: PathBuf, depth: PathBuf, timestamp: f64 },
}

/// An ordered RGB-D sequence. File-backed frames are decoded on demand.
#[derive(Debug, Clone)]
pub struct Sequence {
    frames: Vec<FrameSource>,
    pub intrinsics: CameraIntrinsics,
    pub depth_scale: f64,
    /// Ground-truth poses, empty when the dataset has none.
    pub truth: Vec<Stamped>,
    /// Colour images with no depth partner inside the association window.
    pub dropped: usize,
}

impl Sequence {
    pub fn from_frames(frames: Vec<Arc<RgbdFrame>>, truth: Vec<Stamped>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::EmptyDataset(PathBuf::new()))?;
        let intrinsics = first.intrinsics;
        Ok(Self {
            frames: frames.into_iter().map(FrameSource::Memory).collect(),
            intrinsics,
            depth_scale: TUM_DEPTH_SCALE,
            truth,
            dropped: 0,
        })
    }

    pub fn from_synthetic(seq: &SyntheticSequence) -> Result<Self> {
        Self::from_frames(seq.frames.clone(), seq.truth.clone())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.frames.truncate(n);
    }

    pub fn timestamp(&self, i: usize) -> f64 {
        match &self.frames[i] {
            FrameSource::Memory(f) => f.timestamp,
            FrameSource::Files { timestamp, .. } => *timestamp,
        }
    }

    /// Frame `i`, decoding it if it lives on disk.
    pub fn frame(&self, i: usize) -> Result<Arc<RgbdFrame>> {
        match &self.frames[i] {
            FrameSource::Memory(f) => Ok(Arc::clone(f)),
            FrameSource::Files {
                color,
                depth,
                timestamp,
            } => {
                let c = load_color_png(color)?;
                let d = load_depth_png(depth, self.depth_scale)?;
                if c.dims() != (self.intrinsics.width, self.intrinsics.height) || d.dims() != c.dims() {
                    return Err(Error::DatasetFormat {
                        path: color.clone(),
                        reason: format!(
                            "image is {}x{}, depth {}x{}, camera expects {}x{}",
                            c.width(),
                            c.height(),
                            d.width(),
                            d.height(),
                            self.intrinsics.width,
                            self.intrinsics.height
                        ),
                    });
                }
                Ok(Arc::new(RgbdFrame::new(c, d, *timestamp, self.intrinsics)?))
            }
        }
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::DatasetFormat {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses a `timestamp filename` list.
fn read_list(path: &Path) -> Result<Vec<(f64, String)>> {
    let text = fs::read_to_string(path).map_err(|e| format_err(path, e.to_string()))?;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(ts), Some(name)) = (parts.next(), parts.next()) else {
            return Err(format_err(path, format!("line {}: expected 'timestamp filename'", no + 1)));
        };
        let ts: f64 = ts
            .parse()
            .map_err(|_| format_err(path, format!("line {}: bad timestamp '{ts}'", no + 1)))?;
        out.push((ts, name.to_string()));
    }
    Ok(out)
}

/// Greedy one-to-one pairing by smallest timestamp gap within `window`.
/// Returns (first index, second index) sorted by the first.
pub fn associate_timestamps(a: &[f64], b: &[f64], window: f64) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..b.len()).collect();
    order.sort_by(|&i, &j| b[i].total_cmp(&b[j]));
    let sorted: Vec<f64> = order.iter().map(|&i| b[i]).collect();
    let mut candidates = Vec::new();
    for (i, &t) in a.iter().enumerate() {
        let lo = sorted.partition_point(|&s| s < t - window);
        for k in lo..sorted.len() {
            if sorted[k] > t + window {
                break;
            }
            candidates.push(((sorted[k] - t).abs(), i, order[k]));
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Reads a TUM-layout directory. `intrinsics` of `None` means the frame size
/// is taken from the first colour image and the focal terms from `camera`.
fn load_layout(dir: &Path, camera: &TumCamera, intrinsics: Option<CameraIntrinsics>) -> Result<Sequence> {
    let rgb_list = dir.join("rgb.txt");
    let depth_list = dir.join("depth.txt");
    for p in [&rgb_list, &depth_list] {
        if !p.is_file() {
            return Err(format_err(p, "missing file"));
        }
    }
    let rgb = read_list(&rgb_list)?;
    let depth = read_list(&depth_list)?;
    let ta: Vec<f64> = rgb.iter().map(|r| r.0).collect();
    let tb: Vec<f64> = depth.iter().map(|d| d.0).collect();
    let pairs = associate_timestamps(&ta, &tb, ASSOCIATION_WINDOW);
    let dropped = rgb.len() - pairs.len();
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} colour frames without a depth partner", dir.display());
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    let frames: Vec<FrameSource> = pairs
        .iter()
        .map(|&(i, j)| FrameSource::Files {
            color: dir.join(&rgb[i].1),
            depth: dir.join(&depth[j].1),
            timestamp: rgb[i].0,
        })
        .collect();
    let intrinsics = match intrinsics {
        Some(k) => k,
        None => {
            let FrameSource::Files { color, .. } = &frames[0] else {
                unreachable!("loader only builds file-backed frames")
            };
            let (w, h) = image::image_dimensions(color).map_err(|e| format_err(color, e.to_string()))?;
            CameraIntrinsics::new(camera.fx, camera.fy, camera.cx, camera.cy, w as usize, h as usize)?
        }
    };
    let gt_path = dir.join("groundtruth.txt");
    let truth = if gt_path.is_file() {
        load_trajectory(&gt_path)?
    } else {
        Vec::new()
    };
    Ok(Sequence {
        frames,
        intrinsics,
        depth_scale: camera.depth_scale,
        truth,
        dropped,
    })
}

pub fn load_tum_rgbd(dir: &Path, camera: &TumCamera) -> Result<Sequence> {
    load_layout(dir, camera, None)
}

/// A generated sequence on disk: the TUM layout plus `intrinsics.txt`
/// holding `fx fy cx cy width height`.
pub fn load_synthetic_dir(dir: &Path) -> Result<Sequence> {
    let path = dir.join("intrinsics.txt");
    let text = fs::read_to_string(&path).map_err(|e| format_err(&path, e.to_string()))?;
    let v: Vec<f64> = text
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format_err(&path, "expected six numbers"))?;
    if v.len() != 6 {
        return Err(format_err(&path, "expected six numbers"));
    }
    let k = CameraIntrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize)?;
    load_layout(dir, &TumCamera::default(), Some(k))
}

pub fn load_dataset(dir: &Path, kind: DatasetKind, camera: &TumCamera) -> Result<Sequence> {
    match kind {
        DatasetKind::Tum => load_tum_rgbd(dir, camera),
        DatasetKind::Synthetic => load_synthetic_dir(dir),
    }
}

/// Writes frames and ground truth in the layout read by [`load_synthetic_dir`].
pub fn write_synthetic_dir(seq: &SyntheticSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("rgb"))?;
    fs::create_dir_all(dir.join("depth"))?;
    let mut rgb = String::from("# timestamp filename\n");
    let mut depth = String::from("# timestamp filename\n");
    for f in &seq.frames {
        let name = format!("{:.6}.png", f.timestamp);
        save_color_png(&f.color, &dir.join("rgb").join(&name))?;
        save_depth_png(&f.depth, &dir.join("depth").join(&name), TUM_DEPTH_SCALE)?;
        rgb.push_str(&format!("{:.6} rgb/{name}\n", f.timestamp));
        depth.push_str(&format!("{:.6} depth/{name}\n", f.timestamp));
    }
    fs::write(dir.join("rgb.txt"), rgb)?;
    fs::write(dir.join("depth.txt"), depth)?;
    save_trajectory(&seq.truth, &dir.join("groundtruth.txt"))?;
    let k = seq.scene.intrinsics();
    fs::write(
        dir.join("intrinsics.txt"),
        format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height),
    )?;
    Ok(())
}
