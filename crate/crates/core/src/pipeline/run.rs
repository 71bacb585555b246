//! The SLAM loop: tracking every frame, mapping on keyframes.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::densify::{missing_masks, prune, sampling_masks, spawn_gaussians, MissingMasks};
use crate::error::{Error, Result};
use crate::frequency::FrequencyMasks;
use crate::gicp::{build_cloud, gicp_align, overlap_ratio, update_sparse_map, TrackedCloud, TrackingTarget};
use crate::image::ColorImage;
use crate::model::{CameraIntrinsics, GaussianMap, Keyframe, KeyframeRole, MapKind, Pose, RgbdFrame};
use crate::optimize::{optimize_maps, select_keyframes, ssim, KeyframeStore, LossTrace, MapOptimizer};
use crate::render::{render_sets, RenderConfig, RenderOutput};

use super::config::{PipelineConfig, ThreadMode};
use super::dataset::{load_dataset, Sequence};
use super::io::{save_mask_png, save_ply, save_trajectory};
use super::metrics::{ate_rmse, psnr, Stamped};

/// Summary metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Absent when the dataset has no usable ground truth.
    pub ate_rmse: Option<f64>,
    pub psnr_per_keyframe: Vec<f64>,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    /// Frames per second of wall-clock time over the whole loop.
    pub fps: f64,
    pub frames: usize,
    pub tracking_keyframes: usize,
    pub mapping_keyframes: usize,
    pub dense_count: usize,
    pub sparse_count: usize,
    pub peak_memory_bytes: usize,
    pub optimizer_iterations: usize,
    /// Why the run stopped early, if it did.
    pub halted: Option<String>,
}

/// Everything a run produced. `error` is set when the loop halted early; the
/// other fields then cover the frames processed before the failure.
#[derive(Debug)]
pub struct RunOutput {
    pub report: EvalReport,
    pub trajectory: Vec<Stamped>,
    pub dense: GaussianMap,
    pub sparse: GaussianMap,
    pub trace: LossTrace,
    pub keyframes: Vec<Keyframe>,
    pub error: Option<Error>,
}

/// Renders the union of both maps.
pub fn render_maps(
    dense: &GaussianMap,
    sparse: &GaussianMap,
    pose: &Pose,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> RenderOutput {
    render_sets(&[&dense.gaussians, &sparse.gaussians], pose, intr, cfg)
}

/// Mean PSNR and SSIM of the maps against reference views.
pub fn view_quality(
    dense: &GaussianMap,
    sparse: &GaussianMap,
    views: &[(Pose, &ColorImage)],
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> Result<(Vec<f64>, f64)> {
    let mut psnrs = Vec::with_capacity(views.len());
    let mut ssim_sum = 0.0;
    for (pose, reference) in views {
        let out = render_maps(dense, sparse, pose, intr, cfg);
        psnrs.push(psnr(&out.color, reference)?);
        ssim_sum += ssim(&out.color, reference)?;
    }
    let ssim_mean = if views.is_empty() {
        0.0
    } else {
        ssim_sum / views.len() as f64
    };
    Ok((psnrs, ssim_mean))
}

/// Owns both maps and the keyframe store; the single writer of all three.
pub struct Mapper {
    cfg: PipelineConfig,
    pub dense: GaussianMap,
    pub sparse: GaussianMap,
    pub store: KeyframeStore,
    pub optimizer: MapOptimizer,
    pub trace: LossTrace,
    pub peak_memory: usize,
    pub tracking_keyframes: usize,
    pub mapping_keyframes: usize,
    debug_dir: Option<PathBuf>,
}

impl Mapper {
    pub fn new(cfg: &PipelineConfig) -> Self {
        let debug_dir = match (&cfg.out, cfg.debug_masks) {
            (Some(out), true) => Some(out.join("masks")),
            _ => None,
        };
        Self {
            cfg: cfg.clone(),
            dense: GaussianMap::new(MapKind::Dense),
            sparse: GaussianMap::new(MapKind::Sparse),
            store: KeyframeStore::new(cfg.overlap_dist),
            optimizer: MapOptimizer::new(cfg.optimizer),
            trace: LossTrace::default(),
            peak_memory: 0,
            tracking_keyframes: 0,
            mapping_keyframes: 0,
            debug_dir,
        }
    }

    fn keyframe_count(&self) -> usize {
        self.tracking_keyframes + self.mapping_keyframes
    }

    /// Where the dense map under-explains `frame`; everywhere for the first keyframe.
    pub fn missing_for(&self, frame: &RgbdFrame, pose: &Pose) -> Result<MissingMasks> {
        if self.keyframe_count() == 0 {
            return Ok(MissingMasks::full(frame.width(), frame.height()));
        }
        let render = render_sets(&[&self.dense.gaussians], pose, &frame.intrinsics, &self.cfg.optimizer.render);
        missing_masks(&render, frame, &self.cfg.densify)
    }

    /// Grows the dense map and, on tracking keyframes, the sparse map.
    /// Returns the number of sparse gaussians added.
    pub fn integrate(&mut self, kf: &Keyframe, cloud: &TrackedCloud) -> Result<usize> {
        let frame = &kf.frame;
        let masks = sampling_masks(frame, self.cfg.densify_mode, &self.cfg.frequency)?;
        let missing = self.missing_for(frame, &kf.pose)?;
        let spawned = spawn_gaussians(frame, &kf.pose, &masks, &missing, &self.cfg.densify)?;
        let n_dense = spawned.len();
        self.dense.extend(spawned);
        let n_sparse = if kf.role == KeyframeRole::Tracking {
            update_sparse_map(
                &mut self.sparse,
                cloud,
                &kf.pose,
                &missing,
                frame,
                self.cfg.sparse_initial_opacity,
            )
        } else {
            0
        };
        log::info!(
            "keyframe {} ({:?}): +{n_dense} dense, +{n_sparse} sparse, {} missing pixels",
            kf.index,
            kf.role,
            missing.combined.count()
        );
        if let Some(dir) = &self.debug_dir {
            write_debug_masks(dir, kf.index, &masks, &missing)?;
        }
        Ok(n_sparse)
    }

    /// Stores the keyframe, optimizes over the selected views and prunes on schedule.
    pub fn refine(&mut self, kf: Keyframe, cloud: TrackedCloud) -> Result<()> {
        match kf.role {
            KeyframeRole::Tracking => self.tracking_keyframes += 1,
            KeyframeRole::MappingOnly => self.mapping_keyframes += 1,
        }
        let slot = self.store.insert(kf, cloud)?;
        let selection = select_keyframes(&self.store, slot, self.cfg.seed, &self.cfg.selection)?;
        let trace = optimize_maps(
            &mut self.dense,
            &mut self.sparse,
            &self.store,
            &selection,
            self.cfg.iterations,
            &mut self.optimizer,
        );
        self.trace.records.extend(trace?.records);
        if self.keyframe_count() % self.cfg.prune_every == 0 {
            let report = prune(&mut self.dense, &self.cfg.densify);
            self.optimizer.dense_state.compact(&report.keep);
            log::info!("pruned {} dense gaussians", report.removed());
        }
        self.peak_memory = self
            .peak_memory
            .max(self.dense.memory_bytes() + self.sparse.memory_bytes());
        Ok(())
    }
}

fn write_debug_masks(dir: &Path, index: usize, masks: &FrequencyMasks, missing: &MissingMasks) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_mask_png(&masks.high, &dir.join(format!("{index:06}_high.png")))?;
    save_mask_png(&masks.low, &dir.join(format!("{index:06}_low.png")))?;
    save_mask_png(&missing.combined, &dir.join(format!("{index:06}_missing.png")))?;
    Ok(())
}

/// Per-frame tracking state: last pose and keyframe bookkeeping.
struct Tracker {
    cfg: PipelineConfig,
    pose: Pose,
    last_keyframe: usize,
}

/// What tracking decided about one frame.
struct Tracked {
    pose: Pose,
    role: Option<KeyframeRole>,
    cloud: Option<TrackedCloud>,
}

impl Tracker {
    fn track(&mut self, index: usize, frame: &RgbdFrame, target: &TrackingTarget) -> Result<Tracked> {
        let cloud = match build_cloud(frame, &self.cfg.cloud) {
            Ok(c) => c,
            Err(Error::InsufficientData(why)) => {
                log::warn!("frame {index}: {why}; holding the previous pose");
                return Ok(Tracked {
                    pose: self.pose,
                    role: None,
                    cloud: None,
                });
            }
            Err(e) => return Err(e),
        };
        let result = gicp_align(&cloud, target, &self.pose, &self.cfg.gicp)?;
        log::debug!("{}", result.log_line(index));
        self.pose = result.pose;
        let overlap = overlap_ratio(&cloud, &self.pose, target.grid(), self.cfg.overlap_dist);
        let role = if overlap < self.cfg.overlap_threshold {
            Some(KeyframeRole::Tracking)
        } else if index - self.last_keyframe >= self.cfg.mapping_keyframe_stride {
            Some(KeyframeRole::MappingOnly)
        } else {
            None
        };
        if role.is_some() {
            self.last_keyframe = index;
        }
        Ok(Tracked {
            pose: self.pose,
            role,
            cloud: Some(cloud),
        })
    }
}

fn keyframe(frame: Arc<RgbdFrame>, pose: Pose, role: KeyframeRole, index: usize) -> Keyframe {
    Keyframe {
        frame,
        pose,
        role,
        index,
    }
}

/// Shared state between the loop variants.
struct LoopState {
    trajectory: Vec<Stamped>,
    error: Option<Error>,
}

fn run_single(seq: &Sequence, mapper: &mut Mapper, target: &mut TrackingTarget, tracker: &mut Tracker, state: &mut LoopState) {
    for i in 1..seq.len() {
        let mut step = || -> Result<()> {
            let frame = seq.frame(i)?;
            let tracked = tracker.track(i, &frame, target)?;
            state.trajectory.push(Stamped {
                timestamp: frame.timestamp,
                pose: tracked.pose,
            });
            if let (Some(role), Some(cloud)) = (tracked.role, tracked.cloud) {
                let kf = keyframe(frame, tracked.pose, role, i);
                mapper.integrate(&kf, &cloud)?;
                if role == KeyframeRole::Tracking {
                    target.sync(&mapper.sparse)?;
                }
                mapper.refine(kf, cloud)?;
            }
            Ok(())
        };
        if let Err(e) = step() {
            log::error!("halting at frame {i}: {e}");
            state.error = Some(e);
            return;
        }
    }
}

fn run_parallel(seq: &Sequence, mapper: &mut Mapper, target: TrackingTarget, tracker: &mut Tracker, state: &mut LoopState) {
    let target = RwLock::new(target);
    let (tx, rx) = sync_channel::<(Keyframe, TrackedCloud)>(4);
    let mapping_error = std::thread::scope(|s| {
        let target = &target;
        let mapping = s.spawn(move || -> Result<()> {
            for (kf, cloud) in rx {
                mapper.integrate(&kf, &cloud)?;
                if kf.role == KeyframeRole::Tracking {
                    // Tracking sees either none or all of this keyframe's points.
                    target.write().expect("tracking target lock").sync(&mapper.sparse)?;
                }
                mapper.refine(kf, cloud)?;
            }
            Ok(())
        });
        for i in 1..seq.len() {
            let mut step = || -> Result<Option<(Keyframe, TrackedCloud)>> {
                let frame = seq.frame(i)?;
                let tracked = {
                    let guard = target.read().expect("tracking target lock");
                    tracker.track(i, &frame, &guard)?
                };
                state.trajectory.push(Stamped {
                    timestamp: frame.timestamp,
                    pose: tracked.pose,
                });
                Ok(match (tracked.role, tracked.cloud) {
                    (Some(role), Some(cloud)) => Some((keyframe(frame, tracked.pose, role, i), cloud)),
                    _ => None,
                })
            };
            match step() {
                Ok(Some(job)) => {
                    if tx.send(job).is_err() {
                        // The mapping thread failed; its error is collected below.
                        break;
                    }
                }
                Ok(None) => {}
                Err(e) => {
                    log::error!("halting at frame {i}: {e}");
                    state.error = Some(e);
                    break;
                }
            }
        }
        drop(tx);
        mapping.join().expect("mapping thread panicked").err()
    });
    if state.error.is_none() {
        state.error = mapping_error;
    }
}

/// Runs tracking and mapping over a loaded sequence.
pub fn run_sequence(seq: &Sequence, cfg: &PipelineConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if seq.is_empty() {
        return Err(Error::EmptyDataset(cfg.dataset.clone().unwrap_or_default()));
    }
    let start = Instant::now();
    let mut mapper = Mapper::new(cfg);
    let mut target = TrackingTarget::new(cfg.gicp.max_corr_dist);
    let mut state = LoopState {
        trajectory: Vec::with_capacity(seq.len()),
        error: None,
    };

    // The first frame defines the world.
    let first = seq.frame(0)?;
    let cloud = build_cloud(&first, &cfg.cloud)?;
    let pose = Pose::identity();
    state.trajectory.push(Stamped {
        timestamp: first.timestamp,
        pose,
    });
    let kf = keyframe(first, pose, KeyframeRole::Tracking, 0);
    let init = mapper
        .integrate(&kf, &cloud)
        .and_then(|_| target.sync(&mapper.sparse))
        .and_then(|_| mapper.refine(kf, cloud));
    let mut tracker = Tracker {
        cfg: cfg.clone(),
        pose,
        last_keyframe: 0,
    };
    match init {
        Err(e) => state.error = Some(e),
        Ok(()) => match cfg.threads {
            ThreadMode::Single => run_single(seq, &mut mapper, &mut target, &mut tracker, &mut state),
            ThreadMode::Parallel => run_parallel(seq, &mut mapper, target, &mut tracker, &mut state),
        },
    }
    let elapsed = start.elapsed().as_secs_f64();

    let keyframes: Vec<Keyframe> = mapper.store.keyframes().to_vec();
    let views: Vec<(Pose, &ColorImage)> = keyframes.iter().map(|k| (k.pose, &k.frame.color)).collect();
    let (psnr_per_keyframe, ssim_mean) = view_quality(
        &mapper.dense,
        &mapper.sparse,
        &views,
        &seq.intrinsics,
        &cfg.optimizer.render,
    )?;
    let psnr_mean = if psnr_per_keyframe.is_empty() {
        0.0
    } else {
        psnr_per_keyframe.iter().sum::<f64>() / psnr_per_keyframe.len() as f64
    };
    let ate = if seq.truth.is_empty() {
        None
    } else {
        ate_rmse(&state.trajectory, &seq.truth).ok()
    };
    let report = EvalReport {
        ate_rmse: ate,
        psnr_per_keyframe,
        psnr_mean,
        ssim_mean,
        fps: state.trajectory.len() as f64 / elapsed.max(1e-9),
        frames: state.trajectory.len(),
        tracking_keyframes: mapper.tracking_keyframes,
        mapping_keyframes: mapper.mapping_keyframes,
        dense_count: mapper.dense.len(),
        sparse_count: mapper.sparse.len(),
        peak_memory_bytes: mapper.peak_memory,
        optimizer_iterations: mapper.optimizer.iterations(),
        halted: state.error.as_ref().map(|e| e.to_string()),
    };
    Ok(RunOutput {
        report,
        trajectory: state.trajectory,
        dense: mapper.dense,
        sparse: mapper.sparse,
        trace: mapper.trace,
        keyframes,
        error: state.error,
    })
}

/// Writes trajectory, both maps, the report and the loss trace into `dir`.
pub fn write_artifacts(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_trajectory(&out.trajectory, &dir.join("trajectory.txt"))?;
    save_ply(&out.dense, &dir.join("dense.ply"))?;
    save_ply(&out.sparse, &dir.join("sparse.ply"))?;
    let json = serde_json::to_string_pretty(&out.report).map_err(|e| Error::Numerical(e.to_string()))?;
    fs::write(dir.join("report.json"), json + "\n")?;
    let mut w = BufWriter::new(fs::File::create(dir.join("loss_trace.csv"))?);
    out.trace.write_csv(&mut w)?;
    Ok(())
}

/// Loads the configured dataset, runs, and writes artifacts to `cfg.out` if set.
pub fn run_slam(cfg: &PipelineConfig) -> Result<RunOutput> {
    let dir = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset given".into()))?;
    let mut seq = load_dataset(dir, cfg.format, &cfg.camera)?;
    if cfg.max_frames > 0 {
        seq.truncate(cfg.max_frames);
    }
    let out = run_sequence(&seq, cfg)?;
    if let Some(dir) = &cfg.out {
        write_artifacts(&out, dir)?;
    }
    Ok(out)
}
