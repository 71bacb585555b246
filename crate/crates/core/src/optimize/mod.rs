//! Joint refinement of the dense and sparse maps against selected keyframes.

mod keyframes;
mod loss;

use std::io::Write;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

pub use keyframes::{
    schedule, select_keyframes, KeyframeStore, KeyframeStrategy, Selection, SelectionConfig,
};
pub use loss::{
    mapping_loss, regularization_grad, regularization_loss, ssim, ssim_gray, ssim_with_grad,
    LossBreakdown, LossWeights, MappingLoss,
};

use crate::error::{Error, Result};
use crate::model::{Gaussian, GaussianMap, Keyframe};
use crate::render::{GaussianGrad, RenderConfig, RenderPass};

const OPACITY_EPS: f64 = 1e-6;
/// Parameters per gaussian: position 3, log-scale 3, quaternion 4, logit 1, colour 3.
const PARAMS: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    /// Multiplied by the scene scale.
    pub position: f64,
    pub scale_log: f64,
    pub rotation: f64,
    pub opacity_logit: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 2e-3,
            scale_log: 5e-2,
            rotation: 2e-2,
            opacity_logit: 2e-1,
            color: 2e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub lr: LearningRates,
    /// Scene extent in meters; scales the position learning rate.
    pub scene_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub render: RenderConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: LearningRates::default(),
            scene_scale: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-15,
            weights: LossWeights::default(),
            render: RenderConfig::default(),
        }
    }
}

/// Adam moments for one map, one row per gaussian.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<[f64; PARAMS]>,
    v: Vec<[f64; PARAMS]>,
    steps: Vec<u32>,
}

impl AdamState {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Grows the state with fresh rows for newly appended gaussians.
    pub fn resize(&mut self, n: usize) {
        self.m.resize(n, [0.0; PARAMS]);
        self.v.resize(n, [0.0; PARAMS]);
        self.steps.resize(n, 0);
    }

    /// Drops rows the same way a prune compacted the map.
    pub fn compact(&mut self, keep: &[bool]) {
        let mut i = 0;
        self.m.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        i = 0;
        self.v.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        i = 0;
        self.steps.retain(|_| {
            i += 1;
            keep[i - 1]
        });
    }

    pub fn moments_finite(&self) -> bool {
        self.m.iter().chain(&self.v).all(|r| r.iter().all(|x| x.is_finite()))
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gradient in the optimizer's unconstrained coordinates.
fn unconstrained_grad(g: &Gaussian, grad: &GaussianGrad, scale_extra: Option<&Vector3<f64>>) -> [f64; PARAMS] {
    let mut ds = grad.scale;
    if let Some(extra) = scale_extra {
        ds += extra;
    }
    let o = g.opacity.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    [
        grad.mu.x,
        grad.mu.y,
        grad.mu.z,
        ds.x * g.scale.x,
        ds.y * g.scale.y,
        ds.z * g.scale.z,
        grad.rotation[0],
        grad.rotation[1],
        grad.rotation[2],
        grad.rotation[3],
        grad.opacity * o * (1.0 - o),
        grad.color.x,
        grad.color.y,
        grad.color.z,
    ]
}

/// Adam over the dense map (all attributes) and the sparse map (appearance only).
#[derive(Debug, Clone)]
pub struct MapOptimizer {
    pub cfg: OptimizerConfig,
    pub dense_state: AdamState,
    pub sparse_state: AdamState,
    iteration: usize,
}

/// One optimization step's losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub keyframe_index: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub records: Vec<LossRecord>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "iteration,keyframe_index,total,color,depth,ssim,reg")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                r.iteration,
                r.keyframe_index,
                r.loss.total,
                r.loss.color,
                r.loss.depth,
                r.loss.ssim,
                r.loss.reg
            )?;
        }
        Ok(())
    }
}

/// Which attribute groups a map may change.
#[derive(Clone, Copy)]
struct Trainable {
    geometry: bool,
}

impl MapOptimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            dense_state: AdamState::default(),
            sparse_state: AdamState::default(),
            iteration: 0,
        }
    }

    /// Total steps taken so far.
    pub fn iterations(&self) -> usize {
        self.iteration
    }

    /// One render, loss and Adam update against `keyframe`.
    pub fn step(
        &mut self,
        dense: &mut GaussianMap,
        sparse: &mut GaussianMap,
        keyframe: &Keyframe,
    ) -> Result<LossRecord> {
        self.dense_state.resize(dense.len());
        self.sparse_state.resize(sparse.len());
        let frame = &keyframe.frame;
        let pass = RenderPass::forward(
            &[&dense.gaussians, &sparse.gaussians],
            &keyframe.pose,
            &frame.intrinsics,
            &self.cfg.render,
        );
        let scales: Vec<Vector3<f64>> = dense.iter().map(|g| g.scale).collect();
        let loss = mapping_loss(pass.output(), frame, &scales, &self.cfg.weights)?;
        let record = LossRecord {
            iteration: self.iteration,
            keyframe_index: keyframe.index,
            loss: loss.breakdown,
        };
        if !loss.breakdown.total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at iteration {} on keyframe {}",
                self.iteration, keyframe.index
            )));
        }
        let grads = pass.backward(&loss.adjoint)?;
        drop(pass);
        let (dense_grads, sparse_grads) = grads.split_at(dense.len());
        let cfg = self.cfg;
        adam_update(
            &cfg,
            &mut dense.gaussians,
            &mut self.dense_state,
            dense_grads,
            Some(&loss.scale_grad),
            Trainable { geometry: true },
        );
        adam_update(
            &cfg,
            &mut sparse.gaussians,
            &mut self.sparse_state,
            sparse_grads,
            None,
            Trainable { geometry: false },
        );
        if !self.dense_state.moments_finite() || !self.sparse_state.moments_finite() {
            return Err(Error::Numerical("optimizer moments became non-finite".into()));
        }
        self.iteration += 1;
        Ok(record)
    }

    /// Runs `views` in order, appending to `trace`. On error the trace keeps
    /// every completed step.
    pub fn run(
        &mut self,
        dense: &mut GaussianMap,
        sparse: &mut GaussianMap,
        views: &[&Keyframe],
        trace: &mut LossTrace,
    ) -> Result<()> {
        for kf in views {
            let record = self.step(dense, sparse, kf)?;
            trace.records.push(record);
        }
        Ok(())
    }
}

fn adam_update(
    cfg: &OptimizerConfig,
    gaussians: &mut [Gaussian],
    state: &mut AdamState,
    grads: &[GaussianGrad],
    scale_extra: Option<&Vec<Vector3<f64>>>,
    trainable: Trainable,
) {
    let lr = &cfg.lr;
    let rates: [f64; PARAMS] = [
        lr.position * cfg.scene_scale,
        lr.position * cfg.scene_scale,
        lr.position * cfg.scene_scale,
        lr.scale_log,
        lr.scale_log,
        lr.scale_log,
        lr.rotation,
        lr.rotation,
        lr.rotation,
        lr.rotation,
        lr.opacity_logit,
        lr.color,
        lr.color,
        lr.color,
    ];
    let first_free = if trainable.geometry { 0 } else { 10 };
    for (i, (g, grad)) in gaussians.iter_mut().zip(grads).enumerate() {
        let extra = scale_extra.map(|e| &e[i]);
        // Gaussians outside the view get no render gradient; leave them be
        // unless the regularizer pulls on them.
        if grad.is_zero() && extra.map_or(true, |e| *e == Vector3::zeros()) {
            continue;
        }
        let gu = unconstrained_grad(g, grad, extra);
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let mut x = [
            g.mu.x,
            g.mu.y,
            g.mu.z,
            g.scale.x.ln(),
            g.scale.y.ln(),
            g.scale.z.ln(),
            g.rotation.w,
            g.rotation.i,
            g.rotation.j,
            g.rotation.k,
            logit(g.opacity),
            g.color.x,
            g.color.y,
            g.color.z,
        ];
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in first_free..PARAMS {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gu[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gu[k] * gu[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            x[k] -= rates[k] * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
        if trainable.geometry {
            g.mu = Vector3::new(x[0], x[1], x[2]);
            g.scale = Vector3::new(x[3].exp(), x[4].exp(), x[5].exp());
            g.rotation = UnitQuaternion::new_normalize(Quaternion::new(x[6], x[7], x[8], x[9]));
        }
        g.opacity = sigmoid(x[10]);
        g.color = Vector3::new(x[11], x[12], x[13]).map(|c| c.clamp(0.0, 1.0));
    }
}

/// Runs `iterations` steps over `selection` with the covisible-heavy schedule.
pub fn optimize_maps(
    dense: &mut GaussianMap,
    sparse: &mut GaussianMap,
    store: &KeyframeStore,
    selection: &Selection,
    iterations: usize,
    optimizer: &mut MapOptimizer,
) -> Result<LossTrace> {
    let order = schedule(selection, iterations);
    let views: Vec<&Keyframe> = order.iter().map(|&s| store.get(s)).collect();
    let mut trace = LossTrace::default();
    optimizer.run(dense, sparse, &views, &mut trace)?;
    Ok(trace)
}
