//! CPU tile rasterizer for alpha-blended gaussian splats.
//!
//! Every pixel blends the gaussians covering it front to back:
//! `F = Σ γᵢ aᵢ Π_{j<i}(1 − aⱼ)` with γ the colour, the camera depth, or 1
//! for the colour, depth and opacity images respectively.

mod project;

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{ColorImage, GrayImage, Image};
use crate::model::{CameraIntrinsics, Gaussian, GaussianMap, Pose};

pub use project::{project_gaussian, GaussianGrad, ProjectedGaussian};
use project::{project_backward, project_with_view, ScreenGrad, View};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Upper bound on any single per-pixel alpha.
    pub alpha_clamp: f64,
    /// A pixel stops blending once its transmittance drops below this.
    pub transmittance_stop: f64,
    /// Per-pixel alphas below this are skipped. Zero disables the cut, which
    /// makes every gaussian touch every pixel.
    pub min_alpha: f64,
    pub tile_size: usize,
    /// Gaussians closer than this (camera z, meters) are culled.
    pub near_plane: f64,
    /// Isotropic screen-space variance added to every projection, pixels².
    pub screen_blur: f64,
    /// Cull when the projected mean lies further outside the frame than
    /// this multiple of the frame diagonal.
    pub cull_margin: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            alpha_clamp: 0.99,
            transmittance_stop: 1e-4,
            min_alpha: 1.0 / 255.0,
            tile_size: 16,
            near_plane: 0.01,
            screen_blur: 0.3,
            cull_margin: 1.5,
        }
    }
}

impl RenderConfig {
    /// Per-pixel alpha of a projected gaussian, or `None` when it is below
    /// the significance cut. Also returns the unclamped falloff `exp(−power)`.
    #[inline]
    pub fn pixel_alpha(&self, pg: &ProjectedGaussian, px: f64, py: f64) -> Option<(f64, f64, bool)> {
        let dx = px - pg.mean2d.x;
        let dy = py - pg.mean2d.y;
        let power = 0.5 * (pg.conic[(0, 0)] * dx * dx + pg.conic[(1, 1)] * dy * dy)
            + pg.conic[(0, 1)] * dx * dy;
        let falloff = (-power).exp();
        let raw = pg.opacity * falloff;
        if raw < self.min_alpha || raw <= 0.0 {
            return None;
        }
        if raw > self.alpha_clamp {
            Some((self.alpha_clamp, falloff, true))
        } else {
            Some((raw, falloff, false))
        }
    }
}

/// Colour, depth and opacity renders of one view.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: ColorImage,
    /// Alpha-weighted depth sum, not normalized by opacity.
    pub depth: GrayImage,
    pub opacity: GrayImage,
    /// Number of gaussians blended into each pixel.
    pub per_pixel_count: Image<u32>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }
}

/// Adjoint of a scalar loss w.r.t. every render channel.
#[derive(Debug, Clone)]
pub struct RenderAdjoint {
    pub color: ColorImage,
    pub depth: GrayImage,
    pub opacity: GrayImage,
}

impl RenderAdjoint {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: Image::filled(width, height, [0.0; 3]),
            depth: Image::filled(width, height, 0.0),
            opacity: Image::filled(width, height, 0.0),
        }
    }
}

struct Tile {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    /// Indices into the projected list, sorted front to back.
    list: Vec<u32>,
}

/// Per-tile forward bookkeeping needed by the backward pass.
struct TileState {
    final_t: Vec<f64>,
    /// Number of list entries walked (contributing or not) per pixel.
    walked: Vec<u32>,
}

/// Forward state of one render, kept so gradients can follow.
pub struct RenderPass<'a> {
    sources: Vec<&'a Gaussian>,
    view: View,
    cfg: RenderConfig,
    projected: Vec<ProjectedGaussian>,
    tiles: Vec<Tile>,
    states: Vec<TileState>,
    output: RenderOutput,
}

fn bbox_radius(pg: &ProjectedGaussian, cfg: &RenderConfig) -> Option<(f64, f64)> {
    let peak = pg.opacity.min(cfg.alpha_clamp);
    if cfg.min_alpha <= 0.0 {
        return Some((f64::INFINITY, f64::INFINITY));
    }
    if peak < cfg.min_alpha {
        return None;
    }
    // exp(−power)·opacity ≥ min_alpha  ⇔  Δᵀ conic Δ ≤ 2 ln(opacity/min_alpha)
    let r2 = 2.0 * (pg.opacity / cfg.min_alpha).ln().max(0.0);
    Some((
        (r2 * pg.cov2d[(0, 0)]).sqrt(),
        (r2 * pg.cov2d[(1, 1)]).sqrt(),
    ))
}

impl<'a> RenderPass<'a> {
    /// Renders the concatenation of `sets`; `source_index` counts across sets.
    pub fn forward(
        sets: &[&'a [Gaussian]],
        camera_pose: &Pose,
        intr: &CameraIntrinsics,
        cfg: &RenderConfig,
    ) -> Self {
        let sources: Vec<&Gaussian> = sets.iter().flat_map(|s| s.iter()).collect();
        let view = View::new(camera_pose, intr);
        let mut projected: Vec<ProjectedGaussian> = sources
            .par_iter()
            .enumerate()
            .filter_map(|(i, g)| project_with_view(g, i, &view, cfg))
            .collect();
        projected.sort_by(|a, b| {
            a.depth
                .total_cmp(&b.depth)
                .then(a.source_index.cmp(&b.source_index))
        });

        let (w, h) = (intr.width, intr.height);
        let ts = cfg.tile_size.max(1);
        let tiles_x = w.div_ceil(ts);
        let tiles_y = h.div_ceil(ts);
        let mut tiles: Vec<Tile> = (0..tiles_y)
            .flat_map(|ty| {
                (0..tiles_x).map(move |tx| Tile {
                    x0: tx * ts,
                    y0: ty * ts,
                    x1: ((tx + 1) * ts).min(w),
                    y1: ((ty + 1) * ts).min(h),
                    list: Vec::new(),
                })
            })
            .collect();
        for (k, pg) in projected.iter().enumerate() {
            let Some((rx, ry)) = bbox_radius(pg, cfg) else {
                continue;
            };
            let lo_x = (pg.mean2d.x - rx).floor().max(0.0);
            let hi_x = (pg.mean2d.x + rx).ceil().min((w - 1) as f64);
            let lo_y = (pg.mean2d.y - ry).floor().max(0.0);
            let hi_y = (pg.mean2d.y + ry).ceil().min((h - 1) as f64);
            if lo_x > hi_x || lo_y > hi_y {
                continue;
            }
            let (tx0, tx1) = (lo_x as usize / ts, hi_x as usize / ts);
            let (ty0, ty1) = (lo_y as usize / ts, hi_y as usize / ts);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    tiles[ty * tiles_x + tx].list.push(k as u32);
                }
            }
        }

        let results: Vec<(TileState, Vec<[f64; 5]>, Vec<u32>)> = tiles
            .par_iter()
            .map(|tile| rasterize_tile(tile, &projected, cfg))
            .collect();

        let mut color = Image::filled(w, h, [0.0; 3]);
        let mut depth = Image::filled(w, h, 0.0);
        let mut opacity = Image::filled(w, h, 0.0);
        let mut count = Image::filled(w, h, 0u32);
        let mut states = Vec::with_capacity(tiles.len());
        for (tile, (state, px, cnt)) in tiles.iter().zip(results) {
            let tw = tile.x1 - tile.x0;
            for (i, (v, c)) in px.iter().zip(&cnt).enumerate() {
                let (x, y) = (tile.x0 + i % tw, tile.y0 + i / tw);
                *color.get_mut(x, y) = [v[0], v[1], v[2]];
                *depth.get_mut(x, y) = v[3];
                *opacity.get_mut(x, y) = v[4];
                *count.get_mut(x, y) = *c;
            }
            states.push(state);
        }

        Self {
            sources,
            view,
            cfg: *cfg,
            projected,
            tiles,
            states,
            output: RenderOutput {
                color,
                depth,
                opacity,
                per_pixel_count: count,
            },
        }
    }

    pub fn output(&self) -> &RenderOutput {
        &self.output
    }

    pub fn into_output(self) -> RenderOutput {
        self.output
    }

    pub fn projected(&self) -> &[ProjectedGaussian] {
        &self.projected
    }

    /// Reverse-mode gradients for every source gaussian. Culled gaussians
    /// get zero gradients.
    pub fn backward(&self, adjoint: &RenderAdjoint) -> Result<Vec<GaussianGrad>> {
        let dims = (self.output.width(), self.output.height());
        for d in [adjoint.color.dims(), adjoint.depth.dims(), adjoint.opacity.dims()] {
            if d != dims {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    actual: d,
                });
            }
        }
        let per_tile: Vec<Vec<ScreenGrad>> = self
            .tiles
            .par_iter()
            .zip(self.states.par_iter())
            .map(|(tile, state)| backward_tile(tile, state, &self.projected, &self.cfg, adjoint))
            .collect();

        // fixed-order reduction keeps results bit-reproducible
        let mut screen = vec![ScreenGrad::default(); self.projected.len()];
        for (tile, grads) in self.tiles.iter().zip(per_tile) {
            for (&k, g) in tile.list.iter().zip(grads) {
                screen[k as usize] += g;
            }
        }

        let mut out = vec![GaussianGrad::default(); self.sources.len()];
        let chained: Vec<(usize, GaussianGrad)> = self
            .projected
            .par_iter()
            .zip(screen.par_iter())
            .map(|(pg, sg)| {
                let g = self.sources[pg.source_index];
                (pg.source_index, project_backward(g, pg, sg, &self.view))
            })
            .collect();
        for (i, g) in chained {
            out[i] = g;
        }
        Ok(out)
    }
}

fn rasterize_tile(
    tile: &Tile,
    projected: &[ProjectedGaussian],
    cfg: &RenderConfig,
) -> (TileState, Vec<[f64; 5]>, Vec<u32>) {
    let n = (tile.x1 - tile.x0) * (tile.y1 - tile.y0);
    let mut final_t = Vec::with_capacity(n);
    let mut walked = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n);
    let mut counts = Vec::with_capacity(n);
    for y in tile.y0..tile.y1 {
        for x in tile.x0..tile.x1 {
            let (px, py) = (x as f64, y as f64);
            let mut t = 1.0;
            let mut acc = [0.0; 5];
            let mut steps = 0u32;
            let mut contributors = 0u32;
            for &k in &tile.list {
                steps += 1;
                let pg = &projected[k as usize];
                let Some((a, _, _)) = cfg.pixel_alpha(pg, px, py) else {
                    continue;
                };
                let w = a * t;
                acc[0] += pg.color.x * w;
                acc[1] += pg.color.y * w;
                acc[2] += pg.color.z * w;
                acc[3] += pg.depth * w;
                acc[4] += w;
                contributors += 1;
                t *= 1.0 - a;
                if t < cfg.transmittance_stop {
                    break;
                }
            }
            final_t.push(t);
            walked.push(steps);
            pixels.push(acc);
            counts.push(contributors);
        }
    }
    (TileState { final_t, walked }, pixels, counts)
}

fn backward_tile(
    tile: &Tile,
    state: &TileState,
    projected: &[ProjectedGaussian],
    cfg: &RenderConfig,
    adj: &RenderAdjoint,
) -> Vec<ScreenGrad> {
    let mut grads = vec![ScreenGrad::default(); tile.list.len()];
    let tw = tile.x1 - tile.x0;
    for (i, (&t_final, &steps)) in state.final_t.iter().zip(&state.walked).enumerate() {
        let (x, y) = (tile.x0 + i % tw, tile.y0 + i / tw);
        let dc = adj.color.get(x, y);
        let dc = Vector3::new(dc[0], dc[1], dc[2]);
        let dd = *adj.depth.get(x, y);
        let da = *adj.opacity.get(x, y);
        if dc == Vector3::zeros() && dd == 0.0 && da == 0.0 {
            continue;
        }
        let (px, py) = (x as f64, y as f64);
        let mut t_after = t_final;
        let mut rest_c = Vector3::zeros();
        let mut rest_d = 0.0;
        let mut rest_a = 0.0;
        for j in (0..steps as usize).rev() {
            let pg = &projected[tile.list[j] as usize];
            let Some((a, falloff, clamped)) = cfg.pixel_alpha(pg, px, py) else {
                continue;
            };
            let t = t_after / (1.0 - a);
            let w = a * t;
            let g = &mut grads[j];
            g.color += dc * w;
            g.depth += dd * w;
            let d_alpha = t
                * (dc.dot(&(pg.color - rest_c)) + dd * (pg.depth - rest_d) + da * (1.0 - rest_a));
            rest_c = pg.color * a + rest_c * (1.0 - a);
            rest_d = pg.depth * a + rest_d * (1.0 - a);
            rest_a = a + rest_a * (1.0 - a);
            t_after = t;
            if clamped {
                continue;
            }
            g.opacity += d_alpha * falloff;
            // a = o·exp(−power), power = ½ Δᵀ conic Δ, Δ = p − mean
            let d_power = -d_alpha * a;
            let delta = Vector2::new(px - pg.mean2d.x, py - pg.mean2d.y);
            g.mean2d -= d_power * (pg.conic * delta);
            g.conic += Matrix2::new(
                delta.x * delta.x,
                delta.x * delta.y,
                delta.x * delta.y,
                delta.y * delta.y,
            ) * (0.5 * d_power);
        }
    }
    grads
}

/// Renders the union of several gaussian sets from one camera.
pub fn render_sets(
    sets: &[&[Gaussian]],
    camera_pose: &Pose,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> RenderOutput {
    RenderPass::forward(sets, camera_pose, intr, cfg).into_output()
}

pub fn render(
    map: &GaussianMap,
    camera_pose: &Pose,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> RenderOutput {
    render_sets(&[&map.gaussians], camera_pose, intr, cfg)
}

/// Exact adjoints of [`render`] for a given upstream adjoint.
pub fn render_with_gradients(
    map: &GaussianMap,
    camera_pose: &Pose,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
    loss_grad: &RenderAdjoint,
) -> Result<Vec<GaussianGrad>> {
    RenderPass::forward(&[&map.gaussians], camera_pose, intr, cfg).backward(loss_grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FrequencyClass, MapKind};
    use nalgebra::UnitQuaternion;

    fn splat(mu: Vector3<f64>, opacity: f64, color: [f64; 3]) -> Gaussian {
        Gaussian {
            mu,
            scale: Vector3::new(0.02, 0.02, 0.02),
            rotation: UnitQuaternion::identity(),
            opacity,
            color: Vector3::from(color),
            frequency_class: FrequencyClass::Low,
        }
    }

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 16.0, 12.0, 32, 24).unwrap()
    }

    #[test]
    fn empty_map_renders_zeros() {
        let out = render(&GaussianMap::new(MapKind::Dense), &Pose::identity(), &intr(), &RenderConfig::default());
        assert!(out.color.as_slice().iter().all(|c| *c == [0.0; 3]));
        assert!(out.opacity.as_slice().iter().all(|&a| a == 0.0));
        assert!(out.depth.as_slice().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn single_gaussian_at_pixel_center() {
        let mut map = GaussianMap::new(MapKind::Dense);
        let (alpha, c, d) = (0.6, [0.1, 0.5, 0.9], 2.0);
        map.push(splat(Vector3::new(0.0, 0.0, d), alpha, c));
        let out = render(&map, &Pose::identity(), &intr(), &RenderConfig::default());
        let px = out.color.get(16, 12);
        for k in 0..3 {
            assert!((px[k] - c[k] * alpha).abs() < 1e-12);
        }
        assert!((out.opacity.get(16, 12) - alpha).abs() < 1e-12);
        assert!((out.depth.get(16, 12) - d * alpha).abs() < 1e-12);
        assert_eq!(*out.per_pixel_count.get(16, 12), 1);
    }

    #[test]
    fn two_stacked_gaussians_blend_front_to_back() {
        let mut map = GaussianMap::new(MapKind::Dense);
        let (a1, c1) = (0.5, [1.0, 0.0, 0.2]);
        let (a2, c2) = (0.7, [0.0, 1.0, 0.4]);
        // stored back first to exercise sorting
        map.push(splat(Vector3::new(0.0, 0.0, 3.0), a2, c2));
        map.push(splat(Vector3::new(0.0, 0.0, 2.0), a1, c1));
        let out = render(&map, &Pose::identity(), &intr(), &RenderConfig::default());
        let px = out.color.get(16, 12);
        for k in 0..3 {
            let expected = c1[k] * a1 + c2[k] * a2 * (1.0 - a1);
            assert!((px[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_adjoint_gives_zero_gradients() {
        let mut map = GaussianMap::new(MapKind::Dense);
        map.push(splat(Vector3::new(0.0, 0.0, 2.0), 0.5, [0.3, 0.3, 0.3]));
        let adj = RenderAdjoint::zeros(32, 24);
        let grads = render_with_gradients(&map, &Pose::identity(), &intr(), &RenderConfig::default(), &adj).unwrap();
        assert!(grads.iter().all(GaussianGrad::is_zero));
    }

    #[test]
    fn color_gradient_of_single_pixel_is_alpha() {
        let mut map = GaussianMap::new(MapKind::Dense);
        let alpha = 0.45;
        map.push(splat(Vector3::new(0.0, 0.0, 2.0), alpha, [0.3, 0.3, 0.3]));
        let mut adj = RenderAdjoint::zeros(32, 24);
        *adj.color.get_mut(16, 12) = [1.0, 0.0, 0.0];
        let grads = render_with_gradients(&map, &Pose::identity(), &intr(), &RenderConfig::default(), &adj).unwrap();
        assert!((grads[0].color.x - alpha).abs() < 1e-12);
        assert_eq!(grads[0].color.y, 0.0);
    }

    #[test]
    fn culled_gaussian_has_zero_gradient() {
        let mut map = GaussianMap::new(MapKind::Dense);
        map.push(splat(Vector3::new(0.0, 0.0, -2.0), 0.5, [0.3, 0.3, 0.3]));
        map.push(splat(Vector3::new(0.0, 0.0, 2.0), 0.5, [0.3, 0.3, 0.3]));
        let mut adj = RenderAdjoint::zeros(32, 24);
        adj.opacity = Image::filled(32, 24, 1.0);
        let grads = render_with_gradients(&map, &Pose::identity(), &intr(), &RenderConfig::default(), &adj).unwrap();
        assert!(grads[0].is_zero());
        assert!(!grads[1].is_zero());
    }

    #[test]
    fn adjoint_dimension_mismatch_is_rejected() {
        let map = GaussianMap::new(MapKind::Dense);
        let adj = RenderAdjoint::zeros(8, 8);
        assert!(render_with_gradients(&map, &Pose::identity(), &intr(), &RenderConfig::default(), &adj).is_err());
    }
}
