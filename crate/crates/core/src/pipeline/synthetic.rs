//! Ray-traced box room with textured walls and a smooth camera path.
//!
//! The camera frame is x right, y down, z forward, and the world shares those
//! axes at the start of the path. Walls carry a checkerboard panel, a smooth
//! value-noise texture and colour ramps, so every frame mixes detailed and
//! flat regions.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{ColorImage, GrayImage, Image};
use crate::model::{CameraIntrinsics, Pose, RgbdFrame};

use super::metrics::Stamped;

/// Scene and camera path parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    /// Room extent along x, y and z, meters; centered on the origin.
    pub room: Vector3<f64>,
    /// Camera start position.
    pub start: Vector3<f64>,
    /// Radius of the horizontal orbit traced by the camera, meters.
    pub orbit_radius: f64,
    /// Peak yaw swing, radians.
    pub yaw_amplitude: f64,
    /// Peak pitch swing, radians.
    pub pitch_amplitude: f64,
    /// Vertical bob, meters.
    pub bob: f64,
    /// Frame timestamps advance by 1 / rate seconds.
    pub frame_rate: f64,
    /// Checker square edge, meters.
    pub checker_size: f64,
    /// Value-noise lattice spacing, meters.
    pub noise_cell: f64,
    /// Supersampling factor per axis for colour.
    pub supersample: usize,
    /// Place boxes and a pillar in the room. Bare walls leave sideways
    /// translation poorly constrained for geometric registration.
    pub furniture: bool,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            fx: 250.0,
            fy: 250.0,
            room: Vector3::new(3.0, 2.0, 4.0),
            start: Vector3::new(0.0, 0.0, -0.8),
            orbit_radius: 0.3,
            yaw_amplitude: 0.4,
            pitch_amplitude: 0.1,
            bob: 0.05,
            frame_rate: 30.0,
            checker_size: 0.25,
            noise_cell: 0.3,
            supersample: 2,
            furniture: true,
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// A camera that never moves.
    pub fn static_camera(self) -> Self {
        Self {
            orbit_radius: 0.0,
            yaw_amplitude: 0.0,
            pitch_amplitude: 0.0,
            bob: 0.0,
            ..self
        }
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.fx,
            self.fy,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
    }

    /// Camera pose at path parameter `s` in [0, 1]; one full loop.
    pub fn pose_at(&self, s: f64) -> Pose {
        let th = 2.0 * PI * s;
        let offset = Vector3::new(
            self.orbit_radius * th.sin(),
            self.bob * (2.0 * th).sin(),
            self.orbit_radius * (1.0 - th.cos()),
        );
        let yaw = self.yaw_amplitude * th.sin();
        let pitch = self.pitch_amplitude * (2.0 * th).sin();
        let rotation = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw)
            * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), pitch);
        Pose::new(rotation, self.start + offset)
    }

    /// Path parameter of frame `i` of `frames`.
    pub fn phase(i: usize, frames: usize) -> f64 {
        if frames <= 1 {
            0.0
        } else {
            i as f64 / frames as f64
        }
    }

    /// Sets one key of the text format shared with the run configuration.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let f = |v: &str| -> Result<f64> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        };
        let u = |v: &str| -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        };
        match key {
            "width" => self.width = u(value)?,
            "height" => self.height = u(value)?,
            "fx" => self.fx = f(value)?,
            "fy" => self.fy = f(value)?,
            "room_x" => self.room.x = f(value)?,
            "room_y" => self.room.y = f(value)?,
            "room_z" => self.room.z = f(value)?,
            "start_x" => self.start.x = f(value)?,
            "start_y" => self.start.y = f(value)?,
            "start_z" => self.start.z = f(value)?,
            "orbit_radius" => self.orbit_radius = f(value)?,
            "yaw_amplitude" => self.yaw_amplitude = f(value)?,
            "pitch_amplitude" => self.pitch_amplitude = f(value)?,
            "bob" => self.bob = f(value)?,
            "frame_rate" => self.frame_rate = f(value)?,
            "checker_size" => self.checker_size = f(value)?,
            "noise_cell" => self.noise_cell = f(value)?,
            "supersample" => self.supersample = u(value)?,
            "furniture" => {
                self.furniture = match value.trim() {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    v => return Err(Error::Config(format!("bad value '{v}' for {key}"))),
                }
            }
            "seed" => self.seed = u(value)? as u64,
            other => return Err(Error::Config(format!("unknown scene key '{other}'"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.supersample == 0 {
            return Err(Error::Config("image size and supersampling must be positive".into()));
        }
        if !(self.room.iter().all(|&r| r > 0.0) && self.checker_size > 0.0 && self.noise_cell > 0.0) {
            return Err(Error::Config("room extents and texture sizes must be positive".into()));
        }
        let half = self.room / 2.0;
        let reach = self.orbit_radius * 2.0 + self.bob;
        if (0..3).any(|k| self.start[k].abs() + reach >= half[k]) {
            return Err(Error::Config("camera path leaves the room".into()));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::Config("frame rate must be positive".into()));
        }
        Ok(())
    }
}

/// Smooth lattice noise with a cosine-eased bilinear blend.
#[derive(Debug, Clone)]
struct ValueNoise {
    table: Vec<f64>,
    cell: f64,
}

const NOISE_TABLE: usize = 64;

impl ValueNoise {
    fn new(rng: &mut impl Rng, cell: f64) -> Self {
        Self {
            table: (0..NOISE_TABLE * NOISE_TABLE).map(|_| rng.gen()).collect(),
            cell,
        }
    }

    fn lattice(&self, i: i64, j: i64) -> f64 {
        let n = NOISE_TABLE as i64;
        self.table[(i.rem_euclid(n) * n + j.rem_euclid(n)) as usize]
    }

    fn at(&self, a: f64, b: f64) -> f64 {
        let (x, y) = (a / self.cell, b / self.cell);
        let (i, j) = (x.floor(), y.floor());
        let ease = |t: f64| 0.5 - 0.5 * (PI * t).cos();
        let (tx, ty) = (ease(x - i), ease(y - j));
        let (i, j) = (i as i64, j as i64);
        let top = self.lattice(i, j) * (1.0 - tx) + self.lattice(i + 1, j) * tx;
        let bottom = self.lattice(i, j + 1) * (1.0 - tx) + self.lattice(i + 1, j + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// Axis-aligned box standing in the room.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Block {
    min: Vector3<f64>,
    max: Vector3<f64>,
    texture: BlockTexture,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BlockTexture {
    FineChecker,
    Noise,
    Ramp,
}

impl Block {
    fn new(center: [f64; 3], size: [f64; 3], texture: BlockTexture) -> Self {
        let c = Vector3::from(center);
        let h = Vector3::from(size) / 2.0;
        Self {
            min: c - h,
            max: c + h,
            texture,
        }
    }

    /// Entry distance and face axis of a ray from outside, if it hits.
    fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
        for k in 0..3 {
            if dir[k].abs() < 1e-15 {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let a = (self.min[k] - origin[k]) / dir[k];
            let b = (self.max[k] - origin[k]) / dir[k];
            let (near, far) = if a < b { (a, b) } else { (b, a) };
            if near > t0 {
                t0 = near;
                axis = k;
            }
            t1 = t1.min(far);
        }
        (t0 <= t1 && t0 > 0.0).then_some((t0, axis))
    }

    /// Whether the box comes within `margin` of the region [lo, hi].
    fn near(&self, lo: &Vector3<f64>, hi: &Vector3<f64>, margin: f64) -> bool {
        (0..3).all(|k| hi[k] > self.min[k] - margin && lo[k] < self.max[k] + margin)
    }
}

/// Furniture layout for a room of the given extent, floor at +y.
fn furniture(room: &Vector3<f64>) -> Vec<Block> {
    let h = room / 2.0;
    vec![
        Block::new([-0.45 * h.x, h.y - 0.4, 0.55 * h.z], [0.5, 0.8, 0.5], BlockTexture::FineChecker),
        Block::new([0.5 * h.x, h.y - 0.25, 0.35 * h.z], [0.45, 0.5, 0.4], BlockTexture::Noise),
        Block::new([0.15 * h.x, 0.0, 0.8 * h.z], [0.2, room.y, 0.2], BlockTexture::Ramp),
    ]
}

/// The room with its textures, ready to be rendered from any pose.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    intrinsics: CameraIntrinsics,
    noise: [ValueNoise; 3],
    palette: [Vector3<f64>; 4],
    blocks: Vec<Block>,
}

fn lerp(a: &Vector3<f64>, b: &Vector3<f64>, t: f64) -> Vector3<f64> {
    a + (b - a) * t.clamp(0.0, 1.0)
}

impl SyntheticScene {
    pub fn new(spec: SceneSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let noise = [
            ValueNoise::new(&mut rng, spec.noise_cell),
            ValueNoise::new(&mut rng, spec.noise_cell),
            ValueNoise::new(&mut rng, spec.noise_cell),
        ];
        let mut colour = || Vector3::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9));
        let palette = [colour(), colour(), colour(), colour()];
        let blocks = if spec.furniture { furniture(&spec.room) } else { Vec::new() };
        let lo = spec.start - Vector3::new(spec.orbit_radius, spec.bob, 0.0);
        let hi = spec.start + Vector3::new(spec.orbit_radius, spec.bob, 2.0 * spec.orbit_radius);
        if blocks.iter().any(|b| b.near(&lo, &hi, 0.2)) {
            return Err(Error::Config("camera path runs into the furniture".into()));
        }
        Ok(Self {
            intrinsics: spec.intrinsics()?,
            spec,
            noise,
            palette,
            blocks,
        })
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    fn checker(&self, a: f64, b: f64) -> bool {
        let s = self.spec.checker_size;
        ((a / s).floor() as i64 + (b / s).floor() as i64).rem_euclid(2) == 0
    }

    fn noise_colour(&self, a: f64, b: f64) -> Vector3<f64> {
        let base = &self.palette[3];
        Vector3::new(
            0.15 + 0.7 * self.noise[0].at(a, b),
            0.15 + 0.7 * self.noise[1].at(a + 7.3, b),
            0.15 + 0.7 * self.noise[2].at(a, b + 3.1),
        ) * 0.7
            + base * 0.3
    }

    /// Surface colour at world point `p` lying on wall `axis` (side `sign`).
    fn shade(&self, p: &Vector3<f64>, axis: usize, sign: f64) -> Vector3<f64> {
        let half = self.spec.room / 2.0;
        let [c0, c1, c2, _] = &self.palette;
        match (axis, sign > 0.0) {
            // Back wall: checker panel on a vertical ramp.
            (2, true) => {
                let ramp = lerp(c0, c1, (p.y + half.y) / self.spec.room.y);
                if p.x.abs() < 0.35 * self.spec.room.x && p.y.abs() < 0.3 * self.spec.room.y {
                    if self.checker(p.x, p.y) {
                        Vector3::new(0.9, 0.88, 0.82)
                    } else {
                        Vector3::new(0.12, 0.14, 0.2)
                    }
                } else {
                    ramp
                }
            }
            (2, false) => self.noise_colour(p.x, p.y),
            (0, false) => lerp(c1, c2, (p.z + half.z) / self.spec.room.z),
            (0, true) => self.noise_colour(p.z, p.y),
            // Floor: large checker tiles.
            (1, true) => {
                if self.checker(p.x * 0.5, p.z * 0.5) {
                    c2 * 0.8 + Vector3::repeat(0.15)
                } else {
                    c0 * 0.6
                }
            }
            _ => lerp(c2, c0, (p.x + half.x) / self.spec.room.x),
        }
    }

    /// Nearest wall hit along a ray from inside the room: (distance, point, colour).
    fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> (f64, Vector3<f64>, Vector3<f64>) {
        let half = self.spec.room / 2.0;
        let mut best = (f64::INFINITY, 0, 1.0);
        for k in 0..3 {
            if dir[k].abs() < 1e-15 {
                continue;
            }
            let sign = dir[k].signum();
            let t = (sign * half[k] - origin[k]) / dir[k];
            if t > 0.0 && t < best.0 {
                best = (t, k, sign);
            }
        }
        let mut block = None;
        for b in &self.blocks {
            if let Some((t, axis)) = b.hit(origin, dir) {
                if t < best.0 {
                    best = (t, axis, 0.0);
                    block = Some(b);
                }
            }
        }
        let p = origin + dir * best.0;
        let colour = match block {
            Some(b) => self.shade_block(b, &p, best.1),
            None => self.shade(&p, best.1, best.2),
        };
        (best.0, p, colour)
    }

    fn shade_block(&self, b: &Block, p: &Vector3<f64>, axis: usize) -> Vector3<f64> {
        // In-face coordinates: the two axes other than the face normal.
        let (a, c) = match axis {
            0 => (p.z, p.y),
            1 => (p.x, p.z),
            _ => (p.x, p.y),
        };
        match b.texture {
            BlockTexture::FineChecker => {
                let s = 0.4 * self.spec.checker_size;
                if ((a / s).floor() as i64 + (c / s).floor() as i64).rem_euclid(2) == 0 {
                    Vector3::new(0.85, 0.3, 0.2)
                } else {
                    Vector3::new(0.95, 0.9, 0.6)
                }
            }
            BlockTexture::Noise => self.noise_colour(a + 11.0, c + 5.0),
            BlockTexture::Ramp => {
                let t = (p.y - b.min.y) / (b.max.y - b.min.y);
                lerp(&self.palette[1], &Vector3::new(0.9, 0.9, 0.9), t) * if axis == 0 { 0.8 } else { 1.0 }
            }
        }
    }

    /// Colour (supersampled) and exact z-depth seen from `pose`.
    pub fn render(&self, pose: &Pose) -> (ColorImage, GrayImage) {
        let intr = self.intrinsics;
        let rot = pose.rotation_matrix();
        let ss = self.spec.supersample;
        let origin = pose.translation;
        let ray = |u: f64, v: f64| {
            rot * Vector3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0)
        };
        let mut depth = Image::filled(intr.width, intr.height, 0.0);
        let colour = Image::from_fn(intr.width, intr.height, |x, y| {
            // The camera-frame ray has unit z, so the ray parameter is the z-depth.
            let (t, _, _) = self.trace(&origin, &ray(x as f64, y as f64));
            *depth.get_mut(x, y) = t;
            let mut acc = Vector3::zeros();
            for i in 0..ss {
                for j in 0..ss {
                    let ou = (i as f64 + 0.5) / ss as f64 - 0.5;
                    let ov = (j as f64 + 0.5) / ss as f64 - 0.5;
                    acc += self.trace(&origin, &ray(x as f64 + ou, y as f64 + ov)).2;
                }
            }
            let c = acc / (ss * ss) as f64;
            [c.x, c.y, c.z]
        });
        (colour, depth)
    }
}

/// Frames and ground truth of a generated run.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub frames: Vec<Arc<RgbdFrame>>,
    pub truth: Vec<Stamped>,
    pub scene: SyntheticScene,
}

/// Renders `frames` views along one loop of the camera path.
pub fn generate_synthetic_sequence(spec: &SceneSpec, frames: usize) -> Result<SyntheticSequence> {
    if frames == 0 {
        return Err(Error::invalid("at least one frame is required"));
    }
    let scene = SyntheticScene::new(*spec)?;
    let mut out = Vec::with_capacity(frames);
    let mut truth = Vec::with_capacity(frames);
    for i in 0..frames {
        let pose = spec.pose_at(SceneSpec::phase(i, frames));
        let timestamp = i as f64 / spec.frame_rate;
        let (color, depth) = scene.render(&pose);
        out.push(Arc::new(RgbdFrame::new(color, depth, timestamp, *scene.intrinsics())?));
        truth.push(Stamped { timestamp, pose });
    }
    Ok(SyntheticSequence {
        frames: out,
        truth,
        scene,
    })
}
