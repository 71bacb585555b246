//! Keyframe bookkeeping: pairwise covisibility and per-round selection.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gicp::{overlap_ratio, TrackedCloud};
use crate::model::{Keyframe, Pose};
use crate::spatial::SpatialGrid;

/// Keyframes in insertion order with a symmetric overlap cache.
#[derive(Debug, Clone)]
pub struct KeyframeStore {
    keyframes: Vec<Keyframe>,
    clouds: Vec<TrackedCloud>,
    grids: Vec<SpatialGrid>,
    covisibility: Vec<Vec<f64>>,
    overlap_dist: f64,
}

impl KeyframeStore {
    /// `overlap_dist` is the distance within which two points count as shared.
    pub fn new(overlap_dist: f64) -> Self {
        Self {
            keyframes: Vec::new(),
            clouds: Vec::new(),
            grids: Vec::new(),
            covisibility: Vec::new(),
            overlap_dist,
        }
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Keyframe {
        &self.keyframes[slot]
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    /// Slot of the keyframe with this sequence index.
    pub fn slot_of(&self, index: usize) -> Option<usize> {
        self.keyframes.binary_search_by_key(&index, |k| k.index).ok()
    }

    /// Covisibility of two slots: the mean of both directed overlap fractions.
    pub fn covisibility(&self, a: usize, b: usize) -> f64 {
        self.covisibility[a][b]
    }

    /// Adds a keyframe with its downsampled cloud and returns its slot.
    pub fn insert(&mut self, keyframe: Keyframe, cloud: TrackedCloud) -> Result<usize> {
        if let Some(last) = self.keyframes.last() {
            if keyframe.index <= last.index {
                return Err(Error::invalid(format!(
                    "keyframe index {} does not follow {}",
                    keyframe.index, last.index
                )));
            }
        }
        let world = cloud.transformed(&keyframe.pose);
        let grid = SpatialGrid::from_points(self.overlap_dist.max(1e-3) * 3.0, world.iter().copied());
        let slot = self.keyframes.len();
        let mut row = Vec::with_capacity(slot + 1);
        for other in 0..slot {
            let forward = overlap_ratio(&cloud, &keyframe.pose, &self.grids[other], self.overlap_dist);
            let backward = overlap_ratio(
                &self.clouds[other],
                &self.keyframes[other].pose,
                &grid,
                self.overlap_dist,
            );
            let c = 0.5 * (forward + backward);
            self.covisibility[other].push(c);
            row.push(c);
        }
        row.push(1.0);
        self.covisibility.push(row);
        self.keyframes.push(keyframe);
        self.clouds.push(cloud);
        self.grids.push(grid);
        Ok(slot)
    }

    /// Pose of a stored keyframe.
    pub fn pose(&self, slot: usize) -> &Pose {
        &self.keyframes[slot].pose
    }
}

/// Which keyframes feed an optimization round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KeyframeStrategy {
    /// Covisible keyframes plus a random sample of the rest.
    #[default]
    Combined,
    CovisibleOnly,
    /// The current keyframe plus a random sample of all others.
    RandomOnly,
}

impl std::str::FromStr for KeyframeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(Self::Combined),
            "covisible" => Ok(Self::CovisibleOnly),
            "random" => Ok(Self::RandomOnly),
            other => Err(Error::Config(format!("unknown keyframe strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    /// Strictly above this covisibility a keyframe is covisible.
    pub covisible_threshold: f64,
    /// Fraction of the remaining keyframes drawn at random.
    pub random_fraction: f64,
    pub strategy: KeyframeStrategy,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            covisible_threshold: 0.7,
            random_fraction: 0.3,
            strategy: KeyframeStrategy::Combined,
        }
    }
}

/// Store slots chosen for one round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Selection {
    /// Current keyframe first, then by decreasing covisibility.
    pub covisible: Vec<usize>,
    /// Ascending slot order.
    pub random: Vec<usize>,
}

fn draw(pool: &[usize], fraction: f64, seed: u64, index: usize) -> Vec<usize> {
    let k = (fraction * pool.len() as f64).ceil() as usize;
    let k = k.min(pool.len());
    let mixed = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    let mut picked: Vec<usize> = sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    picked
}

/// Splits the store into covisible and randomly sampled keyframes for the
/// keyframe in `current` slot. The draw depends only on `seed` and the
/// current keyframe's sequence index.
pub fn select_keyframes(
    store: &KeyframeStore,
    current: usize,
    seed: u64,
    cfg: &SelectionConfig,
) -> Result<Selection> {
    if current >= store.len() {
        return Err(Error::invalid(format!("slot {current} is not in the store")));
    }
    let index = store.get(current).index;
    let others: Vec<usize> = (0..store.len()).filter(|&s| s != current).collect();
    match cfg.strategy {
        KeyframeStrategy::RandomOnly => Ok(Selection {
            covisible: vec![current],
            random: draw(&others, cfg.random_fraction, seed, index),
        }),
        KeyframeStrategy::Combined | KeyframeStrategy::CovisibleOnly => {
            let mut covisible: Vec<usize> = others
                .iter()
                .copied()
                .filter(|&s| store.covisibility(s, current) > cfg.covisible_threshold)
                .collect();
            covisible.sort_by(|&a, &b| {
                store
                    .covisibility(b, current)
                    .total_cmp(&store.covisibility(a, current))
                    .then(a.cmp(&b))
            });
            covisible.insert(0, current);
            let random = if cfg.strategy == KeyframeStrategy::Combined {
                let rest: Vec<usize> = others.into_iter().filter(|s| !covisible.contains(s)).collect();
                draw(&rest, cfg.random_fraction, seed, index)
            } else {
                Vec::new()
            };
            Ok(Selection { covisible, random })
        }
    }
}

/// Iteration order over a selection: two covisible picks, then one random,
/// repeating; each list cycles independently.
pub fn schedule(selection: &Selection, iterations: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(iterations);
    let (mut ci, mut ri) = (0, 0);
    let mut phase = 0;
    while out.len() < iterations {
        let take_random = phase == 2 && !selection.random.is_empty();
        if take_random || selection.covisible.is_empty() {
            if selection.random.is_empty() {
                break;
            }
            out.push(selection.random[ri % selection.random.len()]);
            ri += 1;
        } else {
            out.push(selection.covisible[ci % selection.covisible.len()]);
            ci += 1;
        }
        phase = (phase + 1) % 3;
    }
    out
}
