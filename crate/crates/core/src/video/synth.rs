//! Synthetic action-recognition clips: a square or a disk translating in one
//! of four directions over a static textured background.
//!
//! Label = `shape * 4 + direction` with shapes `{square, disk}` and directions
//! `{left, right, up, down}`. Clip `i` of a dataset has label `i % 8`, and
//! every clip draws from its own RNG stream keyed by `(seed, split, i)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabeledClip, VideoClip};

pub const NUM_CLASSES: usize = 8;
pub const CLIP_FRAMES: usize = 8;
pub const CLIP_SIZE: usize = 64;
pub const NOISE_SIGMA: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn stream_id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    /// Unit displacement (dx, dy) per frame.
    pub fn step(self) -> (f32, f32) {
        match self {
            Direction::Left => (-1.0, 0.0),
            Direction::Right => (1.0, 0.0),
            Direction::Up => (0.0, -1.0),
            Direction::Down => (0.0, 1.0),
        }
    }
}

pub fn label_of(shape: Shape, direction: Direction) -> usize {
    let s = match shape {
        Shape::Square => 0,
        Shape::Disk => 1,
    };
    s * 4 + Direction::ALL.iter().position(|&d| d == direction).expect("direction")
}

pub fn decode_label(label: usize) -> (Shape, Direction) {
    let shape = if label / 4 == 0 { Shape::Square } else { Shape::Disk };
    (shape, Direction::ALL[label % 4])
}

/// Per-clip random draws, exposed for tests and diagnostics.
#[derive(Clone, Debug)]
pub struct SceneParams {
    pub shape: Shape,
    pub direction: Direction,
    /// Side length (square) or diameter (disk), pixels.
    pub size: f32,
    /// Pixels per frame.
    pub speed: f32,
    /// Top-left corner of the object's bounding box at frame 0.
    pub start: (f32, f32),
    pub object_level: f32,
    pub background_level: f32,
    /// (amplitude, fx, fy, phase) of each background sinusoid.
    pub texture: Vec<(f32, f32, f32, f32)>,
}

fn draw_scene(rng: &mut ChaCha8Rng, label: usize) -> SceneParams {
    let (shape, direction) = decode_label(label);
    let size = rng.random_range(12.0f32..18.0);
    let speed = rng.random_range(1.5f32..3.0);
    let travel = speed * (CLIP_FRAMES - 1) as f32;
    let limit = CLIP_SIZE as f32 - size - 2.0;
    let (dx, dy) = direction.step();
    let mut axis_start = |moving: f32| {
        if moving > 0.0 {
            rng.random_range(2.0..limit - travel)
        } else if moving < 0.0 {
            rng.random_range(2.0 + travel..limit)
        } else {
            rng.random_range(2.0..limit)
        }
    };
    let start = (axis_start(dx), axis_start(dy));
    let background_level = rng.random_range(0.35f32..0.65);
    let contrast = rng.random_range(0.2f32..0.35);
    let object_level = if rng.random_bool(0.5) {
        background_level + contrast
    } else {
        background_level - contrast
    };
    let texture = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02f32..0.05),
                rng.random_range(1.0f32..8.0),
                rng.random_range(1.0f32..8.0),
                rng.random_range(0.0f32..std::f32::consts::TAU),
            )
        })
        .collect();
    SceneParams {
        shape,
        direction,
        size,
        speed,
        start,
        object_level,
        background_level,
        texture,
    }
}

/// Fraction of pixel `(px, py)` covered by the object, by 4x4 supersampling.
fn coverage(scene: &SceneParams, origin: (f32, f32), px: usize, py: usize) -> f32 {
    let half = scene.size / 2.0;
    let (cx, cy) = (origin.0 + half, origin.1 + half);
    let mut hits = 0;
    for sy in 0..4 {
        for sx in 0..4 {
            let x = px as f32 + (sx as f32 + 0.5) / 4.0;
            let y = py as f32 + (sy as f32 + 0.5) / 4.0;
            let inside = match scene.shape {
                Shape::Square => (x - cx).abs() <= half && (y - cy).abs() <= half,
                Shape::Disk => (x - cx).powi(2) + (y - cy).powi(2) <= half * half,
            };
            hits += inside as u32;
        }
    }
    hits as f32 / 16.0
}

/// Renders a scene without noise.
pub fn render(scene: &SceneParams) -> Vec<f32> {
    let n = CLIP_SIZE;
    let mut background = vec![scene.background_level; n * n];
    for (i, b) in background.iter_mut().enumerate() {
        let (x, y) = ((i % n) as f32, (i / n) as f32);
        for &(amp, fx, fy, phase) in &scene.texture {
            *b += amp * (std::f32::consts::TAU * (fx * x + fy * y) / n as f32 + phase).sin();
        }
    }
    let (dx, dy) = scene.direction.step();
    let mut out = Vec::with_capacity(CLIP_FRAMES * n * n);
    for t in 0..CLIP_FRAMES {
        let origin = (
            scene.start.0 + dx * scene.speed * t as f32,
            scene.start.1 + dy * scene.speed * t as f32,
        );
        for py in 0..n {
            for px in 0..n {
                let c = coverage(scene, origin, px, py);
                let bg = background[py * n + px];
                out.push(((1.0 - c) * bg + c * scene.object_level).clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn clip_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream_id() << 40) | index as u64);
    rng
}

/// Clip `index` of the `(seed, split)` dataset; `noise` toggles the additive
/// Gaussian noise (sigma 0.02).
pub fn synth_clip(seed: u64, split: Split, index: usize, noise: bool) -> LabeledClip {
    let label = index % NUM_CLASSES;
    let mut rng = clip_rng(seed, split, index);
    let scene = draw_scene(&mut rng, label);
    let mut samples = render(&scene);
    if noise {
        let normal = Normal::new(0.0f32, NOISE_SIGMA).expect("valid sigma");
        for s in &mut samples {
            *s = (*s + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let clip = VideoClip::luma(CLIP_FRAMES, CLIP_SIZE, CLIP_SIZE, samples).expect("synthetic geometry");
    LabeledClip { clip, label }
}

/// The scene parameters behind [`synth_clip`] for the same key.
pub fn scene_params(seed: u64, split: Split, index: usize) -> SceneParams {
    let mut rng = clip_rng(seed, split, index);
    draw_scene(&mut rng, index % NUM_CLASSES)
}

/// `count` class-balanced labeled clips, deterministic in `seed`.
pub fn synth_dataset(seed: u64, count: usize, split: Split) -> Vec<LabeledClip> {
    (0..count).map(|i| synth_clip(seed, split, i, true)).collect()
}

/// Reference clip used by codec checks.
pub fn standard_clip(seed: u64) -> VideoClip {
    synth_clip(seed, Split::Test, 0, true).clip
}
