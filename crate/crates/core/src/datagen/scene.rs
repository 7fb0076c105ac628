//! Procedural RGB scenes used as clean source images at desk scale.

use image::RgbImage;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::imageops::{from_planes, value_noise};

/// Object names the procedural scenes (and the stub proposer) draw from.
pub const SCENE_VOCABULARY: &[&str] = &[
    "ball", "box", "lamp", "vase", "book", "chair", "cup", "bottle", "plant", "clock", "bag", "hat",
];

enum Shape {
    Rect { r0: f64, c0: f64, r1: f64, c1: f64 },
    Ellipse { cr: f64, cc: f64, rr: f64, rc: f64 },
}

impl Shape {
    fn contains(&self, r: f64, c: f64) -> bool {
        match *self {
            Shape::Rect { r0, c0, r1, c1 } => r >= r0 && r < r1 && c >= c0 && c < c1,
            Shape::Ellipse { cr, cc, rr, rc } => {
                let (y, x) = ((r - cr) / rr, (c - cc) / rc);
                y * y + x * x <= 1.0
            }
        }
    }
}

/// Gradient background, a handful of flat shapes, low-amplitude texture and
/// per-pixel sensor noise. Deterministic given the seed.
pub fn procedural_scene(height: u32, width: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as usize, width as usize);
    let colour = |rng: &mut ChaCha8Rng| [0; 3].map(|_: u8| rng.random_range(20.0..235.0));
    let c0 = colour(&mut rng);
    let c1 = colour(&mut rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let span = (h as f64 * dy.abs() + w as f64 * dx.abs()).max(1.0);

    let n_shapes = rng.random_range(3..=6);
    let shapes: Vec<(Shape, [f64; 3])> = (0..n_shapes)
        .map(|_| {
            let shape = if rng.random_bool(0.5) {
                let (r0, c0) = (
                    rng.random_range(0.0..h as f64),
                    rng.random_range(0.0..w as f64),
                );
                let (sh, sw) = (
                    rng.random_range(0.1..0.45) * h as f64,
                    rng.random_range(0.1..0.45) * w as f64,
                );
                Shape::Rect {
                    r0,
                    c0,
                    r1: r0 + sh,
                    c1: c0 + sw,
                }
            } else {
                Shape::Ellipse {
                    cr: rng.random_range(0.0..h as f64),
                    cc: rng.random_range(0.0..w as f64),
                    rr: rng.random_range(0.05..0.25) * h as f64,
                    rc: rng.random_range(0.05..0.25) * w as f64,
                }
            };
            (shape, colour(&mut rng))
        })
        .collect();

    let texture = [0; 3].map(|_| value_noise(h, w, rng.random_range(4.0..12.0), &mut rng));
    let sensor = Normal::new(0.0, 3.0).expect("valid normal");
    let mut planes = Array3::zeros((3, h, w));
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let t = ((y - h as f64 / 2.0) * dy + (x - w as f64 / 2.0) * dx) / span + 0.5;
            let mut px = [0.0; 3];
            for ch in 0..3 {
                px[ch] = c0[ch] * (1.0 - t) + c1[ch] * t;
            }
            if let Some((_, col)) = shapes.iter().rev().find(|(s, _)| s.contains(y, x)) {
                px = *col;
            }
            for ch in 0..3 {
                planes[[ch, r, c]] = px[ch] + 8.0 * texture[ch][[r, c]] + sensor.sample(&mut rng);
            }
        }
    }
    from_planes(&planes)
}
