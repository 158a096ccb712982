//! Procedural test images: smooth colour gradients with a few flat shapes,
//! a soft texture and mild sensor-like noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image_io::{to_u8, RgbImage};

enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

fn colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(20.0..235.0), rng.gen_range(20.0..235.0), rng.gen_range(20.0..235.0)]
}

/// Deterministic `width x height` image for `seed`.
pub fn synthetic_image(width: usize, height: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let corners = [colour(&mut rng), colour(&mut rng), colour(&mut rng), colour(&mut rng)];
    let shapes: Vec<(Shape, [f64; 3])> = (0..rng.gen_range(3..7))
        .map(|_| {
            let shape = if rng.gen_bool(0.5) {
                let (x0, y0) = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + rng.gen_range(0.1..0.5) * w,
                    y1: y0 + rng.gen_range(0.1..0.5) * h,
                }
            } else {
                Shape::Ellipse {
                    cx: rng.gen_range(0.0..w),
                    cy: rng.gen_range(0.0..h),
                    rx: rng.gen_range(0.05..0.3) * w,
                    ry: rng.gen_range(0.05..0.3) * h,
                }
            };
            (shape, colour(&mut rng))
        })
        .collect();
    let (fx, fy) = (rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4));
    let amp = rng.gen_range(4.0..16.0);
    let noise = rng.gen_range(0.5..3.0);

    let mut pixels = vec![0u8; width * height * 3];
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (x as f64 / w.max(1.0), y as f64 / h.max(1.0));
            let texture = amp * (fx * x as f64).sin() * (fy * y as f64).cos();
            for c in 0..3 {
                let top = corners[0][c] * (1.0 - u) + corners[1][c] * u;
                let bottom = corners[2][c] * (1.0 - u) + corners[3][c] * u;
                let mut value = top * (1.0 - v) + bottom * v;
                if let Some((_, col)) = shapes.iter().rev().find(|(s, _)| s.contains(x as f64, y as f64)) {
                    value = col[c];
                }
                let n: f64 = rng.gen_range(-noise..noise);
                pixels[(y * width + x) * 3 + c] = to_u8(value + texture + n);
            }
        }
    }
    RgbImage {
        width,
        height,
        data: pixels,
    }
}

/// `count` images of one size with seeds `seed, seed + 1, ...`.
pub fn synthetic_images(count: usize, width: usize, height: usize, seed: u64) -> Vec<RgbImage> {
    (0..count as u64).map(|i| synthetic_image(width, height, seed.wrapping_add(i))).collect()
}
