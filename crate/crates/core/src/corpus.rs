//! Seeded synthetic phantoms: a few soft-edged ellipses over a linear
//! gradient, quantized to 8 bits so they survive a PGM round trip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::Image;

pub fn phantom(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (angle.cos(), angle.sin());
    let base = rng.random_range(0.25..0.45);
    // at least 0.15 of intensity change across the image, so no shard is flat
    let slope = rng.random_range(0.15..0.3);
    let ellipses: Vec<[f64; 6]> = (0..rng.random_range(3..7))
        .map(|_| {
            [
                rng.random_range(0.15..0.85) * width as f64,
                rng.random_range(0.15..0.85) * height as f64,
                rng.random_range(0.08..0.3) * width as f64,
                rng.random_range(0.08..0.3) * height as f64,
                rng.random_range(0.0..std::f64::consts::PI),
                rng.random_range(-0.3..0.35),
            ]
        })
        .collect();
    let (cw, ch) = (width as f64 / 2.0, height as f64 / 2.0);
    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = ((fx - cw) / width as f64) * gx + ((fy - ch) / height as f64) * gy;
            let mut v = base + slope * t;
            for [ex, ey, rx, ry, rot, amp] in &ellipses {
                let (dx, dy) = (fx - ex, fy - ey);
                let u = (dx * rot.cos() + dy * rot.sin()) / rx;
                let w = (-dx * rot.sin() + dy * rot.cos()) / ry;
                let r2 = u * u + w * w;
                if r2 < 1.0 {
                    v += amp * (1.0 - r2).sqrt();
                }
            }
            pixels.push((v.clamp(0.05, 0.95) * 255.0).round() / 255.0);
        }
    }
    Image::new(width, height, pixels).expect("phantom pixels are clamped")
}

/// `count` phantoms with seeds `seed, seed + 1, ...`.
pub fn phantom_corpus(count: usize, width: usize, height: usize, seed: u64) -> Vec<Image> {
    (0..count as u64)
        .map(|i| phantom(width, height, seed.wrapping_add(i)))
        .collect()
}
