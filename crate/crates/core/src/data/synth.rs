use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::trimap::{make_trimap, DEFAULT_TRIMAP_KERNEL};
use super::CompositeSample;
use crate::error::{Error, Result};

pub const MIN_SIZE: usize = 32;
pub const MIN_UNKNOWN_FRACTION: f64 = 0.02;
pub const MAX_UNKNOWN_FRACTION: f64 = 0.6;
const MAX_ATTEMPTS: usize = 1000;

/// Full scale of the 16-bit rasters. Alpha lives on multiples of 1/255 and
/// colours on multiples of 1/257, so every composite value is an integer
/// multiple of 1/65535 and survives a 16-bit round trip exactly.
pub const FULL_SCALE: f64 = 65535.0;

fn alpha_level(a: f64) -> u16 {
    (a.clamp(0.0, 1.0) * 255.0).round() as u16
}

fn colour_level(c: f64) -> u16 {
    (c.clamp(0.0, 1.0) * 257.0).round() as u16
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
    soft: f64,
}

impl Ellipse {
    fn alpha(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        let d = ((u * u + v * v).sqrt() - 1.0) * self.rx.min(self.ry);
        (0.5 - d / self.soft).clamp(0.0, 1.0)
    }
}

/// A thin quadratic Bezier curve with partial opacity.
struct Stroke {
    points: Vec<(f64, f64)>,
    opacity: f64,
}

impl Stroke {
    fn alpha(&self, x: f64, y: f64) -> f64 {
        let d = self
            .points
            .iter()
            .map(|&(px, py)| (px - x).powi(2) + (py - y).powi(2))
            .fold(f64::INFINITY, f64::min)
            .sqrt();
        (1.0 - d).max(0.0) * self.opacity
    }
}

fn random_alpha(rng: &mut ChaCha8Rng, size: usize) -> Array2<f64> {
    let s = size as f64;
    let ellipses: Vec<Ellipse> = (0..rng.gen_range(1..=3))
        .map(|_| {
            let t: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            Ellipse {
                cx: rng.gen_range(0.25 * s..0.75 * s),
                cy: rng.gen_range(0.25 * s..0.75 * s),
                rx: rng.gen_range(0.1 * s..0.28 * s),
                ry: rng.gen_range(0.1 * s..0.28 * s),
                cos: t.cos(),
                sin: t.sin(),
                soft: rng.gen_range(1.0..4.0),
            }
        })
        .collect();
    let strokes: Vec<Stroke> = (0..rng.gen_range(1..=4))
        .map(|_| {
            let e = &ellipses[rng.gen_range(0..ellipses.len())];
            // hair-like strands growing out of a blob
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let p0 = (e.cx + 0.8 * e.rx * ang.cos(), e.cy + 0.8 * e.ry * ang.sin());
            let len = rng.gen_range(0.15 * s..0.35 * s);
            let bend: f64 = rng.gen_range(-0.6..0.6);
            let p2 = (p0.0 + len * ang.cos(), p0.1 + len * ang.sin());
            let p1 = (
                (p0.0 + p2.0) / 2.0 - bend * len * ang.sin(),
                (p0.1 + p2.1) / 2.0 + bend * len * ang.cos(),
            );
            let n = (len * 4.0).ceil() as usize;
            let points = (0..=n)
                .map(|i| {
                    let t = i as f64 / n as f64;
                    let a = (1.0 - t) * (1.0 - t);
                    let b = 2.0 * t * (1.0 - t);
                    let c = t * t;
                    (
                        a * p0.0 + b * p1.0 + c * p2.0,
                        a * p0.1 + b * p1.1 + c * p2.1,
                    )
                })
                .collect();
            Stroke {
                points,
                opacity: rng.gen_range(0.6..1.0),
            }
        })
        .collect();
    Array2::from_shape_fn((size, size), |(y, x)| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let a = ellipses.iter().map(|e| e.alpha(fx, fy)).fold(0.0, f64::max);
        strokes.iter().map(|s| s.alpha(fx, fy)).fold(a, f64::max)
    })
}

/// Smooth colour field: a linear gradient between two colours plus a few
/// low-frequency sinusoids.
fn random_colour_field(rng: &mut ChaCha8Rng, size: usize, noise: f64) -> [Array2<f64>; 3] {
    let s = size as f64;
    let c0: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let c1: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let f = rng.gen_range(1.0..4.0) * std::f64::consts::TAU / s;
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            (
                f * a.cos(),
                f * a.sin(),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(-1.0..1.0),
            )
        })
        .collect();
    std::array::from_fn(|ch| {
        Array2::from_shape_fn((size, size), |(y, x)| {
            let (fx, fy) = (x as f64, y as f64);
            let t = ((fx - s / 2.0) * dir.cos() + (fy - s / 2.0) * dir.sin()) / s + 0.5;
            let base = c0[ch] * (1.0 - t) + c1[ch] * t;
            let n: f64 = waves
                .iter()
                .enumerate()
                .map(|(i, &(kx, ky, ph, amp))| {
                    amp * (kx * fx + ky * fy + ph + ch as f64 * (i as f64 + 1.0)).sin()
                })
                .sum();
            colour_level(base + noise * n / 4.0) as f64
        })
    })
}

fn compose(rng: &mut ChaCha8Rng, size: usize) -> Result<CompositeSample> {
    let alpha_levels = random_alpha(rng, size).mapv(|a| alpha_level(a) as f64);
    let fg_levels = random_colour_field(rng, size, 0.05);
    let bg_levels = random_colour_field(rng, size, 0.3);

    let mut image = Array3::zeros((3, size, size));
    let mut fg = Array3::zeros((3, size, size));
    let mut bg = Array3::zeros((3, size, size));
    for ch in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let k = alpha_levels[[y, x]];
                let (jf, jb) = (fg_levels[ch][[y, x]], bg_levels[ch][[y, x]]);
                image[[ch, y, x]] = (k * jf + (255.0 - k) * jb) / FULL_SCALE;
                fg[[ch, y, x]] = jf * 255.0 / FULL_SCALE;
                bg[[ch, y, x]] = jb * 255.0 / FULL_SCALE;
            }
        }
    }
    let alpha = alpha_levels.mapv(|k| k * 257.0 / FULL_SCALE);
    let trimap = make_trimap(&alpha, DEFAULT_TRIMAP_KERNEL)?;
    Ok(CompositeSample {
        image,
        fg,
        bg,
        alpha,
        trimap,
    })
}

/// Procedural composite of soft ellipses and thin strands over a smooth
/// background. Draws are repeated until the unknown region covers between 2%
/// and 60% of the image.
pub fn synth_sample(seed: u64, size: usize) -> Result<CompositeSample> {
    if size < MIN_SIZE {
        return Err(Error::InvalidArgument(format!(
            "sample size must be >= {MIN_SIZE}, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let s = compose(&mut rng, size)?;
        let f = s.unknown_fraction();
        if (MIN_UNKNOWN_FRACTION..=MAX_UNKNOWN_FRACTION).contains(&f) {
            return Ok(s);
        }
    }
    Err(Error::Invariant(format!(
        "no sample with an admissible unknown region after {MAX_ATTEMPTS} draws (seed {seed})"
    )))
}
