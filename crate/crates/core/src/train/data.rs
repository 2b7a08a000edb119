//! Procedural 8-class image dataset with coarse structure and fine texture.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mask::GrayMap;
use crate::tokenizer::Image;

pub const NUM_CLASSES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyntheticClass {
    Checker4,
    Checker8,
    Stripes0,
    Stripes45,
    Stripes90,
    Rings,
    Blobs,
    NoiseSquares,
}

impl SyntheticClass {
    pub const ALL: [SyntheticClass; NUM_CLASSES] = [
        SyntheticClass::Checker4,
        SyntheticClass::Checker8,
        SyntheticClass::Stripes0,
        SyntheticClass::Stripes45,
        SyntheticClass::Stripes90,
        SyntheticClass::Rings,
        SyntheticClass::Blobs,
        SyntheticClass::NoiseSquares,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    /// Cycles across the image for the periodic classes.
    pub fn frequency(self) -> Option<usize> {
        match self {
            SyntheticClass::Checker4 => Some(4),
            SyntheticClass::Checker8 => Some(8),
            SyntheticClass::Stripes0 | SyntheticClass::Stripes45 | SyntheticClass::Stripes90 => Some(6),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    /// Number of distinct indices; training draws indices uniformly below this.
    pub size: usize,
    /// Amplitude of the fine texture added on top of the class structure.
    pub texture: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { height: 64, width: 64, size: 1 << 16, texture: 0.08 }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image<f64>,
    pub class_id: usize,
    pub saliency: GrayMap,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Class of `index`: each run of 8 consecutive indices is a seeded
/// permutation of all classes, so class counts are balanced.
pub fn class_of(seed: u64, index: u64) -> usize {
    let mut rng = rng_for(seed ^ 0xc1a5_5e5, index / NUM_CLASSES as u64);
    let mut perm: Vec<usize> = (0..NUM_CLASSES).collect();
    perm.shuffle(&mut rng);
    perm[(index % NUM_CLASSES as u64) as usize]
}

pub fn generate_sample(spec: &SyntheticSpec, seed: u64, index: u64) -> Sample {
    let class_id = class_of(seed, index);
    let image = render(spec, SyntheticClass::from_id(class_id).unwrap(), &mut rng_for(seed, index));
    let saliency = saliency_map(&image);
    Sample { image, class_id, saliency }
}

/// Renders one image of the given class from `rng`.
pub fn render(spec: &SyntheticSpec, class: SyntheticClass, rng: &mut ChaCha8Rng) -> Image<f64> {
    let (h, w) = (spec.height, spec.width);
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] { [rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)] };
    let lum = |c: &[f64; 3]| (c[0] + c[1] + c[2]) / 3.0;
    let (c0, c1) = loop {
        let (a, b) = (color(rng), color(rng));
        if (lum(&a) - lum(&b)).abs() >= 0.4 {
            break (a, b);
        }
    };
    // coarse structure as a blend weight in [0, 1]
    let weight: Vec<f64> = match class {
        SyntheticClass::Checker4 | SyntheticClass::Checker8 => {
            // f full periods means 2f cells per axis
            let f = 2.0 * class.frequency().unwrap() as f64;
            let (py, px) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            grid(h, w, |y, x| {
                let a = ((y as f64 + 0.5) / h as f64 * f + py).floor() as i64;
                let b = ((x as f64 + 0.5) / w as f64 * f + px).floor() as i64;
                if (a + b).rem_euclid(2) == 0 { 1.0 } else { 0.0 }
            })
        }
        SyntheticClass::Stripes0 | SyntheticClass::Stripes45 | SyntheticClass::Stripes90 => {
            let angle = match class {
                SyntheticClass::Stripes0 => 0.0,
                SyntheticClass::Stripes45 => PI / 4.0,
                _ => PI / 2.0,
            };
            let f = class.frequency().unwrap() as f64;
            let phase = rng.gen_range(0.0..2.0 * PI);
            let (dy, dx) = (angle.sin(), angle.cos());
            grid(h, w, |y, x| {
                let u = (x as f64 * dx + y as f64 * dy) / w as f64;
                0.5 + 0.5 * (2.0 * PI * f * u + phase).sin()
            })
        }
        SyntheticClass::Rings => {
            let (cy, cx) = (rng.gen_range(0.3..0.7) * h as f64, rng.gen_range(0.3..0.7) * w as f64);
            let period = rng.gen_range(6.0..10.0);
            grid(h, w, |y, x| {
                let r = (y as f64 + 0.5 - cy).hypot(x as f64 + 0.5 - cx);
                0.5 + 0.5 * (2.0 * PI * r / period).cos()
            })
        }
        SyntheticClass::Blobs => {
            let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(2..5))
                .map(|_| {
                    (
                        rng.gen_range(0.0..h as f64),
                        rng.gen_range(0.0..w as f64),
                        rng.gen_range(0.1..0.25) * w as f64,
                        rng.gen_range(0.5..1.0),
                    )
                })
                .collect();
            grid(h, w, |y, x| {
                let s: f64 = blobs
                    .iter()
                    .map(|&(by, bx, sd, a)| {
                        let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                        a * (-d2 / (2.0 * sd * sd)).exp()
                    })
                    .sum();
                s.min(1.0)
            })
        }
        SyntheticClass::NoiseSquares => {
            let squares: Vec<(usize, usize, usize)> = (0..rng.gen_range(2..4))
                .map(|_| {
                    let side = rng.gen_range(h / 6..h / 3);
                    (rng.gen_range(0..h - side), rng.gen_range(0..w - side), side)
                })
                .collect();
            let noise: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.6..1.0)).collect();
            grid(h, w, |y, x| {
                let inside = squares.iter().any(|&(y0, x0, s)| y >= y0 && y < y0 + s && x >= x0 && x < x0 + s);
                if inside { noise[y * w + x] } else { 0.0 }
            })
        }
    };
    // fine texture: a high-frequency oriented grating plus pixel noise
    let (fy, fx) = (rng.gen_range(12.0..20.0), rng.gen_range(12.0..20.0));
    let tphase = rng.gen_range(0.0..2.0 * PI);
    let texture: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            0.6 * (2.0 * PI * (fy * y / h as f64 + fx * x / w as f64) + tphase).sin() + 0.4 * rng.gen_range(-1.0..1.0)
        })
        .collect();
    Image::from_fn(h, w, |c, y, x| {
        let a = weight[y * w + x];
        let v = c0[c] * (1.0 - a) + c1[c] * a + spec.texture * texture[y * w + x];
        v.clamp(-1.0, 1.0)
    })
}

/// A clip whose frame `t` is the image shifted right by `2t` pixels (wrapping).
pub fn pan_clip(image: &Image<f64>, frames: usize) -> Vec<Image<f64>> {
    let w = image.width;
    (0..frames)
        .map(|t| Image::from_fn(image.height, w, |c, y, x| image.at(c, y, (x + w - (2 * t) % w) % w)))
        .collect()
}

fn grid(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    (0..h * w).map(|i| f(i / w, i % w)).collect()
}

/// Local gradient energy of the luminance (central differences, 5×5 box
/// average), scaled so the maximum is 1.
pub fn saliency_map(img: &Image<f64>) -> GrayMap {
    let (h, w) = (img.height, img.width);
    let lum = |y: usize, x: usize| (0..3).map(|c| img.at(c, y, x)).sum::<f64>() / 3.0;
    let mut energy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let gx = lum(y, (x + 1).min(w - 1)) - lum(y, x.saturating_sub(1));
            let gy = lum((y + 1).min(h - 1), x) - lum(y.saturating_sub(1), x);
            energy[y * w + x] = gx * gx + gy * gy;
        }
    }
    let mut values = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = (y.saturating_sub(2), (y + 3).min(h));
            let (x0, x1) = (x.saturating_sub(2), (x + 3).min(w));
            let mut s = 0.0;
            for yy in y0..y1 {
                for xx in x0..x1 {
                    s += energy[yy * w + xx];
                }
            }
            values[y * w + x] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    GrayMap { height: h, width: w, values }
}
