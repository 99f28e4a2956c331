//! Test-time degradations: random crop and resize, Gaussian blur, block-DCT
//! quantization and additive Gaussian noise, in that fixed order.

use numcore::standard_normal;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

use crate::synth::{LabeledImage, CHANNELS, IMAGE_SIZE};

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationConfig {
    pub crop: bool,
    pub blur: bool,
    pub jpeg: bool,
    pub noise: bool,
    /// Chance that each enabled perturbation fires.
    pub probability: f64,
    /// Inclusive side range of the square crop.
    pub crop_side: (usize, usize),
    pub blur_sigma: (f64, f64),
    /// Inclusive quality-factor range.
    pub jpeg_quality: (u32, u32),
    pub noise_sigma: (f64, f64),
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            crop: true,
            blur: true,
            jpeg: true,
            noise: true,
            probability: 0.5,
            crop_side: (28, 32),
            blur_sigma: (0.5, 1.5),
            jpeg_quality: (30, 90),
            noise_sigma: (0.01, 0.05),
        }
    }
}

impl PerturbationConfig {
    pub fn none() -> Self {
        PerturbationConfig {
            crop: false,
            blur: false,
            jpeg: false,
            noise: false,
            ..Default::default()
        }
    }

    /// The named perturbation alone, applied to every image.
    pub fn only(name: &str) -> Option<Self> {
        let mut c = PerturbationConfig {
            probability: 1.0,
            ..Self::none()
        };
        match name {
            "crop" => c.crop = true,
            "blur" => c.blur = true,
            "jpeg" => c.jpeg = true,
            "noise" => c.noise = true,
            _ => return None,
        }
        Some(c)
    }

    pub fn any_enabled(&self) -> bool {
        self.crop || self.blur || self.jpeg || self.noise
    }
}

pub const PERTURBATIONS: [&str; 4] = ["crop", "blur", "jpeg", "noise"];

type Plane = Vec<f64>;

fn planes(image: &LabeledImage) -> Vec<Plane> {
    image
        .to_f64()
        .chunks(IMAGE_SIZE * IMAGE_SIZE)
        .map(<[f64]>::to_vec)
        .collect()
}

/// Bilinear resize of the `side×side` window at `(top, left)` back to full size.
fn crop_resize(p: &[f64], top: usize, left: usize, side: usize) -> Plane {
    let n = IMAGE_SIZE;
    let scale = side as f64 / n as f64;
    let mut out = vec![0.0; n * n];
    let coord = |d: usize| {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(side - 1);
        (i0, i1, s - i0 as f64)
    };
    for y in 0..n {
        let (y0, y1, fy) = coord(y);
        for x in 0..n {
            let (x0, x1, fx) = coord(x);
            let at = |yy: usize, xx: usize| p[(top + yy) * n + left + xx];
            let a = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let b = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out[y * n + x] = a * (1.0 - fy) + b * fy;
        }
    }
    out
}

/// Separable Gaussian blur with mirrored borders.
fn blur(p: &[f64], sigma: f64) -> Plane {
    let n = IMAGE_SIZE as isize;
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let mirror = |i: isize| {
        let m = i.rem_euclid(2 * n - 2);
        (if m >= n { 2 * n - 2 - m } else { m }) as usize
    };
    let nu = n as usize;
    let mut tmp = vec![0.0; nu * nu];
    for y in 0..nu {
        for x in 0..nu {
            tmp[y * nu + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * p[y * nu + mirror(x as isize + d)])
                .sum();
        }
    }
    let mut out = vec![0.0; nu * nu];
    for y in 0..nu {
        for x in 0..nu {
            out[y * nu + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * tmp[mirror(y as isize + d) * nu + x])
                .sum();
        }
    }
    out
}

const LUMA_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69.,
    56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81.,
    104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Quantization steps for a quality factor, with the usual IJG scaling.
pub fn quant_table(quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0; 64];
    for (o, b) in t.iter_mut().zip(LUMA_TABLE) {
        *o = ((b * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    t
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
        }
    }
    c
}

/// Orthonormal 8×8 DCT of every block, rounding to multiples of the
/// quantization step, and back.
fn dct_quantize(p: &[f64], quality: u32) -> Plane {
    let n = IMAGE_SIZE;
    let q = quant_table(quality);
    let c = dct_basis();
    let mut out = vec![0.0; n * n];
    for by in (0..n).step_by(8) {
        for bx in (0..n).step_by(8) {
            let mut blk = [[0.0; 8]; 8];
            for y in 0..8 {
                for x in 0..8 {
                    blk[y][x] = p[(by + y) * n + bx + x] * 255.0 - 128.0;
                }
            }
            let mut coef = [[0.0; 8]; 8];
            for u in 0..8 {
                for v in 0..8 {
                    let mut s = 0.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            s += c[u][y] * c[v][x] * blk[y][x];
                        }
                    }
                    let step = q[u * 8 + v];
                    coef[u][v] = (s / step).round() * step;
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    let mut s = 0.0;
                    for u in 0..8 {
                        for v in 0..8 {
                            s += c[u][y] * c[v][x] * coef[u][v];
                        }
                    }
                    out[(by + y) * n + bx + x] = (s + 128.0) / 255.0;
                }
            }
        }
    }
    out
}

/// Applies the enabled perturbations in the order crop, blur, DCT quantization,
/// noise. Every draw comes from a stream seeded by `seed` alone, and each step
/// consumes its decision draw whether or not it is enabled, so the choices of
/// one step do not shift the others.
pub fn perturb(image: &LabeledImage, cfg: &PerturbationConfig, seed: u64) -> LabeledImage {
    if !cfg.any_enabled() {
        return image.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chans = planes(image);
    let n = IMAGE_SIZE;

    let fire = rng.gen::<f64>() < cfg.probability;
    if cfg.crop && fire {
        let side = rng.gen_range(cfg.crop_side.0..=cfg.crop_side.1).clamp(1, n);
        let top = rng.gen_range(0..=n - side);
        let left = rng.gen_range(0..=n - side);
        chans = chans.iter().map(|p| crop_resize(p, top, left, side)).collect();
    }
    let fire = rng.gen::<f64>() < cfg.probability;
    if cfg.blur && fire {
        let sigma = sample(&mut rng, cfg.blur_sigma);
        chans = chans.iter().map(|p| blur(p, sigma)).collect();
    }
    let fire = rng.gen::<f64>() < cfg.probability;
    if cfg.jpeg && fire {
        let quality = rng.gen_range(cfg.jpeg_quality.0..=cfg.jpeg_quality.1);
        chans = chans.iter().map(|p| dct_quantize(p, quality)).collect();
    }
    let fire = rng.gen::<f64>() < cfg.probability;
    if cfg.noise && fire {
        let sigma = sample(&mut rng, cfg.noise_sigma);
        for p in &mut chans {
            p.iter_mut().for_each(|v| *v += sigma * standard_normal(&mut rng));
        }
    }
    debug_assert_eq!(chans.len(), CHANNELS);
    LabeledImage::new(chans.concat(), image.family, image.seed)
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}
