use numcore::{standard_normal, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{DataError, Result};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

/// Artifact strength in pixel units.
pub const DEFAULT_AMPLITUDE: f64 = 0.06;

const FIELD_SIGMA: f64 = 2.0;
const FIELD_RADIUS: isize = 8;
const GEN_B_GAINS: [f64; CHANNELS] = [1.03, 0.97, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Real,
    GenA,
    GenB,
}

impl Family {
    pub fn code(self) -> u8 {
        match self {
            Family::Real => 0,
            Family::GenA => 1,
            Family::GenB => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Family::Real),
            1 => Ok(Family::GenA),
            2 => Ok(Family::GenB),
            _ => Err(DataError::Parameter(format!("unknown family code {code}"))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Family::Real => "real",
            Family::GenA => "gen_A",
            Family::GenB => "gen_B",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "real" => Ok(Family::Real),
            "gen_A" => Ok(Family::GenA),
            "gen_B" => Ok(Family::GenB),
            _ => Err(DataError::Parameter(format!("unknown family {tag:?}"))),
        }
    }

    pub fn label(self) -> u8 {
        u8::from(self != Family::Real)
    }
}

/// `pixels` is `[3×32×32]` in `[0, 1]`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor<f32>,
    pub label: u8,
    pub family: Family,
    pub seed: u64,
}

impl LabeledImage {
    pub fn new(pixels: Vec<f64>, family: Family, seed: u64) -> Self {
        let data = pixels.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
        LabeledImage {
            pixels: Tensor::new(&[CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data).expect("image buffer has 3·32·32 values"),
            label: family.label(),
            family,
            seed,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.data().iter().map(|&v| f64::from(v)).collect()
    }
}

fn gaussian_kernel(sigma: f64, radius: isize) -> Vec<f64> {
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable convolution of one `n×n` plane with periodic boundaries.
fn smooth_wrapped(plane: &[f64], n: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let wrap = |i: isize| i.rem_euclid(n as isize) as usize;
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = (-r..=r)
                .map(|k| kernel[(k + r) as usize] * plane[y * n + wrap(x as isize + k)])
                .sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = (-r..=r)
                .map(|k| kernel[(k + r) as usize] * tmp[wrap(y as isize + k) * n + x])
                .sum();
        }
    }
    out
}

/// Smoothed random field before quantization to `f32`.
fn real_field(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = IMAGE_SIZE;
    let kernel = gaussian_kernel(FIELD_SIGMA, FIELD_RADIUS);
    let mut out = Vec::with_capacity(PIXELS);
    for _ in 0..CHANNELS {
        let noise: Vec<f64> = (0..n * n).map(|_| standard_normal(&mut rng)).collect();
        out.extend(smooth_wrapped(&noise, n, &kernel));
    }
    let lo = out.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    out.iter_mut().for_each(|v| *v = (*v - lo) / span);
    out
}

pub fn make_real(seed: u64) -> LabeledImage {
    LabeledImage::new(real_field(seed), Family::Real, seed)
}

pub fn make_fake(seed: u64, family: Family) -> Result<LabeledImage> {
    make_fake_with(seed, family, DEFAULT_AMPLITUDE)
}

/// `+1` on the checkerboard's even sites for gen_A (period 2), and a period-4
/// pattern for gen_B whose every aligned 2×2 block is still a pure diagonal.
fn pattern(family: Family, i: usize, j: usize) -> f64 {
    let s = |k: usize| match family {
        Family::GenA => k.is_multiple_of(2),
        _ => k.div_ceil(2).is_multiple_of(2),
    };
    if s(i) == s(j) {
        1.0
    } else {
        -1.0
    }
}

/// Fake built from the real field of `seed`: 2× box downsample, nearest
/// upsample, then the family's periodic pattern scaled by `amplitude`.
/// Amplitude 0 disables the artifact and returns the real image unchanged.
pub fn make_fake_with(seed: u64, family: Family, amplitude: f64) -> Result<LabeledImage> {
    if family == Family::Real {
        return Err(DataError::Parameter("fakes need a generator family".into()));
    }
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(DataError::Parameter(format!("artifact amplitude {amplitude}")));
    }
    let base = real_field(seed);
    if amplitude == 0.0 {
        return Ok(LabeledImage::new(base, family, seed));
    }
    let n = IMAGE_SIZE;
    let mut out = vec![0.0; PIXELS];
    for c in 0..CHANNELS {
        let gain = if family == Family::GenB { GEN_B_GAINS[c] } else { 1.0 };
        let plane = &base[c * n * n..(c + 1) * n * n];
        for by in 0..n / 2 {
            for bx in 0..n / 2 {
                let at = |y: usize, x: usize| plane[(2 * by + y) * n + 2 * bx + x];
                let mean = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
                for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let (i, j) = (2 * by + y, 2 * bx + x);
                    out[c * n * n + i * n + j] = gain * mean + amplitude * pattern(family, i, j);
                }
            }
        }
    }
    Ok(LabeledImage::new(out, family, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(2.0, 8);
        assert_eq!(k.len(), 17);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k[0], k[16]);
    }

    #[test]
    fn patterns_are_diagonal_on_aligned_blocks() {
        for family in [Family::GenA, Family::GenB] {
            for bi in 0..8 {
                for bj in 0..8 {
                    let (i, j) = (2 * bi, 2 * bj);
                    let p = |y: usize, x: usize| pattern(family, i + y, j + x);
                    assert_eq!(p(0, 0), p(1, 1));
                    assert_eq!(p(0, 1), p(1, 0));
                    assert_eq!(p(0, 0), -p(0, 1));
                }
            }
        }
        // gen_B repeats every four pixels, not two
        assert_ne!(pattern(Family::GenB, 0, 0), pattern(Family::GenB, 0, 2));
        assert_eq!(pattern(Family::GenB, 0, 0), pattern(Family::GenB, 0, 4));
    }

    #[test]
    fn family_codes_round_trip() {
        for f in [Family::Real, Family::GenA, Family::GenB] {
            assert_eq!(Family::from_code(f.code()).unwrap(), f);
            assert_eq!(Family::from_tag(f.tag()).unwrap(), f);
        }
        assert!(Family::from_code(3).is_err());
        assert!(Family::from_tag("gen_C").is_err());
    }
}
