//! Batches of images as model input, and training-time augmentation.

use datagen::{LabeledImage, CHANNELS, IMAGE_SIZE};
use numcore::Tensor;
use rand::Rng;

/// Largest shift of the random crop, in pixels.
pub const CROP_SHIFT: isize = 2;

pub fn stack(images: &[&LabeledImage]) -> Tensor<f32> {
    let mut data = Vec::with_capacity(images.len() * CHANNELS * IMAGE_SIZE * IMAGE_SIZE);
    for img in images {
        data.extend_from_slice(img.pixels.data());
    }
    Tensor::new(&[images.len(), CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data).expect("image sizes are fixed")
}

fn reflect(i: isize, n: isize) -> usize {
    let m = i.rem_euclid(2 * n - 2);
    (if m >= n { 2 * n - 2 - m } else { m }) as usize
}

/// Random crop of a reflect-padded copy (a shift of up to two pixels each way)
/// followed by a horizontal flip with probability one half.
pub fn augment<R: Rng + ?Sized>(pixels: &[f32], rng: &mut R) -> Vec<f32> {
    let n = IMAGE_SIZE as isize;
    let dy = rng.gen_range(-CROP_SHIFT..=CROP_SHIFT);
    let dx = rng.gen_range(-CROP_SHIFT..=CROP_SHIFT);
    let flip = rng.gen_bool(0.5);
    let mut out = vec![0.0f32; pixels.len()];
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    for c in 0..CHANNELS {
        for y in 0..n {
            for x in 0..n {
                let sx = if flip { n - 1 - x } else { x };
                let src = reflect(y + dy, n) * IMAGE_SIZE + reflect(sx + dx, n);
                out[c * plane + (y * n + x) as usize] = pixels[c * plane + src];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn augmentation_permutes_pixels_of_constant_rows() {
        let px: Vec<f32> = (0..CHANNELS * IMAGE_SIZE * IMAGE_SIZE)
            .map(|i| (i / IMAGE_SIZE) as f32)
            .collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let out = augment(&px, &mut rng);
            // rows are constant, so only the vertical shift can change them
            for row in out.chunks(IMAGE_SIZE) {
                assert!(row.iter().all(|&v| v == row[0]));
            }
        }
    }

    #[test]
    fn reflection_stays_in_range() {
        for i in -2..34 {
            assert!(reflect(i, 32) < 32);
        }
        assert_eq!(reflect(-1, 32), 1);
        assert_eq!(reflect(32, 32), 30);
    }
}
