use fatformer::dwt2d;
use numcore::Tensor;

use crate::synth::{LabeledImage, CHANNELS, IMAGE_SIZE};
use crate::{DataError, Result};

/// Share of image energy in the diagonal Haar band, over all channels.
pub fn hh_fraction(image: &LabeledImage) -> f64 {
    let n = IMAGE_SIZE;
    let px = image.pixels.data();
    // channel-major [3×h×w] to a [h×w×3] grid
    let mut grid = vec![0.0f64; px.len()];
    for c in 0..CHANNELS {
        for i in 0..n * n {
            grid[i * CHANNELS + c] = f64::from(px[c * n * n + i]);
        }
    }
    let grid = Tensor::new(&[n, n, CHANNELS], grid).expect("grid buffer matches its shape");
    dwt2d(&grid).expect("image side is even").hh_fraction()
}

/// Thresholds the HH fraction; an image scoring above it is called fake.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleDetector {
    pub threshold: f64,
}

impl OracleDetector {
    /// Midpoint between the mean HH fractions of the two calibration sets.
    pub fn calibrate(reals: &[LabeledImage], fakes: &[LabeledImage]) -> Result<Self> {
        if reals.is_empty() || fakes.is_empty() {
            return Err(DataError::Parameter("calibration needs both classes".into()));
        }
        let mean = |xs: &[LabeledImage]| xs.iter().map(hh_fraction).sum::<f64>() / xs.len() as f64;
        let (r, f) = (mean(reals), mean(fakes));
        if f <= r {
            return Err(DataError::Oracle(format!(
                "fake HH fraction {f:.5} does not exceed real {r:.5}"
            )));
        }
        Ok(OracleDetector {
            threshold: 0.5 * (r + f),
        })
    }

    pub fn predict(&self, image: &LabeledImage) -> u8 {
        u8::from(hh_fraction(image) > self.threshold)
    }

    pub fn accuracy(&self, images: &[LabeledImage]) -> f64 {
        if images.is_empty() {
            return 0.0;
        }
        let hits = images.iter().filter(|x| self.predict(x) == x.label).count();
        hits as f64 / images.len() as f64
    }
}
