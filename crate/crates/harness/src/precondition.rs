use datagen::{DatasetBundle, LabeledImage, OracleDetector};
use serde::Serialize;

use crate::Result;

/// Images per class used to calibrate the oracle.
pub const CALIBRATION_PER_CLASS: usize = 200;
pub const MIN_TEST_IN: f64 = 0.99;
pub const MIN_TEST_CROSS: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Separability {
    pub threshold: f64,
    pub test_in: f64,
    pub test_cross: f64,
}

impl Separability {
    pub fn holds(&self) -> bool {
        self.test_in >= MIN_TEST_IN && self.test_cross >= MIN_TEST_CROSS
    }
}

/// Calibrates the HH-fraction oracle on training images and scores it on
/// both test splits.
pub fn measure(data: &DatasetBundle) -> Result<Separability> {
    let reals: Vec<LabeledImage> = data.train.reals().take(CALIBRATION_PER_CLASS).cloned().collect();
    let fakes: Vec<LabeledImage> = data.train.fakes().take(CALIBRATION_PER_CLASS).cloned().collect();
    let oracle = OracleDetector::calibrate(&reals, &fakes)?;
    Ok(Separability {
        threshold: oracle.threshold,
        test_in: oracle.accuracy(&data.test_in.images),
        test_cross: oracle.accuracy(&data.test_cross.images),
    })
}

/// Refuses a dataset whose artifact the oracle cannot separate.
pub fn require(data: &DatasetBundle) -> Result<Separability> {
    let s = measure(data)?;
    if !s.holds() {
        return Err(datagen::DataError::Oracle(format!(
            "oracle accuracy test_in {:.4} (need {MIN_TEST_IN}), test_cross {:.4} (need {MIN_TEST_CROSS})",
            s.test_in, s.test_cross
        ))
        .into());
    }
    Ok(s)
}
