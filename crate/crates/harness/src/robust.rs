//! Evaluation under test-time perturbations.

use datagen::io::manifest_hash;
use datagen::perturb::PERTURBATIONS;
use datagen::{perturb, DatasetBundle, LabeledImage, PerturbationConfig, Split};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::evaluate::{assemble, fake_probabilities, metrics_for, EvalReport};
use crate::Result;

#[derive(Clone, Debug, Serialize)]
pub struct RobustnessRow {
    pub perturbation: String,
    pub report: EvalReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub fn row(&self, name: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.perturbation == name).map(|r| &r.report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report fields serialize")
    }
}

/// Seed of the perturbation stream for one image under one setting.
pub fn image_seed(image_seed: u64, setting: usize) -> u64 {
    image_seed ^ (setting as u64 + 1).wrapping_mul(0xd1b5_4a32_d192_ed03)
}

/// Settings run for a base config: clean, each enabled perturbation alone on
/// every image, and the base config itself when anything is enabled.
pub fn settings(cfg: &PerturbationConfig) -> Vec<(String, PerturbationConfig)> {
    let mut out = vec![("clean".to_string(), PerturbationConfig::none())];
    let flags = [cfg.crop, cfg.blur, cfg.jpeg, cfg.noise];
    for (name, on) in PERTURBATIONS.iter().zip(flags) {
        if on {
            let mut single = PerturbationConfig {
                crop: false,
                blur: false,
                jpeg: false,
                noise: false,
                probability: 1.0,
                ..cfg.clone()
            };
            match *name {
                "crop" => single.crop = true,
                "blur" => single.blur = true,
                "jpeg" => single.jpeg = true,
                _ => single.noise = true,
            }
            out.push((name.to_string(), single));
        }
    }
    if cfg.any_enabled() {
        out.push(("combined".to_string(), cfg.clone()));
    }
    out
}

fn perturbed(split: &Split, cfg: &PerturbationConfig, setting: usize) -> Vec<LabeledImage> {
    split
        .images
        .iter()
        .map(|x| perturb(x, cfg, image_seed(x.seed, setting)))
        .collect()
}

/// Reports on test_in and test_cross for every setting of `cfg`.
pub fn robustness_eval(ck: &Checkpoint, data: &DatasetBundle, cfg: &PerturbationConfig) -> Result<RobustnessReport> {
    let hash = manifest_hash(data);
    let mut rows = Vec::new();
    for (i, (name, c)) in settings(cfg).into_iter().enumerate() {
        let mut metrics = Vec::new();
        for split in [&data.test_in, &data.test_cross] {
            let images = perturbed(split, &c, i);
            let p = fake_probabilities(ck, &images)?;
            metrics.push(metrics_for(split.kind.name(), &images, &p)?);
        }
        rows.push(RobustnessRow {
            perturbation: name,
            report: assemble(ck, metrics, &hash),
        });
    }
    Ok(RobustnessReport { rows })
}
