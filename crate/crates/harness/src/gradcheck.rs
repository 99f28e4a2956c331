//! The finite-difference suite behind the `gradcheck` command.

use datagen::{make_fake, make_real, Family, LabeledImage};
use fatformer::FatFormer;
use numcore::gradcheck::primitive_suite;
use numcore::{grad_check, GradCheckOptions, GradCheckReport, Tensor};
use serde::Serialize;

use crate::{Result, TrainConfig};

/// Per-tensor budget of the model check. Every tensor is visited; large ones
/// are sampled at a few seeded coordinates.
pub const MODEL_CHECK: GradCheckOptions = GradCheckOptions {
    h: 1e-4,
    tol: 1e-4,
    full_check_limit: 8,
    sampled_coords: 4,
    seed: 0x5eed,
    floor: 1e-6,
    max_halvings: 8,
};

#[derive(Clone, Debug, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub tensors: usize,
    pub coords: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    /// Coordinates differenced with a shortened step because `±h` crossed a kink.
    pub reduced_steps: usize,
    /// Tensors with at least one coordinate over tolerance.
    pub failing: Vec<String>,
}

impl CheckLine {
    fn from_report(name: &str, r: &GradCheckReport) -> Self {
        CheckLine {
            name: name.to_string(),
            tensors: r.tensors.len(),
            coords: r.coords_checked(),
            max_rel_error: r.max_rel_error(),
            passed: r.passed(),
            reduced_steps: r.tensors.iter().map(|t| t.reduced_step.len()).sum(),
            failing: r
                .tensors
                .iter()
                .filter(|t| !t.passed())
                .map(|t| t.name.clone())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSummary {
    pub tol: f64,
    pub sample_seed: u64,
    pub lines: Vec<CheckLine>,
}

impl GradCheckSummary {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.lines.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary fields serialize")
    }
}

/// One real and one gen_A image as a 64-bit batch, labels `[0, 1]`.
pub fn check_batch() -> Result<(Tensor<f64>, Vec<u8>)> {
    let imgs: [LabeledImage; 2] = [make_real(7), make_fake(8, Family::GenA)?];
    let mut data = Vec::new();
    for x in &imgs {
        data.extend(x.to_f64());
    }
    let t = Tensor::new(&[2, 3, 32, 32], data)?;
    Ok((t, imgs.iter().map(|x| x.label).collect()))
}

/// Loss gradient check of the model built from `cfg` at its initialization.
pub fn check_model(cfg: &TrainConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (model, store) = FatFormer::build::<f64>(&cfg.model_config(), cfg.seed)?;
    let (x, y) = check_batch()?;
    Ok(grad_check(&store, |t| Ok(model.loss(t, &x, &y)?.0), opts)?)
}

/// Every primitive, then the model loss: the default model with `full`,
/// otherwise a two-stage model with fewer contexts.
pub fn run_suite(full: bool) -> Result<GradCheckSummary> {
    let prim = GradCheckOptions::default();
    let mut lines = Vec::new();
    for (name, r) in primitive_suite(&prim)? {
        lines.push(CheckLine::from_report(&name, &r));
    }
    let cfg = if full {
        TrainConfig::default()
    } else {
        TrainConfig {
            adapters: 1,
            contexts: 2,
            ..Default::default()
        }
    };
    let name = if full { "model" } else { "model (small)" };
    lines.push(CheckLine::from_report(name, &check_model(&cfg, &MODEL_CHECK)?));
    Ok(GradCheckSummary {
        tol: prim.tol,
        sample_seed: prim.seed,
        lines,
    })
}
