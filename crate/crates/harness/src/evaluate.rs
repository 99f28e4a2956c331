use datagen::{LabeledImage, Split};
use serde::Serialize;

use crate::batch::stack;
use crate::checkpoint::Checkpoint;
use crate::metrics::{accuracy, average_precision, mean};
use crate::Result;

/// Images per forward pass at evaluation time.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitMetrics {
    pub split: String,
    pub count: usize,
    pub acc: f64,
    /// Absent when the split holds a single class.
    pub ap: Option<f64>,
    pub ap_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub splits: Vec<SplitMetrics>,
    pub acc_m: f64,
    /// Mean over the splits where AP is defined.
    pub ap_m: f64,
    pub loss_curve: Vec<f32>,
    pub config_fingerprint: String,
    pub dataset_hash: String,
}

impl EvalReport {
    pub fn split(&self, name: &str) -> Option<&SplitMetrics> {
        self.splits.iter().find(|s| s.split == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report fields serialize")
    }
}

/// `P̂(fake)` for every image, evaluated on the unaugmented pixels.
pub fn fake_probabilities(ck: &Checkpoint, images: &[LabeledImage]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        out.extend(ck.model.fake_probabilities(&ck.store, &stack(&refs))?);
    }
    Ok(out)
}

pub fn metrics_for(name: &str, images: &[LabeledImage], p_fake: &[f64]) -> Result<SplitMetrics> {
    let labels: Vec<u8> = images.iter().map(|x| x.label).collect();
    let acc = accuracy(p_fake, &labels)?;
    let (ap, ap_error) = match average_precision(p_fake, &labels) {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(SplitMetrics {
        split: name.to_string(),
        count: images.len(),
        acc,
        ap,
        ap_error,
    })
}

pub fn evaluate(ck: &Checkpoint, split: &Split) -> Result<SplitMetrics> {
    let p = fake_probabilities(ck, &split.images)?;
    metrics_for(split.kind.name(), &split.images, &p)
}

pub fn assemble(ck: &Checkpoint, splits: Vec<SplitMetrics>, dataset_hash: &str) -> EvalReport {
    let accs: Vec<f64> = splits.iter().map(|s| s.acc).collect();
    let aps: Vec<f64> = splits.iter().filter_map(|s| s.ap).collect();
    EvalReport {
        acc_m: mean(&accs),
        ap_m: mean(&aps),
        splits,
        loss_curve: ck.loss_curve.clone(),
        config_fingerprint: ck.config.fingerprint(),
        dataset_hash: dataset_hash.to_string(),
    }
}

pub fn evaluate_splits(ck: &Checkpoint, splits: &[&Split], dataset_hash: &str) -> Result<EvalReport> {
    let m = splits.iter().map(|s| evaluate(ck, s)).collect::<Result<Vec<_>>>()?;
    Ok(assemble(ck, m, dataset_hash))
}
