use datagen::io::manifest_hash;
use datagen::{DatasetBundle, LabeledImage, Split};
use fatformer::FatFormer;
use numcore::{AdamConfig, AdamState, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::batch::{augment, stack};
use crate::checkpoint::Checkpoint;
use crate::evaluate::{evaluate_splits, fake_probabilities, EvalReport};
use crate::metrics::accuracy;
use crate::{HarnessError, Result, TrainConfig};

/// Shuffling and augmentation stream of one epoch.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainHistory {
    /// Loss of the first batch, before any update.
    pub initial_loss: f32,
    /// Mean batch loss of every epoch.
    pub loss_curve: Vec<f32>,
    pub val_acc: Vec<f64>,
    pub lr: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    /// Final evaluation on test_in and test_cross.
    pub report: EvalReport,
}

/// Untrained model state for a config: parameters from the config seed and
/// fresh optimizer moments.
pub fn initial_checkpoint(cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let (model, store) = FatFormer::build::<f32>(&cfg.model_config(), cfg.seed)?;
    let adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
        },
        &store,
    );
    Ok(Checkpoint {
        config: cfg.clone(),
        model,
        store,
        adam,
        epoch: 0,
        loss_curve: Vec::new(),
    })
}

fn batch_tensor(split: &Split, idx: &[usize], rng: Option<&mut ChaCha8Rng>) -> Tensor<f32> {
    let imgs: Vec<&LabeledImage> = idx.iter().map(|&i| &split.images[i]).collect();
    let mut t = stack(&imgs);
    if let Some(rng) = rng {
        let per = t.len() / idx.len();
        for chunk in t.data_mut().chunks_mut(per) {
            let out = augment(chunk, rng);
            chunk.copy_from_slice(&out);
        }
    }
    t
}

/// Runs the configured epochs on the train split. Each epoch reshuffles with
/// its own seeded stream, applies augmentation when enabled, and is followed
/// by a validation pass.
pub fn train(cfg: &TrainConfig, data: &DatasetBundle) -> Result<TrainOutcome> {
    train_with(cfg, data, |_, _| {})
}

/// As [`train`], calling `on_epoch(epoch, history)` after every epoch.
pub fn train_with(
    cfg: &TrainConfig,
    data: &DatasetBundle,
    mut on_epoch: impl FnMut(usize, &TrainHistory),
) -> Result<TrainOutcome> {
    let mut ck = initial_checkpoint(cfg)?;
    let split = &data.train;
    if split.is_empty() {
        return Err(HarnessError::Config("empty training split".into()));
    }
    let labels = split.labels();
    let mut history = TrainHistory {
        initial_loss: f32::NAN,
        loss_curve: Vec::new(),
        val_acc: Vec::new(),
        lr: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..split.len()).collect();
        order.shuffle(&mut rng);
        ck.adam.config.lr = cfg.lr_at(epoch);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = batch_tensor(split, idx, cfg.augment.then_some(&mut rng));
            let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            let grads = {
                let mut tape = Tape::with_params(&ck.store);
                let (loss, _) = ck.model.loss(&mut tape, &x, &y)?;
                let l = tape.item(loss);
                if !l.is_finite() {
                    let norms = ck
                        .store
                        .norms()
                        .iter()
                        .map(|(n, v)| format!("{n}={v:.3e}"))
                        .collect::<Vec<_>>()
                        .join(", ");
                    return Err(HarnessError::NonFinite { epoch, batch: b, norms });
                }
                if epoch == 0 && b == 0 {
                    history.initial_loss = l;
                }
                total += f64::from(l);
                batches += 1;
                tape.backward(loss)?
            };
            ck.store.accumulate(&grads);
            if cfg.grad_clip > 0.0 {
                ck.store.clip_grad_norm(cfg.grad_clip);
            }
            ck.adam.step(&mut ck.store)?;
            ck.model.clamp_tau(&mut ck.store);
        }
        ck.epoch = epoch + 1;
        let mean = (total / batches as f64) as f32;
        ck.loss_curve.push(mean);
        history.loss_curve.push(mean);
        history.lr.push(ck.adam.config.lr);
        let p = fake_probabilities(&ck, &data.val.images)?;
        history.val_acc.push(accuracy(&p, &data.val.labels())?);
        on_epoch(epoch, &history);
    }
    let report = evaluate_splits(&ck, &[&data.test_in, &data.test_cross], &manifest_hash(data))?;
    Ok(TrainOutcome {
        checkpoint: ck,
        history,
        report,
    })
}
