use serde::{Deserialize, Serialize};

use super::loss::{
    binary_map, scale_targets, tape_attention_loss, tape_multiscale_loss, ARTIFACT_THRESHOLD,
};
use super::model::AarnModel;
use crate::error::{Error, Result};
use crate::idsn::{patch_batch, PairedPatch};
use crate::image_io::Patch;
use crate::tensor::{kernels, AdamConfig, Rng, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AarnTrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub threshold: f64,
    pub attention: bool,
    /// Samples per forward/backward pass; gradients of the chunks of one
    /// batch are summed before the single optimizer step. Bounds memory only.
    pub chunk_size: usize,
}

impl Default for AarnTrainConfig {
    fn default() -> Self {
        AarnTrainConfig {
            batch_size: 270,
            max_epochs: 4,
            lr: 0.0005,
            threshold: ARTIFACT_THRESHOLD,
            attention: true,
            chunk_size: 30,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AarnReport {
    /// Mean total loss per epoch.
    pub loss_history: Vec<f64>,
    /// Mean attention term per epoch (zero with attention off).
    pub attention_history: Vec<f64>,
    pub steps: u64,
}

/// Dirty batch, clean batch and artifact map for a set of pairs.
pub fn pair_tensors(pairs: &[&PairedPatch], threshold: f64) -> Result<[Tensor<f32>; 3]> {
    let dirty: Vec<&Patch> = pairs.iter().map(|p| &p.dirty).collect();
    let clean: Vec<&Patch> = pairs.iter().map(|p| &p.clean).collect();
    let dirty = patch_batch(&dirty);
    let clean = patch_batch(&clean);
    let map = Tensor::new(
        clean.shape(),
        binary_map(dirty.data(), clean.data(), threshold)?,
    )?;
    Ok([dirty, clean, map])
}

struct ChunkLoss {
    total: f64,
    attention: f64,
}

fn chunk_step(
    model: &mut AarnModel<f32>,
    chunk: &[&PairedPatch],
    config: &AarnTrainConfig,
    weight: f64,
) -> Result<ChunkLoss> {
    let [dirty, clean, map] = pair_tensors(chunk, config.threshold)?;
    let targets = scale_targets(&clean)?;
    let tape = Tape::new();
    let bound = model.params().bind(&tape);
    let v = model.forward(&tape, &bound, tape.constant(dirty), config.attention)?;
    let [t5, t7, t9] = targets.map(|t| tape.constant(t));
    let multiscale = tape_multiscale_loss(&tape, [v.f5, v.f7, v.out], [t5, t7, t9])?;
    let (loss, attention) = if config.attention {
        let att = tape_attention_loss(&tape, v.a1, v.a2, tape.constant(map))?;
        (tape.add(att, multiscale)?, att.item()? as f64)
    } else {
        (multiscale, 0.0)
    };
    let total = loss.item()? as f64;
    if !total.is_finite() {
        return Err(Error::Contract(format!("training loss became {total}")));
    }
    let grads = tape.backward(loss)?;
    model.params_mut().accumulate_grads(&bound, &grads, weight);
    Ok(ChunkLoss { total, attention })
}

/// Adam on the combined loss over shuffled mini-batches; `on_epoch` sees
/// each finished epoch's index (from 1) and mean loss.
pub fn train_aarn(
    model: &mut AarnModel<f32>,
    pairs: &[PairedPatch],
    config: &AarnTrainConfig,
    rng: &mut Rng,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<AarnReport> {
    if pairs.is_empty() {
        return Err(Error::Contract(
            "autoencoder training needs at least one pair".into(),
        ));
    }
    if config.batch_size == 0 || config.chunk_size == 0 {
        return Err(Error::Config(
            "batch and chunk sizes must be positive".into(),
        ));
    }
    let mut adam = model.params().adam(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<&PairedPatch> = pairs.iter().collect();
    let mut report = AarnReport::default();
    for epoch in 1..=config.max_epochs {
        rng.shuffle(&mut order);
        let (mut total, mut attention) = (0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            model.params_mut().clear_grads();
            for chunk in batch.chunks(config.chunk_size) {
                let w = chunk.len() as f64 / batch.len() as f64;
                let l = chunk_step(model, chunk, config, w)?;
                total += l.total * chunk.len() as f64;
                attention += l.attention * chunk.len() as f64;
            }
            model.params_mut().adam_step(&mut adam)?;
        }
        let n = pairs.len() as f64;
        report.loss_history.push(total / n);
        report.attention_history.push(attention / n);
        log::info!("aarn epoch {epoch}: loss {:.6}", total / n);
        on_epoch(epoch, total / n);
    }
    model.params_mut().clear_grads();
    report.steps = adam.steps();
    Ok(report)
}

/// Mean `MSE(A2, M)` over `pairs`, evaluated without training.
pub fn attention_error(
    model: &AarnModel<f32>,
    pairs: &[PairedPatch],
    threshold: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract(
            "attention error needs at least one pair".into(),
        ));
    }
    let refs: Vec<&PairedPatch> = pairs.iter().collect();
    let mut sum = 0.0;
    for chunk in refs.chunks(64) {
        let [dirty, _, map] = pair_tensors(chunk, threshold)?;
        let tape = Tape::new();
        let bound = model.params().bind_frozen(&tape);
        let v = model.forward(&tape, &bound, tape.constant(dirty), true)?;
        sum += kernels::mse(&v.a2.value(), &map)? as f64 * chunk.len() as f64;
    }
    Ok(sum / pairs.len() as f64)
}
