//! Internal data synthesis: the A/N patch classifier, artifact-pattern
//! harvesting and dirty/clean pair synthesis.

mod pairs;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{Label, LabeledPatch, Patch, PATCH_AREA, PATCH_SIZE};
use crate::nn::{Conv, Dense, Params};
use crate::tensor::{AdamConfig, Rng, Tape, Tensor};

pub use pairs::{
    extract_artifact_pattern, read_pairs, superpose, synthesize_pairs, write_pairs,
    ArtifactPattern, PairedPatch,
};

/// Stacks patches into a `B x 1 x 32 x 32` batch.
pub fn patch_batch(patches: &[&Patch]) -> Tensor<f32> {
    let mut data = Vec::with_capacity(patches.len() * PATCH_AREA);
    for p in patches {
        data.extend_from_slice(&p.values);
    }
    Tensor::new(&[patches.len(), 1, PATCH_SIZE, PATCH_SIZE], data).expect("non-empty batch")
}

/// Three strided 3x3 convolutions (16/32/64 channels) and two FC layers.
#[derive(Clone, Debug)]
pub struct IdsnModel {
    params: Params<f32>,
    convs: [Conv; 3],
    hidden: Dense,
    out: Dense,
}

impl IdsnModel {
    pub const HIDDEN: usize = 128;

    pub fn new(rng: &mut Rng) -> Result<Self> {
        let mut params = Params::new();
        let convs = [
            Conv::new(&mut params, "conv1", 1, 16, 3, 1, rng)?,
            Conv::new(&mut params, "conv2", 16, 32, 3, 2, rng)?,
            Conv::new(&mut params, "conv3", 32, 64, 3, 2, rng)?,
        ];
        let flat = 64 * (PATCH_SIZE / 4) * (PATCH_SIZE / 4);
        let hidden = Dense::new(&mut params, "fc1", flat, Self::HIDDEN, rng)?;
        let out = Dense::new(&mut params, "fc2", Self::HIDDEN, 2, rng)?;
        Ok(IdsnModel {
            params,
            convs,
            hidden,
            out,
        })
    }

    pub fn params(&self) -> &Params<f32> {
        &self.params
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape<f32>,
        bound: &crate::nn::Bound<'t, f32>,
        batch: Tensor<f32>,
    ) -> Result<crate::tensor::Var<'t, f32>> {
        let mut h = tape.constant(batch);
        for conv in &self.convs {
            h = tape.relu(conv.forward(tape, bound, h)?)?;
        }
        let h = tape.flatten(h)?;
        let h = tape.relu(self.hidden.forward(tape, bound, h)?)?;
        self.out.forward(tape, bound, h)
    }

    /// Raw `[A, N]` logits per patch.
    pub fn logits(&self, patches: &[&Patch]) -> Result<Vec<[f32; 2]>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(256) {
            let tape = Tape::new();
            let bound = self.params.bind_frozen(&tape);
            let logits = self.forward(&tape, &bound, patch_batch(chunk))?.value();
            out.extend(logits.data().chunks(2).map(|c| [c[0], c[1]]));
        }
        Ok(out)
    }
}

/// Argmax label; an exact tie goes to `N` so ambiguous patches are never harvested.
pub fn label_from_logits(logits: [f32; 2]) -> Label {
    if logits[Label::A.class_index()] > logits[Label::N.class_index()] {
        Label::A
    } else {
        Label::N
    }
}

/// One label per patch, in input order.
pub fn classify_patches(model: &IdsnModel, patches: &[Patch]) -> Result<Vec<Label>> {
    let refs: Vec<&Patch> = patches.iter().collect();
    Ok(model
        .logits(&refs)?
        .into_iter()
        .map(label_from_logits)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdsnTrainConfig {
    pub max_epochs: usize,
    /// Stop after this many epochs without a held-out improvement: higher
    /// accuracy, or equal accuracy with lower cross-entropy.
    pub patience: usize,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub lr: f64,
}

impl Default for IdsnTrainConfig {
    fn default() -> Self {
        IdsnTrainConfig {
            max_epochs: 30,
            patience: 5,
            batch_size: 32,
            holdout_fraction: 0.2,
            lr: 0.0005,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdsnReport {
    /// Accuracy of the returned (best) weights on the held-out split.
    pub holdout_accuracy: f64,
    pub train_size: usize,
    pub holdout_size: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub loss_history: Vec<f64>,
    pub accuracy_history: Vec<f64>,
}

/// Held-out accuracy and mean cross-entropy.
fn evaluate(model: &IdsnModel, patches: &[&LabeledPatch]) -> Result<(f64, f64)> {
    if patches.is_empty() {
        return Ok((0.0, f64::INFINITY));
    }
    let refs: Vec<&Patch> = patches.iter().map(|p| &p.patch).collect();
    let logits = model.logits(&refs)?;
    let mut hits = 0;
    let mut loss = 0.0;
    for (l, p) in logits.iter().zip(patches) {
        if label_from_logits(*l) == p.label {
            hits += 1;
        }
        let (a, b) = (l[0] as f64, l[1] as f64);
        let max = a.max(b);
        let lse = max + ((a - max).exp() + (b - max).exp()).ln();
        loss += lse - l[p.label.class_index()] as f64;
    }
    let n = patches.len() as f64;
    Ok((hits as f64 / n, loss / n))
}

/// Whether `(accuracy, loss)` beats `best`: higher accuracy, or equal
/// accuracy with lower loss.
fn improves(candidate: (f64, f64), best: (f64, f64)) -> bool {
    candidate.0 > best.0 || (candidate.0 == best.0 && candidate.1 < best.1)
}

/// Trains the classifier with softmax cross-entropy and Adam, holding out a
/// fraction of the (shuffled) patches for early stopping and reporting.
pub fn train_idsn(
    patches: &[LabeledPatch],
    rng: &mut Rng,
    config: &IdsnTrainConfig,
) -> Result<(IdsnModel, IdsnReport)> {
    for label in [Label::A, Label::N] {
        if !patches.iter().any(|p| p.label == label) {
            return Err(Error::Contract(format!(
                "classifier training needs both classes; no {label} patches"
            )));
        }
    }
    if config.batch_size == 0 || config.max_epochs == 0 {
        return Err(Error::Config(
            "batch size and epoch budget must be positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..patches.len()).collect();
    rng.shuffle(&mut order);
    let holdout_len = ((patches.len() as f64) * config.holdout_fraction).round() as usize;
    let holdout_len = holdout_len.min(patches.len().saturating_sub(1));
    let (held, train) = order.split_at(holdout_len);
    let held: Vec<&LabeledPatch> = held.iter().map(|&i| &patches[i]).collect();
    let mut train: Vec<&LabeledPatch> = train.iter().map(|&i| &patches[i]).collect();

    let mut model = IdsnModel::new(rng)?;
    let mut adam = model.params.adam(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut best = (evaluate(&model, &held)?, model.params.clone(), 0);
    let mut loss_history = Vec::new();
    let mut accuracy_history = Vec::new();
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        rng.shuffle(&mut train);
        let mut epoch_loss = 0.0;
        for batch in train.chunks(config.batch_size) {
            let refs: Vec<&Patch> = batch.iter().map(|p| &p.patch).collect();
            let labels: Vec<usize> = batch.iter().map(|p| p.label.class_index()).collect();
            let tape = Tape::new();
            let bound = model.params.bind(&tape);
            let logits = model.forward(&tape, &bound, patch_batch(&refs))?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            epoch_loss += loss.item()? as f64 * batch.len() as f64;
            let grads = tape.backward(loss)?;
            model.params.clear_grads();
            model.params.accumulate_grads(&bound, &grads, 1.0);
            model.params.adam_step(&mut adam)?;
        }
        loss_history.push(epoch_loss / train.len() as f64);
        let score = evaluate(&model, &held)?;
        accuracy_history.push(score.0);
        log::debug!(
            "idsn epoch {epoch}: loss {:.4} holdout acc {:.3}",
            loss_history[epoch - 1],
            score.0
        );
        if improves(score, best.0) {
            best = (score, model.params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let epochs_run = loss_history.len();
    let ((holdout_accuracy, _), params, best_epoch) = best;
    model.params = params;
    model.params.clear_grads();
    Ok((
        model,
        IdsnReport {
            holdout_accuracy,
            train_size: train.len(),
            holdout_size: held.len(),
            epochs_run,
            best_epoch,
            loss_history,
            accuracy_history,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_goes_to_n() {
        assert_eq!(label_from_logits([0.3, 0.3]), Label::N);
        assert_eq!(label_from_logits([0.31, 0.3]), Label::A);
        assert_eq!(label_from_logits([-1.0, 2.0]), Label::N);
    }

    #[test]
    fn layer_layout() {
        let m = IdsnModel::new(&mut Rng::new(0)).unwrap();
        // 3 convs + 2 FC layers, each a weight and a bias
        assert_eq!(m.params().len(), 10);
        let shapes: Vec<Vec<usize>> = m.params().iter().map(|(_, t)| t.shape().to_vec()).collect();
        assert_eq!(shapes[0], vec![16, 1, 3, 3]);
        assert_eq!(shapes[6], vec![128, 4096]);
        assert_eq!(shapes[8], vec![2, 128]);
    }

    #[test]
    fn classify_preserves_order_and_count() {
        let m = IdsnModel::new(&mut Rng::new(1)).unwrap();
        let patches: Vec<Patch> = (0..7).map(|i| Patch::filled(i as f32 / 7.0)).collect();
        let labels = classify_patches(&m, &patches).unwrap();
        assert_eq!(labels.len(), 7);
        for (i, p) in patches.iter().enumerate() {
            assert_eq!(
                classify_patches(&m, std::slice::from_ref(p)).unwrap()[0],
                labels[i]
            );
        }
    }

    #[test]
    fn single_class_is_contract_error() {
        let data = vec![
            LabeledPatch {
                patch: Patch::filled(0.5),
                label: Label::A
            };
            4
        ];
        assert!(matches!(
            train_idsn(&data, &mut Rng::new(0), &IdsnTrainConfig::default()),
            Err(Error::Contract(_))
        ));
    }
}
