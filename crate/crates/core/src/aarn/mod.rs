//! Attention-guided artifact reduction network: model, losses, training,
//! inference and checkpoints.

pub mod checkpoint;
mod loss;
mod model;
mod train;

pub use loss::{
    attention_loss, binary_map, multiscale_loss, scale_targets, tape_attention_loss,
    tape_multiscale_loss, total_loss, ARTIFACT_THRESHOLD, ATTENTION_WEIGHTS, SCALE_WEIGHTS,
};
pub use model::{AarnArch, AarnModel, AarnVars, Prediction, ATTENTION_PRIOR, MIN_SIDE};
pub use train::{attention_error, pair_tensors, train_aarn, AarnReport, AarnTrainConfig};

use crate::error::Result;
use crate::image_io::{Image, Patch};

/// Binary artifact map of one pair.
pub fn make_binary_map(dirty: &Patch, clean: &Patch, threshold: f64) -> Result<Vec<f32>> {
    binary_map(&dirty.values, &clean.values, threshold)
}

/// Denoised image (same range as `image`) plus both attention maps as
/// `[0, 1]` planes.
#[derive(Clone, Debug)]
pub struct Inference {
    pub output: Image,
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
}

/// Runs a trained model over a whole normalized image.
pub fn infer(model: &AarnModel<f32>, image: &Image, attention: bool) -> Result<Inference> {
    if !image.is_normalized() {
        return Err(crate::Error::Contract(
            "inference needs a normalized image".into(),
        ));
    }
    let pred = model.predict(image.pixels(), image.width(), image.height(), attention)?;
    Ok(Inference {
        output: image.with_normalized_pixels(pred.output)?,
        a1: pred.a1,
        a2: pred.a2,
    })
}
