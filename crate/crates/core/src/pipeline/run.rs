use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::record::{write_atomic, RunRecord, StageTiming};
use crate::aarn::{self, checkpoint, AarnArch, AarnModel};
use crate::error::{Error, Result};
use crate::idsn::{
    classify_patches, extract_artifact_pattern, synthesize_pairs, train_idsn, write_pairs,
    ArtifactPattern, IdsnModel, IdsnReport, PairedPatch,
};
use crate::image_io::{
    augment_rois, load_image, save_image, save_preview_png, slice_patches, Image, ImageFormat,
    Label, Patch, RoiSet,
};
use crate::metrics::{compare, region_snr, Region};
use crate::tensor::Rng;

const AUGMENT_STREAM: u64 = u64::MAX - 1;
const IDSN_STREAM: u64 = u64::MAX - 2;
const AARN_INIT_STREAM: u64 = u64::MAX - 3;
const AARN_TRAIN_STREAM: u64 = u64::MAX - 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Normalize,
    Augment,
    TrainIdsn,
    Classify,
    Extract,
    Synthesize,
    TrainAarn,
    Infer,
    Save,
    Metrics,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Normalize => "normalize",
            Stage::Augment => "augment",
            Stage::TrainIdsn => "train_idsn",
            Stage::Classify => "classify",
            Stage::Extract => "extract",
            Stage::Synthesize => "synthesize",
            Stage::TrainAarn => "train_aarn",
            Stage::Infer => "infer",
            Stage::Save => "save",
            Stage::Metrics => "metrics",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Progress {
    Stage(Stage),
    Epoch {
        stage: Stage,
        epoch: usize,
        loss: f64,
    },
}

/// Creates `<data_dir>/runs/<uuid>` and returns its id and path.
pub fn new_run_dir(data_dir: &Path) -> Result<(String, PathBuf)> {
    let id = uuid::Uuid::new_v4().simple().to_string();
    let dir = data_dir.join("runs").join(&id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok((id, dir))
}

struct Timer<'a> {
    timings: Vec<StageTiming>,
    current: Option<(Stage, Instant)>,
    progress: &'a mut dyn FnMut(Progress),
}

impl Timer<'_> {
    fn enter(&mut self, stage: Stage) {
        self.close();
        (self.progress)(Progress::Stage(stage));
        self.current = Some((stage, Instant::now()));
    }

    fn close(&mut self) {
        if let Some((stage, start)) = self.current.take() {
            self.timings.push(StageTiming {
                stage: stage.as_str().into(),
                seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
}

fn check_rois(image: &Image, rois: &RoiSet) -> Result<()> {
    rois.validate_for(image)?;
    if rois.count(Label::A) == 0 {
        return Err(Error::NoArtifactPatches);
    }
    if rois.count(Label::N) == 0 {
        return Err(Error::Contract(
            "at least one N-labelled ROI is required".into(),
        ));
    }
    Ok(())
}

/// Augments the ROIs of a normalized image and trains the patch classifier.
pub fn train_classifier(
    normalized: &Image,
    rois: &RoiSet,
    config: &PipelineConfig,
) -> Result<(IdsnModel, IdsnReport)> {
    check_rois(normalized, rois)?;
    let mut rng = Rng::derive(config.seed, AUGMENT_STREAM);
    let samples = augment_rois(&rois.rois, normalized, &mut rng, config.augment_per_class)?;
    train_idsn(
        &samples,
        &mut Rng::derive(config.seed, IDSN_STREAM),
        &config.idsn(),
    )
}

/// Grid patches of an image with their predicted labels.
#[derive(Clone, Debug)]
pub struct Classification {
    pub patches: Vec<Patch>,
    pub labels: Vec<Label>,
}

impl Classification {
    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Per-pixel map: 1 where the last covering patch is `A`, else 0.
    pub fn label_map(&self, width: usize, height: usize) -> Image {
        let mut map = vec![0.0; width * height];
        for (p, &l) in self.patches.iter().zip(&self.labels) {
            let (x0, y0) = p.origin;
            let v = if l == Label::A { 1.0 } else { 0.0 };
            for y in y0..y0 + crate::image_io::PATCH_SIZE {
                map[y * width + x0..y * width + x0 + crate::image_io::PATCH_SIZE].fill(v);
            }
        }
        Image::new(width, height, map).expect("map matches image size")
    }
}

pub fn classify_image(
    model: &IdsnModel,
    normalized: &Image,
    stride: usize,
) -> Result<Classification> {
    let patches = slice_patches(normalized, stride)?;
    let labels = classify_patches(model, &patches)?;
    Ok(Classification { patches, labels })
}

/// Zero-mean patterns of every `A` patch; an empty harvest is an error.
pub fn harvest_patterns(classes: &Classification) -> Result<Vec<ArtifactPattern>> {
    let patterns: Vec<ArtifactPattern> = classes
        .patches
        .iter()
        .zip(&classes.labels)
        .filter(|(_, &l)| l == Label::A)
        .map(|(p, _)| extract_artifact_pattern(p))
        .collect();
    if patterns.is_empty() {
        return Err(Error::NoArtifactPatches);
    }
    Ok(patterns)
}

/// Classifier, harvest and synthesis for one normalized image.
pub fn synthesize_for_image(
    normalized: &Image,
    rois: &RoiSet,
    config: &PipelineConfig,
) -> Result<Vec<PairedPatch>> {
    let (model, _) = train_classifier(normalized, rois, config)?;
    let classes = classify_image(&model, normalized, config.classify_stride)?;
    let patterns = harvest_patterns(&classes)?;
    let pool = slice_patches(normalized, config.pool_stride)?;
    synthesize_pairs(
        &patterns,
        &pool,
        config.pair_count,
        config.identity_fraction,
        config.seed,
    )
}

/// Inputs of [`run_pipeline`].
pub struct RunRequest<'a> {
    pub run_id: &'a str,
    /// Physical-unit input image.
    pub image: &'a Image,
    /// How the input is referred to in the record (usually its path).
    pub image_ref: &'a str,
    /// Encoding used for `output.<ext>`.
    pub format: ImageFormat,
    pub rois: &'a RoiSet,
    pub config: &'a PipelineConfig,
    pub run_dir: &'a Path,
}

/// Runs every stage and persists the artifacts and `record.json` under
/// `run_dir`. On failure, artifacts of completed stages stay on disk.
pub fn run_pipeline(req: &RunRequest<'_>, progress: &mut dyn FnMut(Progress)) -> Result<RunRecord> {
    let started = Instant::now();
    let config = req.config;
    config.validate()?;
    let dir = req.run_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(
        &dir.join("config.json"),
        &serde_json::to_vec_pretty(config)?,
    )?;
    req.rois.save(&dir.join("rois.json"))?;

    let mut t = Timer {
        timings: Vec::new(),
        current: None,
        progress,
    };

    t.enter(Stage::Normalize);
    let normalized = req.image.normalize()?;
    check_rois(&normalized, req.rois)?;
    let mut warnings = normalized.warnings().to_vec();

    t.enter(Stage::Augment);
    let mut rng = Rng::derive(config.seed, AUGMENT_STREAM);
    let samples = augment_rois(
        &req.rois.rois,
        &normalized,
        &mut rng,
        config.augment_per_class,
    )?;

    t.enter(Stage::TrainIdsn);
    let (classifier, idsn) = train_idsn(
        &samples,
        &mut Rng::derive(config.seed, IDSN_STREAM),
        &config.idsn(),
    )?;
    drop(samples);
    if idsn.holdout_accuracy < 0.8 {
        warnings.push(format!(
            "classifier held-out accuracy {:.2} is below 0.80; consider adding ROIs",
            idsn.holdout_accuracy
        ));
    }

    t.enter(Stage::Classify);
    let classes = classify_image(&classifier, &normalized, config.classify_stride)?;

    t.enter(Stage::Extract);
    let patterns = harvest_patterns(&classes)?;

    t.enter(Stage::Synthesize);
    let pool = slice_patches(&normalized, config.pool_stride)?;
    let pairs = synthesize_pairs(
        &patterns,
        &pool,
        config.pair_count,
        config.identity_fraction,
        config.seed,
    )?;
    drop(pool);
    if config.save_pairs {
        write_pairs(&pairs, &dir.join("pairs.bin"))?;
    }

    t.enter(Stage::TrainAarn);
    let mut model = AarnModel::<f32>::new(
        AarnArch::default(),
        &mut Rng::derive(config.seed, AARN_INIT_STREAM),
    )?;
    let aarn_report = {
        let progress = &mut *t.progress;
        aarn::train_aarn(
            &mut model,
            &pairs,
            &config.aarn(),
            &mut Rng::derive(config.seed, AARN_TRAIN_STREAM),
            |epoch, loss| {
                progress(Progress::Epoch {
                    stage: Stage::TrainAarn,
                    epoch,
                    loss,
                })
            },
        )?
    };
    drop(pairs);

    t.enter(Stage::Infer);
    let inference = aarn::infer(&model, &normalized, config.attention_enabled)?;
    let output = inference.output.denormalize()?;

    t.enter(Stage::Save);
    let output_name = format!("output.{}", req.format.extension());
    save_image(&output, &dir.join(&output_name), req.format)?;
    let (w, h) = (req.image.width(), req.image.height());
    let attention = ["attention1.png".to_string(), "attention2.png".to_string()];
    for (name, map) in attention.iter().zip([&inference.a1, &inference.a2]) {
        let png = save_preview_png(map, w, h, (0.0, 1.0), 1)?;
        let path = dir.join(name);
        std::fs::write(&path, png).map_err(|e| Error::io(&path, e))?;
    }
    if config.save_checkpoint {
        checkpoint::save(&model, &dir.join("model.ckpt"))?;
    }

    t.enter(Stage::Metrics);
    // score the file as written so later `metrics --baseline` calls agree
    let saved = load_image(&dir.join(&output_name), Some(req.format))?;
    let regions: Vec<Region> = if config.eval_regions.is_empty() {
        req.rois
            .rois
            .iter()
            .filter(|r| r.label == Label::A)
            .map(|r| Region {
                x: r.x,
                y: r.y,
                width: 32,
                height: 32,
            })
            .collect()
    } else {
        config.eval_regions.clone()
    };
    let mut input_metrics = Vec::with_capacity(regions.len());
    let mut metrics = Vec::with_capacity(regions.len());
    for r in regions {
        let before = region_snr(req.image, r)?;
        metrics.push(compare(&before, region_snr(&saved, r)?));
        input_metrics.push(before);
    }
    t.close();

    let record = RunRecord {
        run_id: req.run_id.to_string(),
        input_image: req.image_ref.to_string(),
        width: w,
        height: h,
        rois: req.rois.clone(),
        config: config.clone(),
        idsn,
        a_patches: classes.count(Label::A),
        n_patches: classes.count(Label::N),
        pair_count: config.pair_count,
        aarn: aarn_report,
        input_metrics,
        metrics,
        output: output_name,
        attention,
        timings: t.timings,
        total_seconds: started.elapsed().as_secs_f64(),
        warnings,
    };
    record.save(&dir.join("record.json"))?;
    Ok(record)
}
