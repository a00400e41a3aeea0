//! Implementations of the `osar` subcommands.

use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use osar_core::idsn::write_pairs;
use osar_core::image_io::{load_image, save_image, Image, ImageFormat, RoiSet};
use osar_core::metrics::{compare, region_snr, MetricReport, Region};
use osar_core::pipeline::{
    classify_image, run_pipeline, synthesize_for_image, train_classifier, PipelineConfig, Profile,
    Progress, RunRecord, RunRequest,
};
use osar_core::synthetic::PhantomSpec;
use osar_core::{Error, Result};

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the full pipeline on one image.
    Denoise(DenoiseArgs),
    /// Write the classifier's patch-label map (A = white, N = black).
    Classify(ClassifyArgs),
    /// Dump synthesized dirty/clean pairs.
    Synth(SynthArgs),
    /// Print region statistics as JSON, optionally against a baseline image.
    Metrics(MetricsArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Write the synthetic test phantom and its ROI file.
    Phantom(PhantomArgs),
}

/// Options shared by every command that trains something.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON file of config fields overriding the profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting configuration: `full` or `desk`.
    #[arg(long, default_value = "full")]
    pub profile: String,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<PipelineConfig> {
        let mut config = Profile::parse(&self.profile)?.config();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            let overrides: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            config = config.with_overrides(&overrides)?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub rois: PathBuf,
    /// Image encoding; inferred from the extension when omitted.
    #[arg(long)]
    pub format: Option<String>,
}

impl InputArgs {
    fn format(&self) -> Result<ImageFormat> {
        match &self.format {
            Some(name) => ImageFormat::from_name(name)
                .ok_or_else(|| Error::Format(format!("unknown image format {name:?}"))),
            None => ImageFormat::from_path(&self.image),
        }
    }

    fn load(&self) -> Result<(Image, ImageFormat, RoiSet)> {
        let format = self.format()?;
        let image = load_image(&self.image, Some(format))?;
        let rois = RoiSet::load(&self.rois)?;
        rois.validate_for(&image)?;
        Ok((image, format, rois))
    }
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory; created if missing.
    #[arg(long, default_value = "osar-run")]
    pub out: PathBuf,
    /// Train and infer without the attention branch.
    #[arg(long)]
    pub no_attention: bool,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Pair count; defaults to the profile's.
    #[arg(long)]
    pub count: Option<usize>,
    /// Output pair dump.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// `x,y,w,h`
    #[arg(long, value_parser = parse_region)]
    pub region: Region,
    /// Image the deltas are computed against.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Storage root; `OSAR_DATA_DIR` takes precedence.
    #[arg(long, default_value = "osar-data")]
    pub data_dir: PathBuf,
    /// Configuration that run requests start from.
    #[arg(long, default_value = "desk")]
    pub profile: String,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Image path; the extension picks the format. `.raw` keeps the [0, 1]
    /// values, PNG and PGM store them times 255.
    #[arg(long)]
    pub out: PathBuf,
    /// ROI JSON path.
    #[arg(long)]
    pub rois: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_region(text: &str) -> std::result::Result<Region, String> {
    Region::parse(text).map_err(|e| e.to_string())
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn denoise(args: &DenoiseArgs) -> Result<RunRecord> {
    let mut config = args.config.resolve()?;
    if args.no_attention {
        config.attention_enabled = false;
    }
    let (image, format, rois) = args.input.load()?;
    let run_id = args
        .out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let image_ref = args.input.image.display().to_string();
    let record = run_pipeline(
        &RunRequest {
            run_id: &run_id,
            image: &image,
            image_ref: &image_ref,
            format,
            rois: &rois,
            config: &config,
            run_dir: &args.out,
        },
        &mut |p| match p {
            Progress::Stage(s) => log::info!("stage {}", s.as_str()),
            Progress::Epoch { epoch, loss, .. } => log::info!("epoch {epoch}: loss {loss:.5}"),
        },
    )?;
    for w in &record.warnings {
        log::warn!("{w}");
    }
    print_json(&serde_json::json!({
        "run_dir": args.out,
        "output": args.out.join(&record.output),
        "idsn_accuracy": record.idsn.holdout_accuracy,
        "loss_history": record.aarn.loss_history,
        "metrics": record.metrics,
    }))?;
    Ok(record)
}

pub fn classify(args: &ClassifyArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let (image, _, rois) = args.input.load()?;
    let norm = image.normalize()?;
    let (model, report) = train_classifier(&norm, &rois, &config)?;
    let classes = classify_image(&model, &norm, config.classify_stride)?;
    let map = classes.label_map(image.width(), image.height());
    let white = Image::new(
        map.width(),
        map.height(),
        map.pixels().iter().map(|v| v * 255.0).collect(),
    )?;
    save_image(&white, &args.out, ImageFormat::Png)?;
    print_json(&serde_json::json!({
        "holdout_accuracy": report.holdout_accuracy,
        "a_patches": classes.count(osar_core::image_io::Label::A),
        "n_patches": classes.count(osar_core::image_io::Label::N),
    }))
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let mut config = args.config.resolve()?;
    if let Some(count) = args.count {
        config.pair_count = count;
    }
    let (image, _, rois) = args.input.load()?;
    let pairs = synthesize_for_image(&image.normalize()?, &rois, &config)?;
    write_pairs(&pairs, &args.out)?;
    print_json(&serde_json::json!({
        "pairs": pairs.len(),
        "identity_pairs": pairs.iter().filter(|p| p.is_identity).count(),
        "out": args.out,
    }))
}

pub fn metrics(args: &MetricsArgs) -> Result<MetricReport> {
    let image = load_image(&args.image, None)?;
    let mut report = region_snr(&image, args.region)?;
    if let Some(base) = &args.baseline {
        let before = region_snr(&load_image(base, None)?, args.region)?;
        report = compare(&before, report);
    }
    print_json(&report)?;
    Ok(report)
}

pub fn phantom(args: &PhantomArgs) -> Result<()> {
    let mut spec = PhantomSpec::default();
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let phantom = spec.build();
    let format = ImageFormat::from_path(&args.out)?;
    // integer encodings get the [0, 1] phantom stretched onto 8-bit levels
    let image = match format {
        ImageFormat::Raw => phantom.noisy.clone(),
        _ => Image::from_fn(phantom.noisy.width(), phantom.noisy.height(), |x, y| {
            phantom.noisy.get(x, y) * 255.0
        }),
    };
    save_image(&image, &args.out, format)?;
    phantom.rois.save(&args.rois)?;
    print_json(&serde_json::json!({
        "image": args.out,
        "rois": args.rois,
        "eval_region": phantom.eval_region,
    }))
}
