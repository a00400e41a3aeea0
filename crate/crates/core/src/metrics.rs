//! Region statistics: mean, population std, SNR = mean / std, and the
//! percentage deltas used to compare an output against its input.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image_io::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Region {
    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.area() < 4 {
            return Err(Error::Size(format!(
                "region {}x{} has fewer than 4 pixels",
                self.width, self.height
            )));
        }
        if self.x + self.width > width || self.y + self.height > height {
            return Err(Error::Size(format!(
                "region {self:?} leaves the {width}x{height} image"
            )));
        }
        Ok(())
    }

    /// Parses `x,y,w,h`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<usize> = text
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("region must be x,y,w,h; got {text:?}")))?;
        match parts[..] {
            [x, y, width, height] => Ok(Region {
                x,
                y,
                width,
                height,
            }),
            _ => Err(Error::Format(format!(
                "region must be x,y,w,h; got {text:?}"
            ))),
        }
    }

    fn values<'a>(&'a self, image: &'a Image) -> impl Iterator<Item = f64> + 'a {
        (self.y..self.y + self.height).flat_map(move |y| {
            let row = y * image.width();
            image.pixels()[row + self.x..row + self.x + self.width]
                .iter()
                .copied()
        })
    }
}

/// Serializes non-finite values as `null`; `null` reads back as +infinity.
mod finite_or_null {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub region: Region,
    pub mean: f64,
    pub std: f64,
    /// `mean / std`; +infinity (JSON `null`) when the region is constant.
    #[serde(with = "finite_or_null")]
    pub snr: f64,
    pub snr_infinite: bool,
    /// Relative to the input image's same region; `None` when undefined.
    pub delta_snr_pct: Option<f64>,
    pub delta_mean_pct: Option<f64>,
}

/// Mean, population standard deviation and SNR of `region`, in physical
/// units (a normalized image is mapped back first). Deltas start at zero,
/// i.e. the image compared against itself.
pub fn region_snr(image: &Image, region: Region) -> Result<MetricReport> {
    region.validate(image.width(), image.height())?;
    let physical;
    let image = if image.is_normalized() {
        physical = image.denormalize()?;
        &physical
    } else {
        image
    };
    let n = region.area() as f64;
    let mean = region.values(image).sum::<f64>() / n;
    let var = region
        .values(image)
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    let snr = if std > 0.0 { mean / std } else { f64::INFINITY };
    Ok(MetricReport {
        region,
        mean,
        std,
        snr,
        snr_infinite: snr.is_infinite(),
        delta_snr_pct: Some(0.0),
        delta_mean_pct: Some(0.0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub delta_snr_pct: Option<f64>,
    pub delta_mean_pct: Option<f64>,
}

/// `100 * (snr_out - snr_in) / snr_in` and `100 * |mean_out - mean_in| / |mean_in|`.
pub fn improvement(input: &MetricReport, output: &MetricReport) -> Improvement {
    let delta_snr_pct = (input.snr != 0.0 && input.snr.is_finite() && output.snr.is_finite())
        .then(|| 100.0 * (output.snr - input.snr) / input.snr);
    let delta_mean_pct =
        (input.mean != 0.0).then(|| 100.0 * (output.mean - input.mean).abs() / input.mean.abs());
    Improvement {
        delta_snr_pct,
        delta_mean_pct,
    }
}

/// Report for `output` with deltas taken against `input`'s report.
pub fn compare(input: &MetricReport, mut output: MetricReport) -> MetricReport {
    let d = improvement(input, &output);
    output.delta_snr_pct = d.delta_snr_pct;
    output.delta_mean_pct = d.delta_mean_pct;
    output
}

/// Lowest-variance `window x window` square inside `roi`, scanned at
/// stride 1; ties go to the smallest `(y, x)`.
pub fn find_homogeneous_region(image: &Image, roi: Region, window: usize) -> Result<Region> {
    roi.validate(image.width(), image.height())?;
    if roi.width < window || roi.height < window {
        return Err(Error::Size(format!(
            "ROI {}x{} smaller than the {window}x{window} window",
            roi.width, roi.height
        )));
    }
    let mut best: Option<(f64, Region)> = None;
    for y in roi.y..=roi.y + roi.height - window {
        for x in roi.x..=roi.x + roi.width - window {
            let cand = Region {
                x,
                y,
                width: window,
                height: window,
            };
            let v = window_variance(image, cand);
            if best.is_none_or(|(b, _)| v < b) {
                best = Some((v, cand));
            }
        }
    }
    Ok(best.expect("at least one window").1)
}

fn window_variance(image: &Image, r: Region) -> f64 {
    let n = r.area() as f64;
    let mean = r.values(image).sum::<f64>() / n;
    r.values(image).map(|v| (v - mean).powi(2)).sum::<f64>() / n
}
