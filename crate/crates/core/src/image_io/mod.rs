//! Grayscale images, on-disk formats, ROIs and 32x32 patches.

mod format;
mod patch;
mod roi;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{decode_bytes, load_image, save_image, save_preview_png, ImageFormat, RawSidecar};
pub use patch::{
    augment_rois, slice_patches, Augmentation, LabeledPatch, Patch, PATCH_AREA, PATCH_SIZE,
};
pub use roi::{Label, Roi, RoiSet};

/// Physical range recorded when an image is normalized to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub min: f64,
    pub max: f64,
}

/// Row-major grayscale image.
///
/// `range` is `Some` once the image has been normalized; it holds the
/// original extremes needed to map values back.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    range: Option<ValueRange>,
    warnings: Vec<String>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Size(format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Format(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            pixels,
            range: None,
            warnings: Vec::new(),
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let pixels = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Image::new(width, height, pixels).expect("consistent size")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn range(&self) -> Option<ValueRange> {
        self.range
    }

    pub fn is_normalized(&self) -> bool {
        self.range.is_some()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Smallest and largest pixel values.
    pub fn extremes(&self) -> (f64, f64) {
        self.pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Linear map of the pixel range onto `[0, 1]`.
    ///
    /// A constant image maps to all zeros and records a warning; its value
    /// is still restored by [`Image::denormalize`].
    pub fn normalize(&self) -> Result<Image> {
        if self.range.is_some() {
            return Err(Error::Contract("image is already normalized".into()));
        }
        let (min, max) = self.extremes();
        let mut warnings = self.warnings.clone();
        let span = max - min;
        let pixels = if span > 0.0 {
            self.pixels
                .iter()
                .map(|&p| ((p - min) / span).clamp(0.0, 1.0))
                .collect()
        } else {
            let msg = format!("constant image (value {min}); normalized to all zeros");
            log::warn!("{msg}");
            warnings.push(msg);
            vec![0.0; self.pixels.len()]
        };
        Ok(Image {
            width: self.width,
            height: self.height,
            pixels,
            range: Some(ValueRange { min, max }),
            warnings,
        })
    }

    /// Maps a normalized image back to its recorded physical range.
    pub fn denormalize(&self) -> Result<Image> {
        let range = self
            .range
            .ok_or_else(|| Error::Contract("image is not normalized".into()))?;
        Ok(Image {
            width: self.width,
            height: self.height,
            pixels: self.denormalize_values(&self.pixels, range),
            range: None,
            warnings: self.warnings.clone(),
        })
    }

    fn denormalize_values(&self, values: &[f64], range: ValueRange) -> Vec<f64> {
        let span = range.max - range.min;
        values.iter().map(|&p| p * span + range.min).collect()
    }

    /// A normalized image of the same geometry and range holding `pixels`.
    pub fn with_normalized_pixels(&self, pixels: Vec<f64>) -> Result<Image> {
        let range = self
            .range
            .ok_or_else(|| Error::Contract("source image is not normalized".into()))?;
        let mut img = Image::new(self.width, self.height, pixels)?;
        img.range = Some(range);
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_linear_map() {
        let img = Image::new(3, 1, vec![-1000.0, 0.0, 1000.0]).unwrap();
        let n = img.normalize().unwrap();
        assert_eq!(n.pixels(), &[0.0, 0.5, 1.0]);
        assert_eq!(
            n.range(),
            Some(ValueRange {
                min: -1000.0,
                max: 1000.0
            })
        );
        assert_eq!(n.denormalize().unwrap().pixels(), img.pixels());
    }

    #[test]
    fn constant_image() {
        let img = Image::new(2, 2, vec![500.0; 4]).unwrap();
        let n = img.normalize().unwrap();
        assert!(n.pixels().iter().all(|&p| p == 0.0));
        assert_eq!(n.warnings().len(), 1);
        assert!(n
            .denormalize()
            .unwrap()
            .pixels()
            .iter()
            .all(|&p| p == 500.0));
    }

    #[test]
    fn double_normalize_rejected() {
        let n = Image::new(2, 1, vec![0.0, 1.0])
            .unwrap()
            .normalize()
            .unwrap();
        assert!(n.normalize().is_err());
        assert!(n.denormalize().unwrap().denormalize().is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_tolerance(
            pixels in proptest::collection::vec(-4000.0f64..4000.0, 6..64)
        ) {
            let w = pixels.len();
            let img = Image::new(w, 1, pixels).unwrap();
            let n = img.normalize().unwrap();
            prop_assert!(n.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
            let back = n.denormalize().unwrap();
            for (a, b) in back.pixels().iter().zip(img.pixels()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
