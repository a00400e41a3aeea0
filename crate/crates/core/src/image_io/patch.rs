use serde::{Deserialize, Serialize};

use super::{Image, Label, Roi};
use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const PATCH_SIZE: usize = 32;
pub const PATCH_AREA: usize = PATCH_SIZE * PATCH_SIZE;

/// Largest ROI shift used by augmentation, in pixels.
const MAX_SHIFT: i64 = 4;

/// A 32x32 window of a normalized image, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub values: Vec<f32>,
    pub origin: (usize, usize),
}

impl Patch {
    pub fn new(values: Vec<f32>, origin: (usize, usize)) -> Result<Self> {
        if values.len() != PATCH_AREA {
            return Err(Error::dim(format!(
                "patch needs {PATCH_AREA} values, got {}",
                values.len()
            )));
        }
        Ok(Patch { values, origin })
    }

    pub fn filled(value: f32) -> Self {
        Patch {
            values: vec![value; PATCH_AREA],
            origin: (0, 0),
        }
    }

    /// Copies the window with top-left corner `(x, y)` out of `image`.
    pub fn from_image(image: &Image, x: usize, y: usize) -> Result<Self> {
        if x + PATCH_SIZE > image.width() || y + PATCH_SIZE > image.height() {
            return Err(Error::Size(format!(
                "32x32 window at ({x}, {y}) leaves the {}x{} image",
                image.width(),
                image.height()
            )));
        }
        let mut values = Vec::with_capacity(PATCH_AREA);
        for row in y..y + PATCH_SIZE {
            let start = row * image.width() + x;
            values.extend(
                image.pixels()[start..start + PATCH_SIZE]
                    .iter()
                    .map(|&v| v as f32),
            );
        }
        Ok(Patch {
            values,
            origin: (x, y),
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * PATCH_SIZE + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / PATCH_AREA as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.values
            .iter()
            .map(|&v| (v as f64 - m).powi(2))
            .sum::<f64>()
            / PATCH_AREA as f64
    }
}

/// Window origins along one axis: every `stride` pixels, with the last
/// window clamped to the far edge so the border is covered.
fn axis_origins(len: usize, stride: usize) -> Vec<usize> {
    let last = len - PATCH_SIZE;
    let mut origins: Vec<usize> = (0..=last).step_by(stride).collect();
    if *origins.last().expect("at least origin 0") != last {
        origins.push(last);
    }
    origins
}

/// Cuts a normalized image into 32x32 patches, row by row.
pub fn slice_patches(image: &Image, stride: usize) -> Result<Vec<Patch>> {
    if stride == 0 {
        return Err(Error::Contract("patch stride must be positive".into()));
    }
    if image.width() < PATCH_SIZE || image.height() < PATCH_SIZE {
        return Err(Error::Size(format!(
            "image {}x{} is smaller than one {PATCH_SIZE}x{PATCH_SIZE} patch",
            image.width(),
            image.height()
        )));
    }
    let xs = axis_origins(image.width(), stride);
    let ys = axis_origins(image.height(), stride);
    ys.iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .map(|(x, y)| Patch::from_image(image, x, y))
        .collect()
}

/// Orientation change applied to an ROI window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Augmentation {
    Identity,
    FlipHorizontal,
    FlipVertical,
    Rotate90,
    Rotate180,
    Rotate270,
}

impl Augmentation {
    pub const ALL: [Augmentation; 6] = [
        Augmentation::Identity,
        Augmentation::FlipHorizontal,
        Augmentation::FlipVertical,
        Augmentation::Rotate90,
        Augmentation::Rotate180,
        Augmentation::Rotate270,
    ];

    /// Transforms a patch; rotations are clockwise.
    pub fn apply(self, patch: &Patch) -> Patch {
        let n = PATCH_SIZE;
        let src = |x: usize, y: usize| patch.values[y * n + x];
        let values = (0..n)
            .flat_map(|y| (0..n).map(move |x| (x, y)))
            .map(|(x, y)| match self {
                Augmentation::Identity => src(x, y),
                Augmentation::FlipHorizontal => src(n - 1 - x, y),
                Augmentation::FlipVertical => src(x, n - 1 - y),
                Augmentation::Rotate90 => src(y, n - 1 - x),
                Augmentation::Rotate180 => src(n - 1 - x, n - 1 - y),
                Augmentation::Rotate270 => src(n - 1 - y, x),
            })
            .collect();
        Patch {
            values,
            origin: patch.origin,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    pub patch: Patch,
    pub label: Label,
}

/// Draws a shift of up to +-4 px that keeps the window inside the image.
fn shifted_origin(roi: &Roi, image: &Image, rng: &mut Rng) -> (usize, usize) {
    let max_x = (image.width() - PATCH_SIZE) as i64;
    let max_y = (image.height() - PATCH_SIZE) as i64;
    loop {
        let dx = rng.below(2 * MAX_SHIFT as usize + 1) as i64 - MAX_SHIFT;
        let dy = rng.below(2 * MAX_SHIFT as usize + 1) as i64 - MAX_SHIFT;
        let (x, y) = (roi.x as i64 + dx, roi.y as i64 + dy);
        if (0..=max_x).contains(&x) && (0..=max_y).contains(&y) {
            return (x as usize, y as usize);
        }
    }
}

/// Builds a class-balanced training set of `per_class` patches per label.
///
/// Each class starts with its ROIs as annotated, then fills up with random
/// shift + flip/rotation variants of randomly chosen ROIs of that class.
pub fn augment_rois(
    rois: &[Roi],
    image: &Image,
    rng: &mut Rng,
    per_class: usize,
) -> Result<Vec<LabeledPatch>> {
    if !image.is_normalized() {
        return Err(Error::Contract(
            "augmentation needs a normalized image".into(),
        ));
    }
    let mut out = Vec::with_capacity(2 * per_class);
    for label in [Label::A, Label::N] {
        let pool: Vec<&Roi> = rois.iter().filter(|r| r.label == label).collect();
        if pool.is_empty() {
            return Err(Error::Contract(format!("no ROIs labelled {label}")));
        }
        for roi in &pool {
            if !roi.fits(image.width(), image.height()) {
                return Err(Error::Size(format!(
                    "ROI at ({}, {}) leaves the image",
                    roi.x, roi.y
                )));
            }
        }
        for i in 0..per_class {
            let patch = if i < pool.len() {
                Patch::from_image(image, pool[i].x, pool[i].y)?
            } else {
                let roi = pool[rng.below(pool.len())];
                let (x, y) = shifted_origin(roi, image, rng);
                let aug = Augmentation::ALL[rng.below(Augmentation::ALL.len())];
                aug.apply(&Patch::from_image(image, x, y)?)
            };
            out.push(LabeledPatch { patch, label });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| (x * 3 + y * 7) as f64)
            .normalize()
            .unwrap()
    }

    #[test]
    fn grid_64() {
        let origins: Vec<_> = slice_patches(&ramp(64, 64), 32)
            .unwrap()
            .iter()
            .map(|p| p.origin)
            .collect();
        assert_eq!(origins, vec![(0, 0), (32, 0), (0, 32), (32, 32)]);
    }

    #[test]
    fn grid_48_clamps() {
        let origins: Vec<_> = slice_patches(&ramp(48, 48), 32)
            .unwrap()
            .iter()
            .map(|p| p.origin)
            .collect();
        assert_eq!(origins, vec![(0, 0), (16, 0), (0, 16), (16, 16)]);
    }

    #[test]
    fn count_formula_256_stride_16() {
        // ceil((256 - 32) / 16) + 1 = 15 per axis
        assert_eq!(slice_patches(&ramp(256, 256), 16).unwrap().len(), 225);
    }

    #[test]
    fn too_small() {
        assert!(matches!(
            slice_patches(&ramp(31, 64), 32),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn identity_and_involutions() {
        let p = Patch::from_image(&ramp(40, 40), 3, 5).unwrap();
        assert_eq!(Augmentation::Identity.apply(&p), p);
        let r = Augmentation::Rotate180;
        assert_eq!(r.apply(&r.apply(&p)), p);
        let quarter = Augmentation::Rotate90.apply(&p);
        assert_eq!(Augmentation::Rotate270.apply(&quarter), p);
        assert_ne!(quarter, p);
    }

    #[test]
    fn balanced_counts() {
        let img = ramp(128, 128);
        let rois = [
            Roi {
                x: 0,
                y: 0,
                label: Label::A,
            },
            Roi {
                x: 10,
                y: 40,
                label: Label::A,
            },
            Roi {
                x: 90,
                y: 90,
                label: Label::A,
            },
            Roi {
                x: 96,
                y: 0,
                label: Label::A,
            },
            Roi {
                x: 50,
                y: 50,
                label: Label::N,
            },
            Roi {
                x: 0,
                y: 96,
                label: Label::N,
            },
            Roi {
                x: 60,
                y: 20,
                label: Label::N,
            },
        ];
        let out = augment_rois(&rois, &img, &mut Rng::new(3), 500).unwrap();
        assert_eq!(out.len(), 1000);
        assert_eq!(out.iter().filter(|p| p.label == Label::A).count(), 500);
        // annotated windows come first, unmodified
        assert_eq!(out[0].patch, Patch::from_image(&img, 0, 0).unwrap());
    }

    #[test]
    fn single_class_rejected() {
        let rois = [Roi {
            x: 0,
            y: 0,
            label: Label::A,
        }];
        assert!(augment_rois(&rois, &ramp(64, 64), &mut Rng::new(1), 10).is_err());
    }

    proptest! {
        #[test]
        fn orientation_preserves_multiset(seed in 0u64..1000, which in 0usize..6) {
            let mut rng = Rng::new(seed);
            let p = Patch::new((0..PATCH_AREA).map(|_| rng.uniform(0.0, 1.0) as f32).collect(), (0, 0)).unwrap();
            let q = Augmentation::ALL[which].apply(&p);
            let mut a = p.values.clone();
            let mut b = q.values.clone();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn slicing_covers_every_pixel(w in 32usize..100, h in 32usize..100, stride in 1usize..=32) {
            let img = Image::from_fn(w, h, |_, _| 0.0).normalize().unwrap();
            let mut seen = vec![false; w * h];
            for p in slice_patches(&img, stride).unwrap() {
                for y in 0..PATCH_SIZE {
                    for x in 0..PATCH_SIZE {
                        seen[(p.origin.1 + y) * w + p.origin.0 + x] = true;
                    }
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
        }
    }
}
