//! Synthetic phantom with additive Gaussian noise and a matching ROI set.
//!
//! Used by the test suites, the benches and the `phantom` CLI command.

use crate::image_io::{Image, Label, Roi, RoiSet};
use crate::metrics::Region;
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub size: usize,
    pub background: f64,
    pub disk_value: f64,
    /// Center x, center y, radius.
    pub disk: (f64, f64, f64),
    pub rect_value: f64,
    /// x, y, width, height.
    pub rect: (usize, usize, usize, usize),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 256,
            background: 0.5,
            disk_value: 0.8,
            disk: (80.0, 90.0, 40.0),
            rect_value: 0.2,
            rect: (150, 140, 70, 70),
            noise_sigma: 0.05,
            seed: 2024,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub clean: Image,
    pub noisy: Image,
    /// 4 A-type ROIs on plain background and 3 N-type ROIs on shape edges.
    pub rois: RoiSet,
    /// Background window that overlaps no ROI, for SNR checks.
    pub eval_region: Region,
}

impl PhantomSpec {
    fn value_at(&self, x: usize, y: usize) -> f64 {
        let (cx, cy, r) = self.disk;
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (rx, ry, rw, rh) = self.rect;
        if (px - cx).powi(2) + (py - cy).powi(2) <= r * r {
            self.disk_value
        } else if (rx..rx + rw).contains(&x) && (ry..ry + rh).contains(&y) {
            self.rect_value
        } else {
            self.background
        }
    }

    pub fn build(&self) -> Phantom {
        let clean = Image::from_fn(self.size, self.size, |x, y| self.value_at(x, y));
        let mut rng = Rng::new(self.seed);
        let noisy = Image::from_fn(self.size, self.size, |x, y| {
            clean.get(x, y) + rng.normal(0.0, self.noise_sigma)
        });
        Phantom {
            spec: self.clone(),
            clean,
            noisy,
            rois: RoiSet::new(default_rois()),
            eval_region: Region {
                x: 200,
                y: 70,
                width: 32,
                height: 32,
            },
        }
    }
}

/// The seven annotations used throughout the tests, laid out for the
/// default 256x256 phantom.
pub fn default_rois() -> Vec<Roi> {
    let a = |x, y| Roi {
        x,
        y,
        label: Label::A,
    };
    let n = |x, y| Roi {
        x,
        y,
        label: Label::N,
    };
    vec![
        a(4, 4),
        a(200, 10),
        a(10, 190),
        a(150, 60),
        n(104, 74),  // right edge of the disk
        n(64, 34),   // top edge of the disk
        n(134, 124), // top-left corner of the rectangle
    ]
}

/// Twenty further annotations that extend [`default_rois`] to 27.
pub fn extra_rois() -> Vec<Roi> {
    let a = |x, y| Roi {
        x,
        y,
        label: Label::A,
    };
    let n = |x, y| Roi {
        x,
        y,
        label: Label::N,
    };
    vec![
        a(60, 4),
        a(120, 4),
        a(220, 100),
        a(4, 140),
        a(60, 200),
        a(100, 224),
        a(224, 224),
        a(62, 72),   // disk interior
        a(170, 160), // rectangle interior
        a(224, 40),
        n(24, 74),   // left edge of the disk
        n(64, 114),  // bottom edge of the disk
        n(93, 108),  // lower-right arc of the disk
        n(204, 124), // top-right corner of the rectangle
        n(134, 194), // bottom-left corner of the rectangle
        n(204, 194), // bottom-right corner of the rectangle
        n(170, 124), // top edge of the rectangle
        n(134, 160), // left edge of the rectangle
        n(30, 50),   // upper-left arc of the disk
        n(94, 44),   // upper-right arc of the disk
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rois_sit_where_intended() {
        let p = PhantomSpec::default().build();
        let mut rois = default_rois();
        rois.extend(extra_rois());
        assert_eq!(rois.len(), 27);
        for roi in rois {
            let mut values = std::collections::BTreeSet::new();
            for y in roi.y..roi.y + 32 {
                for x in roi.x..roi.x + 32 {
                    values.insert((p.clean.get(x, y) * 10.0).round() as i64);
                }
            }
            match roi.label {
                Label::A => assert_eq!(values.len(), 1, "A roi {roi:?} not uniform"),
                Label::N => assert!(values.len() > 1, "N roi {roi:?} has no edge"),
            }
        }
    }

    #[test]
    fn eval_region_is_background() {
        let p = PhantomSpec::default().build();
        let r = p.eval_region;
        for y in r.y..r.y + r.height {
            for x in r.x..r.x + r.width {
                assert_eq!(p.clean.get(x, y), 0.5);
            }
        }
    }
}
