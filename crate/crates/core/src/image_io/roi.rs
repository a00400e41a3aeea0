use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Image, PATCH_SIZE};
use crate::error::{Error, Result};

/// Patch class: `A` is artifacts over a uniform background, `N` is everything else.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    A,
    N,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::A => 0,
            Label::N => 1,
        }
    }

    pub fn from_class_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::A),
            1 => Some(Label::N),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::A => "A",
            Label::N => "N",
        })
    }
}

/// Annotated 32x32 window, addressed by its top-left pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub label: Label,
}

impl Roi {
    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x + PATCH_SIZE <= width && self.y + PATCH_SIZE <= height
    }
}

/// The ROI JSON document: `{"patch_size": 32, "rois": [...]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiSet {
    pub patch_size: usize,
    pub rois: Vec<Roi>,
}

impl RoiSet {
    pub fn new(rois: Vec<Roi>) -> Self {
        RoiSet {
            patch_size: PATCH_SIZE,
            rois,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: RoiSet =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("bad ROI json: {e}")))?;
        set.check_patch_size()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    fn check_patch_size(&self) -> Result<()> {
        if self.patch_size != PATCH_SIZE {
            return Err(Error::Format(format!(
                "ROI patch_size must be {PATCH_SIZE}, got {}",
                self.patch_size
            )));
        }
        Ok(())
    }

    /// Checks patch size and that every window lies inside the image.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        self.check_patch_size()?;
        if let Some(r) = self.rois.iter().find(|r| !r.fits(width, height)) {
            return Err(Error::Format(format!(
                "ROI at ({}, {}) does not fit a {width}x{height} image",
                r.x, r.y
            )));
        }
        Ok(())
    }

    pub fn validate_for(&self, image: &Image) -> Result<()> {
        self.validate(image.width(), image.height())
    }

    pub fn count(&self, label: Label) -> usize {
        self.rois.iter().filter(|r| r.label == label).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_document() {
        let set = RoiSet::from_json(
            r#"{"patch_size": 32, "rois": [{"x": 1, "y": 2, "label": "A"}, {"x": 0, "y": 0, "label": "N"}]}"#,
        )
        .unwrap();
        assert_eq!(
            set.rois[0],
            Roi {
                x: 1,
                y: 2,
                label: Label::A
            }
        );
        assert_eq!(set.count(Label::N), 1);
        let round = RoiSet::from_json(&serde_json::to_string(&set).unwrap()).unwrap();
        assert_eq!(round, set);
    }

    #[test]
    fn rejects_wrong_patch_size_and_bad_label() {
        assert!(RoiSet::from_json(r#"{"patch_size": 16, "rois": []}"#).is_err());
        assert!(RoiSet::from_json(
            r#"{"patch_size": 32, "rois": [{"x": 0, "y": 0, "label": "B"}]}"#
        )
        .is_err());
    }

    #[test]
    fn bounds() {
        let set = RoiSet::new(vec![Roi {
            x: 32,
            y: 0,
            label: Label::A,
        }]);
        assert!(set.validate(64, 32).is_ok());
        assert!(set.validate(63, 32).is_err());
    }
}
