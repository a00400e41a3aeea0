use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::aarn::AarnReport;
use crate::error::{Error, Result};
use crate::idsn::IdsnReport;
use crate::image_io::RoiSet;
use crate::metrics::MetricReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Everything needed to audit, and with the input image reproduce, a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub input_image: String,
    pub width: usize,
    pub height: usize,
    pub rois: RoiSet,
    pub config: PipelineConfig,
    pub idsn: IdsnReport,
    /// Classified patches by label.
    pub a_patches: usize,
    pub n_patches: usize,
    pub pair_count: usize,
    pub aarn: AarnReport,
    /// Input statistics per evaluation region.
    pub input_metrics: Vec<MetricReport>,
    /// Output statistics with deltas against `input_metrics`.
    pub metrics: Vec<MetricReport>,
    /// Paths relative to the run directory.
    pub output: String,
    pub attention: [String; 2],
    pub timings: Vec<StageTiming>,
    pub total_seconds: f64,
    pub warnings: Vec<String>,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
