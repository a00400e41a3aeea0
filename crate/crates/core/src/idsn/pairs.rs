use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image_io::{Patch, PATCH_AREA};
use crate::tensor::Rng;

/// Zero-mean residual of an A-type patch.
#[derive(Clone, Debug, PartialEq)]
pub struct ArtifactPattern {
    pub values: Vec<f64>,
}

impl ArtifactPattern {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Removes the patch mean, leaving only the superposable artifact.
pub fn extract_artifact_pattern(patch: &Patch) -> ArtifactPattern {
    let mean = patch.mean();
    let mut values: Vec<f64> = patch.values.iter().map(|&v| v as f64 - mean).collect();
    // second pass soaks up rounding left by the first
    let residual = values.iter().sum::<f64>() / PATCH_AREA as f64;
    for v in &mut values {
        *v -= residual;
    }
    ArtifactPattern { values }
}

/// A synthesized training sample. `pattern_index` names the pattern that
/// was superposed, `None` for identity pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedPatch {
    pub dirty: Patch,
    pub clean: Patch,
    pub is_identity: bool,
    pub pattern_index: Option<usize>,
}

/// Stream index reserved for choosing which outputs are identity pairs.
const IDENTITY_STREAM: u64 = u64::MAX;

/// Superposes harvested patterns onto patches drawn with replacement.
///
/// Exactly `round(target * identity_fraction)` outputs are identity pairs
/// (dirty = clean); the rest are `clamp(clean + pattern, 0, 1)`. Output `i`
/// draws from its own derived random stream, so the result depends only on
/// `seed`, never on how the work is scheduled.
pub fn synthesize_pairs(
    patterns: &[ArtifactPattern],
    patches: &[Patch],
    target: usize,
    identity_fraction: f64,
    seed: u64,
) -> Result<Vec<PairedPatch>> {
    if patterns.is_empty() {
        return Err(Error::NoArtifactPatches);
    }
    if patches.is_empty() {
        return Err(Error::Contract(
            "pair synthesis needs at least one patch".into(),
        ));
    }
    if !(0.0..=1.0).contains(&identity_fraction) {
        return Err(Error::Config(format!(
            "identity fraction {identity_fraction} outside [0, 1]"
        )));
    }
    let identities = ((target as f64) * identity_fraction).round() as usize;
    let mut is_identity = vec![false; target];
    is_identity[..identities].fill(true);
    Rng::derive(seed, IDENTITY_STREAM).shuffle(&mut is_identity);

    Ok(is_identity
        .into_par_iter()
        .enumerate()
        .map(|(i, identity)| {
            let mut rng = Rng::derive(seed, i as u64);
            let clean = patches[rng.below(patches.len())].clone();
            if identity {
                return PairedPatch {
                    dirty: clean.clone(),
                    clean,
                    is_identity: true,
                    pattern_index: None,
                };
            }
            let k = rng.below(patterns.len());
            PairedPatch {
                dirty: superpose(&clean, &patterns[k]),
                clean,
                is_identity: false,
                pattern_index: Some(k),
            }
        })
        .collect())
}

/// `clamp(clean + pattern, 0, 1)`, pixel by pixel.
pub fn superpose(clean: &Patch, pattern: &ArtifactPattern) -> Patch {
    Patch {
        values: clean
            .values
            .iter()
            .zip(&pattern.values)
            .map(|(&c, &p)| (c as f64 + p).clamp(0.0, 1.0) as f32)
            .collect(),
        origin: clean.origin,
    }
}

/// Debug dump: `u64` LE pair count, then per pair 1024 dirty and 1024 clean
/// `f32` LE values.
pub fn write_pairs(pairs: &[PairedPatch], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    out.write_all(&(pairs.len() as u64).to_le_bytes())
        .map_err(io)?;
    for pair in pairs {
        for v in pair.dirty.values.iter().chain(&pair.clean.values) {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Reads a [`write_pairs`] dump. Identity flags are recovered from
/// `dirty == clean`; pattern indices are not stored.
pub fn read_pairs(path: &Path) -> Result<Vec<(Patch, Patch)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let count = bytes
        .get(..8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
        .ok_or_else(|| Error::Format("pair dump shorter than its header".into()))?;
    let per_pair = 2 * PATCH_AREA * 4;
    if bytes.len() != 8 + count * per_pair {
        return Err(Error::Format(format!(
            "pair dump holds {} payload bytes, header promises {count} pairs",
            bytes.len() - 8
        )));
    }
    let floats: Vec<f32> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    floats
        .chunks_exact(2 * PATCH_AREA)
        .map(|c| {
            Ok((
                Patch::new(c[..PATCH_AREA].to_vec(), (0, 0))?,
                Patch::new(c[PATCH_AREA..].to_vec(), (0, 0))?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_patch(lo: f32, hi: f32) -> Patch {
        Patch::new(
            (0..PATCH_AREA)
                .map(|i| if i < PATCH_AREA / 2 { lo } else { hi })
                .collect(),
            (0, 0),
        )
        .unwrap()
    }

    #[test]
    fn constant_patch_has_zero_pattern() {
        let p = extract_artifact_pattern(&Patch::filled(0.7));
        assert!(p.values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn half_and_half() {
        let p = extract_artifact_pattern(&half_patch(0.4, 0.6));
        assert!((p.values[0] + 0.1).abs() < 1e-7);
        assert!((p.values[PATCH_AREA - 1] - 0.1).abs() < 1e-7);
        assert!(p.mean().abs() < 1e-9);
    }

    #[test]
    fn exact_count_and_identity_fraction() {
        let patterns = vec![extract_artifact_pattern(&half_patch(0.3, 0.5))];
        let patches: Vec<Patch> = (0..5)
            .map(|i| Patch::filled(0.1 * i as f32 + 0.2))
            .collect();
        let pairs = synthesize_pairs(&patterns, &patches, 1000, 0.1, 4).unwrap();
        assert_eq!(pairs.len(), 1000);
        assert_eq!(pairs.iter().filter(|p| p.is_identity).count(), 100);
        for p in &pairs {
            if p.is_identity {
                assert_eq!(p.dirty, p.clean);
            } else {
                let k = p.pattern_index.unwrap();
                assert_eq!(p.dirty, superpose(&p.clean, &patterns[k]));
            }
        }
    }

    #[test]
    fn zero_pattern_gives_identical_patches() {
        let zero = ArtifactPattern {
            values: vec![0.0; PATCH_AREA],
        };
        let pairs = synthesize_pairs(&[zero], &[Patch::filled(0.3)], 20, 0.0, 1).unwrap();
        assert!(pairs.iter().all(|p| p.dirty == p.clean && !p.is_identity));
    }

    #[test]
    fn clamps_to_unit_range() {
        let up = ArtifactPattern {
            values: vec![0.2; PATCH_AREA],
        };
        let dirty = superpose(&Patch::filled(0.95), &up);
        assert!(dirty.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn no_patterns_is_pipeline_error() {
        assert!(matches!(
            synthesize_pairs(&[], &[Patch::filled(0.5)], 10, 0.1, 0),
            Err(Error::NoArtifactPatches)
        ));
    }

    #[test]
    fn deterministic_under_seed() {
        let patterns = vec![extract_artifact_pattern(&half_patch(0.2, 0.9))];
        let patches: Vec<Patch> = (0..9).map(|i| Patch::filled(i as f32 / 9.0)).collect();
        let a = synthesize_pairs(&patterns, &patches, 300, 0.1, 77).unwrap();
        let b = synthesize_pairs(&patterns, &patches, 300, 0.1, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.bin");
        let patterns = vec![extract_artifact_pattern(&half_patch(0.2, 0.4))];
        let pairs = synthesize_pairs(&patterns, &[Patch::filled(0.5)], 7, 0.3, 2).unwrap();
        write_pairs(&pairs, &path).unwrap();
        let back = read_pairs(&path).unwrap();
        assert_eq!(back.len(), 7);
        for (p, (d, c)) in pairs.iter().zip(&back) {
            assert_eq!(&p.dirty.values, &d.values);
            assert_eq!(&p.clean.values, &c.values);
        }
        std::fs::write(&path, [1, 0, 0, 0, 0, 0, 0, 0, 9]).unwrap();
        assert!(read_pairs(&path).is_err());
    }
}
