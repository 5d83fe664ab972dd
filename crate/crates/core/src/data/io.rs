//! Feature files and text manifests.
//!
//! Feature file layout (all little-endian):
//!
//! | bytes            | content                              |
//! |------------------|--------------------------------------|
//! | 4                | magic `TPF1`                         |
//! | 4 + 4 + 4        | `T`, `D`, `P` as `u32`               |
//! | 4·T·D            | frames, row-major `f32`              |
//! | 4·T·P            | positions, row-major `f32`           |
//!
//! Values are narrowed to `f32` on save; sequences whose values are already
//! `f32`-representable (everything the corpus generator emits) round-trip
//! exactly.

use std::fs;
use std::path::{Path, PathBuf};

use super::FeatureSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"TPF1";

pub fn save_features(seq: &FeatureSequence, path: &Path) -> Result<()> {
    let (t, d) = seq.frames.dims2();
    let p = seq.positions.cols();
    let mut buf = Vec::with_capacity(16 + 4 * t * (d + p));
    buf.extend_from_slice(FEATURE_MAGIC);
    for n in [t, d, p] {
        let n = u32::try_from(n).map_err(|_| Error::invalid("feature extent exceeds u32"))?;
        buf.extend_from_slice(&n.to_le_bytes());
    }
    for v in seq.frames.values().iter().chain(seq.positions.values()) {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a feature file. Ids are not stored in the file; the utterance id is
/// taken from the file stem and speaker/phrase are left at zero.
pub fn load_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let truncated = |detail: String| Error::Truncated {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 {
        return Err(truncated(format!("{} bytes, no header", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "TPF1",
        });
    }
    if bytes.len() < 16 {
        return Err(truncated(format!("{} bytes, header needs 16", bytes.len())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (t, d, p) = (word(0), word(1), word(2));
    if t == 0 || d == 0 || p == 0 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            detail: format!("zero extent in header (T={t}, D={d}, P={p})"),
        });
    }
    let expected = 16 + 4 * t * (d + p);
    if bytes.len() < expected {
        return Err(truncated(format!("{} bytes, expected {expected}", bytes.len())));
    }
    if bytes.len() > expected {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    let floats: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let frames = Tensor::new(&[t, d], floats[..t * d].to_vec())?;
    let positions = Tensor::new(&[t, p], floats[t * d..].to_vec())?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureSequence::new(id, 0, 0, frames, positions)
}

/// [`load_features`] that also checks the frame and position widths.
pub fn load_features_checked(path: &Path, feature_dim: usize, position_dim: usize) -> Result<FeatureSequence> {
    let seq = load_features(path)?;
    if seq.feature_dim() != feature_dim || seq.position_dim() != position_dim {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            detail: format!(
                "dimension mismatch: file has D={}, P={}, expected D={feature_dim}, P={position_dim}",
                seq.feature_dim(),
                seq.position_dim()
            ),
        });
    }
    Ok(seq)
}

/// One manifest line: `utterance_id speaker_id phrase_id path`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: usize,
    pub phrase_id: usize,
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!(
            "{} {} {} {}\n",
            e.utterance_id,
            e.speaker_id,
            e.phrase_id,
            e.path.display()
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |line: usize, detail: &str| Error::Malformed {
        path: path.to_path_buf(),
        detail: format!("line {line}: {detail}"),
    };
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [utt, spk, phr, file] = fields[..] else {
            return Err(malformed(i + 1, "expected 4 fields"));
        };
        entries.push(ManifestEntry {
            utterance_id: utt.to_string(),
            speaker_id: spk.parse().map_err(|_| malformed(i + 1, "bad speaker id"))?,
            phrase_id: phr.parse().map_err(|_| malformed(i + 1, "bad phrase id"))?,
            path: PathBuf::from(file),
        });
    }
    Ok(entries)
}

/// Enrollment list: `model_id utt_id [utt_id ...]` per line.
pub fn write_enrollments(enrollments: &[super::Enrollment], path: &Path) -> Result<()> {
    let mut text = String::new();
    for e in enrollments {
        text.push_str(&e.model_id);
        for u in &e.utterances {
            text.push(' ');
            text.push_str(u);
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_enrollments(path: &Path) -> Result<Vec<super::Enrollment>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(model) = fields.next() else { continue };
        let utterances: Vec<String> = fields.map(str::to_string).collect();
        if utterances.is_empty() {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                detail: format!("line {}: enrollment without utterances", i + 1),
            });
        }
        out.push(super::Enrollment {
            model_id: model.to_string(),
            utterances,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureSequence {
        let frames = Tensor::from_rows(&[[0.5, -1.25, 3.0], [2.0, 0.0, -0.125]]).unwrap();
        let positions = Tensor::from_rows(&[[1.0, 0.0], [0.25, 0.75]]).unwrap();
        FeatureSequence::new("utt", 0, 0, frames, positions).unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("utt.tpf");
        let seq = sample();
        save_features(&seq, &path).unwrap();
        assert_eq!(load_features(&path).unwrap(), seq);
        assert!(load_features_checked(&path, 3, 2).is_ok());
        assert!(matches!(load_features_checked(&path, 4, 2), Err(Error::Malformed { .. })));
    }

    #[test]
    fn zero_frame_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tpf");
        let mut bytes = FEATURE_MAGIC.to_vec();
        for n in [0u32, 3, 2] {
            bytes.extend_from_slice(&n.to_le_bytes());
        }
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_features(&path), Err(Error::Malformed { .. })));
    }

    #[test]
    fn corrupted_magic_differs_from_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.tpf");
        save_features(&sample(), &good).unwrap();
        let bytes = fs::read(&good).unwrap();

        let bad_magic = dir.path().join("magic.tpf");
        let mut b = bytes.clone();
        b[0] = b'X';
        fs::write(&bad_magic, b).unwrap();

        let short = dir.path().join("short.tpf");
        fs::write(&short, &bytes[..bytes.len() - 3]).unwrap();

        assert!(matches!(load_features(&bad_magic), Err(Error::BadMagic { .. })));
        assert!(matches!(load_features(&short), Err(Error::Truncated { .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        let entries = vec![
            ManifestEntry {
                utterance_id: "a".into(),
                speaker_id: 3,
                phrase_id: 1,
                path: "features/a.tpf".into(),
            },
            ManifestEntry {
                utterance_id: "b".into(),
                speaker_id: 0,
                phrase_id: 7,
                path: "features/b.tpf".into(),
            },
        ];
        write_manifest(&entries, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);
        fs::write(&path, "a 1 2\n").unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
