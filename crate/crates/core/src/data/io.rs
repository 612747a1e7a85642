//! Dataset directories: `manifest.json` plus one raw little-endian `f32`
//! file per track, `sample_<k>_<track>.f32`, row-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AudioFeatureTrack, Dataset, DatasetManifest, Dims, Emotion, MotionSequence, Sample};
use crate::autograd::Mat;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "dumotion-ds-v1";
const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct SampleEntry {
    frames: usize,
    identity: String,
    emotion: Emotion,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    format_version: String,
    #[serde(flatten)]
    manifest: DatasetManifest,
    samples: Vec<SampleEntry>,
}

const TRACKS: [&str; 5] = ["face", "body", "content", "rhythm", "semantics"];

fn track_path(dir: &Path, k: usize, track: &str) -> PathBuf {
    dir.join(format!("sample_{k}_{track}.f32"))
}

pub(crate) fn write_f32(path: &Path, m: &Mat) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.len() * 4);
    for v in m.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads `rows × cols` floats; a byte count that is not a whole number of
/// rows is a truncation, a whole but different number of rows a shape error.
pub(crate) fn read_f32(path: &Path, rows: usize, cols: usize) -> Result<Mat> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let row_bytes = cols * 4;
    if row_bytes == 0 || bytes.len() % row_bytes != 0 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: rows * row_bytes,
            found: bytes.len(),
        });
    }
    let found_rows = bytes.len() / row_bytes;
    if found_rows != rows {
        return Err(Error::Shape(format!(
            "{} holds {found_rows} rows of width {cols}, manifest says {rows}",
            path.display()
        )));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Mat::from_shape_vec((rows, cols), vals).expect("length checked"))
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file = ManifestFile {
        format_version: FORMAT_VERSION.into(),
        manifest: ds.manifest.clone(),
        samples: ds
            .samples
            .iter()
            .map(|s| SampleEntry {
                frames: s.motion.frames(),
                identity: s.motion.identity_label.clone(),
                emotion: s.motion.emotion_label,
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).expect("manifest serializes");
    let path = dir.join(MANIFEST);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    for (k, s) in ds.samples.iter().enumerate() {
        let mats = [
            &s.motion.face,
            &s.motion.body,
            &s.audio.content,
            &s.audio.rhythm,
            &s.audio.semantics,
        ];
        for (track, m) in TRACKS.iter().zip(mats) {
            write_f32(&track_path(dir, k, track), m)?;
        }
    }
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_str())
        .unwrap_or("<missing>");
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version.to_string(),
            expected: FORMAT_VERSION.into(),
        });
    }
    let file: ManifestFile = serde_json::from_value(value).map_err(|e| Error::Manifest {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    let Dims {
        face,
        body,
        content,
        semantics,
    } = file.manifest.dims;
    let fps = file.manifest.fps;
    let samples = file
        .samples
        .into_iter()
        .enumerate()
        .map(|(k, e)| {
            let n = e.frames;
            let motion = MotionSequence::new(
                read_f32(&track_path(dir, k, "face"), n, face)?,
                read_f32(&track_path(dir, k, "body"), n, body)?,
                fps,
                e.identity,
                e.emotion,
            )?;
            let audio = AudioFeatureTrack::new(
                read_f32(&track_path(dir, k, "content"), n, content)?,
                read_f32(&track_path(dir, k, "rhythm"), n, 1)?,
                read_f32(&track_path(dir, k, "semantics"), n, semantics)?,
            )?;
            Sample::new(motion, audio)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, file.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticSpec};
    use proptest::prelude::*;

    fn small() -> Dataset {
        generate_synthetic_dataset(&SyntheticSpec {
            n_samples: 5,
            frames: 10,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let mut ds = small();
        ds.samples.clear();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn missing_frame_is_a_shape_error() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let p = track_path(dir.path(), 0, "face");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 12 * 4]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Shape(_))));
    }

    #[test]
    fn partial_row_is_truncation() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let p = track_path(dir.path(), 1, "body");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Truncated { .. })));
    }

    #[test]
    fn unknown_version_rejected() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let p = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&p).unwrap().replace(FORMAT_VERSION, "dumotion-ds-v9");
        fs::write(&p, text).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Version { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn any_f32_matrix_round_trips(vals in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..64)) {
            let m = Mat::from_shape_vec((vals.len(), 1), vals.iter().map(|v| *v as f64).collect()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.f32");
            write_f32(&p, &m).unwrap();
            let back = read_f32(&p, vals.len(), 1).unwrap();
            prop_assert!(back.iter().zip(m.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
