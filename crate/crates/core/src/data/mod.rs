//! Motion and audio-feature tracks, the synthetic corpus generator and the
//! on-disk dataset format.

pub(crate) mod io;
mod synth;

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{ensure, Error, Result};

pub use io::{load_dataset, save_dataset, FORMAT_VERSION};
pub use synth::{
    generate_synthetic_dataset, EmotionSpec, IdentitySpec, SyntheticGenerator, SyntheticSpec,
};

/// The eight emotion categories, in the order used for lookup tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Emotion {
    Sadness,
    Contempt,
    Neutral,
    Fear,
    Anger,
    Happiness,
    Disgust,
    Surprise,
}

impl Emotion {
    pub const ALL: [Emotion; 8] = [
        Emotion::Sadness,
        Emotion::Contempt,
        Emotion::Neutral,
        Emotion::Fear,
        Emotion::Anger,
        Emotion::Happiness,
        Emotion::Disgust,
        Emotion::Surprise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Sadness => "sadness",
            Emotion::Contempt => "contempt",
            Emotion::Neutral => "neutral",
            Emotion::Fear => "fear",
            Emotion::Anger => "anger",
            Emotion::Happiness => "happiness",
            Emotion::Disgust => "disgust",
            Emotion::Surprise => "surprise",
        }
    }

    pub fn index(self) -> usize {
        Emotion::ALL.iter().position(|e| *e == self).unwrap()
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Emotion::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown emotion label `{s}`")))
    }
}

impl Serialize for Emotion {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Emotion {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Channel widths of the four tracks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub face: usize,
    pub body: usize,
    pub content: usize,
    pub semantics: usize,
}

impl Dims {
    pub const DESK: Dims = Dims {
        face: 12,
        body: 24,
        content: 16,
        semantics: 16,
    };

    pub const FULL: Dims = Dims {
        face: 100,
        body: 165,
        content: 1024,
        semantics: 1536,
    };

    /// Width of the united face+body representation.
    pub fn holistic(&self) -> usize {
        self.face + self.body
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.face > 0 && self.body > 0 && self.content > 0 && self.semantics > 0,
            InvalidArgument,
            "all dimensions must be positive, got {self:?}"
        );
        Ok(())
    }
}

impl Default for Dims {
    fn default() -> Self {
        Dims::DESK
    }
}

/// Paired face and body coefficient tracks.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub face: Mat,
    pub body: Mat,
    pub fps: f64,
    pub identity_label: String,
    pub emotion_label: Emotion,
}

impl MotionSequence {
    pub fn new(
        face: Mat,
        body: Mat,
        fps: f64,
        identity_label: impl Into<String>,
        emotion_label: Emotion,
    ) -> Result<Self> {
        let seq = MotionSequence {
            face,
            body,
            fps,
            identity_label: identity_label.into(),
            emotion_label,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.face.nrows() == self.body.nrows(),
            Shape,
            "face has {} frames but body has {}",
            self.face.nrows(),
            self.body.nrows()
        );
        ensure!(self.face.nrows() >= 2, Shape, "motion needs at least 2 frames");
        ensure!(
            self.face.iter().chain(self.body.iter()).all(|v| v.is_finite()),
            InvalidArgument,
            "motion contains non-finite values"
        );
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.face.nrows()
    }

    /// `[face | body]`, `N × (D_F + D_B)`.
    pub fn holistic(&self) -> Mat {
        concatenate(Axis(1), &[self.face.view(), self.body.view()]).unwrap()
    }

    /// Splits a holistic matrix back into its face and body columns.
    pub fn from_holistic(
        holistic: &Mat,
        face_dim: usize,
        fps: f64,
        identity_label: impl Into<String>,
        emotion_label: Emotion,
    ) -> Result<Self> {
        ensure!(
            holistic.ncols() > face_dim,
            Shape,
            "holistic width {} does not exceed face width {face_dim}",
            holistic.ncols()
        );
        MotionSequence::new(
            holistic.slice(s![.., ..face_dim]).to_owned(),
            holistic.slice(s![.., face_dim..]).to_owned(),
            fps,
            identity_label,
            emotion_label,
        )
    }
}

/// Per-frame speech features: phonetic content, a one-channel rhythm track
/// and frame-aligned semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureTrack {
    pub content: Mat,
    pub rhythm: Mat,
    pub semantics: Mat,
}

impl AudioFeatureTrack {
    pub fn new(content: Mat, rhythm: Mat, semantics: Mat) -> Result<Self> {
        let track = AudioFeatureTrack {
            content,
            rhythm,
            semantics,
        };
        track.validate()?;
        Ok(track)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.content.nrows();
        ensure!(
            self.rhythm.nrows() == n && self.semantics.nrows() == n,
            Shape,
            "audio tracks disagree on frame count ({}, {}, {})",
            n,
            self.rhythm.nrows(),
            self.semantics.nrows()
        );
        ensure!(
            self.rhythm.ncols() == 1,
            Shape,
            "rhythm must have exactly one channel, got {}",
            self.rhythm.ncols()
        );
        ensure!(
            self.content
                .iter()
                .chain(self.rhythm.iter())
                .chain(self.semantics.iter())
                .all(|v| v.is_finite()),
            InvalidArgument,
            "audio contains non-finite values"
        );
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.content.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub motion: MotionSequence,
    pub audio: AudioFeatureTrack,
}

impl Sample {
    pub fn new(motion: MotionSequence, audio: AudioFeatureTrack) -> Result<Self> {
        ensure!(
            motion.frames() == audio.frames(),
            Shape,
            "motion has {} frames, audio has {}",
            motion.frames(),
            audio.frames()
        );
        Ok(Sample { motion, audio })
    }

    pub fn emotion_label(&self) -> Emotion {
        self.motion.emotion_label
    }

    pub fn identity_label(&self) -> &str {
        &self.motion.identity_label
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dims: Dims,
    pub fps: f64,
    pub seed: u64,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, manifest: DatasetManifest) -> Result<Self> {
        let ds = Dataset { samples, manifest };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.manifest.dims;
        for (k, s) in self.samples.iter().enumerate() {
            let got = Dims {
                face: s.motion.face.ncols(),
                body: s.motion.body.ncols(),
                content: s.audio.content.ncols(),
                semantics: s.audio.semantics.ncols(),
            };
            ensure!(got == d, Shape, "sample {k} has dims {got:?}, manifest says {d:?}");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn motions(&self) -> Vec<MotionSequence> {
        self.samples.iter().map(|s| s.motion.clone()).collect()
    }

    fn subset(&self, idx: &[usize], tag: &str) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            manifest: DatasetManifest {
                split: tag.to_string(),
                ..self.manifest.clone()
            },
        }
    }
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.85, 0.075, 0.075);

/// Shuffled train/val/test partition. Validation and test sizes are floored;
/// the remainder goes to train.
pub fn split_dataset(ds: &Dataset, fractions: (f64, f64, f64)) -> Result<(Dataset, Dataset, Dataset)> {
    let (tr, va, te) = fractions;
    ensure!(
        [tr, va, te].iter().all(|f| f.is_finite() && *f >= 0.0),
        InvalidArgument,
        "split fractions must be non-negative, got {fractions:?}"
    );
    ensure!(
        (tr + va + te - 1.0).abs() <= 1e-9,
        InvalidArgument,
        "split fractions must sum to 1, got {}",
        tr + va + te
    );
    let n = ds.len();
    let n_val = (n as f64 * va).floor() as usize;
    let n_test = (n as f64 * te).floor() as usize;
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(ds.manifest.seed ^ 0x5EED_5B17));
    let mut parts = [
        order[..n_train].to_vec(),
        order[n_train..n_train + n_val].to_vec(),
        order[n_train + n_val..].to_vec(),
    ];
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok((
        ds.subset(&parts[0], "train"),
        ds.subset(&parts[1], "val"),
        ds.subset(&parts[2], "test"),
    ))
}

/// Forward differences along frames: row `i` is `seq[i+1] - seq[i]`.
pub fn compute_velocity(seq: &Mat) -> Result<Mat> {
    let n = seq.nrows();
    ensure!(n >= 2, Shape, "velocity needs at least 2 frames, got {n}");
    Ok(&seq.slice(s![1.., ..]) - &seq.slice(s![..n - 1, ..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        let spec = SyntheticSpec {
            n_samples: n,
            frames: 8,
            seed,
            ..SyntheticSpec::default()
        };
        generate_synthetic_dataset(&spec).unwrap()
    }

    #[test]
    fn velocity_of_constant_is_zero() {
        let v = compute_velocity(&Mat::from_elem((5, 3), 2.5)).unwrap();
        assert_eq!(v, Mat::zeros((4, 3)));
    }

    #[test]
    fn velocity_direct_difference() {
        let v = compute_velocity(&array![[0.0], [1.0], [3.0]]).unwrap();
        assert_eq!(v, array![[1.0], [2.0]]);
    }

    #[test]
    fn velocity_matches_loop() {
        let seq = Mat::from_shape_fn((10, 4), |(i, j)| ((i * 7 + j * 3) as f64).sin());
        let v = compute_velocity(&seq).unwrap();
        for i in 0..9 {
            for j in 0..4 {
                assert_eq!(v[[i, j]], seq[[i + 1, j]] - seq[[i, j]]);
            }
        }
    }

    #[test]
    fn velocity_rejects_single_frame() {
        assert!(matches!(compute_velocity(&Mat::zeros((1, 3))), Err(Error::Shape(_))));
    }

    #[test]
    fn split_sizes_floor_then_train() {
        let ds = tiny_dataset(40, 1);
        let (a, b, c) = split_dataset(&ds, DEFAULT_SPLIT).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (34, 3, 3));
    }

    #[test]
    fn split_all_train() {
        let ds = tiny_dataset(9, 1);
        let (a, b, c) = split_dataset(&ds, (1.0, 0.0, 0.0)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (9, 0, 0));
        assert_eq!(a.samples, ds.samples);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = tiny_dataset(4, 1);
        assert!(split_dataset(&ds, (0.5, 0.2, 0.2)).is_err());
        assert!(split_dataset(&ds, (1.2, -0.1, -0.1)).is_err());
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let spec = SyntheticSpec {
            n_samples: 1000,
            frames: 2,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic_dataset(&spec).unwrap();
        let key = |s: &Sample| s.motion.face[[0, 0]].to_bits();
        let members = |d: &Dataset| d.samples.iter().map(key).collect::<Vec<_>>();
        let (a1, b1, c1) = split_dataset(&ds, DEFAULT_SPLIT).unwrap();
        let (a2, b2, c2) = split_dataset(&ds, DEFAULT_SPLIT).unwrap();
        assert_eq!(
            (members(&a1), members(&b1), members(&c1)),
            (members(&a2), members(&b2), members(&c2))
        );
        let mut all: Vec<_> = [members(&a1), members(&b1), members(&c1)].concat();
        let mut orig = members(&ds);
        all.sort_unstable();
        orig.sort_unstable();
        assert_eq!(all, orig);
    }

    #[test]
    fn emotion_labels_round_trip() {
        for e in Emotion::ALL {
            assert_eq!(e.as_str().parse::<Emotion>().unwrap(), e);
        }
        assert!("joy".parse::<Emotion>().is_err());
    }

    #[test]
    fn motion_requires_matching_frames() {
        let r = MotionSequence::new(Mat::zeros((3, 2)), Mat::zeros((4, 2)), 30.0, "a", Emotion::Neutral);
        assert!(r.is_err());
    }
}
