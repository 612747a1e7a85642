//! Identity codes from motion statistics and the emotion embedding space.

use std::fmt;

use nalgebra::DMatrix;
use ndarray::{concatenate, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, ParamStore, Var};
use crate::data::{compute_velocity, AudioFeatureTrack, Dataset, Emotion, MotionSequence};
use crate::diffusion::standard_normal;
use crate::error::{ensure, Error, Result};
use crate::nn::{seeded, Init, Linear, Mlp};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Text,
    Audio,
    Motion,
    Lookup,
    Stats,
    None,
}

/// Pre-MLP identity statistics, `[σ(X), σ(∂X)]` per modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityStats {
    pub face: Vec<f64>,
    pub body: Vec<f64>,
}

impl IdentityStats {
    pub fn face_row(&self) -> Mat {
        row(&self.face)
    }

    pub fn body_row(&self) -> Mat {
        row(&self.body)
    }
}

fn row(v: &[f64]) -> Mat {
    Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row")
}

/// Condition vectors handed to the adapters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionEmbedding {
    pub z_e: Vec<f64>,
    pub z_id_face: Vec<f64>,
    pub z_id_body: Vec<f64>,
    pub provenance: Provenance,
    /// When present and the model owns identity MLPs, codes are recomputed
    /// inside the graph so the MLPs train with the adapters.
    pub identity_stats: Option<IdentityStats>,
    pub emotion_label: Option<Emotion>,
    pub identity_label: Option<String>,
}

impl ConditionEmbedding {
    pub fn none(d_z: usize) -> Self {
        ConditionEmbedding {
            z_e: vec![0.0; d_z],
            z_id_face: vec![0.0; d_z],
            z_id_body: vec![0.0; d_z],
            provenance: Provenance::None,
            identity_stats: None,
            emotion_label: None,
            identity_label: None,
        }
    }

    pub fn emotion(z_e: Vec<f64>, provenance: Provenance, label: Option<Emotion>) -> Self {
        let d = z_e.len();
        ConditionEmbedding {
            z_e,
            provenance,
            emotion_label: label,
            ..ConditionEmbedding::none(d)
        }
    }

    pub fn identity(stats: IdentityStats, d_z: usize, label: impl Into<String>) -> Self {
        ConditionEmbedding {
            provenance: Provenance::Stats,
            identity_stats: Some(stats),
            identity_label: Some(label.into()),
            ..ConditionEmbedding::none(d_z)
        }
    }

    pub fn validate(&self, d_z: usize) -> Result<()> {
        for (name, v) in [("z_e", &self.z_e), ("z_id_face", &self.z_id_face), ("z_id_body", &self.z_id_body)] {
            ensure!(v.len() == d_z, Shape, "{name} has width {}, expected {d_z}", v.len());
            ensure!(v.iter().all(|x| x.is_finite()), InvalidArgument, "{name} is not finite");
        }
        Ok(())
    }
}

fn population_std(col: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = col.clone().count() as f64;
    let mean = col.clone().sum::<f64>() / n;
    (col.map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// `[σ(X), σ(∂X)]` over frames with population normalization.
pub fn stats_vector(seq: &Mat) -> Result<Vec<f64>> {
    ensure!(seq.nrows() >= 3, InvalidArgument, "identity statistics need at least 3 frames, got {}", seq.nrows());
    let vel = compute_velocity(seq)?;
    let mut out: Vec<f64> = seq.columns().into_iter().map(|c| population_std(c.iter().copied())).collect();
    out.extend(vel.columns().into_iter().map(|c| population_std(c.iter().copied())));
    Ok(out)
}

pub fn identity_stats(face: &Mat, body: &Mat) -> Result<IdentityStats> {
    ensure!(face.nrows() == body.nrows(), Shape, "face and body frame counts differ");
    Ok(IdentityStats {
        face: stats_vector(face)?,
        body: stats_vector(body)?,
    })
}

/// Two-layer map from a stats vector to a code of width `d_z`.
#[derive(Clone, Debug)]
pub struct IdentityMlp {
    pub mlp: Mlp,
}

impl IdentityMlp {
    pub fn new(init: &mut Init<'_>, name: &str, d_in: usize, d_z: usize) -> Result<Self> {
        Ok(IdentityMlp {
            mlp: Mlp::new(init, name, d_in, 2 * d_z, d_z)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, stats: Var) -> Var {
        self.mlp.forward(g, stats)
    }
}

/// Standalone identity encoder owning its parameters.
#[derive(Clone, Debug)]
pub struct IdentityEncoder {
    pub store: ParamStore,
    pub face: IdentityMlp,
    pub body: IdentityMlp,
}

impl IdentityEncoder {
    pub fn new(face_dim: usize, body_dim: usize, d_z: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let face = IdentityMlp::new(&mut init, "identity.face", 2 * face_dim, d_z)?;
        let body = IdentityMlp::new(&mut init, "identity.body", 2 * body_dim, d_z)?;
        Ok(IdentityEncoder { store, face, body })
    }

    /// `(z_id_F, z_id_B)` for one clip.
    pub fn identity_code(&self, face: &Mat, body: &Mat) -> Result<(Vec<f64>, Vec<f64>)> {
        let stats = identity_stats(face, body)?;
        ensure!(
            stats.face.len() == self.store.get(self.face.mlp.fc1.w).nrows()
                && stats.body.len() == self.store.get(self.body.mlp.fc1.w).nrows(),
            Shape,
            "motion widths do not match the identity encoder"
        );
        let mut g = Graph::inference(&self.store);
        let f = g.input(stats.face_row());
        let b = g.input(stats.body_row());
        let zf = self.face.forward(&mut g, f);
        let zb = self.body.forward(&mut g, b);
        Ok((g.value(zf).iter().copied().collect(), g.value(zb).iter().copied().collect()))
    }
}

/// One fixed clip per identity, reused for every sample of that identity.
pub fn identity_reference_stats(ds: &Dataset) -> Result<Vec<(String, IdentityStats)>> {
    let mut out: Vec<(String, IdentityStats)> = Vec::new();
    for s in &ds.samples {
        let label = s.identity_label();
        if !out.iter().any(|(l, _)| l == label) {
            out.push((label.to_string(), identity_stats(&s.motion.face, &s.motion.body)?));
        }
    }
    Ok(out)
}

/// Orthonormal rows, one per emotion category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionTable {
    pub seed: u64,
    pub rows: Mat,
}

impl EmotionTable {
    pub fn new(d_z: usize, seed: u64) -> Result<Self> {
        ensure!(d_z >= Emotion::ALL.len(), InvalidArgument, "d_z {d_z} too small for 8 orthogonal rows");
        let g = standard_normal(&mut seeded(seed), d_z, Emotion::ALL.len());
        let m = DMatrix::from_fn(d_z, Emotion::ALL.len(), |i, j| g[[i, j]]);
        let q = m.qr().q();
        let rows = Mat::from_shape_fn((Emotion::ALL.len(), d_z), |(e, i)| q[(i, e)]);
        Ok(EmotionTable { seed, rows })
    }

    pub fn d_z(&self) -> usize {
        self.rows.ncols()
    }

    pub fn lookup(&self, label: Emotion) -> Vec<f64> {
        self.rows.row(label.index()).to_vec()
    }

    /// Category whose row has the largest cosine similarity with `z`.
    pub fn nearest(&self, z: &[f64]) -> Emotion {
        let score = |e: &Emotion| self.rows.row(e.index()).iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
        *Emotion::ALL
            .iter()
            .max_by(|a, b| score(a).total_cmp(&score(b)))
            .expect("non-empty")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Audio,
    Motion,
    Lookup,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Motion => "motion",
            Modality::Lookup => "lookup",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PromptPayload {
    Label(String),
    Audio(AudioFeatureTrack),
    Motion(MotionSequence),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmotionPrompt {
    pub modality: Modality,
    pub payload: PromptPayload,
}

impl EmotionPrompt {
    pub fn lookup(label: &str) -> Self {
        EmotionPrompt {
            modality: Modality::Lookup,
            payload: PromptPayload::Label(label.into()),
        }
    }
}

/// Per-frame `Linear → SiLU → Linear`, mean-pooled and normalized.
#[derive(Clone, Debug)]
pub struct ModalityEncoder {
    pub modality: Modality,
    pub store: ParamStore,
    pub fc1: Linear,
    pub fc2: Linear,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Frame features an encoder of the given modality consumes.
pub fn modality_features(modality: Modality, motion: &MotionSequence, audio: &AudioFeatureTrack) -> Result<Mat> {
    match modality {
        Modality::Motion => Ok(motion.holistic()),
        Modality::Audio => Ok(audio_features(audio)),
        _ => Err(Error::InvalidArgument(format!("no sequence encoder for modality `{modality}`"))),
    }
}

fn audio_features(audio: &AudioFeatureTrack) -> Mat {
    concatenate(Axis(1), &[audio.content.view(), audio.rhythm.view(), audio.semantics.view()]).expect("frames match")
}

impl ModalityEncoder {
    fn new(modality: Modality, d_in: usize, hidden: usize, d_z: usize, seed: u64, mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let fc1 = Linear::new(&mut init, "aligner.fc1", d_in, hidden)?;
        let fc2 = Linear::new(&mut init, "aligner.fc2", hidden, d_z)?;
        Ok(ModalityEncoder {
            modality,
            store,
            fc1,
            fc2,
            mean,
            std,
        })
    }

    fn standardize(&self, x: &Mat) -> Result<Mat> {
        ensure!(x.ncols() == self.mean.len(), Shape, "encoder expects width {}, got {}", self.mean.len(), x.ncols());
        let mut x = x.clone();
        for (mut c, (m, s)) in x.columns_mut().into_iter().zip(self.mean.iter().zip(&self.std)) {
            c.mapv_inplace(|v| (v - m) / s);
        }
        Ok(x)
    }

    fn graph(&self, g: &mut Graph<'_>, x: &Mat) -> Result<Var> {
        let x = g.input(self.standardize(x)?);
        let h = self.fc1.forward(g, x);
        let h = g.silu(h);
        let h = self.fc2.forward(g, h);
        let p = g.mean_rows(h);
        Ok(g.normalize_rows(p))
    }

    /// Unit-norm embedding of a frame-feature matrix.
    pub fn encode(&self, x: &Mat) -> Result<Vec<f64>> {
        let mut g = Graph::inference(&self.store);
        let z = self.graph(&mut g, x)?;
        Ok(g.value(z).iter().copied().collect())
    }
}

/// Lookup table plus any trained sequence encoders.
#[derive(Clone, Debug)]
pub struct EmotionBackends {
    pub table: EmotionTable,
    pub audio: Option<ModalityEncoder>,
    pub motion: Option<ModalityEncoder>,
}

impl EmotionBackends {
    pub fn lookup_only(table: EmotionTable) -> Self {
        EmotionBackends {
            table,
            audio: None,
            motion: None,
        }
    }
}

/// Unit-norm emotion vector for a prompt.
pub fn emotion_embed(prompt: &EmotionPrompt, backends: &EmotionBackends) -> Result<Vec<f64>> {
    let unregistered = || Error::InvalidArgument(format!("no backend registered for modality `{}`", prompt.modality));
    match (&prompt.modality, &prompt.payload) {
        (Modality::Lookup | Modality::Text, PromptPayload::Label(label)) => {
            let e: Emotion = label.trim().parse()?;
            Ok(backends.table.lookup(e))
        }
        (Modality::Audio, PromptPayload::Audio(a)) => backends.audio.as_ref().ok_or_else(unregistered)?.encode(&audio_features(a)),
        (Modality::Motion, PromptPayload::Motion(m)) => backends.motion.as_ref().ok_or_else(unregistered)?.encode(&m.holistic()),
        _ => Err(Error::InvalidArgument(format!(
            "payload does not match modality `{}`",
            prompt.modality
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            epochs: 30,
            batch_size: 8,
            hidden: 64,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Trains a sequence encoder so its output aligns with each sample's lookup
/// row; returns the encoder and the mean `1 − cos` per epoch.
pub fn align_modality_encoder(
    modality: Modality,
    dataset: &Dataset,
    table: &EmotionTable,
    cfg: &AlignConfig,
) -> Result<(ModalityEncoder, Vec<f64>)> {
    ensure!(!dataset.is_empty(), InvalidArgument, "aligner needs a non-empty dataset");
    ensure!(cfg.epochs >= 1 && cfg.batch_size >= 1 && cfg.hidden >= 1, Config, "aligner epochs, batch and width must be positive");
    let feats: Vec<Mat> = dataset
        .samples
        .iter()
        .map(|s| modality_features(modality, &s.motion, &s.audio))
        .collect::<Result<_>>()?;
    let targets: Vec<Mat> = dataset.samples.iter().map(|s| row(&table.lookup(s.emotion_label()))).collect();
    let all = concatenate(Axis(0), &feats.iter().map(|f| f.view()).collect::<Vec<_>>()).expect("widths match");
    let mean: Vec<f64> = all.columns().into_iter().map(|c| c.mean().unwrap_or(0.0)).collect();
    let std: Vec<f64> = all
        .columns()
        .into_iter()
        .map(|c| population_std(c.iter().copied()).max(1e-6))
        .collect();
    let mut enc = ModalityEncoder::new(modality, all.ncols(), cfg.hidden, table.d_z(), cfg.seed, mean, std)?;
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &enc.store);
    let mut rng = seeded(cfg.seed ^ 0xA119);
    let mut order: Vec<usize> = (0..feats.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = crate::autograd::Gradients::zeros_like(&enc.store);
            for &i in batch {
                let mut g = Graph::new(&enc.store);
                let z = enc.graph(&mut g, &feats[i])?;
                let t = g.input(targets[i].clone());
                let cos = g.mul(z, t);
                let cos = g.sum(cos);
                let loss = g.scale(cos, -1.0);
                epoch_loss += 1.0 - g.scalar(cos);
                grads.accumulate(&g.backward(loss), 1.0 / batch.len() as f64);
            }
            opt.update(&mut enc.store, &grads);
        }
        curve.push(epoch_loss / feats.len() as f64);
    }
    Ok((enc, curve))
}
