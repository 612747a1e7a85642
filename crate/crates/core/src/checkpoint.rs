//! Checkpoint directories: `manifest.json`, raw `f32` weight and optimizer
//! files indexed by parameter name, and the loss curve as CSV.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Mat, ParamStore};
use crate::conditioning::{EmotionTable, IdentityStats};
use crate::data::{io, Dataset};
use crate::error::{Error, Result};
use crate::loss::LossParts;
use crate::model::{build_model, DuTrans, DuTransConfig};
use crate::optim::Adam;
use crate::peft::{FrozenMask, PeftConfig};
use crate::training::{ConditionTask, TrainConfig};

pub const CHECKPOINT_VERSION: &str = "dumotion-ckpt-v1";
const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "weights.f32";
const ADAM_M: &str = "adam_m.f32";
const ADAM_V: &str = "adam_v.f32";
const LOSS_CSV: &str = "loss.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset in elements within the weight file.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    #[serde(flatten)]
    pub parts: LossParts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: String,
    pub id: String,
    pub parent: Option<String>,
    pub model_config: DuTransConfig,
    pub peft_config: Option<PeftConfig>,
    pub condition_task: Option<ConditionTask>,
    pub frozen_mask: Vec<String>,
    pub frozen_hash: String,
    pub train_config: TrainConfig,
    pub seed: u64,
    pub iteration: usize,
    pub dataset_hash: String,
    pub emotion_table: Option<EmotionTable>,
    pub identity_stats: Vec<(String, IdentityStats)>,
    pub tensors: Vec<TensorEntry>,
    pub optimizer_step: u64,
    /// Set when training stopped early on a non-finite loss.
    pub aborted_at: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: DuTrans,
    pub optimizer: Adam,
    pub losses: Vec<LossRecord>,
}

impl Checkpoint {
    pub fn frozen_mask(&self) -> FrozenMask {
        FrozenMask(self.manifest.frozen_mask.iter().cloned().collect())
    }
}

fn hash_tensor(h: &mut Sha256, name: &str, m: &Mat) {
    h.update(name.as_bytes());
    h.update((m.nrows() as u64).to_le_bytes());
    h.update((m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        h.update((*v as f32).to_le_bytes());
    }
}

/// Digest of the named tensors, in name order.
pub fn tensors_hash(store: &ParamStore, names: impl IntoIterator<Item = impl AsRef<str>>) -> Result<String> {
    let mut names: Vec<String> = names.into_iter().map(|n| n.as_ref().to_string()).collect();
    names.sort();
    let mut h = Sha256::new();
    for n in &names {
        let id = store.id(n).ok_or_else(|| Error::UnknownParameter(n.clone()))?;
        hash_tensor(&mut h, n, store.get(id));
    }
    Ok(hex::encode(h.finalize()))
}

pub fn frozen_hash(model: &DuTrans, mask: &FrozenMask) -> Result<String> {
    tensors_hash(&model.store, mask.0.iter())
}

pub fn dataset_hash(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&ds.manifest).expect("manifest serializes"));
    for s in &ds.samples {
        h.update(s.motion.identity_label.as_bytes());
        h.update(s.motion.emotion_label.as_str().as_bytes());
        for (name, m) in [
            ("face", &s.motion.face),
            ("body", &s.motion.body),
            ("content", &s.audio.content),
            ("rhythm", &s.audio.rhythm),
            ("semantics", &s.audio.semantics),
        ] {
            hash_tensor(&mut h, name, m);
        }
    }
    hex::encode(h.finalize())
}

/// Identifier derived from the weights and lineage.
pub fn checkpoint_id(model: &DuTrans, parent: Option<&str>, iteration: usize) -> String {
    let mut h = Sha256::new();
    for (_, n, m) in model.store.iter() {
        hash_tensor(&mut h, n, m);
    }
    h.update(parent.unwrap_or("").as_bytes());
    h.update((iteration as u64).to_le_bytes());
    hex::encode(&h.finalize()[..8])
}

fn flat(store: &ParamStore, values: impl Fn(usize) -> Option<Mat>) -> Mat {
    let mut out = Vec::with_capacity(store.numel());
    for (id, _, m) in store.iter() {
        match values(id.0) {
            Some(v) => out.extend(v.iter()),
            None => out.extend(std::iter::repeat_n(0.0, m.len())),
        }
    }
    let n = out.len();
    Mat::from_shape_vec((n, 1), out).expect("flat")
}

pub fn write_loss_csv(path: &Path, losses: &[LossRecord]) -> Result<()> {
    let mut text = String::from("step,L_H,L_F,L_B,total\n");
    for r in losses {
        text.push_str(&format!("{},{},{},{},{}\n", r.step, r.parts.l_h, r.parts.l_f, r.parts.l_b, r.parts.total));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Manifest {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("step,L_H,L_F,L_B,total") {
        return Err(bad("missing loss CSV header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("line {} has {} fields", i + 2, f.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("line {}: {e}", i + 2)));
            Ok(LossRecord {
                step: f[0].trim().parse().map_err(|e| bad(format!("line {}: {e}", i + 2)))?,
                parts: LossParts {
                    l_h: num(f[1])?,
                    l_f: num(f[2])?,
                    l_b: num(f[3])?,
                    total: num(f[4])?,
                },
            })
        })
        .collect()
}

/// Writes into a sibling temporary directory, then renames it into place.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let file_name = dir
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("checkpoint path {} has no final component", dir.display())))?;
    let tmp: PathBuf = parent.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let store = &ckpt.model.store;
    let mut manifest = ckpt.manifest.clone();
    let mut offset = 0;
    manifest.tensors = store
        .iter()
        .map(|(_, n, m)| {
            let e = TensorEntry {
                name: n.to_string(),
                rows: m.nrows(),
                cols: m.ncols(),
                offset,
            };
            offset += m.len();
            e
        })
        .collect();
    manifest.optimizer_step = ckpt.optimizer.step;
    io::write_f32(&tmp.join(WEIGHTS), &flat(store, |i| Some(store.get(crate::autograd::ParamId(i)).clone())))?;
    io::write_f32(&tmp.join(ADAM_M), &flat(store, |i| ckpt.optimizer.m.get(i).cloned().flatten()))?;
    io::write_f32(&tmp.join(ADAM_V), &flat(store, |i| ckpt.optimizer.v.get(i).cloned().flatten()))?;
    write_loss_csv(&tmp.join(LOSS_CSV), &ckpt.losses)?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    let mpath = tmp.join(MANIFEST);
    let mut f = fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&mpath, e))?;
    f.sync_all().map_err(|e| Error::io(&mpath, e))?;

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    let version = value.get("version").and_then(|v| v.as_str()).unwrap_or("<missing>");
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version.into(),
            expected: CHECKPOINT_VERSION.into(),
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Manifest {
        path,
        msg: e.to_string(),
    })
}

fn unflatten(flat: &Mat, entries: &[TensorEntry]) -> Vec<Mat> {
    entries
        .iter()
        .map(|e| {
            let vals = flat.as_slice().expect("contiguous")[e.offset..e.offset + e.rows * e.cols].to_vec();
            Mat::from_shape_vec((e.rows, e.cols), vals).expect("entry shape")
        })
        .collect()
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    let mut model = build_model(&manifest.model_config, 0)?;
    if let Some(p) = &manifest.peft_config {
        model.inject_peft(p)?;
    }
    let total: usize = manifest.tensors.iter().map(|e| e.rows * e.cols).sum();
    let contiguous = manifest
        .tensors
        .iter()
        .scan(0, |off, e| {
            let ok = e.offset == *off;
            *off += e.rows * e.cols;
            Some(ok)
        })
        .all(|ok| ok);
    if !contiguous {
        return Err(Error::Manifest {
            path: dir.join(MANIFEST),
            msg: "tensor offsets are not contiguous".into(),
        });
    }
    let weights = io::read_f32(&dir.join(WEIGHTS), total, 1)?;
    let tensors = unflatten(&weights, &manifest.tensors);
    model.load_weights(manifest.tensors.iter().map(|e| e.name.as_str()).zip(tensors))?;

    let mut optimizer = Adam::new(manifest.train_config.adam(), &model.store);
    optimizer.step = manifest.optimizer_step;
    for (file, slot) in [(ADAM_M, &mut optimizer.m), (ADAM_V, &mut optimizer.v)] {
        let flat = io::read_f32(&dir.join(file), total, 1)?;
        for (e, m) in manifest.tensors.iter().zip(unflatten(&flat, &manifest.tensors)) {
            let id = model.store.id(&e.name).expect("loaded above");
            slot[id.0] = Some(m);
        }
    }
    let losses = read_loss_csv(&dir.join(LOSS_CSV))?;
    Ok(Checkpoint {
        manifest,
        model,
        optimizer,
        losses,
    })
}
