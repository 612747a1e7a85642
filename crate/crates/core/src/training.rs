//! Diffusion pretraining and adapter finetuning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph};
use crate::checkpoint::{checkpoint_id, dataset_hash, frozen_hash, Checkpoint, CheckpointManifest, LossRecord, CHECKPOINT_VERSION};
use crate::conditioning::{identity_reference_stats, identity_stats, ConditionEmbedding, EmotionTable, IdentityStats};
use crate::data::{Dataset, MotionSequence, Sample};
use crate::diffusion::{q_sample, sample_loop, standard_normal, NoiseSchedule};
use crate::error::{ensure, Error, Result};
use crate::loss::{total_loss_graph, LossParts};
use crate::model::{build_model, DuTrans, DuTransConfig, ForwardCtx};
use crate::nn::splitmix64;
use crate::optim::{Adam, AdamConfig};
use crate::peft::{ConditionSource, FrozenMask, PeftConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionTask {
    Identity,
    Emotion,
}

impl std::str::FromStr for ConditionTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(ConditionTask::Identity),
            "emotion" => Ok(ConditionTask::Emotion),
            _ => Err(Error::InvalidArgument(format!("unknown condition task `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub lambda_face: f64,
    pub lambda_body: f64,
    pub seed: u64,
    /// Run the evaluation hook every this many steps; 0 disables it.
    pub eval_every: usize,
    pub grad_clip: Option<f64>,
    pub emotion_table_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            batch_size: 16,
            iterations: 1000,
            lambda_face: 0.5,
            lambda_body: 0.5,
            seed: 0,
            eval_every: 0,
            grad_clip: None,
            emotion_table_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn finetune() -> Self {
        TrainConfig {
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "lr must be positive");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Config,
            "Adam betas must lie in [0, 1)"
        );
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1");
        ensure!(self.lambda_face >= 0.0 && self.lambda_body >= 0.0, Config, "loss weights must be non-negative");
        if let Some(c) = self.grad_clip {
            ensure!(c > 0.0, Config, "grad_clip must be positive");
        }
        Ok(())
    }
}

/// Condition routing for a finetuned model.
#[derive(Clone, Debug)]
pub struct ConditionSetup {
    pub task: ConditionTask,
    pub d_z: usize,
    pub table: EmotionTable,
    pub identities: Vec<(String, IdentityStats)>,
}

impl ConditionSetup {
    /// Condition for a sample: the lookup row of its emotion, or the stored
    /// reference statistics of its identity (the sample's own clip if unseen).
    pub fn for_sample(&self, s: &Sample) -> Result<ConditionEmbedding> {
        match self.task {
            ConditionTask::Emotion => Ok(ConditionEmbedding::emotion(
                self.table.lookup(s.emotion_label()),
                crate::conditioning::Provenance::Lookup,
                Some(s.emotion_label()),
            )),
            ConditionTask::Identity => {
                let label = s.identity_label();
                let stats = match self.identities.iter().find(|(l, _)| l == label) {
                    Some((_, st)) => st.clone(),
                    None => identity_stats(&s.motion.face, &s.motion.body)?,
                };
                Ok(ConditionEmbedding::identity(stats, self.d_z, label))
            }
        }
    }

    /// The routing a finetune on `ds` uses: the seeded lookup table and each
    /// identity's reference clip.
    pub fn for_training(task: ConditionTask, d_z: usize, cfg: &TrainConfig, ds: &Dataset) -> Result<Self> {
        Ok(ConditionSetup {
            task,
            d_z,
            table: EmotionTable::new(d_z, cfg.emotion_table_seed)?,
            identities: identity_reference_stats(ds)?,
        })
    }

    pub fn from_manifest(m: &CheckpointManifest) -> Option<Self> {
        Some(ConditionSetup {
            task: m.condition_task?,
            d_z: m.model_config.cond_dim,
            table: m.emotion_table.clone()?,
            identities: m.identity_stats.clone(),
        })
    }
}

/// Outcome of one gradient step over a batch.
struct StepResult {
    grads: Gradients,
    parts: LossParts,
}

fn sample_step(
    model: &DuTrans,
    trainable: &[bool],
    sched: &NoiseSchedule,
    sample: &Sample,
    cond: Option<&ConditionEmbedding>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<StepResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(0..sched.steps());
    let h0 = sample.motion.holistic();
    let noise = standard_normal(&mut rng, h0.nrows(), h0.ncols());
    let ht = q_sample(&h0, t, &noise, sched)?;
    let df = model.config.dims.face;
    let mut g = Graph::with_trainable(&model.store, trainable);
    let ft = g.input(ht.slice(ndarray::s![.., ..df]).to_owned());
    let bt = g.input(ht.slice(ndarray::s![.., df..]).to_owned());
    let mut ctx = ForwardCtx {
        rng: Some(&mut rng),
        gates: None,
    };
    let out = model.forward_graph(&mut g, ft, bt, &sample.audio, t, cond, &mut ctx)?;
    let f0 = g.input(sample.motion.face.clone());
    let b0 = g.input(sample.motion.body.clone());
    let h0 = g.input(h0);
    let lv = total_loss_graph(&mut g, f0, out.face, b0, out.body, h0, out.holistic, cfg.lambda_face, cfg.lambda_body);
    let parts = lv.values(&g);
    let grads = if parts.total.is_finite() {
        g.backward(lv.total)
    } else {
        Gradients::zeros_like(&model.store)
    };
    Ok(StepResult { grads, parts })
}

fn run_batch(
    model: &DuTrans,
    trainable: &[bool],
    sched: &NoiseSchedule,
    items: &[(usize, u64)],
    ds: &Dataset,
    conds: &[Option<ConditionEmbedding>],
    cfg: &TrainConfig,
) -> Result<Vec<StepResult>> {
    let one = |&(i, seed): &(usize, u64)| sample_step(model, trainable, sched, &ds.samples[i], conds[i].as_ref(), cfg, seed);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(one).collect()
    }
}

/// Called with the step count and the current model every `eval_every` steps.
pub type EvalHook<'a> = dyn FnMut(usize, &DuTrans) -> Result<()> + 'a;

struct LoopOutput {
    losses: Vec<LossRecord>,
    aborted_at: Option<usize>,
}

fn train_loop(
    model: &mut DuTrans,
    opt: &mut Adam,
    mask: &FrozenMask,
    ds: &Dataset,
    conds: &[Option<ConditionEmbedding>],
    cfg: &TrainConfig,
    hook: &mut EvalHook<'_>,
) -> Result<LoopOutput> {
    let sched = model.config.schedule()?;
    let trainable = mask.trainable_flags(&model.store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let items: Vec<(usize, u64)> = (0..cfg.batch_size)
            .map(|_| (rng.random_range(0..ds.len()), rng.random::<u64>()))
            .collect();
        let results = run_batch(model, &trainable, &sched, &items, ds, conds, cfg)?;
        let b = results.len() as f64;
        let mut grads = Gradients::zeros_like(&model.store);
        let mut parts = LossParts::default();
        for r in &results {
            grads.accumulate(&r.grads, 1.0 / b);
            parts.l_h += r.parts.l_h / b;
            parts.l_f += r.parts.l_f / b;
            parts.l_b += r.parts.l_b / b;
        }
        parts.total = parts.l_h + cfg.lambda_face * parts.l_f + cfg.lambda_body * parts.l_b;
        if !parts.total.is_finite() || grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Ok(LoopOutput {
                losses,
                aborted_at: Some(step),
            });
        }
        if let Some(c) = cfg.grad_clip {
            let norm = grads.global_norm();
            if norm > c {
                grads.scale(c / norm);
            }
        }
        opt.update(&mut model.store, &grads);
        losses.push(LossRecord { step, parts });
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            hook(step + 1, model)?;
        }
    }
    Ok(LoopOutput {
        losses,
        aborted_at: None,
    })
}

pub fn pretrain(ds: &Dataset, model_cfg: &DuTransConfig, cfg: &TrainConfig) -> Result<Checkpoint> {
    pretrain_with_hook(ds, model_cfg, cfg, &mut |_, _| Ok(()))
}

/// Trains every parameter of a freshly built model. A non-finite loss stops
/// training; the returned checkpoint then holds the last finite weights and
/// records the failing step in `aborted_at`.
pub fn pretrain_with_hook(ds: &Dataset, model_cfg: &DuTransConfig, cfg: &TrainConfig, hook: &mut EvalHook<'_>) -> Result<Checkpoint> {
    cfg.validate()?;
    ensure!(!ds.is_empty(), InvalidArgument, "cannot pretrain on an empty dataset");
    check_dims(model_cfg, ds)?;
    let mut model = build_model(model_cfg, splitmix64(cfg.seed))?;
    let mut opt = Adam::new(cfg.adam(), &model.store);
    let mask = FrozenMask::none();
    let conds = vec![None; ds.len()];
    let out = train_loop(&mut model, &mut opt, &mask, ds, &conds, cfg, hook)?;
    let iteration = out.losses.len();
    Ok(Checkpoint {
        manifest: CheckpointManifest {
            version: CHECKPOINT_VERSION.into(),
            id: checkpoint_id(&model, None, iteration),
            parent: None,
            model_config: model_cfg.clone(),
            peft_config: None,
            condition_task: None,
            frozen_mask: vec![],
            frozen_hash: frozen_hash(&model, &mask)?,
            train_config: cfg.clone(),
            seed: cfg.seed,
            iteration,
            dataset_hash: dataset_hash(ds),
            emotion_table: None,
            identity_stats: vec![],
            tensors: vec![],
            optimizer_step: opt.step,
            aborted_at: out.aborted_at,
        },
        model,
        optimizer: opt,
        losses: out.losses,
    })
}

fn check_dims(model_cfg: &DuTransConfig, ds: &Dataset) -> Result<()> {
    ensure!(
        ds.manifest.dims == model_cfg.dims,
        Shape,
        "dataset dims {:?} do not match model dims {:?}",
        ds.manifest.dims,
        model_cfg.dims
    );
    for s in &ds.samples {
        ensure!(
            s.motion.frames() <= model_cfg.max_frames && s.motion.frames() >= 2,
            Shape,
            "sample of {} frames outside [2, {}]",
            s.motion.frames(),
            model_cfg.max_frames
        );
    }
    Ok(())
}

pub fn finetune(parent: &Checkpoint, ds: &Dataset, peft: &PeftConfig, cfg: &TrainConfig, task: ConditionTask) -> Result<Checkpoint> {
    finetune_with_hook(parent, ds, peft, cfg, task, &mut |_, _| Ok(()))
}

/// Injects adapters into a copy of the parent, freezes the base and trains
/// the rest. Fails if any frozen tensor changed.
pub fn finetune_with_hook(
    parent: &Checkpoint,
    ds: &Dataset,
    peft: &PeftConfig,
    cfg: &TrainConfig,
    task: ConditionTask,
    hook: &mut EvalHook<'_>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    ensure!(!ds.is_empty(), InvalidArgument, "cannot finetune on an empty dataset");
    check_dims(&parent.model.config, ds)?;
    let mut peft = peft.clone();
    peft.condition_source = match (peft.condition_source, task) {
        (ConditionSource::None, _) => ConditionSource::None,
        (_, ConditionTask::Emotion) => ConditionSource::Emotion,
        (_, ConditionTask::Identity) => ConditionSource::Identity,
    };
    let mut model = parent.model.clone();
    let mask = match &model.peft {
        Some(existing) => {
            ensure!(existing.config == peft, Config, "parent already carries a different PEFT configuration");
            parent.frozen_mask()
        }
        None => model.inject_peft(&peft)?,
    };
    let before = frozen_hash(&model, &mask)?;
    let setup = ConditionSetup::for_training(task, model.config.cond_dim, cfg, ds)?;
    let conds = ds
        .samples
        .iter()
        .map(|s| setup.for_sample(s).map(Some))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = Adam::new(cfg.adam(), &model.store);
    let out = train_loop(&mut model, &mut opt, &mask, ds, &conds, cfg, hook)?;
    let after = frozen_hash(&model, &mask)?;
    if before != after {
        return Err(Error::Config("frozen parameters changed during finetuning".into()));
    }
    let iteration = out.losses.len();
    Ok(Checkpoint {
        manifest: CheckpointManifest {
            version: CHECKPOINT_VERSION.into(),
            id: checkpoint_id(&model, Some(&parent.manifest.id), iteration),
            parent: Some(parent.manifest.id.clone()),
            model_config: model.config.clone(),
            peft_config: Some(peft),
            condition_task: Some(task),
            frozen_mask: mask.0.iter().cloned().collect(),
            frozen_hash: after,
            train_config: cfg.clone(),
            seed: cfg.seed,
            iteration,
            dataset_hash: dataset_hash(ds),
            emotion_table: Some(setup.table),
            identity_stats: setup.identities,
            tensors: vec![],
            optimizer_step: opt.step,
            aborted_at: out.aborted_at,
        },
        model,
        optimizer: opt,
        losses: out.losses,
    })
}

/// Runs the reverse process once per dataset item, conditioned as the
/// checkpoint was trained. Item `i` uses seed `splitmix64(seed ^ i)`, so the
/// output does not depend on thread count.
pub fn sample_dataset(ckpt: &Checkpoint, ds: &Dataset, seed: u64) -> Result<Vec<MotionSequence>> {
    let setup = ConditionSetup::from_manifest(&ckpt.manifest);
    sample_with(&ckpt.model, setup.as_ref(), ds, seed)
}

/// [`sample_dataset`] for an in-memory model with explicit condition routing.
pub fn sample_with(model: &DuTrans, setup: Option<&ConditionSetup>, ds: &Dataset, seed: u64) -> Result<Vec<MotionSequence>> {
    check_dims(&model.config, ds)?;
    let sched = model.config.schedule()?;
    let dims = model.config.dims;
    let one = |(i, s): (usize, &Sample)| -> Result<MotionSequence> {
        let cond = setup.map(|c| c.for_sample(s)).transpose()?;
        let mut m = sample_loop(
            model,
            &s.audio,
            cond.as_ref(),
            dims.face,
            dims.holistic(),
            &sched,
            splitmix64(seed ^ i as u64),
            s.motion.fps,
        )?;
        m.identity_label = s.motion.identity_label.clone();
        m.emotion_label = s.motion.emotion_label;
        Ok(m)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        ds.samples.par_iter().enumerate().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        ds.samples.iter().enumerate().map(one).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{load_checkpoint, save_checkpoint};
    use crate::data::{generate_synthetic_dataset, Dims, SyntheticSpec};

    fn tiny_model() -> DuTransConfig {
        DuTransConfig {
            d_model: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            biflow_layers: vec![1],
            max_frames: 12,
            diffusion_steps: 20,
            cond_dim: 8,
            ..DuTransConfig::toy()
        }
    }

    fn tiny_data(n: usize) -> Dataset {
        generate_synthetic_dataset(&SyntheticSpec {
            n_samples: n,
            frames: 12,
            dims: Dims::DESK,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn cfg(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn deterministic_short_run() {
        let ds = tiny_data(3);
        let a = pretrain(&ds, &tiny_model(), &cfg(5)).unwrap();
        let b = pretrain(&ds, &tiny_model(), &cfg(5)).unwrap();
        for ((_, _, x), (_, _, y)) in a.model.store.iter().zip(b.model.store.iter()) {
            assert_eq!(x, y);
        }
        assert_eq!(a.manifest.id, b.manifest.id);
    }

    #[test]
    fn logged_total_is_weighted_sum() {
        let ds = tiny_data(2);
        let ck = pretrain(&ds, &tiny_model(), &cfg(4)).unwrap();
        for r in &ck.losses {
            let p = r.parts;
            assert!((p.total - (p.l_h + 0.5 * p.l_f + 0.5 * p.l_b)).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_dimension_mismatch_before_training() {
        let ds = tiny_data(2);
        let bad = DuTransConfig {
            dims: Dims { face: 5, ..Dims::DESK },
            ..tiny_model()
        };
        assert!(pretrain(&ds, &bad, &cfg(1)).is_err());
        let ck = pretrain(&ds, &tiny_model(), &cfg(1)).unwrap();
        let other = generate_synthetic_dataset(&SyntheticSpec {
            n_samples: 2,
            frames: 12,
            dims: Dims { body: 10, ..Dims::DESK },
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert!(finetune(&ck, &other, &PeftConfig { rank: 4, ..PeftConfig::default() }, &cfg(1), ConditionTask::Emotion).is_err());
    }

    #[test]
    fn zero_step_finetune_matches_parent() {
        let ds = tiny_data(2);
        let parent = pretrain(&ds, &tiny_model(), &cfg(3)).unwrap();
        let ft = finetune(&parent, &ds, &PeftConfig { rank: 4, ..PeftConfig::default() }, &cfg(0), ConditionTask::Emotion).unwrap();
        let s = &ds.samples[0];
        let setup = ConditionSetup::from_manifest(&ft.manifest).unwrap();
        let c = setup.for_sample(s).unwrap();
        let a = parent.model.forward(&s.motion.face, &s.motion.body, &s.audio, 7, None).unwrap();
        let b = ft.model.forward(&s.motion.face, &s.motion.body, &s.audio, 7, Some(&c)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ft.manifest.parent.as_deref(), Some(parent.manifest.id.as_str()));
    }

    #[test]
    fn finetune_keeps_frozen_tensors() {
        let ds = tiny_data(3);
        let parent = pretrain(&ds, &tiny_model(), &cfg(2)).unwrap();
        for task in [ConditionTask::Emotion, ConditionTask::Identity] {
            let ft = finetune(&parent, &ds, &PeftConfig { rank: 4, ..PeftConfig::default() }, &cfg(10), task).unwrap();
            let mask = ft.frozen_mask();
            assert_eq!(frozen_hash(&ft.model, &mask).unwrap(), frozen_hash(&parent.model, &mask).unwrap());
            let head = ft.model.store.id("head.holistic.weight").unwrap();
            assert_ne!(ft.model.store.get(head), parent.model.store.get(head));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let ds = tiny_data(2);
        let parent = pretrain(&ds, &tiny_model(), &cfg(3)).unwrap();
        let ft = finetune(&parent, &ds, &PeftConfig { rank: 4, ..PeftConfig::default() }, &cfg(3), ConditionTask::Identity).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        save_checkpoint(&ft, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.losses, ft.losses);
        let s = &ds.samples[1];
        let setup = ConditionSetup::from_manifest(&back.manifest).unwrap();
        let c = setup.for_sample(s).unwrap();
        let a = ft.model.forward(&s.motion.face, &s.motion.body, &s.audio, 4, Some(&c)).unwrap();
        let b = back.model.forward(&s.motion.face, &s.motion.body, &s.audio, 4, Some(&c)).unwrap();
        assert_eq!(a, b);
        // Overwriting an existing checkpoint directory works.
        save_checkpoint(&parent, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().manifest.id, parent.manifest.id);
    }

    #[test]
    fn eval_hook_cadence() {
        let ds = tiny_data(2);
        let mut seen = vec![];
        let c = TrainConfig {
            eval_every: 2,
            ..cfg(5)
        };
        pretrain_with_hook(&ds, &tiny_model(), &c, &mut |s, _| {
            seen.push(s);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![2, 4]);
    }

    #[test]
    fn non_finite_loss_aborts_with_last_good_weights() {
        let mut ds = tiny_data(2);
        ds.samples[0].motion.face[[0, 0]] = f64::NAN;
        ds.samples[1].motion.face[[0, 0]] = f64::NAN;
        let ck = pretrain(&ds, &tiny_model(), &cfg(3)).unwrap();
        assert_eq!(ck.manifest.aborted_at, Some(0));
        assert!(ck.model.store.iter().all(|(_, _, m)| m.iter().all(|v| v.is_finite())));
    }
}
