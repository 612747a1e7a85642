//! End-to-end use of the public API on a tiny model, plus schedule and
//! distance invariants over random inputs.

use dumotion::checkpoint::{frozen_hash, load_checkpoint, save_checkpoint};
use dumotion::data::{generate_synthetic_dataset, load_dataset, save_dataset, split_dataset, SyntheticSpec};
use dumotion::diffusion::cosine_schedule;
use dumotion::metrics::{frechet_distance, GaussianStats};
use dumotion::model::DuTransConfig;
use dumotion::peft::{PeftConfig, PeftVariant};
use dumotion::training::{finetune, pretrain, sample_dataset, ConditionTask, TrainConfig};
use ndarray::Array2;
use proptest::prelude::*;

fn tiny() -> DuTransConfig {
    DuTransConfig {
        d_model: 16,
        encoder_layers: 1,
        heads: 2,
        cond_dim: 8,
        max_frames: 24,
        diffusion_steps: 8,
        ..DuTransConfig::toy()
    }
}

#[test]
fn pretrain_finetune_sample_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_samples: 10,
        frames: 24,
        emotions: SyntheticSpec::emotional_set(),
        seed: 4,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic_dataset(&spec).unwrap();
    save_dataset(&ds, dir.path().join("data")).unwrap();
    let ds = load_dataset(dir.path().join("data")).unwrap();
    let (train, _, test) = split_dataset(&ds, (0.6, 0.0, 0.4)).unwrap();
    assert_eq!((train.len(), test.len()), (6, 4));

    let cfg = TrainConfig {
        iterations: 3,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let base = pretrain(&train, &tiny(), &cfg).unwrap();
    assert_eq!(base.losses.len(), 3);
    save_checkpoint(&base, dir.path().join("base")).unwrap();
    let base = load_checkpoint(dir.path().join("base")).unwrap();

    let peft = PeftConfig {
        variant: PeftVariant::Lora,
        rank: 4,
        ..PeftConfig::default()
    };
    let tuned = finetune(&base, &train, &peft, &TrainConfig { lr: 1e-3, ..cfg }, ConditionTask::Emotion).unwrap();
    assert_eq!(tuned.manifest.parent.as_deref(), Some(base.manifest.id.as_str()));
    let mask = tuned.frozen_mask();
    assert_eq!(frozen_hash(&tuned.model, &mask).unwrap(), tuned.manifest.frozen_hash);

    save_checkpoint(&tuned, dir.path().join("tuned")).unwrap();
    let reloaded = load_checkpoint(dir.path().join("tuned")).unwrap();
    assert_eq!(reloaded.manifest, {
        let mut m = tuned.manifest.clone();
        m.tensors = reloaded.manifest.tensors.clone();
        m
    });
    let a = sample_dataset(&tuned, &test, 9).unwrap();
    let b = sample_dataset(&reloaded, &test, 9).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, sample_dataset(&tuned, &test, 10).unwrap());
    for (g, s) in a.iter().zip(&test.samples) {
        assert_eq!(g.face.dim(), s.motion.face.dim());
        assert_eq!(g.emotion_label, s.motion.emotion_label);
    }
}

fn stats(seed: u64, n: usize, d: usize, shift: f64) -> GaussianStats {
    let mut x = seed | 1;
    let m = Array2::from_shape_fn((n, d), |(_, j)| {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        (x >> 11) as f64 / (1u64 << 53) as f64 + shift * (j == 0) as u8 as f64
    });
    GaussianStats::fit(&m).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn alpha_bar_is_strictly_decreasing_in_unit_interval(steps in 2usize..2000, s in 1e-4f64..0.5) {
        let sched = cosine_schedule(steps, s).unwrap();
        prop_assert_eq!(sched.alpha_bar.len(), steps);
        prop_assert!(sched.alpha_bar.iter().all(|a| *a > 0.0 && *a < 1.0));
        prop_assert!(sched.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(sched.beta.iter().all(|b| *b > 0.0 && *b <= 0.999));
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(sa in any::<u64>(), sb in any::<u64>(), shift in 0.0f64..3.0) {
        let a = stats(sa, 40, 4, 0.0);
        let b = stats(sb, 40, 4, shift);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab.abs()));
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    }
}
