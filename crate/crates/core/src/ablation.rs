//! Adapter ablation grid: one finetune per variant, scored and tabulated.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{ensure, Result};
use crate::metrics::{evaluate, EvalConfig, FeatureExtractor, MetricReport};
use crate::model::{count_parameters, DuTransConfig};
use crate::peft::{per_layer_count, ConditionSource, PeftConfig, PeftVariant, ScaleMode, Site};
use crate::training::{finetune, sample_dataset, ConditionTask, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationVariant {
    pub name: String,
    #[serde(default)]
    pub group: String,
    pub peft: PeftConfig,
}

/// A grid file: a list of `[[variant]]` tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub variant: Vec<AblationVariant>,
}

impl AblationGrid {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        ensure!(!self.variant.is_empty(), Config, "ablation grid is empty");
        let mut names: Vec<&str> = self.variant.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        ensure!(names.len() == self.variant.len(), Config, "ablation variant names must be unique");
        for v in &self.variant {
            v.peft.validate(d_model)?;
        }
        Ok(())
    }
}

/// The location, scale, and PEFT-family rows. Ranks are scaled from a
/// 512-wide model (adapter 128, LoRA 64) to `d_model`; prefixes stay at 64.
pub fn standard_grid(d_model: usize) -> AblationGrid {
    let rank = (d_model / 4).max(1);
    let lora_rank = (d_model / 8).max(1);
    let base = PeftConfig {
        rank,
        ..PeftConfig::default()
    };
    let v = |name: &str, group: &str, peft: PeftConfig| AblationVariant {
        name: name.into(),
        group: group.into(),
        peft,
    };
    AblationGrid {
        variant: vec![
            v("serial", "location", PeftConfig { variant: PeftVariant::SerialAdapter, ..base.clone() }),
            v("parallel", "location", base.clone()),
            v("mha_only", "location", PeftConfig { sites: vec![Site::Mha], ..base.clone() }),
            v("ffn_only", "location", PeftConfig { sites: vec![Site::Ffn], ..base.clone() }),
            v("scalar_1.0", "scale", PeftConfig { scale: ScaleMode::Fixed, ..base.clone() }),
            v("l_scalar", "scale", PeftConfig { scale: ScaleMode::Learned, ..base.clone() }),
            v("dy_scale", "scale", base.clone()),
            v(
                "lora_r64",
                "peft",
                PeftConfig {
                    variant: PeftVariant::Lora,
                    rank: lora_rank,
                    ..base.clone()
                },
            ),
            v(
                "prefix_64",
                "peft",
                PeftConfig {
                    variant: PeftVariant::Prefix,
                    sites: vec![Site::Mha],
                    prefix_length: 64,
                    ..base
                },
            ),
        ],
    }
}

/// Trainable parameters after injection, from the architecture alone: the
/// three heads, adapters in every encoder layer of both branches, condition
/// projections, and identity encoders for the identity task.
pub fn closed_form_trainable(model: &DuTransConfig, peft: &PeftConfig, task: ConditionTask) -> usize {
    let d = model.d_model;
    let dims = model.dims;
    let head = |w: usize| d * w + w;
    let heads = head(dims.face) + head(dims.body) + head(dims.holistic());
    let adapters = 2 * model.encoder_layers * per_layer_count(peft, d);
    let z = model.cond_dim;
    let source = match (peft.condition_source, task) {
        (ConditionSource::None, _) => ConditionSource::None,
        (_, ConditionTask::Emotion) => ConditionSource::Emotion,
        (_, ConditionTask::Identity) => ConditionSource::Identity,
    };
    let cond = if source == ConditionSource::None { 0 } else { 2 * (z * d + d) };
    let mlp = |d_in: usize| d_in * 2 * z + 2 * z + 2 * z * z + z;
    let identity = if source == ConditionSource::Identity {
        mlp(2 * dims.face) + mlp(2 * dims.body)
    } else {
        0
    };
    heads + adapters + cond + identity
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub group: String,
    pub trainable: usize,
    pub closed_form: usize,
    pub final_loss: f64,
    pub report: MetricReport,
}

/// Everything a variant run needs besides the variant itself.
pub struct AblationSetup<'a> {
    pub parent: &'a Checkpoint,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub train_config: TrainConfig,
    pub task: ConditionTask,
    pub eval: EvalConfig,
    pub fmd_extractor: &'a FeatureExtractor,
    pub fgd_extractor: &'a FeatureExtractor,
    pub sample_seed: u64,
}

pub fn run_variant(setup: &AblationSetup<'_>, v: &AblationVariant) -> Result<AblationRow> {
    let ckpt = finetune(setup.parent, setup.train, &v.peft, &setup.train_config, setup.task)?;
    let trainable = count_parameters(&ckpt.model, true, &ckpt.frozen_mask())?;
    let generated = sample_dataset(&ckpt, setup.test, setup.sample_seed)?;
    let report = evaluate(&generated, setup.test, setup.fmd_extractor, setup.fgd_extractor, &setup.eval)?;
    Ok(AblationRow {
        name: v.name.clone(),
        group: v.group.clone(),
        trainable,
        closed_form: closed_form_trainable(&setup.parent.model.config, &v.peft, setup.task),
        final_loss: ckpt.losses.last().map_or(f64::NAN, |l| l.parts.total),
        report,
    })
}

pub fn run_ablation(setup: &AblationSetup<'_>, grid: &AblationGrid) -> Result<Vec<AblationRow>> {
    grid.validate(setup.parent.model.config.d_model)?;
    grid.variant.iter().map(|v| run_variant(setup, v)).collect()
}

/// Fixed-width text table, grouped rows in grid order.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<10} {:<12} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
        "group", "variant", "params", "FMD", "FGD", "BC", "DIV", "MSE", "LVD", "loss"
    );
    let cell = |v: &crate::metrics::MetricValue| v.value().map_or("undef".to_string(), |x| format!("{x:.4}"));
    for r in rows {
        let m = &r.report;
        out.push_str(&format!(
            "{:<10} {:<12} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10.4}\n",
            r.group,
            r.name,
            r.trainable,
            cell(&m.fmd),
            cell(&m.fgd),
            cell(&m.bc),
            cell(&m.div),
            cell(&m.mse),
            cell(&m.lvd),
            r.final_loss
        ));
    }
    out
}

pub fn format_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("group,variant,trainable,closed_form,fmd,fgd,bc,div,mse,lvd,final_loss\n");
    for r in rows {
        let vals: Vec<String> = r
            .report
            .entries()
            .iter()
            .map(|(_, v)| v.value().map_or(String::new(), |x| x.to_string()))
            .collect();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.group,
            r.name,
            r.trainable,
            r.closed_form,
            vals.join(","),
            r.final_loss
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use crate::peft::FrozenMask;

    fn small() -> DuTransConfig {
        DuTransConfig {
            d_model: 16,
            encoder_layers: 2,
            heads: 2,
            cond_dim: 4,
            max_frames: 12,
            diffusion_steps: 10,
            ..DuTransConfig::toy()
        }
    }

    #[test]
    fn grid_covers_every_row() {
        let g = standard_grid(64);
        let names: Vec<&str> = g.variant.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(
            names,
            ["serial", "parallel", "mha_only", "ffn_only", "scalar_1.0", "l_scalar", "dy_scale", "lora_r64", "prefix_64"]
        );
        g.validate(64).unwrap();
        let mut dup = g.clone();
        dup.variant.push(dup.variant[0].clone());
        assert!(dup.validate(64).is_err());
    }

    #[test]
    fn closed_form_matches_injection() {
        let cfg = small();
        for task in [ConditionTask::Emotion, ConditionTask::Identity] {
            for v in standard_grid(cfg.d_model).variant {
                let mut peft = v.peft.clone();
                peft.condition_source = match task {
                    ConditionTask::Emotion => ConditionSource::Emotion,
                    ConditionTask::Identity => ConditionSource::Identity,
                };
                let mut m = build_model(&cfg, 1).unwrap();
                let mask = m.inject_peft(&peft).unwrap();
                assert_eq!(
                    count_parameters(&m, true, &mask).unwrap(),
                    closed_form_trainable(&cfg, &v.peft, task),
                    "{} {:?}",
                    v.name,
                    task
                );
            }
        }
        let none = PeftConfig {
            condition_source: ConditionSource::None,
            ..PeftConfig::default()
        };
        let mut m = build_model(&cfg, 1).unwrap();
        let mask = m.inject_peft(&PeftConfig { rank: 4, ..none.clone() }).unwrap();
        assert_eq!(
            count_parameters(&m, true, &mask).unwrap(),
            closed_form_trainable(&cfg, &PeftConfig { rank: 4, ..none }, ConditionTask::Emotion)
        );
        assert!(count_parameters(&m, false, &FrozenMask::none()).unwrap() > 0);
    }

    #[test]
    fn grid_round_trips_through_json() {
        let g = standard_grid(32);
        let back: AblationGrid = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(back, g);
    }
}
