//! Run configuration: a TOML file, then `--set` overrides, then `--seed`,
//! checked against the schema before any work starts.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dumotion::data::SyntheticSpec;
use dumotion::metrics::{EvalConfig, ExtractorConfig};
use dumotion::model::DuTransConfig;
use dumotion::peft::PeftConfig;
use dumotion::training::{ConditionTask, TrainConfig};
use serde::Deserialize;
use toml::{Table, Value};

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub generated: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmotionPreset {
    #[default]
    Neutral,
    Emotional,
    All,
}

/// Which slice of a dataset directory a command reads, cut by `[split]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Train,
    Val,
    Test,
    #[default]
    All,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            train: 0.8,
            val: 0.0,
            test: 0.2,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub task: ConditionTask,
    /// Held-out clips scored at each evaluation snapshot.
    pub eval_clips: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            task: ConditionTask::Emotion,
            eval_clips: 4,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub part: Part,
    pub limit: Option<usize>,
    pub emotion: Option<String>,
    pub identity: Option<String>,
    pub seed: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            part: Part::Test,
            limit: None,
            emotion: None,
            identity: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Slice of the reference directory the generated clips correspond to.
    pub part: Part,
    pub div_pairs: Option<usize>,
    pub div_seed: u64,
    pub extractor: ExtractorConfig,
    /// Also write `metrics.csv`.
    pub csv: bool,
}

impl EvalSection {
    pub fn eval_config(&self) -> EvalConfig {
        let d = EvalConfig::default();
        EvalConfig {
            div_pairs: self.div_pairs.unwrap_or(d.div_pairs),
            div_seed: self.div_seed,
            extractor: self.extractor.clone(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub test_clips: usize,
    pub sample_seed: u64,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            test_clips: 8,
            sample_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    #[default]
    Loss,
    Velocity,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotSection {
    pub kind: PlotKind,
    pub clip: usize,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunFile {
    pub seed: Option<u64>,
    pub emotion_preset: EmotionPreset,
    pub paths: Paths,
    pub data: SyntheticSpec,
    pub split: SplitSection,
    pub model: Option<DuTransConfig>,
    pub train: Option<TrainConfig>,
    pub peft: PeftConfig,
    pub finetune: FinetuneSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub plot: PlotSection,
}

impl RunFile {
    pub fn model(&self) -> DuTransConfig {
        self.model.clone().unwrap_or_else(DuTransConfig::toy)
    }

    /// Training settings; the default depends on whether this is a finetune.
    pub fn train(&self, finetune: bool) -> TrainConfig {
        let mut t = self
            .train
            .clone()
            .unwrap_or_else(|| if finetune { TrainConfig::finetune() } else { TrainConfig::default() });
        if let Some(s) = self.seed {
            t.seed = s;
        }
        t
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let mut spec = self.data.clone();
        match self.emotion_preset {
            EmotionPreset::Neutral => {}
            EmotionPreset::Emotional => spec.emotions = SyntheticSpec::emotional_set(),
            EmotionPreset::All => spec.emotions = SyntheticSpec::all_emotions(),
        }
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        spec
    }
}

/// Parses the right-hand side of `--set` as a TOML value, falling back to a
/// bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply_override(root: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty segment");
    }
    let (last, prefix) = parts.split_last().expect("non-empty");
    let mut table = root;
    for p in prefix {
        let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{key}`: `{p}` is not a section"))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<RunFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse(&text, overrides, seed).with_context(|| format!("in config {}", path.display()))
}

pub fn parse(text: &str, overrides: &[String], seed: Option<u64>) -> Result<RunFile> {
    let mut root: Table = text.parse().context("config is not valid TOML")?;
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    if let Some(s) = seed {
        root.insert("seed".into(), Value::Integer(s as i64));
    }
    let rank_given = root.get("peft").and_then(|p| p.get("rank")).is_some();
    let mut run: RunFile = Value::Table(root).try_into().context("config does not match the schema")?;
    if !rank_given {
        // Adapter width defaults to a quarter of the model width.
        run.peft.rank = (run.model().d_model / 4).max(1);
    }
    run.data.validate().context("[data]")?;
    run.model().validate().context("[model]")?;
    run.train(false).validate().context("[train]")?;
    run.peft.validate(run.model().d_model).context("[peft]")?;
    let s = &run.split;
    if ![s.train, s.val, s.test].iter().all(|f| f.is_finite() && *f >= 0.0) || (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
        bail!("[split] fractions must be non-negative and sum to 1");
    }
    Ok(run)
}
