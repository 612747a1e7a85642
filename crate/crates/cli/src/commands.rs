use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dumotion::ablation::{format_csv, format_table, run_ablation, standard_grid, AblationGrid, AblationSetup};
use dumotion::checkpoint::{load_checkpoint, save_checkpoint};
use dumotion::data::{generate_synthetic_dataset, load_dataset, save_dataset, split_dataset, Dataset, Emotion, Sample};
use dumotion::metrics::{evaluate as score, fit_feature_extractor, MetricReport, Scope};
use dumotion::training::{finetune_with_hook, pretrain as train_base, sample_dataset, sample_with, ConditionSetup, ConditionTask};

use crate::config::{self, Part, RunFile};
use crate::plot;
use crate::{Category, Common, Tag};

fn load_run(c: &Common) -> Result<RunFile> {
    if !c.config.is_file() {
        return Err(anyhow!("config file {} does not exist", c.config.display())).tag(Category::Path);
    }
    config::load(&c.config, &c.set, c.seed).tag(Category::Config)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| anyhow!("`paths.{key}` is required for this command"))
        .tag(Category::Config)
}

fn existing<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let path = required(p, key)?;
    if !path.exists() {
        return Err(anyhow!("`paths.{key}` = {} does not exist", path.display())).tag(Category::Path);
    }
    Ok(path)
}

/// Canonical form of a path that may not exist yet: the deepest existing
/// ancestor is resolved and the rest appended.
fn resolve(p: &Path) -> Result<PathBuf> {
    let abs = std::path::absolute(p).tag(Category::Path)?;
    let mut base = abs.as_path();
    let mut rest = Vec::new();
    while !base.exists() {
        match (base.parent(), base.file_name()) {
            (Some(parent), Some(name)) => {
                rest.push(name.to_os_string());
                base = parent;
            }
            _ => break,
        }
    }
    let mut out = base.canonicalize().tag(Category::Path)?;
    out.extend(rest.iter().rev());
    Ok(out)
}

/// Creates the output directory after checking it neither is nor contains
/// nor sits inside any input.
fn output_dir(run: &RunFile, inputs: &[&Path]) -> Result<PathBuf> {
    let out = required(&run.paths.output, "output")?.to_path_buf();
    let resolved = resolve(&out)?;
    for input in inputs {
        let canon_in = resolve(input)?;
        if resolved.starts_with(&canon_in) || canon_in.starts_with(&resolved) {
            return Err(anyhow!("output {} overlaps input {}", out.display(), input.display())).tag(Category::Path);
        }
    }
    fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .tag(Category::Path)?;
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .tag(Category::Path)
}

fn select(run: &RunFile, ds: Dataset, part: Part) -> Result<Dataset> {
    if part == Part::All {
        return Ok(ds);
    }
    let s = &run.split;
    let (train, val, test) = split_dataset(&ds, (s.train, s.val, s.test)).tag(Category::Config)?;
    let picked = match part {
        Part::Train => train,
        Part::Val => val,
        Part::Test => test,
        Part::All => unreachable!(),
    };
    if picked.is_empty() {
        bail!("the {part:?} split of the dataset is empty");
    }
    Ok(picked)
}

fn truncate(mut ds: Dataset, n: usize) -> Dataset {
    ds.samples.truncate(n);
    ds
}

pub fn synth_data(c: &Common) -> Result<()> {
    let run = load_run(c)?;
    let out = output_dir(&run, &[])?;
    let ds = generate_synthetic_dataset(&run.synthetic_spec())?;
    save_dataset(&ds, &out)?;
    println!("wrote {} clips to {}", ds.len(), out.display());
    Ok(())
}

pub fn pretrain(c: &Common) -> Result<()> {
    let run = load_run(c)?;
    let data = existing(&run.paths.dataset, "dataset")?;
    let out = output_dir(&run, &[data])?;
    let train = select(&run, load_dataset(data)?, Part::Train)?;
    let ckpt = train_base(&train, &run.model(), &run.train(false))?;
    let dir = out.join("checkpoint");
    save_checkpoint(&ckpt, &dir)?;
    if let Some(at) = ckpt.manifest.aborted_at {
        eprintln!("warning: non-finite loss at step {at}; kept the last finite weights");
    }
    let last = ckpt.losses.last().map_or(f64::NAN, |l| l.parts.total);
    println!("{} iterations, final loss {last:.5}, checkpoint {}", ckpt.manifest.iteration, dir.display());
    Ok(())
}

pub fn finetune(c: &Common, eval_every: Option<usize>) -> Result<()> {
    let run = load_run(c)?;
    let parent_dir = existing(&run.paths.checkpoint, "checkpoint")?;
    let data = existing(&run.paths.dataset, "dataset")?;
    let out = output_dir(&run, &[parent_dir, data])?;
    let parent = load_checkpoint(parent_dir)?;
    let full = load_dataset(data)?;
    let train = select(&run, full.clone(), Part::Train)?;
    let mut cfg = run.train(true);
    if let Some(n) = eval_every {
        cfg.eval_every = n;
    }
    let task = run.finetune.task;

    let mut snapshots: Vec<(usize, MetricReport)> = Vec::new();
    let ckpt = if cfg.eval_every > 0 {
        let held_out = truncate(select(&run, full, Part::Test)?, run.finetune.eval_clips);
        let ext = run.eval.extractor.clone();
        let (fmd_ex, _) = fit_feature_extractor(&train, Scope::Holistic, &ext)?;
        let (fgd_ex, _) = fit_feature_extractor(&train, Scope::Body, &ext)?;
        let setup = ConditionSetup::for_training(task, parent.model.config.cond_dim, &cfg, &train)?;
        let eval_cfg = run.eval.eval_config();
        let sample_seed = run.sample.seed;
        let mut hook = |step: usize, model: &dumotion::model::DuTrans| -> dumotion::Result<()> {
            let generated = sample_with(model, Some(&setup), &held_out, sample_seed)?;
            let report = score(&generated, &held_out, &fmd_ex, &fgd_ex, &eval_cfg)?;
            eprintln!("step {step}: fmd {} mse {}", report.fmd, report.mse);
            snapshots.push((step, report));
            Ok(())
        };
        finetune_with_hook(&parent, &train, &run.peft, &cfg, task, &mut hook)?
    } else {
        finetune_with_hook(&parent, &train, &run.peft, &cfg, task, &mut |_, _| Ok(()))?
    };

    let dir = out.join("checkpoint");
    save_checkpoint(&ckpt, &dir)?;
    if !snapshots.is_empty() {
        let mut csv = String::from("step");
        for (k, _) in snapshots[0].1.entries() {
            csv.push(',');
            csv.push_str(k);
        }
        csv.push('\n');
        for (step, r) in &snapshots {
            csv.push_str(&step.to_string());
            for (_, v) in r.entries() {
                csv.push(',');
                csv.push_str(&v.value().map_or(String::new(), |x| x.to_string()));
            }
            csv.push('\n');
        }
        write(&out.join("eval_snapshots.csv"), &csv)?;
    }
    let last = ckpt.losses.last().map_or(f64::NAN, |l| l.parts.total);
    println!("{} iterations, final loss {last:.5}, checkpoint {}", ckpt.manifest.iteration, dir.display());
    Ok(())
}

pub fn sample(c: &Common) -> Result<()> {
    let run = load_run(c)?;
    let ckpt_dir = existing(&run.paths.checkpoint, "checkpoint")?;
    let data = existing(&run.paths.dataset, "dataset")?;
    let ckpt = load_checkpoint(ckpt_dir)?;
    let mut ds = select(&run, load_dataset(data)?, run.sample.part)?;
    if let Some(n) = run.sample.limit {
        ds = truncate(ds, n);
    }
    let task = ckpt.manifest.condition_task;
    if let Some(e) = &run.sample.emotion {
        let e: Emotion = e.parse().tag(Category::Config)?;
        if task != Some(ConditionTask::Emotion) {
            return Err(anyhow!("an emotion prompt needs an emotion-finetuned checkpoint")).tag(Category::Config);
        }
        for s in &mut ds.samples {
            s.motion.emotion_label = e;
        }
    }
    if let Some(id) = &run.sample.identity {
        if task != Some(ConditionTask::Identity) {
            return Err(anyhow!("an identity prompt needs an identity-finetuned checkpoint")).tag(Category::Config);
        }
        if !ckpt.manifest.identity_stats.iter().any(|(l, _)| l == id) {
            return Err(anyhow!("identity `{id}` has no reference clip in the checkpoint")).tag(Category::Config);
        }
        for s in &mut ds.samples {
            s.motion.identity_label = id.clone();
        }
    }
    let out = output_dir(&run, &[ckpt_dir, data])?;
    let seed = run.seed.unwrap_or(run.sample.seed);
    let generated = sample_dataset(&ckpt, &ds, seed)?;
    let samples = generated
        .into_iter()
        .zip(&ds.samples)
        .map(|(m, src)| Sample::new(m, src.audio.clone()))
        .collect::<dumotion::Result<Vec<_>>>()?;
    let mut manifest = ds.manifest.clone();
    manifest.split = format!("generated-{}", manifest.split);
    let n = samples.len();
    save_dataset(&Dataset::new(samples, manifest)?, &out)?;
    println!("wrote {n} generated clips to {}", out.display());
    Ok(())
}

pub fn evaluate(c: &Common) -> Result<()> {
    let run = load_run(c)?;
    let gen_dir = existing(&run.paths.generated, "generated")?;
    let ref_dir = existing(&run.paths.reference, "reference")?;
    let out = output_dir(&run, &[gen_dir, ref_dir])?;
    let generated = load_dataset(gen_dir)?;
    let reference_all = load_dataset(ref_dir)?;
    let reference = select(&run, reference_all.clone(), run.eval.part)?;
    if generated.len() != reference.len() {
        return Err(anyhow!(
            "{} generated clips but {} reference clips",
            generated.len(),
            reference.len()
        ))
        .tag(Category::Data);
    }
    let ext = &run.eval.extractor;
    let (fmd_ex, _) = fit_feature_extractor(&reference_all, Scope::Holistic, ext)?;
    let (fgd_ex, _) = fit_feature_extractor(&reference_all, Scope::Body, ext)?;
    let mut eval_cfg = run.eval.eval_config();
    if let Some(s) = run.seed {
        eval_cfg.div_seed = s;
    }
    let report = score(&generated.motions(), &reference, &fmd_ex, &fgd_ex, &eval_cfg)?;
    write(&out.join("report.txt"), &report.to_text())?;
    if run.eval.csv {
        write(&out.join("metrics.csv"), &report.to_csv())?;
    }
    print!("{}", report.to_text());
    Ok(())
}

pub fn ablate(c: &Common) -> Result<()> {
    let run = load_run(c)?;
    let parent_dir = existing(&run.paths.checkpoint, "checkpoint")?;
    let data = existing(&run.paths.dataset, "dataset")?;
    let mut inputs = vec![parent_dir, data];
    let grid_path = match &run.paths.grid {
        Some(_) => Some(existing(&run.paths.grid, "grid")?),
        None => None,
    };
    inputs.extend(grid_path);
    let out = output_dir(&run, &inputs)?;

    let parent = load_checkpoint(parent_dir)?;
    let d = parent.model.config.d_model;
    let grid = match grid_path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).tag(Category::Path)?;
            let g: AblationGrid = toml::from_str(&text)
                .with_context(|| format!("grid file {}", p.display()))
                .tag(Category::Config)?;
            g.validate(d).tag(Category::Config)?;
            g
        }
        None => standard_grid(d),
    };

    let full = load_dataset(data)?;
    let train = select(&run, full.clone(), Part::Train)?;
    let test = truncate(select(&run, full, Part::Test)?, run.ablate.test_clips);
    let ext = &run.eval.extractor;
    let (fmd_ex, _) = fit_feature_extractor(&train, Scope::Holistic, ext)?;
    let (fgd_ex, _) = fit_feature_extractor(&train, Scope::Body, ext)?;
    let setup = AblationSetup {
        parent: &parent,
        train: &train,
        test: &test,
        train_config: run.train(true),
        task: run.finetune.task,
        eval: run.eval.eval_config(),
        fmd_extractor: &fmd_ex,
        fgd_extractor: &fgd_ex,
        sample_seed: run.seed.unwrap_or(run.ablate.sample_seed),
    };
    let rows = run_ablation(&setup, &grid)?;
    let table = format_table(&rows);
    write(&out.join("table.txt"), &table)?;
    write(&out.join("table.csv"), &format_csv(&rows))?;
    print!("{table}");
    Ok(())
}

pub fn plot(c: &Common) -> Result<()> {
    let run = load_run(c)?;
    if run.paths.inputs.is_empty() {
        return Err(anyhow!("`paths.inputs` must list at least one file or directory")).tag(Category::Config);
    }
    for p in &run.paths.inputs {
        if !p.exists() {
            return Err(anyhow!("input {} does not exist", p.display())).tag(Category::Path);
        }
    }
    let inputs: Vec<&Path> = run.paths.inputs.iter().map(PathBuf::as_path).collect();
    let out = output_dir(&run, &inputs)?;
    let written = match run.plot.kind {
        config::PlotKind::Loss => plot::loss_curves(&inputs, &out)?,
        config::PlotKind::Velocity => plot::velocity_comparison(&inputs, run.plot.clip, &out)?,
    };
    println!("wrote {}", written.display());
    Ok(())
}
