//! Browser bindings: noise-schedule curves, synthetic clips with their beat
//! alignment, and adapter parameter accounting.

use dumotion::ablation::closed_form_trainable;
use dumotion::data::{compute_velocity, Emotion, SyntheticGenerator, SyntheticSpec};
use dumotion::diffusion::cosine_schedule;
use dumotion::metrics::{audio_beats, beat_consistency, kinematic_beats};
use dumotion::model::DuTransConfig;
use dumotion::peft::{PeftConfig, PeftVariant, Site};
use dumotion::training::ConditionTask;
use wasm_bindgen::prelude::*;

fn js(e: dumotion::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn alpha_bar(steps: usize, offset: f64) -> dumotion::Result<Vec<f64>> {
    Ok(cosine_schedule(steps, offset)?.alpha_bar)
}

/// Cumulative signal fraction per diffusion step.
#[wasm_bindgen(js_name = alphaBar)]
pub fn alpha_bar_js(steps: usize, offset: f64) -> Result<Vec<f64>, JsError> {
    alpha_bar(steps, offset).map_err(js)
}

/// One generated clip reduced to what the page draws.
#[wasm_bindgen]
pub struct Clip {
    speed: Vec<f64>,
    rhythm: Vec<f64>,
    audio_beats: Vec<u32>,
    motion_beats: Vec<u32>,
    bc: f64,
}

#[wasm_bindgen]
impl Clip {
    #[wasm_bindgen(getter)]
    pub fn speed(&self) -> Vec<f64> {
        self.speed.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn rhythm(&self) -> Vec<f64> {
        self.rhythm.clone()
    }

    #[wasm_bindgen(getter, js_name = audioBeats)]
    pub fn audio_beats(&self) -> Vec<u32> {
        self.audio_beats.clone()
    }

    #[wasm_bindgen(getter, js_name = motionBeats)]
    pub fn motion_beats(&self) -> Vec<u32> {
        self.motion_beats.clone()
    }

    /// Beat consistency, NaN when either beat set is empty.
    #[wasm_bindgen(getter)]
    pub fn bc(&self) -> f64 {
        self.bc
    }
}

fn synth_clip(seed: u64, identity: usize, emotion: &str, frames: usize) -> dumotion::Result<Clip> {
    let label: Emotion = emotion.parse()?;
    let spec = SyntheticSpec {
        frames,
        emotions: SyntheticSpec::all_emotions(),
        ..SyntheticSpec::default()
    };
    if identity >= spec.identities.len() {
        return Err(dumotion::Error::InvalidArgument(format!(
            "identity {identity} out of range 0..{}",
            spec.identities.len()
        )));
    }
    let emotion_index = spec.emotions.iter().position(|e| e.label == label).expect("all emotions listed");
    let sample = SyntheticGenerator::new(&spec)?.sample(seed, identity, emotion_index)?;
    let body = &sample.motion.body;
    let speed = compute_velocity(body)?
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    let rhythm = &sample.audio.rhythm;
    let to_u32 = |v: Vec<usize>| v.into_iter().map(|i| i as u32).collect();
    Ok(Clip {
        speed,
        rhythm: rhythm.column(0).to_vec(),
        audio_beats: to_u32(audio_beats(rhythm)),
        motion_beats: to_u32(kinematic_beats(body)?),
        bc: beat_consistency(body, rhythm, sample.motion.fps).unwrap_or(f64::NAN),
    })
}

/// Generates one synthetic clip. `identity` indexes the three built-in
/// speakers; `emotion` is a category name such as "anger".
#[wasm_bindgen(js_name = synthClip)]
pub fn synth_clip_js(seed: u32, identity: usize, emotion: &str, frames: usize) -> Result<Clip, JsError> {
    synth_clip(seed as u64, identity, emotion, frames).map_err(js)
}

fn trainable(variant: &str, d_model: usize, layers: usize, rank: usize, prefix: usize, identity: bool) -> dumotion::Result<usize> {
    let variant = match variant {
        "x_adapter" => PeftVariant::XAdapter,
        "serial_adapter" => PeftVariant::SerialAdapter,
        "lora" => PeftVariant::Lora,
        "prefix" => PeftVariant::Prefix,
        other => return Err(dumotion::Error::InvalidArgument(format!("unknown variant `{other}`"))),
    };
    let model = DuTransConfig {
        d_model,
        encoder_layers: layers,
        ..DuTransConfig::full()
    };
    let peft = PeftConfig {
        variant,
        rank,
        prefix_length: prefix,
        sites: if variant == PeftVariant::Prefix { vec![Site::Mha] } else { vec![Site::Mha, Site::Ffn] },
        ..PeftConfig::default()
    };
    peft.validate(d_model)?;
    let task = if identity { ConditionTask::Identity } else { ConditionTask::Emotion };
    Ok(closed_form_trainable(&model, &peft, task))
}

/// Trainable parameters after injecting one variant into both encoder
/// branches, counting heads and condition projections.
#[wasm_bindgen(js_name = trainableParameters)]
pub fn trainable_js(variant: &str, d_model: usize, layers: usize, rank: usize, prefix: usize, identity: bool) -> Result<f64, JsError> {
    trainable(variant, d_model, layers, rank, prefix, identity)
        .map(|n| n as f64)
        .map_err(js)
}
