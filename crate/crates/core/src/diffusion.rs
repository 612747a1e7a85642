//! Cosine noise schedule, closed-form forward noising and the ancestral
//! sampler for an x0-predicting denoiser.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::conditioning::ConditionEmbedding;
use crate::data::{AudioFeatureTrack, Emotion, MotionSequence};
use crate::error::{ensure, Error, Result};

pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
const BETA_MIN: f64 = 1e-8;
const BETA_MAX: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `ᾱ_{t-1}`, with `ᾱ_{-1} = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        ensure!(
            t < self.steps(),
            InvalidArgument,
            "step {t} outside [0, {})",
            self.steps()
        );
        Ok(())
    }

    /// Mean coefficients on `x0` and `x_t`, and the fixed variance `β̃_t`, of
    /// the posterior `q(x_{t-1} | x_t, x0)`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_step(t)?;
        ensure!(t >= 1, InvalidArgument, "posterior step needs t >= 1");
        let ab = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t - 1];
        let beta = self.beta[t];
        let c_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let c_xt = self.alpha[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
        Ok((c_x0, c_xt, var))
    }
}

fn cosine_f(t: f64, steps: f64, s: f64) -> f64 {
    (((t / steps) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
        .cos()
        .powi(2)
}

/// Step `t` (0-based) targets `ᾱ_t = f(t+1)/f(0)` with
/// `f(t) = cos²(((t/T)+s)/(1+s)·π/2)`; betas are clipped and `ᾱ` is rebuilt
/// as the running product of `1 - β`.
pub fn cosine_schedule(steps: usize, s: f64) -> Result<NoiseSchedule> {
    ensure!(steps >= 2, InvalidArgument, "schedule needs at least 2 steps, got {steps}");
    ensure!(s > 0.0 && s.is_finite(), InvalidArgument, "cosine offset must be positive");
    let tf = steps as f64;
    let f0 = cosine_f(0.0, tf, s);
    let target = |t: usize| cosine_f(t as f64 + 1.0, tf, s) / f0;
    let mut beta = Vec::with_capacity(steps);
    let mut prev = 1.0;
    for t in 0..steps {
        let cur = target(t);
        beta.push((1.0 - cur / prev).clamp(BETA_MIN, BETA_MAX));
        prev = cur;
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

fn check_same_shape(a: &Mat, b: &Mat, what: &str) -> Result<()> {
    ensure!(
        a.dim() == b.dim(),
        Shape,
        "{what}: {:?} vs {:?}",
        a.dim(),
        b.dim()
    );
    Ok(())
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1-ᾱ_t)·noise`
pub fn q_sample(x0: &Mat, t: usize, noise: &Mat, sched: &NoiseSchedule) -> Result<Mat> {
    sched.check_step(t)?;
    check_same_shape(x0, noise, "q_sample")?;
    let ab = sched.alpha_bar[t];
    Ok(x0 * ab.sqrt() + noise * (1.0 - ab).sqrt())
}

/// One reverse step `x_t -> x_{t-1}` given a predicted clean sample. The
/// noise is ignored at `t == 1`.
pub fn posterior_step(
    x0_hat: &Mat,
    x_t: &Mat,
    t: usize,
    sched: &NoiseSchedule,
    noise: &Mat,
) -> Result<Mat> {
    check_same_shape(x0_hat, x_t, "posterior_step")?;
    check_same_shape(x_t, noise, "posterior_step noise")?;
    let (c_x0, c_xt, var) = sched.posterior_coefficients(t)?;
    let mut out = x0_hat * c_x0 + x_t * c_xt;
    if t > 1 {
        out.scaled_add(var.sqrt(), noise);
    }
    Ok(out)
}

/// Clean-sample predictions from the three heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub face: Mat,
    pub body: Mat,
    pub holistic: Mat,
}

pub trait Denoiser {
    fn predict(
        &self,
        face_t: &Mat,
        body_t: &Mat,
        audio: &AudioFeatureTrack,
        t: usize,
        cond: Option<&ConditionEmbedding>,
    ) -> Result<Prediction>;
}

impl<F> Denoiser for F
where
    F: Fn(&Mat, &Mat, &AudioFeatureTrack, usize, Option<&ConditionEmbedding>) -> Result<Prediction>,
{
    fn predict(
        &self,
        face_t: &Mat,
        body_t: &Mat,
        audio: &AudioFeatureTrack,
        t: usize,
        cond: Option<&ConditionEmbedding>,
    ) -> Result<Prediction> {
        self(face_t, body_t, audio, t, cond)
    }
}

pub fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// Ancestral sampling over all steps. Only the holistic head is used: each
/// step splits its prediction into face/body columns for the next input, and
/// the prediction at step 0 is returned.
#[allow(clippy::too_many_arguments)]
pub fn sample_loop(
    denoiser: &impl Denoiser,
    audio: &AudioFeatureTrack,
    cond: Option<&ConditionEmbedding>,
    face_dim: usize,
    holistic_dim: usize,
    sched: &NoiseSchedule,
    seed: u64,
    fps: f64,
) -> Result<MotionSequence> {
    let n = audio.frames();
    ensure!(
        holistic_dim > face_dim,
        Shape,
        "holistic width {holistic_dim} must exceed face width {face_dim}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = standard_normal(&mut rng, n, holistic_dim);
    let split = |x: &Mat| {
        (
            x.slice(ndarray::s![.., ..face_dim]).to_owned(),
            x.slice(ndarray::s![.., face_dim..]).to_owned(),
        )
    };
    let mut t = sched.steps() - 1;
    loop {
        let (face_t, body_t) = split(&x);
        let pred = denoiser.predict(&face_t, &body_t, audio, t, cond)?;
        if pred.holistic.dim() != (n, holistic_dim) {
            return Err(Error::Shape(format!(
                "denoiser returned holistic {:?}, expected {:?}",
                pred.holistic.dim(),
                (n, holistic_dim)
            )));
        }
        if t == 0 {
            x = pred.holistic;
            break;
        }
        let noise = standard_normal(&mut rng, n, holistic_dim);
        x = posterior_step(&pred.holistic, &x, t, sched, &noise)?;
        t -= 1;
    }
    let (identity, emotion) = cond
        .map(|c| (c.identity_label.clone(), c.emotion_label))
        .unwrap_or((None, None));
    MotionSequence::from_holistic(
        &x,
        face_dim,
        fps,
        identity.unwrap_or_else(|| "generated".into()),
        emotion.unwrap_or(Emotion::Neutral),
    )
}
