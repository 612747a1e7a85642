//! DU-Trans: face and body encoders with Bi-Flow exchange, a united decoder
//! and three x0-prediction heads.

use std::collections::BTreeSet;

use ndarray::s;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, ParamStore, Var};
use crate::conditioning::{ConditionEmbedding, IdentityMlp};
use crate::data::{AudioFeatureTrack, Dims};
use crate::diffusion::{cosine_schedule, Denoiser, NoiseSchedule, Prediction, DEFAULT_COSINE_OFFSET};
use crate::error::{ensure, Error, Result};
use crate::nn::{attention, dropout, sinusoidal_row, sinusoidal_table, FeedForward, Init, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::peft::{ConditionSource, Form, FrozenMask, GateStat, PeftConfig, PeftVariant, Prefix, Site, SiteAdapter};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DuTransConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// 1-based encoder layers followed by a Bi-Flow exchange.
    pub biflow_layers: Vec<usize>,
    pub dims: Dims,
    pub max_frames: usize,
    pub dropout: f64,
    pub diffusion_steps: usize,
    pub cosine_offset: f64,
    /// Width of condition vectors before projection to `d_model`.
    pub cond_dim: usize,
}

impl Default for DuTransConfig {
    fn default() -> Self {
        DuTransConfig::toy()
    }
}

impl DuTransConfig {
    pub fn toy() -> Self {
        DuTransConfig {
            d_model: 64,
            encoder_layers: 2,
            decoder_layers: 1,
            heads: 4,
            ffn_mult: 2,
            biflow_layers: vec![1],
            dims: Dims::DESK,
            max_frames: 60,
            dropout: 0.1,
            diffusion_steps: 100,
            cosine_offset: DEFAULT_COSINE_OFFSET,
            cond_dim: 32,
        }
    }

    pub fn full() -> Self {
        DuTransConfig {
            d_model: 512,
            encoder_layers: 7,
            decoder_layers: 1,
            heads: 8,
            ffn_mult: 2,
            biflow_layers: vec![3],
            dims: Dims::FULL,
            max_frames: 600,
            dropout: 0.1,
            diffusion_steps: 1000,
            cosine_offset: DEFAULT_COSINE_OFFSET,
            cond_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        ensure!(self.d_model >= 2, Config, "d_model must be at least 2");
        ensure!(self.heads >= 1, Config, "heads must be at least 1");
        ensure!(
            self.d_model.is_multiple_of(self.heads),
            Config,
            "d_model {} not divisible by {} heads",
            self.d_model,
            self.heads
        );
        ensure!(
            self.encoder_layers + self.decoder_layers >= 1,
            Config,
            "model needs at least one layer"
        );
        ensure!(self.ffn_mult >= 1, Config, "ffn_mult must be at least 1");
        let unique: BTreeSet<_> = self.biflow_layers.iter().collect();
        ensure!(unique.len() == self.biflow_layers.len(), Config, "duplicate Bi-Flow layer");
        for &b in &self.biflow_layers {
            ensure!(
                b >= 1 && b <= self.encoder_layers,
                Config,
                "Bi-Flow layer {b} outside 1..={}",
                self.encoder_layers
            );
        }
        ensure!(self.max_frames >= 1, Config, "max_frames must be positive");
        ensure!((0.0..1.0).contains(&self.dropout), Config, "dropout must lie in [0, 1)");
        ensure!(self.diffusion_steps >= 2, Config, "diffusion_steps must be at least 2");
        ensure!(self.cosine_offset > 0.0, Config, "cosine_offset must be positive");
        ensure!(self.cond_dim >= 1, Config, "cond_dim must be positive");
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        cosine_schedule(self.diffusion_steps, self.cosine_offset)
    }
}

/// Adapters attached to one encoder layer.
#[derive(Clone, Debug, Default)]
pub struct LayerPeft {
    pub mha: Option<SiteAdapter>,
    pub ffn: Option<SiteAdapter>,
    pub prefix: Option<Prefix>,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub peft: LayerPeft,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

/// One direction of the Bi-Flow exchange: `target' = MLP(LN(attn)) + target`.
#[derive(Clone, Debug)]
pub struct FlowDirection {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub ln: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct BiFlow {
    /// Body queries attend to face keys/values.
    pub face_to_body: FlowDirection,
    pub body_to_face: FlowDirection,
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub motion_in: Linear,
    pub audio_in: Linear,
    pub rhythm_in: Linear,
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
}

/// Finetuning state added by [`DuTrans::inject_peft`].
#[derive(Clone, Debug)]
pub struct PeftState {
    pub config: PeftConfig,
    pub cond_face: Option<Linear>,
    pub cond_body: Option<Linear>,
    pub identity_face: Option<IdentityMlp>,
    pub identity_body: Option<IdentityMlp>,
}

#[derive(Clone, Debug)]
pub struct DuTrans {
    pub config: DuTransConfig,
    pub store: ParamStore,
    pub time_mlp: Mlp,
    pub face: Branch,
    pub body: Branch,
    /// Keyed by 1-based encoder layer.
    pub biflow: Vec<(usize, BiFlow)>,
    pub dec_content: Linear,
    pub dec_rhythm: Linear,
    pub dec_semantics: Linear,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: LayerNorm,
    pub head_face: Linear,
    pub head_body: Linear,
    pub head_holistic: Linear,
    pub peft: Option<PeftState>,
    pe: Mat,
}

/// Per-call switches: dropout noise source and optional Dy-Scale gate trace.
#[derive(Default)]
pub struct ForwardCtx<'a> {
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub gates: Option<&'a mut Vec<GateStat>>,
}

impl ForwardCtx<'_> {
    pub fn eval() -> Self {
        ForwardCtx::default()
    }
}

/// Graph handles of the three head outputs.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub face: Var,
    pub body: Var,
    pub holistic: Var,
}

fn encoder_layer(init: &mut Init<'_>, name: &str, c: &DuTransConfig) -> Result<EncoderLayer> {
    let d = c.d_model;
    Ok(EncoderLayer {
        ln1: LayerNorm::new(init, &format!("{name}.ln1"), d)?,
        attn: MultiHeadAttention::new(init, &format!("{name}.attn"), d, c.heads)?,
        ln2: LayerNorm::new(init, &format!("{name}.ln2"), d)?,
        ffn: FeedForward::new(init, &format!("{name}.ffn"), d, d * c.ffn_mult)?,
        peft: LayerPeft::default(),
    })
}

fn branch(init: &mut Init<'_>, name: &str, motion: usize, audio: usize, c: &DuTransConfig) -> Result<Branch> {
    let d = c.d_model;
    Ok(Branch {
        motion_in: Linear::new(init, &format!("{name}.motion_in"), motion, d)?,
        audio_in: Linear::new(init, &format!("{name}.audio_in"), audio, d)?,
        rhythm_in: Linear::new(init, &format!("{name}.rhythm_in"), 1, d)?,
        layers: (0..c.encoder_layers)
            .map(|i| encoder_layer(init, &format!("{name}.layer{i}"), c))
            .collect::<Result<_>>()?,
        norm: LayerNorm::new(init, &format!("{name}.norm"), d)?,
    })
}

fn flow_direction(init: &mut Init<'_>, name: &str, d: usize) -> Result<FlowDirection> {
    Ok(FlowDirection {
        q: Linear::new(init, &format!("{name}.q"), d, d)?,
        k: Linear::new(init, &format!("{name}.k"), d, d)?,
        v: Linear::new(init, &format!("{name}.v"), d, d)?,
        ln: LayerNorm::new(init, &format!("{name}.ln"), d)?,
        mlp: Mlp::zero_out(init, &format!("{name}.mlp"), d, d, d)?,
    })
}

/// Builds a freshly initialized model; deterministic in `seed`.
pub fn build_model(config: &DuTransConfig, seed: u64) -> Result<DuTrans> {
    config.validate()?;
    let c = config;
    let d = c.d_model;
    let dims = c.dims;
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, seed);
    let time_mlp = Mlp::new(&mut init, "time", d, d, d)?;
    let face = branch(&mut init, "face", dims.face, dims.content, c)?;
    let body = branch(&mut init, "body", dims.body, dims.semantics, c)?;
    let mut biflow = Vec::new();
    let mut layers: Vec<usize> = c.biflow_layers.clone();
    layers.sort_unstable();
    for l in layers {
        biflow.push((
            l,
            BiFlow {
                face_to_body: flow_direction(&mut init, &format!("biflow{l}.f2b"), d)?,
                body_to_face: flow_direction(&mut init, &format!("biflow{l}.b2f"), d)?,
            },
        ));
    }
    let dec_content = Linear::new(&mut init, "decoder.audio_content", dims.content, d)?;
    let dec_rhythm = Linear::new(&mut init, "decoder.audio_rhythm", 1, d)?;
    let dec_semantics = Linear::new(&mut init, "decoder.audio_semantics", dims.semantics, d)?;
    let decoder = (0..c.decoder_layers)
        .map(|i| {
            let name = format!("decoder.layer{i}");
            Ok(DecoderLayer {
                ln1: LayerNorm::new(&mut init, &format!("{name}.ln1"), d)?,
                self_attn: MultiHeadAttention::new(&mut init, &format!("{name}.self_attn"), d, c.heads)?,
                ln2: LayerNorm::new(&mut init, &format!("{name}.ln2"), d)?,
                cross_attn: MultiHeadAttention::new(&mut init, &format!("{name}.cross_attn"), d, c.heads)?,
                ln3: LayerNorm::new(&mut init, &format!("{name}.ln3"), d)?,
                ffn: FeedForward::new(&mut init, &format!("{name}.ffn"), d, d * c.ffn_mult)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dec_norm = LayerNorm::new(&mut init, "decoder.norm", d)?;
    let head_face = Linear::new(&mut init, "head.face", d, dims.face)?;
    let head_body = Linear::new(&mut init, "head.body", d, dims.body)?;
    let head_holistic = Linear::new(&mut init, "head.holistic", d, dims.holistic())?;
    Ok(DuTrans {
        config: c.clone(),
        store,
        time_mlp,
        face,
        body,
        biflow,
        dec_content,
        dec_rhythm,
        dec_semantics,
        decoder,
        dec_norm,
        head_face,
        head_body,
        head_holistic,
        peft: None,
        pe: sinusoidal_table(c.max_frames + 1, d),
    })
}

/// Names of the three output heads' parameters.
pub const HEAD_PREFIX: &str = "head.";

/// Condition vectors already projected to model width, one per branch.
struct BranchConds {
    face: Option<Var>,
    body: Option<Var>,
}

impl DuTrans {
    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn check_inputs(&self, face_t: &Mat, body_t: &Mat, audio: &AudioFeatureTrack, t: usize) -> Result<()> {
        let dims = self.config.dims;
        let n = face_t.nrows();
        ensure!(n >= 1, Shape, "empty input sequence");
        ensure!(
            n <= self.config.max_frames,
            Shape,
            "sequence of {n} frames exceeds max_frames {}",
            self.config.max_frames
        );
        ensure!(
            face_t.ncols() == dims.face && body_t.ncols() == dims.body,
            Shape,
            "motion widths ({}, {}) do not match model ({}, {})",
            face_t.ncols(),
            body_t.ncols(),
            dims.face,
            dims.body
        );
        ensure!(
            body_t.nrows() == n && audio.frames() == n,
            Shape,
            "frame counts differ: face {n}, body {}, audio {}",
            body_t.nrows(),
            audio.frames()
        );
        ensure!(
            audio.content.ncols() == dims.content && audio.semantics.ncols() == dims.semantics,
            Shape,
            "audio widths ({}, {}) do not match model ({}, {})",
            audio.content.ncols(),
            audio.semantics.ncols(),
            dims.content,
            dims.semantics
        );
        ensure!(
            t < self.config.diffusion_steps,
            InvalidArgument,
            "step {t} outside [0, {})",
            self.config.diffusion_steps
        );
        Ok(())
    }

    fn branch_conds(&self, g: &mut Graph<'_>, cond: Option<&ConditionEmbedding>) -> Result<BranchConds> {
        let none = BranchConds { face: None, body: None };
        let (Some(state), Some(cond)) = (&self.peft, cond) else {
            return Ok(none);
        };
        let zd = self.config.cond_dim;
        let row = |v: &[f64]| -> Result<Mat> {
            ensure!(v.len() == zd, Shape, "condition width {} != {zd}", v.len());
            Ok(Mat::from_shape_vec((1, zd), v.to_vec()).expect("row"))
        };
        let (zf, zb) = match state.config.condition_source {
            ConditionSource::None => return Ok(none),
            ConditionSource::Emotion => {
                let z = g.input(row(&cond.z_e)?);
                (z, z)
            }
            ConditionSource::Identity => match (&cond.identity_stats, &state.identity_face, &state.identity_body) {
                (Some(stats), Some(mf), Some(mb)) => {
                    let sf = g.input(stats.face_row());
                    let sb = g.input(stats.body_row());
                    (mf.forward(g, sf), mb.forward(g, sb))
                }
                _ => (g.input(row(&cond.z_id_face)?), g.input(row(&cond.z_id_body)?)),
            },
        };
        let face = state.cond_face.as_ref().map(|l| l.forward(g, zf));
        let body = state.cond_body.as_ref().map(|l| l.forward(g, zb));
        Ok(BranchConds { face, body })
    }

    #[allow(clippy::too_many_arguments)]
    fn embed(&self, g: &mut Graph<'_>, br: &Branch, motion: Var, audio: &Mat, rhythm: &Mat, e_t: Var, n: usize) -> Var {
        let a = g.input(audio.clone());
        let r = g.input(rhythm.clone());
        let m = br.motion_in.forward(g, motion);
        let a = br.audio_in.forward(g, a);
        let r = br.rhythm_in.forward(g, r);
        let x = g.add(m, a);
        let x = g.add(x, r);
        let x = g.concat_rows(&[e_t, x]);
        let pe = g.input(self.pe.slice(s![..n + 1, ..]).to_owned());
        g.add(x, pe)
    }

    fn encoder_layer(
        &self,
        g: &mut Graph<'_>,
        layer: &EncoderLayer,
        x: Var,
        cond: Option<Var>,
        ctx: &mut ForwardCtx<'_>,
        site: &str,
    ) -> Var {
        let p = self.config.dropout;
        let a = layer.ln1.forward(g, x);
        let prefix = layer.peft.prefix.as_ref().map(|pf| pf.vars(g, cond));
        let mut y = layer.attn.forward(g, a, a, prefix);
        if let Some(ad) = &layer.peft.mha {
            y = apply_adapter(g, ad, a, y, cond, ctx, &format!("{site}.mha"));
        }
        let y = dropout(g, y, p, ctx.rng.as_deref_mut());
        let x = g.add(x, y);
        let a = layer.ln2.forward(g, x);
        let mut y = layer.ffn.forward(g, a);
        if let Some(ad) = &layer.peft.ffn {
            y = apply_adapter(g, ad, a, y, cond, ctx, &format!("{site}.ffn"));
        }
        let y = dropout(g, y, p, ctx.rng.as_deref_mut());
        g.add(x, y)
    }

    fn decoder_layer(&self, g: &mut Graph<'_>, layer: &DecoderLayer, x: Var, memory: Var, ctx: &mut ForwardCtx<'_>) -> Var {
        let p = self.config.dropout;
        let a = layer.ln1.forward(g, x);
        let y = layer.self_attn.forward(g, a, a, None);
        let y = dropout(g, y, p, ctx.rng.as_deref_mut());
        let x = g.add(x, y);
        let a = layer.ln2.forward(g, x);
        let y = layer.cross_attn.forward(g, a, memory, None);
        let y = dropout(g, y, p, ctx.rng.as_deref_mut());
        let x = g.add(x, y);
        let a = layer.ln3.forward(g, x);
        let y = layer.ffn.forward(g, a);
        let y = dropout(g, y, p, ctx.rng.as_deref_mut());
        g.add(x, y)
    }

    /// Records the full forward pass on `g`; `face_t` and `body_t` are graph
    /// inputs so callers can reuse them in the loss.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_>,
        face_t: Var,
        body_t: Var,
        audio: &AudioFeatureTrack,
        t: usize,
        cond: Option<&ConditionEmbedding>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<HeadVars> {
        self.check_inputs(g.value(face_t), g.value(body_t), audio, t)?;
        let n = g.shape(face_t).0;
        let d = self.d_model();
        let conds = self.branch_conds(g, cond)?;

        let te = g.input(sinusoidal_row(t as f64, d));
        let e_t = self.time_mlp.forward(g, te);
        let mut xf = self.embed(g, &self.face, face_t, &audio.content, &audio.rhythm, e_t, n);
        let mut xb = self.embed(g, &self.body, body_t, &audio.semantics, &audio.rhythm, e_t, n);

        for i in 0..self.config.encoder_layers {
            xf = self.encoder_layer(g, &self.face.layers[i], xf, conds.face, ctx, &format!("face.layer{i}"));
            xb = self.encoder_layer(g, &self.body.layers[i], xb, conds.body, ctx, &format!("body.layer{i}"));
            if let Some((_, bf)) = self.biflow.iter().find(|(l, _)| *l == i + 1) {
                (xf, xb) = biflow_graph(g, bf, xf, xb);
            }
        }
        let ff = self.face.norm.forward(g, xf);
        let fb = self.body.norm.forward(g, xb);

        let mut h = g.add(ff, fb);
        if !self.decoder.is_empty() {
            let c = g.input(audio.content.clone());
            let r = g.input(audio.rhythm.clone());
            let sm = g.input(audio.semantics.clone());
            let c = self.dec_content.forward(g, c);
            let r = self.dec_rhythm.forward(g, r);
            let sm = self.dec_semantics.forward(g, sm);
            let mem = g.add(c, r);
            let mem = g.add(mem, sm);
            let pe = g.input(self.pe.slice(s![1..n + 1, ..]).to_owned());
            let mem = g.add(mem, pe);
            for layer in &self.decoder {
                h = self.decoder_layer(g, layer, h, mem, ctx);
            }
        }
        let h = self.dec_norm.forward(g, h);

        let ff = g.slice_rows(ff, 1, n + 1);
        let fb = g.slice_rows(fb, 1, n + 1);
        let h = g.slice_rows(h, 1, n + 1);
        Ok(HeadVars {
            face: self.head_face.forward(g, ff),
            body: self.head_body.forward(g, fb),
            holistic: self.head_holistic.forward(g, h),
        })
    }

    /// Evaluation-mode forward pass.
    pub fn forward(
        &self,
        face_t: &Mat,
        body_t: &Mat,
        audio: &AudioFeatureTrack,
        t: usize,
        cond: Option<&ConditionEmbedding>,
    ) -> Result<Prediction> {
        let mut g = Graph::inference(&self.store);
        let f = g.input(face_t.clone());
        let b = g.input(body_t.clone());
        let out = self.forward_graph(&mut g, f, b, audio, t, cond, &mut ForwardCtx::eval())?;
        Ok(Prediction {
            face: g.value(out.face).clone(),
            body: g.value(out.body).clone(),
            holistic: g.value(out.holistic).clone(),
        })
    }

    /// Fraction of tokens with an open Dy-Scale gate, per adapter.
    pub fn gate_ratios(
        &self,
        face_t: &Mat,
        body_t: &Mat,
        audio: &AudioFeatureTrack,
        t: usize,
        cond: Option<&ConditionEmbedding>,
    ) -> Result<Vec<GateStat>> {
        let mut g = Graph::inference(&self.store);
        let f = g.input(face_t.clone());
        let b = g.input(body_t.clone());
        let mut gates = Vec::new();
        let mut ctx = ForwardCtx {
            rng: None,
            gates: Some(&mut gates),
        };
        self.forward_graph(&mut g, f, b, audio, t, cond, &mut ctx)?;
        Ok(gates)
    }

    /// Attaches adapters to both encoders and returns the mask freezing
    /// every pre-existing parameter except the heads.
    pub fn inject_peft(&mut self, cfg: &PeftConfig) -> Result<FrozenMask> {
        ensure!(self.peft.is_none(), Config, "PEFT modules already injected");
        cfg.validate(self.d_model())?;
        let d = self.d_model();
        let zd = self.config.cond_dim;
        let base: Vec<String> = self.store.iter().map(|(_, n, _)| n.to_string()).collect();
        // Seeds for new parameters derive from their names; the base seed is irrelevant here.
        let mut init = Init::new(&mut self.store, 0x0ADA_97E5);
        for (bname, br) in [("face", &mut self.face), ("body", &mut self.body)] {
            for (i, layer) in br.layers.iter_mut().enumerate() {
                let site = format!("{bname}.layer{i}");
                match cfg.variant {
                    PeftVariant::Prefix => {
                        layer.peft.prefix = Some(Prefix::new(&mut init, &format!("{site}.attn"), d, cfg.prefix_length)?);
                    }
                    _ => {
                        for s in &cfg.sites {
                            let (name, slot) = match s {
                                Site::Mha => (format!("{site}.mha_adapter"), &mut layer.peft.mha),
                                Site::Ffn => (format!("{site}.ffn_adapter"), &mut layer.peft.ffn),
                            };
                            *slot = Some(SiteAdapter::new(&mut init, &name, d, cfg)?);
                        }
                    }
                }
            }
        }
        let uses_cond = cfg.condition_source != ConditionSource::None;
        let (cond_face, cond_body) = if uses_cond {
            (
                Some(Linear::new(&mut init, "cond.face", zd, d)?),
                Some(Linear::new(&mut init, "cond.body", zd, d)?),
            )
        } else {
            (None, None)
        };
        let (identity_face, identity_body) = if cfg.condition_source == ConditionSource::Identity {
            let dims = self.config.dims;
            (
                Some(IdentityMlp::new(&mut init, "identity.face", 2 * dims.face, zd)?),
                Some(IdentityMlp::new(&mut init, "identity.body", 2 * dims.body, zd)?),
            )
        } else {
            (None, None)
        };
        self.peft = Some(PeftState {
            config: cfg.clone(),
            cond_face,
            cond_body,
            identity_face,
            identity_body,
        });
        Ok(FrozenMask(
            base.into_iter().filter(|n| !n.starts_with(HEAD_PREFIX)).collect(),
        ))
    }

    /// Replaces parameter values by name; every stored parameter must be
    /// present with a matching shape.
    pub fn load_weights<'a>(&mut self, weights: impl IntoIterator<Item = (&'a str, Mat)>) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, value) in weights {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
            let slot = self.store.get_mut(id);
            ensure!(
                slot.dim() == value.dim(),
                Shape,
                "parameter `{name}` has shape {:?}, stored {:?}",
                slot.dim(),
                value.dim()
            );
            *slot = value;
            seen.insert(name.to_string());
        }
        for (_, name, _) in self.store.iter() {
            if !seen.contains(name) {
                return Err(Error::Shape(format!("weights missing parameter `{name}`")));
            }
        }
        Ok(())
    }
}

fn apply_adapter(
    g: &mut Graph<'_>,
    ad: &SiteAdapter,
    sub_in: Var,
    sub_out: Var,
    cond: Option<Var>,
    ctx: &mut ForwardCtx<'_>,
    site: &str,
) -> Var {
    let h = match ad.form {
        Form::Parallel => sub_in,
        Form::Serial => sub_out,
    };
    let gates = ctx.gates.as_deref_mut().map(|v| (site, v));
    let delta = ad.delta(g, h, cond, gates);
    g.add(sub_out, delta)
}

fn flow_graph(g: &mut Graph<'_>, p: &FlowDirection, target: Var, source: Var) -> Var {
    let q = p.q.forward(g, target);
    let k = p.k.forward(g, source);
    let v = p.v.forward(g, source);
    let a = attention(g, q, k, v, 1);
    let a = p.ln.forward(g, a);
    let a = p.mlp.forward(g, a);
    g.add(a, target)
}

/// Both directions read the pre-exchange features.
pub fn biflow_graph(g: &mut Graph<'_>, p: &BiFlow, face: Var, body: Var) -> (Var, Var) {
    let body2 = flow_graph(g, &p.face_to_body, body, face);
    let face2 = flow_graph(g, &p.body_to_face, face, body);
    (face2, body2)
}

/// Bi-Flow exchange on plain matrices.
pub fn biflow_exchange(model: &DuTrans, layer: usize, face: &Mat, body: &Mat) -> Result<(Mat, Mat)> {
    ensure!(
        face.dim() == body.dim(),
        Shape,
        "Bi-Flow inputs differ: {:?} vs {:?}",
        face.dim(),
        body.dim()
    );
    ensure!(face.ncols() == model.d_model(), Shape, "Bi-Flow width {} != {}", face.ncols(), model.d_model());
    let (_, bf) = model
        .biflow
        .iter()
        .find(|(l, _)| *l == layer)
        .ok_or_else(|| Error::InvalidArgument(format!("no Bi-Flow block after layer {layer}")))?;
    let mut g = Graph::inference(&model.store);
    let f = g.input(face.clone());
    let b = g.input(body.clone());
    let (f2, b2) = biflow_graph(&mut g, bf, f, b);
    Ok((g.value(f2).clone(), g.value(b2).clone()))
}

/// Element count over all parameters, or over the unmasked ones.
pub fn count_parameters(model: &DuTrans, trainable_only: bool, mask: &FrozenMask) -> Result<usize> {
    mask.validate(&model.store)?;
    Ok(model
        .store
        .iter()
        .filter(|(_, n, _)| !trainable_only || !mask.contains(n))
        .map(|(_, _, m)| m.len())
        .sum())
}

impl Denoiser for DuTrans {
    fn predict(
        &self,
        face_t: &Mat,
        body_t: &Mat,
        audio: &AudioFeatureTrack,
        t: usize,
        cond: Option<&ConditionEmbedding>,
    ) -> Result<Prediction> {
        self.forward(face_t, body_t, audio, t, cond)
    }
}
