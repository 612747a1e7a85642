//! Parameter-efficient finetuning: the conditional X-Adapter with Dy-Scale
//! gating, and the serial-adapter, LoRA and prefix baselines.
//!
//! Every variant starts as an exact no-op: adapter up-projections, LoRA `B`
//! factors and prefix gates are zero at injection.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, ParamId, ParamStore, Var};
use crate::error::{ensure, Error, Result};
use crate::nn::{attention, Init, Linear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeftVariant {
    XAdapter,
    SerialAdapter,
    Lora,
    Prefix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Mha,
    Ffn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    Parallel,
    Serial,
}

/// How the adapter output is scaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Per-token `ReLU(h·W_s + b_s)`.
    Dynamic,
    /// Constant 1.0.
    Fixed,
    /// One learnable scalar, initialized to 1.0.
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSource {
    None,
    Emotion,
    Identity,
}

impl FromStr for ConditionSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ConditionSource::None),
            "emotion" => Ok(ConditionSource::Emotion),
            "identity" => Ok(ConditionSource::Identity),
            _ => Err(Error::InvalidArgument(format!("unknown condition source `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeftConfig {
    pub variant: PeftVariant,
    pub rank: usize,
    pub sites: Vec<Site>,
    pub form: Form,
    pub scale: ScaleMode,
    pub prefix_length: usize,
    pub condition_source: ConditionSource,
}

impl Default for PeftConfig {
    fn default() -> Self {
        PeftConfig {
            variant: PeftVariant::XAdapter,
            rank: 128,
            sites: vec![Site::Mha, Site::Ffn],
            form: Form::Parallel,
            scale: ScaleMode::Dynamic,
            prefix_length: 64,
            condition_source: ConditionSource::Emotion,
        }
    }
}

impl PeftConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        ensure!(!self.sites.is_empty(), Config, "PEFT sites must be non-empty");
        let unique: BTreeSet<_> = self.sites.iter().collect();
        ensure!(unique.len() == self.sites.len(), Config, "duplicate PEFT site");
        match self.variant {
            PeftVariant::Prefix => {
                ensure!(self.prefix_length >= 1, Config, "prefix_length must be at least 1");
                ensure!(
                    self.sites == [Site::Mha],
                    Config,
                    "prefix tuning only attaches to attention sites"
                );
            }
            _ => {
                ensure!(
                    self.rank >= 1 && self.rank <= d_model,
                    Config,
                    "rank {} outside [1, {d_model}]",
                    self.rank
                );
            }
        }
        Ok(())
    }

    pub fn effective_form(&self) -> Form {
        match self.variant {
            PeftVariant::SerialAdapter => Form::Serial,
            _ => self.form,
        }
    }
}

impl fmt::Display for PeftVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeftVariant::XAdapter => "x_adapter",
            PeftVariant::SerialAdapter => "serial_adapter",
            PeftVariant::Lora => "lora",
            PeftVariant::Prefix => "prefix",
        })
    }
}

/// Names of parameters excluded from optimization.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenMask(pub BTreeSet<String>);

impl FrozenMask {
    pub fn none() -> Self {
        FrozenMask::default()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        for name in &self.0 {
            if store.id(name).is_none() {
                return Err(Error::UnknownParameter(name.clone()));
            }
        }
        Ok(())
    }

    /// `true` for parameters that receive gradients.
    pub fn trainable_flags(&self, store: &ParamStore) -> Result<Vec<bool>> {
        self.validate(store)?;
        Ok(store.iter().map(|(_, n, _)| !self.contains(n)).collect())
    }
}

#[derive(Clone, Debug)]
pub enum ScaleParam {
    Dynamic(Linear),
    Fixed(f64),
    Learned(ParamId),
}

#[derive(Clone, Debug)]
pub enum AdapterBody {
    /// Bottleneck `up(SiLU(down(h + x)))`.
    Bottleneck { down: Linear, up: Linear },
    /// Low-rank `(h + x)·A·B`.
    LowRank { a: ParamId, b: ParamId },
}

/// One adapter attached at an MHA or FFN site.
#[derive(Clone, Debug)]
pub struct SiteAdapter {
    pub body: AdapterBody,
    pub scale: ScaleParam,
    pub form: Form,
}

/// Fraction of tokens whose Dy-Scale gate is open, per adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct GateStat {
    pub site: String,
    pub open_fraction: f64,
}

impl SiteAdapter {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, cfg: &PeftConfig) -> Result<Self> {
        let body = match cfg.variant {
            PeftVariant::XAdapter | PeftVariant::SerialAdapter => AdapterBody::Bottleneck {
                down: Linear::new(init, &format!("{name}.down"), d, cfg.rank)?,
                up: Linear::zeros(init, &format!("{name}.up"), cfg.rank, d)?,
            },
            PeftVariant::Lora => AdapterBody::LowRank {
                a: init.uniform(&format!("{name}.lora_a"), d, cfg.rank, 1.0 / (d as f64).sqrt())?,
                b: init.zeros(&format!("{name}.lora_b"), cfg.rank, d)?,
            },
            PeftVariant::Prefix => {
                return Err(Error::Config("prefix tuning has no site adapters".into()))
            }
        };
        let scale = match cfg.scale {
            ScaleMode::Dynamic => ScaleParam::Dynamic(Linear::new(init, &format!("{name}.dy_scale"), d, 1)?),
            ScaleMode::Fixed => ScaleParam::Fixed(1.0),
            ScaleMode::Learned => ScaleParam::Learned(init.constant(&format!("{name}.scalar"), 1, 1, 1.0)?),
        };
        Ok(SiteAdapter {
            body,
            scale,
            form: cfg.effective_form(),
        })
    }

    /// The delta added to the host sublayer output. `h` is the sublayer
    /// input (parallel) or output (serial), chosen by the host.
    pub fn delta(&self, g: &mut Graph<'_>, h: Var, cond: Option<Var>, gates: Option<(&str, &mut Vec<GateStat>)>) -> Var {
        let scale = match &self.scale {
            ScaleParam::Dynamic(lin) => ScaleVars::Dynamic {
                w: g.param(lin.w),
                b: g.param(lin.b.expect("dy-scale has a bias")),
            },
            ScaleParam::Fixed(v) => ScaleVars::Fixed(*v),
            ScaleParam::Learned(id) => ScaleVars::Learned(g.param(*id)),
        };
        if let (ScaleVars::Dynamic { w, b }, Some((site, out))) = (&scale, gates) {
            let s = g.value(h).dot(g.value(*w)) + g.value(*b);
            let open = s.iter().filter(|v| **v > 0.0).count();
            out.push(GateStat {
                site: site.to_string(),
                open_fraction: open as f64 / s.len() as f64,
            });
        }
        match &self.body {
            AdapterBody::Bottleneck { down, up } => {
                let vars = BottleneckVars {
                    w_down: g.param(down.w),
                    b_down: g.param(down.b.expect("bias")),
                    w_up: g.param(up.w),
                    b_up: g.param(up.b.expect("bias")),
                };
                x_adapter_graph(g, h, cond, &vars, &scale)
            }
            AdapterBody::LowRank { a, b } => {
                let (a, b) = (g.param(*a), g.param(*b));
                lora_graph(g, h, cond, a, b, &scale)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BottleneckVars {
    pub w_down: Var,
    pub b_down: Var,
    pub w_up: Var,
    pub b_up: Var,
}

#[derive(Clone, Copy, Debug)]
pub enum ScaleVars {
    Dynamic { w: Var, b: Var },
    Fixed(f64),
    Learned(Var),
}

fn apply_scale(g: &mut Graph<'_>, h: Var, up: Var, scale: &ScaleVars) -> Var {
    match *scale {
        ScaleVars::Dynamic { w, b } => {
            let s = g.matmul(h, w);
            let s = g.add_row(s, b);
            let s = g.relu(s);
            g.mul_col(up, s)
        }
        ScaleVars::Fixed(v) => {
            if v == 1.0 {
                up
            } else {
                g.scale(up, v)
            }
        }
        ScaleVars::Learned(s) => g.mul_scalar(up, s),
    }
}

fn modulate(g: &mut Graph<'_>, h: Var, cond: Option<Var>) -> Var {
    match cond {
        Some(x) => g.add_row(h, x),
        None => h,
    }
}

/// `s_d ⊙ (SiLU((h + x)·W_down + b_down)·W_up + b_up)` with
/// `s_d = ReLU(h·W_s + b_s)` computed from the unmodulated input.
pub fn x_adapter_graph(g: &mut Graph<'_>, h: Var, cond: Option<Var>, p: &BottleneckVars, scale: &ScaleVars) -> Var {
    let m = modulate(g, h, cond);
    let down = g.matmul(m, p.w_down);
    let down = g.add_row(down, p.b_down);
    let down = g.silu(down);
    let up = g.matmul(down, p.w_up);
    let up = g.add_row(up, p.b_up);
    apply_scale(g, h, up, scale)
}

/// `s_d ⊙ ((h + x)·A·B)`
pub fn lora_graph(g: &mut Graph<'_>, h: Var, cond: Option<Var>, a: Var, b: Var, scale: &ScaleVars) -> Var {
    let m = modulate(g, h, cond);
    let low = g.matmul(m, a);
    let up = g.matmul(low, b);
    apply_scale(g, h, up, scale)
}

/// Plain-matrix X-Adapter weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub w_down: Mat,
    pub b_down: Mat,
    pub w_up: Mat,
    pub b_up: Mat,
    pub w_s: Mat,
    pub b_s: Mat,
}

impl AdapterParams {
    fn check(&self, h: &Mat, cond: &[f64]) -> Result<()> {
        let d = h.ncols();
        let r = self.w_down.ncols();
        ensure!(
            self.w_down.nrows() == d
                && self.b_down.dim() == (1, r)
                && self.w_up.dim() == (r, d)
                && self.b_up.dim() == (1, d)
                && self.w_s.dim() == (d, 1)
                && self.b_s.dim() == (1, 1),
            Shape,
            "adapter parameters do not match width {d}"
        );
        ensure!(cond.len() == d, Shape, "condition width {} != {d}", cond.len());
        Ok(())
    }
}

fn row(v: &[f64]) -> Mat {
    Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row")
}

/// Adapter delta for a token matrix `h` and projected condition `cond`.
pub fn x_adapter_apply(h: &Mat, cond: &[f64], params: &AdapterParams) -> Result<Mat> {
    params.check(h, cond)?;
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let hv = g.input(h.clone());
    let x = g.input(row(cond));
    let vars = BottleneckVars {
        w_down: g.input(params.w_down.clone()),
        b_down: g.input(params.b_down.clone()),
        w_up: g.input(params.w_up.clone()),
        b_up: g.input(params.b_up.clone()),
    };
    let scale = ScaleVars::Dynamic {
        w: g.input(params.w_s.clone()),
        b: g.input(params.b_s.clone()),
    };
    let out = x_adapter_graph(&mut g, hv, Some(x), &vars, &scale);
    Ok(g.value(out).clone())
}

/// LoRA delta with Dy-Scale gating (`w_s`, `b_s`) applied like the X-Adapter.
pub fn lora_apply(h: &Mat, cond: &[f64], a: &Mat, b: &Mat, w_s: &Mat, b_s: &Mat) -> Result<Mat> {
    let d = h.ncols();
    ensure!(
        a.nrows() == d && b.dim() == (a.ncols(), d) && w_s.dim() == (d, 1) && b_s.dim() == (1, 1),
        Shape,
        "LoRA factors do not match width {d}"
    );
    ensure!(cond.len() == d, Shape, "condition width {} != {d}", cond.len());
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let hv = g.input(h.clone());
    let x = g.input(row(cond));
    let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
    let scale = ScaleVars::Dynamic {
        w: g.input(w_s.clone()),
        b: g.input(b_s.clone()),
    };
    let out = lora_graph(&mut g, hv, Some(x), av, bv, &scale);
    Ok(g.value(out).clone())
}

/// Learned key/value rows prepended at one attention site, plus the blend gate.
#[derive(Clone, Debug)]
pub struct Prefix {
    pub keys: ParamId,
    pub values: ParamId,
    pub gate: ParamId,
}

impl Prefix {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, len: usize) -> Result<Self> {
        Ok(Prefix {
            keys: init.zeros(&format!("{name}.prefix_k"), len, d)?,
            values: init.zeros(&format!("{name}.prefix_v"), len, d)?,
            gate: init.zeros(&format!("{name}.prefix_gate"), 1, 1)?,
        })
    }

    pub fn vars(&self, g: &mut Graph<'_>, cond: Option<Var>) -> crate::nn::PrefixKv {
        let k = g.param(self.keys);
        let v = g.param(self.values);
        crate::nn::PrefixKv {
            keys: modulate(g, k, cond),
            values: modulate(g, v, cond),
            gate: g.param(self.gate),
        }
    }
}

/// Keys and values augmented with condition-shifted prefix rows.
pub fn prefix_apply(keys: &Mat, values: &Mat, prefix_keys: &Mat, prefix_values: &Mat, cond: &[f64]) -> Result<(Mat, Mat)> {
    let d = keys.ncols();
    ensure!(prefix_keys.nrows() >= 1, InvalidArgument, "prefix length must be at least 1");
    ensure!(
        values.ncols() == d
            && prefix_keys.ncols() == d
            && prefix_values.dim() == prefix_keys.dim()
            && cond.len() == d,
        Shape,
        "prefix widths do not match {d}"
    );
    let x = row(cond);
    let pk = prefix_keys + &x;
    let pv = prefix_values + &x;
    Ok((
        ndarray::concatenate(ndarray::Axis(0), &[pk.view(), keys.view()]).unwrap(),
        ndarray::concatenate(ndarray::Axis(0), &[pv.view(), values.view()]).unwrap(),
    ))
}

/// Single-head softmax attention on plain matrices.
pub fn attend(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let (q, k, v) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
    let out = attention(&mut g, q, k, v, 1);
    g.value(out).clone()
}

/// Closed-form count of parameters one variant adds per encoder layer.
pub fn per_layer_count(cfg: &PeftConfig, d: usize) -> usize {
    let scale = match cfg.scale {
        ScaleMode::Dynamic => d + 1,
        ScaleMode::Fixed => 0,
        ScaleMode::Learned => 1,
    };
    let per_site = match cfg.variant {
        PeftVariant::XAdapter | PeftVariant::SerialAdapter => d * cfg.rank + cfg.rank + cfg.rank * d + d + scale,
        PeftVariant::Lora => 2 * d * cfg.rank + scale,
        PeftVariant::Prefix => 2 * cfg.prefix_length * d + 1,
    };
    per_site * cfg.sites.len()
}
