//! Layer building blocks expressed over [`Graph`] ops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rand_distr::Distribution;

use crate::autograd::{Graph, Mat, ParamId, ParamStore, Var};
use crate::error::Result;

/// Parameter values are kept representable in `f32` so checkpoints round-trip
/// exactly.
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Registers parameters with initial values that depend only on the seed and
/// the parameter name, so adding a module never perturbs the others.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub seed: u64,
}

impl Init<'_> {
    pub fn new(store: &mut ParamStore, seed: u64) -> Init<'_> {
        Init { store, seed }
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ fnv1a(name)))
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> Result<ParamId> {
        let mut rng = self.rng_for(name);
        let m = Mat::from_shape_fn((rows, cols), |_| round_f32(rng.random_range(-bound..=bound)));
        self.store.insert(name, m)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<ParamId> {
        let mut rng = self.rng_for(name);
        let m = Mat::from_shape_fn((rows, cols), |_| {
            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
            round_f32(z * std)
        });
        self.store.insert(name, m)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> Result<ParamId> {
        self.store.insert(name, Mat::from_elem((rows, cols), round_f32(value)))
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.constant(name, rows, cols, 0.0)
    }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// `y = x·W + b` with `W` stored `d_in × d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Linear {
            w: init.uniform(&format!("{name}.weight"), d_in, d_out, bound)?,
            b: Some(init.uniform(&format!("{name}.bias"), 1, d_out, bound)?),
        })
    }

    pub fn no_bias(init: &mut Init<'_>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Linear {
            w: init.uniform(&format!("{name}.weight"), d_in, d_out, bound)?,
            b: None,
        })
    }

    /// Zero weight and bias.
    pub fn zeros(init: &mut Init<'_>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Linear {
            w: init.zeros(&format!("{name}.weight"), d_in, d_out)?,
            b: Some(init.zeros(&format!("{name}.bias"), 1, d_out)?),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Row standardization followed by a learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: init.constant(&format!("{name}.gain"), 1, d, 1.0)?,
            shift: init.zeros(&format!("{name}.shift"), 1, d)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        let y = g.mul_row(n, gain);
        g.add_row(y, shift)
    }
}

/// Two linear maps with a SiLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init<'_>, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(init, &format!("{name}.fc1"), d_in, hidden)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, d_out)?,
        })
    }

    /// Second layer zero-initialized, so the map starts at zero.
    pub fn zero_out(init: &mut Init<'_>, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(init, &format!("{name}.fc1"), d_in, hidden)?,
            fc2: Linear::zeros(init, &format!("{name}.fc2"), hidden, d_out)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.silu(h);
        self.fc2.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, hidden: usize) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::new(init, &format!("{name}.fc1"), d, hidden)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, d)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Scaled dot-product attention split over `heads` column blocks of `q`, `k`
/// and `v` (already projected).
pub fn attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let d = g.shape(q).1;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, (h + 1) * dh),
                g.slice_cols(k, h * dh, (h + 1) * dh),
                g.slice_cols(v, h * dh, (h + 1) * dh),
            )
        };
        let s = g.matmul_t(qh, kh);
        let s = g.scale(s, scale);
        let p = g.softmax_rows(s);
        outs.push(g.matmul(p, vh));
    }
    if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

/// Extra key/value rows attended alongside the sequence, blended in through
/// a scalar gate.
#[derive(Clone, Copy, Debug)]
pub struct PrefixKv {
    pub keys: Var,
    pub values: Var,
    pub gate: Var,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(MultiHeadAttention {
            q: Linear::new(init, &format!("{name}.q"), d, d)?,
            k: Linear::new(init, &format!("{name}.k"), d, d)?,
            v: Linear::new(init, &format!("{name}.v"), d, d)?,
            o: Linear::new(init, &format!("{name}.o"), d, d)?,
            heads,
        })
    }

    /// Attention of `x` over `memory`. With a prefix, the per-head output is
    /// `A + gate·(A' - A)` where `A'` attends over `[prefix; memory]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, memory: Var, prefix: Option<PrefixKv>) -> Var {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, memory);
        let v = self.v.forward(g, memory);
        let mut a = attention(g, q, k, v, self.heads);
        if let Some(p) = prefix {
            let k2 = g.concat_rows(&[p.keys, k]);
            let v2 = g.concat_rows(&[p.values, v]);
            let joint = attention(g, q, k2, v2, self.heads);
            let diff = g.sub(joint, a);
            let gated = g.mul_scalar(diff, p.gate);
            a = g.add(a, gated);
        }
        self.o.forward(g, a)
    }
}

/// Inverted dropout; identity when `rng` is `None` or `p == 0`.
pub fn dropout(g: &mut Graph<'_>, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let (r, c) = g.shape(x);
            let mask = Mat::from_shape_fn((r, c), |_| if rng.random::<f64>() < p { 0.0 } else { keep });
            let m = g.input(mask);
            g.mul(x, m)
        }
        _ => x,
    }
}

/// Fixed sinusoidal table, `rows × d`.
pub fn sinusoidal_table(rows: usize, d: usize) -> Mat {
    Mat::from_shape_fn((rows, d), |(pos, i)| sinusoid(pos as f64, i, d))
}

/// Sinusoidal embedding of a scalar position, `1 × d`.
pub fn sinusoidal_row(pos: f64, d: usize) -> Mat {
    Mat::from_shape_fn((1, d), |(_, i)| sinusoid(pos, i, d))
}

fn sinusoid(pos: f64, i: usize, d: usize) -> f64 {
    let half = (d / 2).max(1);
    let k = (i % half) as f64;
    let freq = (-(10_000f64.ln()) * k / half as f64).exp();
    if i < half {
        (pos * freq).sin()
    } else {
        (pos * freq).cos()
    }
}
