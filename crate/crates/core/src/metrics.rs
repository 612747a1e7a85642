//! Evaluation metrics: Fréchet distances over learned features, beat
//! consistency, diversity, and face reconstruction errors.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{concatenate, Axis};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Mat, ParamStore, Var};
use crate::data::{compute_velocity, Dataset, MotionSequence};
use crate::error::{ensure, Error, Result};
use crate::nn::{seeded, Init, Linear};
use crate::optim::{Adam, AdamConfig};

/// Mean and population covariance of a set of feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: Mat,
    pub n: usize,
}

const PSD_TOL: f64 = 1e-9;

fn to_na(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

impl GaussianStats {
    /// Fits the rows of `features`; dividing by `n` keeps the statistics
    /// unchanged when the sample set is duplicated.
    pub fn fit(features: &Mat) -> Result<Self> {
        let n = features.nrows();
        ensure!(n >= 2, InvalidArgument, "need at least 2 feature vectors, got {n}");
        let mean = features.mean_axis(Axis(0)).expect("non-empty");
        let centered = features - &mean;
        let mut cov = centered.t().dot(&centered) / n as f64;
        let sym = (&cov + &cov.t()) * 0.5;
        cov.assign(&sym);
        Ok(GaussianStats {
            mean: mean.to_vec(),
            cov,
            n,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.dim();
        ensure!(self.cov.dim() == (k, k), Shape, "covariance {:?} does not match mean width {k}", self.cov.dim());
        ensure!(
            self.mean.iter().chain(self.cov.iter()).all(|v| v.is_finite()),
            InvalidArgument,
            "statistics are not finite"
        );
        let scale = self.cov.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for i in 0..k {
            for j in 0..i {
                ensure!(
                    (self.cov[[i, j]] - self.cov[[j, i]]).abs() <= PSD_TOL * scale,
                    InvalidArgument,
                    "covariance is not symmetric at ({i}, {j})"
                );
            }
        }
        let eig = SymmetricEigen::new(to_na(&self.cov)).eigenvalues;
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        ensure!(min >= -PSD_TOL * scale, InvalidArgument, "covariance has eigenvalue {min:e} below zero");
        Ok(())
    }
}

/// `V·diag(f(λ))·Vᵀ` for a symmetric matrix, with eigenvalues clipped at 0.
fn sym_apply(m: DMatrix<f64>, f: impl Fn(f64) -> f64) -> (DMatrix<f64>, Vec<f64>) {
    let sym = (&m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals: Vec<f64> = e.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(vals.len(), vals.iter().map(|v| f(*v))));
    (&e.eigenvectors * d * e.eigenvectors.transpose(), vals)
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})`. The trace of the square root
/// is evaluated as `Σ √λ(S Σb S)` with `S = Σa^{1/2}`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    ensure!(a.dim() == b.dim(), Shape, "feature widths differ: {} vs {}", a.dim(), b.dim());
    a.validate()?;
    b.validate()?;
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let (s, _) = sym_apply(to_na(&a.cov), f64::sqrt);
    let m = &s * to_na(&b.cov) * &s;
    let (_, eig) = sym_apply(m, |v| v);
    let tr_sqrt: f64 = eig.iter().map(|v| v.sqrt()).sum();
    let tr = a.cov.diag().sum() + b.cov.diag().sum();
    Ok((mean_term + tr - 2.0 * tr_sqrt).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Holistic,
    Body,
}

impl Scope {
    fn select(self, m: &MotionSequence) -> Mat {
        match self {
            Scope::Holistic => m.holistic(),
            Scope::Body => m.body.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub window: usize,
    pub stride: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            window: 8,
            stride: 4,
            hidden: 64,
            feature_dim: 32,
            epochs: 60,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Windowed autoencoder over standardized motion. Features are the encoder
/// bottleneck averaged over windows.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub scope: Scope,
    pub config: ExtractorConfig,
    pub store: ParamStore,
    pub enc1: Linear,
    pub enc2: Linear,
    pub dec1: Linear,
    pub dec2: Linear,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub hash: String,
}

impl FeatureExtractor {
    fn standardized(&self, x: &Mat) -> Result<Mat> {
        ensure!(x.ncols() == self.mean.len(), Shape, "extractor expects width {}, got {}", self.mean.len(), x.ncols());
        ensure!(
            x.nrows() >= self.config.window,
            Shape,
            "sequence of {} frames shorter than the {}-frame window",
            x.nrows(),
            self.config.window
        );
        let mut x = x.clone();
        for (mut c, (m, s)) in x.columns_mut().into_iter().zip(self.mean.iter().zip(&self.std)) {
            c.mapv_inplace(|v| (v - m) / s);
        }
        Ok(x)
    }

    fn encode_graph(&self, g: &mut Graph<'_>, x: &Mat) -> Result<(Var, Var)> {
        let x = g.input(self.standardized(x)?);
        let w = g.unfold(x, self.config.window, self.config.stride);
        let h = self.enc1.forward(g, w);
        let h = g.gelu(h);
        let z = self.enc2.forward(g, h);
        Ok((w, z))
    }

    fn recon_loss(&self, g: &mut Graph<'_>, x: &Mat) -> Result<Var> {
        let (w, z) = self.encode_graph(g, x)?;
        let h = self.dec1.forward(g, z);
        let h = g.gelu(h);
        let r = self.dec2.forward(g, h);
        let d = g.sub(r, w);
        let sq = g.sum_sq(d);
        let n = g.value(w).len() as f64;
        Ok(g.scale(sq, 1.0 / n))
    }

    /// Mean squared reconstruction error in standardized units.
    pub fn reconstruction_error(&self, m: &MotionSequence) -> Result<f64> {
        let mut g = Graph::inference(&self.store);
        let l = self.recon_loss(&mut g, &self.scope.select(m))?;
        Ok(g.scalar(l))
    }

    pub fn features(&self, m: &MotionSequence) -> Result<Vec<f64>> {
        let mut g = Graph::inference(&self.store);
        let (_, z) = self.encode_graph(&mut g, &self.scope.select(m))?;
        let p = g.mean_rows(z);
        Ok(g.value(p).iter().copied().collect())
    }

    pub fn feature_matrix(&self, seqs: &[MotionSequence]) -> Result<Mat> {
        let k = self.config.feature_dim;
        let mut out = Mat::zeros((seqs.len(), k));
        for (i, s) in seqs.iter().enumerate() {
            let f = self.features(s)?;
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&f));
        }
        Ok(out)
    }

    fn compute_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&(self.scope, &self.config, &self.mean, &self.std)).expect("serializes"));
        for (_, n, m) in self.store.iter() {
            h.update(n.as_bytes());
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Trains the autoencoder on ground-truth sequences; returns the frozen
/// extractor and the mean reconstruction loss per epoch.
pub fn fit_feature_extractor(gt: &Dataset, scope: Scope, cfg: &ExtractorConfig) -> Result<(FeatureExtractor, Vec<f64>)> {
    ensure!(!gt.is_empty(), InvalidArgument, "cannot fit a feature extractor on an empty dataset");
    ensure!(
        cfg.window >= 1 && cfg.stride >= 1 && cfg.hidden >= 1 && cfg.feature_dim >= 1,
        Config,
        "extractor sizes must be positive"
    );
    let seqs: Vec<Mat> = gt.samples.iter().map(|s| scope.select(&s.motion)).collect();
    let all = concatenate(Axis(0), &seqs.iter().map(|s| s.view()).collect::<Vec<_>>()).expect("widths match");
    let c = all.ncols();
    let mean: Vec<f64> = all.mean_axis(Axis(0)).expect("non-empty").to_vec();
    let std: Vec<f64> = all.std_axis(Axis(0), 0.0).iter().map(|s| s.max(1e-6)).collect();
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, cfg.seed);
    let wc = cfg.window * c;
    let enc1 = Linear::new(&mut init, "extractor.enc1", wc, cfg.hidden)?;
    let enc2 = Linear::new(&mut init, "extractor.enc2", cfg.hidden, cfg.feature_dim)?;
    let dec1 = Linear::new(&mut init, "extractor.dec1", cfg.feature_dim, cfg.hidden)?;
    let dec2 = Linear::new(&mut init, "extractor.dec2", cfg.hidden, wc)?;
    let mut ex = FeatureExtractor {
        scope,
        config: cfg.clone(),
        store,
        enc1,
        enc2,
        dec1,
        dec2,
        mean,
        std,
        hash: String::new(),
    };
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &ex.store);
    let mut rng = seeded(cfg.seed ^ 0xFEA7);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    const BATCH: usize = 8;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(BATCH) {
            let mut grads = Gradients::zeros_like(&ex.store);
            for &i in batch {
                let mut g = Graph::new(&ex.store);
                let l = ex.recon_loss(&mut g, &seqs[i])?;
                total += g.scalar(l);
                grads.accumulate(&g.backward(l), 1.0 / batch.len() as f64);
            }
            opt.update(&mut ex.store, &grads);
        }
        curve.push(total / seqs.len() as f64);
    }
    ex.hash = ex.compute_hash();
    Ok((ex, curve))
}

/// Fréchet distance between feature statistics of two sequence sets.
pub fn fmd_fgd(generated: &[MotionSequence], reference: &[MotionSequence], extractor: &FeatureExtractor) -> Result<f64> {
    ensure!(
        generated.len() >= 2 && reference.len() >= 2,
        InvalidArgument,
        "need at least 2 sequences per side, got {} and {}",
        generated.len(),
        reference.len()
    );
    let a = GaussianStats::fit(&extractor.feature_matrix(generated)?)?;
    let b = GaussianStats::fit(&extractor.feature_matrix(reference)?)?;
    frechet_distance(&a, &b)
}

/// Strict local maxima of the rhythm track that exceed its mean.
pub fn audio_beats(rhythm: &Mat) -> Vec<usize> {
    let r: Vec<f64> = rhythm.column(0).to_vec();
    let mean = r.iter().sum::<f64>() / r.len().max(1) as f64;
    (1..r.len().saturating_sub(1))
        .filter(|&i| r[i] > r[i - 1] && r[i] > r[i + 1] && r[i] > mean)
        .collect()
}

/// Strict local minima of the per-frame body speed; velocity row `i` is
/// attributed to frame `i`.
pub fn kinematic_beats(body: &Mat) -> Result<Vec<usize>> {
    let v = compute_velocity(body)?;
    let speed: Vec<f64> = v.rows().into_iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    Ok((1..speed.len().saturating_sub(1))
        .filter(|&i| speed[i] < speed[i - 1] && speed[i] < speed[i + 1])
        .collect())
}

/// Mean over audio beats of `exp(−d²/(2σ_f²))`, `d` the distance to the
/// nearest kinematic beat and `σ_f = 0.1·fps` frames.
pub fn beat_consistency(body: &Mat, rhythm: &Mat, fps: f64) -> Result<f64> {
    let n = body.nrows();
    ensure!(n >= 4, InvalidArgument, "beat consistency needs at least 4 frames, got {n}");
    ensure!(rhythm.dim() == (n, 1), Shape, "rhythm {:?} does not match {n} frames", rhythm.dim());
    ensure!(fps > 0.0, InvalidArgument, "fps must be positive");
    let audio = audio_beats(rhythm);
    let kin = kinematic_beats(body)?;
    if audio.is_empty() {
        return Err(Error::Undefined("no audio beats detected".into()));
    }
    if kin.is_empty() {
        return Err(Error::Undefined("no kinematic beats detected".into()));
    }
    let sigma = 0.1 * fps;
    let score: f64 = audio
        .iter()
        .map(|&a| {
            let d = kin.iter().map(|&k| (a as f64 - k as f64).abs()).fold(f64::INFINITY, f64::min);
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(score / audio.len() as f64)
}

fn pool(m: &Mat) -> Vec<f64> {
    m.mean_axis(Axis(0)).expect("non-empty").to_vec()
}

/// Mean distance between pooled vectors over `m` distinct unordered pairs
/// (all pairs when `m` reaches the pair count). Samples are put in a
/// canonical order first, so the result ignores input order.
pub fn diversity(samples: &[Mat], m: usize, seed: u64) -> Result<f64> {
    ensure!(samples.len() >= 2, InvalidArgument, "diversity needs at least 2 samples");
    ensure!(m >= 1, InvalidArgument, "pair count must be at least 1");
    for s in samples {
        ensure!(s.nrows() >= 1 && s.ncols() == samples[0].ncols(), Shape, "samples differ in width or are empty");
    }
    let mut pooled: Vec<Vec<f64>> = samples.iter().map(pool).collect();
    pooled.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let n = pooled.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let chosen: Vec<(usize, usize)> = if m >= pairs.len() {
        pairs
    } else {
        let mut rng = seeded(seed);
        let mut idx = index::sample(&mut rng, pairs.len(), m).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|k| pairs[k]).collect()
    };
    let total: f64 = chosen
        .iter()
        .map(|&(i, j)| pooled[i].iter().zip(&pooled[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / chosen.len() as f64)
}

/// Mean squared coefficient error and mean absolute velocity error.
pub fn face_mse_lvd(generated: &Mat, gt: &Mat) -> Result<(f64, f64)> {
    ensure!(generated.dim() == gt.dim(), Shape, "face shapes differ: {:?} vs {:?}", generated.dim(), gt.dim());
    ensure!(gt.nrows() >= 2, InvalidArgument, "LVD needs at least 2 frames");
    let mse = (generated - gt).iter().map(|d| d * d).sum::<f64>() / gt.len() as f64;
    let vg = compute_velocity(generated)?;
    let vt = compute_velocity(gt)?;
    let lvd = (&vg - &vt).iter().map(|d| d.abs()).sum::<f64>() / vt.len() as f64;
    Ok((mse, lvd))
}

/// A metric value or the reason it is undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MetricValue {
    Value(f64),
    Undefined(String),
}

impl MetricValue {
    pub fn value(&self) -> Option<f64> {
        match self {
            MetricValue::Value(v) => Some(*v),
            MetricValue::Undefined(_) => None,
        }
    }

    fn from_result(r: Result<f64>) -> Result<Self> {
        match r {
            Ok(v) => Ok(MetricValue::Value(v)),
            Err(Error::Undefined(why)) => Ok(MetricValue::Undefined(why)),
            Err(e) => Err(e),
        }
    }
}

impl fmt::Display for MetricValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricValue::Value(v) => write!(f, "{v}"),
            MetricValue::Undefined(why) => write!(f, "undefined ({why})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fmd: MetricValue,
    pub fgd: MetricValue,
    pub bc: MetricValue,
    pub div: MetricValue,
    pub mse: MetricValue,
    pub lvd: MetricValue,
    pub config_hash: String,
    pub dataset_hash: String,
}

impl MetricReport {
    pub fn entries(&self) -> [(&'static str, &MetricValue); 6] {
        [
            ("fmd", &self.fmd),
            ("fgd", &self.fgd),
            ("bc", &self.bc),
            ("div", &self.div),
            ("mse", &self.mse),
            ("lvd", &self.lvd),
        ]
    }

    /// Flat `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str(&format!("config_hash = {}\n", self.config_hash));
        out.push_str(&format!("dataset_hash = {}\n", self.dataset_hash));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("malformed report line `{line}`")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |k: &str| map.remove(k).ok_or_else(|| Error::InvalidArgument(format!("report lacks `{k}`")));
        let metric = |s: String| -> Result<MetricValue> {
            if let Some(rest) = s.strip_prefix("undefined") {
                let why = rest.trim().trim_start_matches('(').trim_end_matches(')');
                return Ok(MetricValue::Undefined(why.to_string()));
            }
            s.parse()
                .map(MetricValue::Value)
                .map_err(|e| Error::InvalidArgument(format!("bad metric value `{s}`: {e}")))
        };
        Ok(MetricReport {
            fmd: metric(take("fmd")?)?,
            fgd: metric(take("fgd")?)?,
            bc: metric(take("bc")?)?,
            div: metric(take("div")?)?,
            mse: metric(take("mse")?)?,
            lvd: metric(take("lvd")?)?,
            config_hash: take("config_hash")?,
            dataset_hash: take("dataset_hash")?,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.entries() {
            out.push_str(&format!("{k},{}\n", v.value().map_or(String::new(), |x| x.to_string())));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub div_pairs: usize,
    pub div_seed: u64,
    pub extractor: ExtractorConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            div_pairs: 100,
            div_seed: 0,
            extractor: ExtractorConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("serializes"));
        h.update(b"bc_sigma_s=0.1");
        hex::encode(&h.finalize()[..8])
    }
}

/// Scores generated motion against a reference set paired by index. BC uses
/// the reference rhythm; samples with no detectable beats are skipped and
/// the metric is undefined only when no sample yields a value.
pub fn evaluate(
    generated: &[MotionSequence],
    reference: &Dataset,
    fmd_extractor: &FeatureExtractor,
    fgd_extractor: &FeatureExtractor,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    ensure!(
        generated.len() == reference.len(),
        Shape,
        "{} generated sequences for {} references",
        generated.len(),
        reference.len()
    );
    ensure!(fmd_extractor.scope == Scope::Holistic && fgd_extractor.scope == Scope::Body, Config, "extractor scopes are swapped");
    let refs = reference.motions();
    let fmd = MetricValue::from_result(fmd_fgd(generated, &refs, fmd_extractor))?;
    let fgd = MetricValue::from_result(fmd_fgd(generated, &refs, fgd_extractor))?;
    let mut bcs = Vec::new();
    let mut last_undefined = String::from("no samples");
    for (g, s) in generated.iter().zip(&reference.samples) {
        match beat_consistency(&g.body, &s.audio.rhythm, g.fps) {
            Ok(v) => bcs.push(v),
            Err(Error::Undefined(why)) => last_undefined = why,
            Err(e) => return Err(e),
        }
    }
    let bc = if bcs.is_empty() {
        MetricValue::Undefined(last_undefined)
    } else {
        MetricValue::Value(bcs.iter().sum::<f64>() / bcs.len() as f64)
    };
    let bodies: Vec<Mat> = generated.iter().map(|g| g.body.clone()).collect();
    let div = MetricValue::from_result(diversity(&bodies, cfg.div_pairs, cfg.div_seed))?;
    let (mut mse, mut lvd) = (0.0, 0.0);
    for (g, r) in generated.iter().zip(&refs) {
        let (m, l) = face_mse_lvd(&g.face, &r.face)?;
        mse += m;
        lvd += l;
    }
    let k = generated.len().max(1) as f64;
    Ok(MetricReport {
        fmd,
        fgd,
        bc,
        div,
        mse: MetricValue::Value(mse / k),
        lvd: MetricValue::Value(lvd / k),
        config_hash: format!("{}-{}-{}", cfg.hash(), &fmd_extractor.hash[..8], &fgd_extractor.hash[..8]),
        dataset_hash: crate::checkpoint::dataset_hash(reference),
    })
}
