//! Acceptance gate. Runs every criterion in sequence so runtimes are not
//! inflated by sibling tests, prints one PASS/FAIL line per criterion, then
//! fails if any criterion failed.

#![allow(clippy::needless_range_loop)]

use std::time::Instant;

use dumotion::ablation::{closed_form_trainable, format_table, run_ablation, standard_grid, AblationSetup};
use dumotion::autograd::{Graph, Mat, ParamStore};
use dumotion::checkpoint::{frozen_hash, Checkpoint};
use dumotion::conditioning::{identity_stats, stats_vector, ConditionEmbedding, EmotionTable, Provenance};
use dumotion::data::{
    generate_synthetic_dataset, split_dataset, AudioFeatureTrack, Dataset, Emotion, MotionSequence, SyntheticSpec,
};
use dumotion::diffusion::{cosine_schedule, q_sample, standard_normal};
use dumotion::loss::{loss_velocity, total_loss_graph};
use dumotion::metrics::{
    beat_consistency, diversity, face_mse_lvd, fit_feature_extractor, fmd_fgd, frechet_distance, EvalConfig,
    ExtractorConfig, FeatureExtractor, GaussianStats, Scope,
};
use dumotion::model::{build_model, count_parameters, DuTrans, DuTransConfig, ForwardCtx};
use dumotion::nn::seeded;
use dumotion::peft::{ConditionSource, PeftConfig, PeftVariant, ScaleMode, Site};
use dumotion::training::{finetune, pretrain, sample_dataset, ConditionTask, TrainConfig};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use twofloat::TwoFloat;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

/// Writes past the test harness's output capture so the report reaches the
/// log even when every criterion passes.
macro_rules! report {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stderr(), $($arg)*);
    }};
}

fn record(out: &mut Vec<Outcome>, id: usize, name: &'static str, pass: bool, detail: String) {
    report!("criterion {id:>2} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    out.push(Outcome { id, name, pass, detail });
}

// --- 1 ---------------------------------------------------------------------

fn q_sample_marginal(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let sched = cosine_schedule(1000, 0.008).unwrap();
    let t = 500;
    let ab = sched.alpha_bar[t];
    let x0 = Mat::from_shape_vec((1, 4), vec![1.0, -0.5, 0.25, 2.0]).unwrap();
    let draws = 10_000;
    let mut rng = seeded(101);
    let mut sum = Mat::zeros((1, 4));
    let mut sum_sq = Mat::zeros((1, 4));
    for _ in 0..draws {
        let noise = standard_normal(&mut rng, 1, 4);
        let x = q_sample(&x0, t, &noise, &sched).unwrap();
        sum += &x;
        sum_sq += &x.mapv(|v| v * v);
    }
    let n = draws as f64;
    let mut worst_se = 0.0f64;
    let mut worst_var = 0.0f64;
    for j in 0..4 {
        let mean = sum[[0, j]] / n;
        let var = sum_sq[[0, j]] / n - mean * mean;
        let se = ((1.0 - ab) / n).sqrt();
        worst_se = worst_se.max((mean - ab.sqrt() * x0[[0, j]]).abs() / se);
        worst_var = worst_var.max((var / (1.0 - ab) - 1.0).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    record(
        out,
        1,
        "q_sample marginal",
        worst_se <= 4.0 && worst_var <= 0.05 && secs < 10.0,
        format!("max |mean err| = {worst_se:.2} SE (<= 4), max var rel err = {worst_var:.4} (<= 0.05), {secs:.2}s (< 10s)"),
    );
}

// --- 2 ---------------------------------------------------------------------

type Dd = TwoFloat;

fn dd(x: f64) -> Dd {
    TwoFloat::from(x)
}

/// `a / b` refined by one Newton step; the crate's own quotient drops the
/// low word of `1 − b·(1/b)`.
fn ddiv(a: Dd, b: Dd) -> Dd {
    let q = a / b;
    q + (a - q * b) / b
}

/// Cyclic Jacobi eigendecomposition in double-double arithmetic.
fn jacobi_dd(mut a: Vec<Vec<Dd>>) -> (Vec<Dd>, Vec<Vec<Dd>>) {
    let n = a.len();
    let mut v: Vec<Vec<Dd>> = (0..n).map(|i| (0..n).map(|j| dd(if i == j { 1.0 } else { 0.0 })).collect()).collect();
    for _ in 0..100 {
        let mut off = dd(0.0);
        let mut diag = dd(0.0);
        for i in 0..n {
            diag += a[i][i] * a[i][i];
            for j in 0..n {
                if i != j {
                    off += a[i][j] * a[i][j];
                }
            }
        }
        if off.hi() <= 1e-64 * diag.hi().max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                // Negligible couplings are dropped; rotating on them would
                // overflow theta.
                if a[p][q].hi().abs() <= 1e-34 * (a[p][p].hi().abs() + a[q][q].hi().abs()) {
                    a[p][q] = dd(0.0);
                    a[q][p] = dd(0.0);
                    continue;
                }
                let theta = ddiv(a[q][q] - a[p][p], dd(2.0) * a[p][q]);
                let root = (theta * theta + dd(1.0)).sqrt();
                let t = if theta.hi() >= 0.0 { ddiv(dd(1.0), theta + root) } else { ddiv(dd(-1.0), -theta + root) };
                let c = ddiv(dd(1.0), (t * t + dd(1.0)).sqrt());
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

fn to_dd(m: &Mat) -> Vec<Vec<Dd>> {
    m.rows().into_iter().map(|r| r.iter().map(|x| dd(*x)).collect()).collect()
}

fn matmul_dd(a: &[Vec<Dd>], b: &[Vec<Dd>]) -> Vec<Vec<Dd>> {
    let n = a.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let mut acc = dd(0.0);
                    for k in 0..n {
                        acc += a[i][k] * b[k][j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn frechet_oracle(a: &GaussianStats, b: &GaussianStats) -> f64 {
    let n = a.mean.len();
    let (la, va) = jacobi_dd(to_dd(&a.cov));
    // S = V diag(sqrt(max(λ, 0))) Vᵀ
    let s: Vec<Vec<Dd>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let mut acc = dd(0.0);
                    for k in 0..n {
                        let l = if la[k].hi() > 0.0 { la[k].sqrt() } else { dd(0.0) };
                        acc += va[i][k] * l * va[j][k];
                    }
                    acc
                })
                .collect()
        })
        .collect();
    let m = matmul_dd(&matmul_dd(&s, &to_dd(&b.cov)), &s);
    let sym: Vec<Vec<Dd>> = (0..n).map(|i| (0..n).map(|j| (m[i][j] + m[j][i]) * dd(0.5)).collect()).collect();
    let (lm, _) = jacobi_dd(sym);
    let mut total = dd(0.0);
    for i in 0..n {
        let d = dd(a.mean[i]) - dd(b.mean[i]);
        total += d * d + dd(a.cov[[i, i]]) + dd(b.cov[[i, i]]);
        if lm[i].hi() > 0.0 {
            total -= dd(2.0) * lm[i].sqrt();
        }
    }
    total.hi() + total.lo()
}

fn random_stats(rng: &mut impl Rng, k: usize) -> GaussianStats {
    let a = Mat::from_shape_fn((k, k), |_| StandardNormal.sample(rng));
    let cov = a.dot(&a.t()) / k as f64 + Mat::eye(k) * 0.01;
    let mean = (0..k).map(|_| StandardNormal.sample(rng)).collect();
    GaussianStats { mean, cov, n: 100 }
}

fn frechet_oracle_check(out: &mut Vec<Outcome>) {
    let mut rng = seeded(202);
    let mut worst = 0.0f64;
    let mut worst_sym = 0.0f64;
    let mut worst_self = 0.0f64;
    for _ in 0..50 {
        let a = random_stats(&mut rng, 5);
        let b = random_stats(&mut rng, 5);
        let got = frechet_distance(&a, &b).unwrap();
        let want = frechet_oracle(&a, &b);
        worst = worst.max((got - want).abs() / want.abs());
        let rev = frechet_distance(&b, &a).unwrap();
        worst_sym = worst_sym.max((got - rev).abs() / got.abs());
        worst_self = worst_self.max(frechet_distance(&a, &a).unwrap());
    }
    record(
        out,
        2,
        "Frechet distance vs extended-precision oracle",
        worst <= 1e-8 && worst_sym <= 1e-8 && worst_self <= 1e-8,
        format!("max rel err {worst:.2e} (<= 1e-8), max asymmetry {worst_sym:.2e}, max d(a,a) {worst_self:.2e}"),
    );
}

// --- 3 ---------------------------------------------------------------------

fn random_audio(rng: &mut rand_chacha::ChaCha8Rng, n: usize, cfg: &DuTransConfig) -> AudioFeatureTrack {
    AudioFeatureTrack::new(
        standard_normal(rng, n, cfg.dims.content),
        standard_normal(rng, n, 1),
        standard_normal(rng, n, cfg.dims.semantics),
    )
    .unwrap()
}

fn zero_init_equivalence(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let cfg = DuTransConfig::toy();
    let base = build_model(&cfg, 303).unwrap();
    let rank = cfg.d_model / 4;
    let variants = [
        ("x_adapter", PeftConfig { rank, ..PeftConfig::default() }),
        ("serial", PeftConfig { variant: PeftVariant::SerialAdapter, rank, ..PeftConfig::default() }),
        ("lora", PeftConfig { variant: PeftVariant::Lora, rank, ..PeftConfig::default() }),
        (
            "prefix",
            PeftConfig { variant: PeftVariant::Prefix, sites: vec![Site::Mha], prefix_length: 16, ..PeftConfig::default() },
        ),
    ];
    let mut rng = seeded(304);
    let mut worst: Vec<(String, f64)> = Vec::new();
    for (name, peft) in &variants {
        let mut injected = base.clone();
        injected.inject_peft(peft).unwrap();
        let mut max_diff = 0.0f64;
        for _ in 0..100 {
            let n = rng.random_range(4..=cfg.max_frames);
            let face = standard_normal(&mut rng, n, cfg.dims.face);
            let body = standard_normal(&mut rng, n, cfg.dims.body);
            let audio = random_audio(&mut rng, n, &cfg);
            let t = rng.random_range(0..cfg.diffusion_steps);
            let z: Vec<f64> = (0..cfg.cond_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let cond = ConditionEmbedding::emotion(z, Provenance::Lookup, None);
            let a = base.forward(&face, &body, &audio, t, None).unwrap();
            let b = injected.forward(&face, &body, &audio, t, Some(&cond)).unwrap();
            for (x, y) in [(&a.face, &b.face), (&a.body, &b.body), (&a.holistic, &b.holistic)] {
                max_diff = max_diff.max((x - y).iter().fold(0.0f64, |m, d| m.max(d.abs())));
            }
        }
        worst.push((name.to_string(), max_diff));
    }
    let pass = worst.iter().all(|(_, d)| *d <= 1e-6);
    let detail = worst.iter().map(|(n, d)| format!("{n} {d:.1e}")).collect::<Vec<_>>().join(", ");
    record(
        out,
        3,
        "zero-init PEFT equivalence",
        pass,
        format!("max |diff| over 100 inputs: {detail} (<= 1e-6), {:.1}s", start.elapsed().as_secs_f64()),
    );
}

// --- 4 ---------------------------------------------------------------------

fn parameter_accounting(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let cfg = DuTransConfig::full();
    let mut model = build_model(&cfg, 0).unwrap();
    let peft = PeftConfig::default();
    let mask = model.inject_peft(&peft).unwrap();
    let adapters: usize = model.store.iter().filter(|(_, n, _)| n.contains("_adapter.")).map(|(_, _, m)| m.len()).sum();
    let trainable = count_parameters(&model, true, &mask).unwrap();
    let total = count_parameters(&model, false, &mask).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let adapter_err = (adapters as f64 / 3.73e6 - 1.0).abs();
    let ratio = trainable as f64 / total as f64;
    record(
        out,
        4,
        "parameter accounting at full scale",
        adapter_err <= 0.05 && (ratio - 0.10).abs() <= 0.03 && secs < 1.0,
        format!(
            "adapters {adapters} ({:+.2}% vs 3.73M, within 5%), trainable {trainable} / total {total} = {ratio:.4} (0.10 +- 0.03), {secs:.2}s (< 1s)",
            100.0 * (adapters as f64 / 3.73e6 - 1.0)
        ),
    );
}

// --- 5 ---------------------------------------------------------------------

fn family(name: &str, variant: &str) -> String {
    if name.contains("_adapter.") {
        return format!("adapter:{variant}");
    }
    if name.contains("prefix") {
        return "prefix".into();
    }
    if name.starts_with("cond.") {
        return format!("cond:{variant}");
    }
    for p in ["time.", "biflow", "decoder.", "head.", "identity."] {
        if name.starts_with(p) {
            return p.trim_end_matches('.').to_string();
        }
    }
    "encoder".into()
}

#[derive(Clone)]
struct GradFixture {
    face_t: Mat,
    body_t: Mat,
    face: Mat,
    body: Mat,
    audio: AudioFeatureTrack,
    t: usize,
    cond: ConditionEmbedding,
}

fn loss_value(model: &DuTrans, store: &ParamStore, fx: &GradFixture) -> f64 {
    let mut g = Graph::new(store);
    let (ft, bt) = (g.input(fx.face_t.clone()), g.input(fx.body_t.clone()));
    let out = model.forward_graph(&mut g, ft, bt, &fx.audio, fx.t, Some(&fx.cond), &mut ForwardCtx::eval()).unwrap();
    let h = ndarray::concatenate(ndarray::Axis(1), &[fx.face.view(), fx.body.view()]).unwrap();
    let (f0, b0, h0) = (g.input(fx.face.clone()), g.input(fx.body.clone()), g.input(h));
    let lv = total_loss_graph(&mut g, f0, out.face, b0, out.body, h0, out.holistic, 0.5, 0.5);
    g.scalar(lv.total)
}

fn gradient_check(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let cfg = DuTransConfig {
        d_model: 16,
        encoder_layers: 2,
        decoder_layers: 1,
        heads: 2,
        max_frames: 12,
        diffusion_steps: 10,
        cond_dim: 8,
        ..DuTransConfig::toy()
    };
    let ds = generate_synthetic_dataset(&SyntheticSpec { n_samples: 1, frames: 12, ..SyntheticSpec::default() }).unwrap();
    let s = &ds.samples[0];
    let mut rng = seeded(505);
    let t = 4;
    let sched = cfg.schedule().unwrap();
    let h0 = s.motion.holistic();
    let ht = q_sample(&h0, t, &standard_normal(&mut rng, h0.nrows(), h0.ncols()), &sched).unwrap();
    let df = cfg.dims.face;
    let table = EmotionTable::new(cfg.cond_dim, 0).unwrap();
    let base_fx = GradFixture {
        face_t: ht.slice(ndarray::s![.., ..df]).to_owned(),
        body_t: ht.slice(ndarray::s![.., df..]).to_owned(),
        face: s.motion.face.clone(),
        body: s.motion.body.clone(),
        audio: s.audio.clone(),
        t,
        cond: ConditionEmbedding::emotion(table.lookup(Emotion::Anger), Provenance::Lookup, Some(Emotion::Anger)),
    };
    let id_cond = ConditionEmbedding::identity(identity_stats(&s.motion.face, &s.motion.body).unwrap(), cfg.cond_dim, "speaker-a");
    let models = [
        ("x_adapter", PeftConfig { rank: 4, condition_source: ConditionSource::Identity, ..PeftConfig::default() }),
        ("serial", PeftConfig { variant: PeftVariant::SerialAdapter, rank: 4, scale: ScaleMode::Learned, ..PeftConfig::default() }),
        ("lora", PeftConfig { variant: PeftVariant::Lora, rank: 4, ..PeftConfig::default() }),
        ("prefix", PeftConfig { variant: PeftVariant::Prefix, sites: vec![Site::Mha], prefix_length: 4, ..PeftConfig::default() }),
    ];
    // Loss roundoff is near 1e-14 absolute, so smaller steps lose to
    // cancellation; truncation at this step is far below tolerance.
    let h = 1e-4;
    let floor = 1e-6;
    let mut summary: Vec<(String, usize, f64)> = Vec::new();
    for (vi, (variant, peft)) in models.iter().enumerate() {
        let mut model = build_model(&cfg, 506).unwrap();
        model.inject_peft(peft).unwrap();
        // Move zero-initialized tensors off zero so every path carries gradient.
        let ids: Vec<_> = model.store.ids().collect();
        for id in &ids {
            let name = model.store.name(*id).to_string();
            let fam = family(&name, variant);
            if fam.starts_with("adapter") || fam == "prefix" || name.contains("fc2") {
                let m = model.store.get_mut(*id);
                m.mapv_inplace(|v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v + 0.1 * z
                });
            }
        }
        let mut fx = base_fx.clone();
        if peft.condition_source == ConditionSource::Identity {
            fx.cond = id_cond.clone();
        }
        let analytic = {
            let mut g = Graph::new(&model.store);
            let (ft, bt) = (g.input(fx.face_t.clone()), g.input(fx.body_t.clone()));
            let o = model.forward_graph(&mut g, ft, bt, &fx.audio, fx.t, Some(&fx.cond), &mut ForwardCtx::eval()).unwrap();
            let hh = ndarray::concatenate(ndarray::Axis(1), &[fx.face.view(), fx.body.view()]).unwrap();
            let (f0, b0, h0) = (g.input(fx.face.clone()), g.input(fx.body.clone()), g.input(hh));
            let lv = total_loss_graph(&mut g, f0, o.face, b0, o.body, h0, o.holistic, 0.5, 0.5);
            g.backward(lv.total)
        };
        // Base families are checked once, on the first model.
        let mut families: std::collections::BTreeMap<String, Vec<(dumotion::autograd::ParamId, usize)>> = Default::default();
        for (id, name, m) in model.store.iter() {
            let fam = family(name, variant);
            let adapterish = fam.starts_with("adapter") || fam == "prefix" || fam.starts_with("cond") || fam == "identity";
            if vi == 0 || adapterish {
                let e = families.entry(fam).or_default();
                e.extend((0..m.len()).map(|k| (id, k)));
            }
        }
        let mut store = model.store.clone();
        for (fam, entries) in families {
            let picks = rand::seq::index::sample(&mut rng, entries.len(), entries.len().min(200)).into_vec();
            let mut worst = 0.0f64;
            for k in &picks {
                let (id, flat) = entries[*k];
                let cols = store.get(id).ncols();
                let (r, c) = (flat / cols, flat % cols);
                let orig = store.get(id)[[r, c]];
                store.get_mut(id)[[r, c]] = orig + h;
                let lp = loss_value(&model, &store, &fx);
                store.get_mut(id)[[r, c]] = orig - h;
                let lm = loss_value(&model, &store, &fx);
                store.get_mut(id)[[r, c]] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                let a = analytic.get(id).map_or(0.0, |g| g[[r, c]]);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                worst = worst.max(rel);
            }
            summary.push((fam, picks.len(), worst));
        }
    }
    let pass = summary.iter().all(|(_, n, w)| *n >= 200 && *w < 1e-4);
    let detail = summary.iter().map(|(f, n, w)| format!("{f}[{n}] {w:.1e}")).collect::<Vec<_>>().join(", ");
    record(
        out,
        5,
        "total-loss gradients vs central differences",
        pass,
        format!("max rel err per family (< 1e-4, >= 200 params): {detail}; {:.1}s", start.elapsed().as_secs_f64()),
    );
}

// --- 6, 7, 9 ---------------------------------------------------------------

struct Neutral {
    train: Dataset,
    test: Dataset,
    parent: Checkpoint,
    pretrain_secs: f64,
}

fn pretrain_neutral() -> Neutral {
    let start = Instant::now();
    let ds = generate_synthetic_dataset(&SyntheticSpec::default()).unwrap();
    let (train, _, test) = split_dataset(&ds, (0.8, 0.0, 0.2)).unwrap();
    let tc = TrainConfig { iterations: 800, batch_size: 8, lr: 1e-3, ..TrainConfig::default() };
    let parent = pretrain(&train, &DuTransConfig::toy(), &tc).unwrap();
    Neutral { train, test, parent, pretrain_secs: start.elapsed().as_secs_f64() }
}

fn mean_face_errors(generated: &[MotionSequence], refs: &[MotionSequence]) -> (f64, f64) {
    let (mut m, mut l) = (0.0, 0.0);
    for (g, r) in generated.iter().zip(refs) {
        let (a, b) = face_mse_lvd(&g.face, &r.face).unwrap();
        m += a;
        l += b;
    }
    (m / refs.len() as f64, l / refs.len() as f64)
}

fn learning_smoke(out: &mut Vec<Outcome>, nd: &Neutral) {
    let start = Instant::now();
    let (ex, _) = fit_feature_extractor(&nd.train, Scope::Holistic, &ExtractorConfig::default()).unwrap();
    let refs = nd.test.motions();
    let untrained = pretrain(&nd.train, &DuTransConfig::toy(), &TrainConfig { iterations: 0, ..TrainConfig::default() }).unwrap();
    let g0 = sample_dataset(&untrained, &nd.test, 1).unwrap();
    let g1 = sample_dataset(&nd.parent, &nd.test, 1).unwrap();
    let (fmd0, fmd1) = (fmd_fgd(&g0, &refs, &ex).unwrap(), fmd_fgd(&g1, &refs, &ex).unwrap());
    let (mse0, mse1) = (mean_face_errors(&g0, &refs).0, mean_face_errors(&g1, &refs).0);
    let secs = nd.pretrain_secs + start.elapsed().as_secs_f64();
    let steps = nd.parent.manifest.iteration;
    record(
        out,
        6,
        "learning smoke on held-out neutral data",
        fmd1 <= 0.2 * fmd0 && mse1 <= 0.2 * mse0 && steps <= 5000 && secs <= 900.0,
        format!(
            "FMD {fmd1:.3} vs untrained {fmd0:.3} (ratio {:.3} <= 0.2), face MSE {mse1:.4} vs {mse0:.4} (ratio {:.3} <= 0.2), {steps} steps, {secs:.0}s (<= 900s)",
            fmd1 / fmd0,
            mse1 / mse0
        ),
    );
}

fn emotional_domain() -> (Dataset, Dataset) {
    let spec = SyntheticSpec { emotions: SyntheticSpec::emotional_set(), seed: 11, ..SyntheticSpec::default() };
    let ds = generate_synthetic_dataset(&spec).unwrap();
    let (train, _, test) = split_dataset(&ds, (0.8, 0.0, 0.2)).unwrap();
    (train, test)
}

fn transfer(out: &mut Vec<Outcome>, nd: &Neutral, etrain: &Dataset, etest: &Dataset, ex: &FeatureExtractor) {
    let start = Instant::now();
    let refs = etest.motions();
    let zero_shot = sample_dataset(&nd.parent, etest, 3).unwrap();
    let tc = TrainConfig { iterations: 500, batch_size: 8, ..TrainConfig::finetune() };
    let peft = PeftConfig { rank: nd.parent.model.config.d_model / 4, ..PeftConfig::default() };
    let ft = finetune(&nd.parent, etrain, &peft, &tc, ConditionTask::Emotion).unwrap();
    let tuned = sample_dataset(&ft, etest, 3).unwrap();
    let (fz, ff) = (fmd_fgd(&zero_shot, &refs, ex).unwrap(), fmd_fgd(&tuned, &refs, ex).unwrap());
    let ((mz, lz), (mf, lf)) = (mean_face_errors(&zero_shot, &refs), mean_face_errors(&tuned, &refs));
    let mask = ft.frozen_mask();
    let hashes_same = frozen_hash(&nd.parent.model, &mask).unwrap() == frozen_hash(&ft.model, &mask).unwrap()
        && ft.manifest.frozen_hash == frozen_hash(&nd.parent.model, &mask).unwrap();
    let secs = start.elapsed().as_secs_f64();
    record(
        out,
        7,
        "neutral-to-emotional transfer",
        fz > ff && mz > mf && lz > lf && hashes_same && secs <= 600.0,
        format!(
            "zero-shot vs finetuned: FMD {fz:.3} > {ff:.3}, MSE {mz:.4} > {mf:.4}, LVD {lz:.4} > {lf:.4}; frozen hashes unchanged: {hashes_same}; {secs:.0}s (<= 600s)"
        ),
    );
}

fn ablation_grid(out: &mut Vec<Outcome>, nd: &Neutral, etrain: &Dataset, etest: &Dataset, ex: &FeatureExtractor) {
    let start = Instant::now();
    let cfg = &nd.parent.model.config;
    let grid = standard_grid(cfg.d_model);
    let small_test = Dataset::new(etest.samples[..8].to_vec(), etest.manifest.clone()).unwrap();
    let (fgd_ex, _) = fit_feature_extractor(etrain, Scope::Body, &ExtractorConfig { epochs: 20, ..ExtractorConfig::default() }).unwrap();
    let setup = AblationSetup {
        parent: &nd.parent,
        train: etrain,
        test: &small_test,
        train_config: TrainConfig { iterations: 20, batch_size: 4, ..TrainConfig::finetune() },
        task: ConditionTask::Emotion,
        eval: EvalConfig::default(),
        fmd_extractor: ex,
        fgd_extractor: &fgd_ex,
        sample_seed: 0,
    };
    let rows = run_ablation(&setup, &grid).unwrap();
    report!("{}", format_table(&rows));
    let complete = rows.len() == grid.variant.len()
        && rows.iter().all(|r| r.report.entries().iter().all(|(_, v)| v.value().is_some_and(f64::is_finite)) && r.final_loss.is_finite());
    let counts_exact = rows
        .iter()
        .zip(&grid.variant)
        .all(|(r, v)| r.trainable == r.closed_form && r.closed_form == closed_form_trainable(cfg, &v.peft, ConditionTask::Emotion));
    record(
        out,
        9,
        "ablation grid",
        complete && counts_exact,
        format!(
            "{} of {} rows, all cells defined: {complete}; trainable counts equal closed form: {counts_exact}; {:.0}s",
            rows.len(),
            grid.variant.len(),
            start.elapsed().as_secs_f64()
        ),
    );
}

// --- 8 ---------------------------------------------------------------------

fn ramp_body(n: usize, minima: &[usize]) -> Mat {
    let mut body = Mat::zeros((n, 2));
    for i in 1..n {
        let step = if minima.contains(&(i - 1)) { 0.5 } else { 1.0 };
        for c in 0..2 {
            body[[i, c]] = body[[i - 1, c]] + step;
        }
    }
    body
}

fn metric_cases(out: &mut Vec<Outcome>) {
    let n = 64;
    let fps = 30.0;
    let beats = [6, 20, 34, 48];
    let rhythm = Mat::from_shape_fn((n, 1), |(i, _)| if beats.contains(&i) { 1.0 } else { 0.0 });
    let aligned = beat_consistency(&ramp_body(n, &beats), &rhythm, fps).unwrap();
    let delta = 2usize;
    let shifted: Vec<usize> = beats.iter().map(|b| b + delta).collect();
    let offset = beat_consistency(&ramp_body(n, &shifted), &rhythm, fps).unwrap();
    let sigma_f = 0.1 * fps;
    let expected = (-((delta * delta) as f64) / (2.0 * sigma_f * sigma_f)).exp();
    let same = Mat::from_shape_fn((20, 4), |(i, j)| (i as f64 * 0.1).sin() + j as f64);
    let div = diversity(&vec![same.clone(); 6], 15, 0).unwrap();
    let face = Mat::from_shape_fn((20, 5), |(i, j)| (i * 5 + j) as f64 * 0.125 - 3.0);
    let (mse, lvd) = face_mse_lvd(&(&face + 0.5), &face).unwrap();
    let lvel = loss_velocity(&face, &(&face - 1.75)).unwrap();
    let pass = aligned == 1.0 && (offset - expected).abs() <= 1e-12 && div == 0.0 && lvd == 0.0 && mse == 0.25 && lvel == 0.0;
    record(
        out,
        8,
        "metric analytic cases",
        pass,
        format!(
            "BC aligned {aligned} (= 1), BC offset {offset:.12} vs {expected:.12}, DIV identical {div}, offset 0.5: MSE {mse} (= 0.25) LVD {lvd}, L_vel under shift {lvel}"
        ),
    );
}

// --- 10 --------------------------------------------------------------------

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

fn separation(spec: &SyntheticSpec) -> (f64, f64) {
    let ds = generate_synthetic_dataset(spec).unwrap();
    let v: Vec<(String, Vec<f64>)> = ds
        .samples
        .iter()
        .map(|s| {
            let st = identity_stats(&s.motion.face, &s.motion.body).unwrap();
            (s.motion.identity_label.clone(), [st.face, st.body].concat())
        })
        .collect();
    let (mut w, mut nw, mut c, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            let s = cosine(&v[i].1, &v[j].1);
            if v[i].0 == v[j].0 {
                w += s;
                nw += 1;
            } else {
                c += s;
                nc += 1;
            }
        }
    }
    (w / nw as f64, c / nc as f64)
}

fn identity_properties(out: &mut Vec<Outcome>) {
    let ds = generate_synthetic_dataset(&SyntheticSpec { n_samples: 12, ..SyntheticSpec::default() }).unwrap();
    let mut shift_err = 0.0f64;
    let mut monotone = true;
    for s in &ds.samples {
        for seq in [&s.motion.face, &s.motion.body] {
            let base = stats_vector(seq).unwrap();
            let shifted = stats_vector(&(seq + 3.7)).unwrap();
            for (a, b) in base.iter().zip(&shifted) {
                shift_err = shift_err.max((a - b).abs() / a.abs().max(1e-12));
            }
            for c in [1.01, 1.5, 3.0] {
                let scaled = stats_vector(&(seq * c)).unwrap();
                monotone &= base.iter().zip(&scaled).all(|(a, b)| *a == 0.0 || b > a);
            }
        }
    }
    // Identities that differ in both amplitude and tempo.
    let mut contrast = SyntheticSpec { n_samples: 90, ..SyntheticSpec::default() };
    for (id, (a, f)) in contrast.identities.iter_mut().zip([(0.5, 0.33), (1.0, 1.0), (2.0, 3.0)]) {
        id.amplitude_scale = a;
        id.frequency_scale = f;
    }
    let (within, cross) = separation(&contrast);
    let (dw, dc) = separation(&SyntheticSpec { n_samples: 90, ..SyntheticSpec::default() });
    record(
        out,
        10,
        "identity statistics",
        shift_err <= 1e-9 && monotone && within - cross >= 0.1,
        format!(
            "shift rel err {shift_err:.1e}, strictly monotone under scaling: {monotone}, cosine within {within:.4} vs cross {cross:.4} (gap {:.4} >= 0.1; default identity scales give gap {:.4})",
            within - cross,
            dw - dc
        ),
    );
}

#[test]
fn acceptance() {
    let mut out = Vec::new();
    q_sample_marginal(&mut out);
    frechet_oracle_check(&mut out);
    zero_init_equivalence(&mut out);
    parameter_accounting(&mut out);
    gradient_check(&mut out);
    metric_cases(&mut out);
    identity_properties(&mut out);
    let nd = pretrain_neutral();
    learning_smoke(&mut out, &nd);
    let (etrain, etest) = emotional_domain();
    let (ex, _) = fit_feature_extractor(&etrain, Scope::Holistic, &ExtractorConfig::default()).unwrap();
    transfer(&mut out, &nd, &etrain, &etest, &ex);
    ablation_grid(&mut out, &nd, &etrain, &etest, &ex);
    out.sort_by_key(|o| o.id);
    report!("\nacceptance summary");
    for o in &out {
        report!("criterion {:>2} [{}] {}", o.id, if o.pass { "PASS" } else { "FAIL" }, o.name);
    }
    let failed: Vec<String> = out.iter().filter(|o| !o.pass).map(|o| format!("{} ({}): {}", o.id, o.name, o.detail)).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
