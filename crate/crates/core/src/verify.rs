//! Self-check suite behind `bpclip verify`: independent oracles and
//! invariants run against the library at small sizes.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::archive::{DType, StoredTensor, TensorArchive};
use crate::attention::{self, MscaDirection};
use crate::autodiff::{Graph, Tensor};
use crate::backbone::{BackboneConfig, NUM_LEVELS};
use crate::clip_head::{self, default_inventory, load_text_bank, TextBank, NUM_ADJECTIVES};
use crate::data::{self, Entry, LoadedSample, Polarity, SampleManifest, SplitSpec};
use crate::gradcheck::{self, GradCheckOptions};
use crate::metrics;
use crate::model::{Bpclip, ModelConfig, FUSED_LEVELS};
use crate::train::{self, cosine_lr, TrainConfig, TrainData};
use crate::Mode;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn(&Ctx) -> Result<String, String>;

/// Shared inputs for the checks.
pub struct Ctx {
    pub bank: Option<TextBank>,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

fn unit_bank(d: usize, seed: u64) -> TextBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = ndarray::Array2::from_shape_fn((NUM_ADJECTIVES, d), |_| rng.gen_range(-1.0..1.0));
    for mut r in e.axis_iter_mut(Axis(0)) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.mapv_inplace(|v| v / n);
    }
    let (t, dims) = default_inventory();
    TextBank::new(e, dims, t, "verify").expect("valid bank")
}

fn attention_oracle(_: &Ctx) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let b = rng.gen_range(1..=2);
        let lq = rng.gen_range(1..=4);
        let lk = rng.gen_range(1..=4);
        let heads = [1, 2][rng.gen_range(0..2)];
        let d = heads * rng.gen_range(1..=(8 / heads));
        let q = rand_tensor(&mut rng, &[b, lq, d]);
        let k = rand_tensor(&mut rng, &[b, lk, d]);
        let v = rand_tensor(&mut rng, &[b, lk, d]);
        let (out, probs) = attention::attention(&q, &k, &v, heads).map_err(e2s)?;
        let dk = d / heads;
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..lq {
                    let mut s = vec![0.0; lk];
                    for (j, sj) in s.iter_mut().enumerate() {
                        for c in 0..dk {
                            *sj += q[[bi, i, h * dk + c]] * k[[bi, j, h * dk + c]];
                        }
                        *sj /= (dk as f64).sqrt();
                    }
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                    let row_sum: f64 = (0..lk).map(|j| probs[[bi, h, i, j]]).sum();
                    ensure((row_sum - 1.0).abs() <= 1e-12, || format!("row sum {row_sum}"))?;
                    for c in 0..dk {
                        let want: f64 = (0..lk).map(|j| (s[j] - m).exp() / z * v[[bi, j, h * dk + c]]).sum();
                        let got = out[[bi, i, h * dk + c]];
                        worst = worst.max((got - want).abs() / want.abs().max(1e-12));
                    }
                }
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("20 cases, max relative error {worst:.2e}"))
}

fn gradient_suite_for(base: &ModelConfig) -> Result<String, String> {
    let reports = gradcheck::gradient_suite(base, &GradCheckOptions::default()).map_err(e2s)?;
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    if let Some(r) = reports.iter().find(|r| !r.passes(1e-6)) {
        return Err(format!("{} fails: {:.3e} at {}", r.fragment.name(), r.max_rel_error, r.worst));
    }
    Ok(format!("{} fragments, max relative error {worst:.2e}", reports.len()))
}

fn gradients(_: &Ctx) -> Result<String, String> {
    let mut details = Vec::new();
    for mode in [Mode::Fr, Mode::Nr] {
        details.push(format!("{mode}: {}", gradient_suite_for(&ModelConfig::tiny(mode, 64))?));
    }
    let control = gradcheck::gradient_check(
        gradcheck::Fragment::Sdp,
        &ModelConfig::default(),
        &GradCheckOptions {
            corrupt: Some(1.01),
            ..Default::default()
        },
    )
    .map_err(e2s)?
    .expect("sdp always applies");
    ensure(!control.passes(1e-6), || "corrupted gradient was not detected".into())?;
    details.push(format!("control rejected at {:.2e}", control.max_rel_error));
    Ok(details.join("; "))
}

fn shape_law_for(cfg: ModelConfig, bank: &TextBank) -> Result<(), String> {
    let (h, w) = cfg.backbone.input_size;
    let model = Bpclip::new(cfg.clone()).map_err(e2s)?;
    let params = model.init_params(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = Tensor::from_shape_fn(IxDyn(&[1, 3, h, w]), |_| rng.gen::<f64>());
    let reference = (cfg.mode == Mode::Fr).then(|| img.mapv(|v| 1.0 - v));
    let bank = cfg.head.text_head.then_some(bank);
    let (g, _, out) = model.run(&params, bank, &img, reference.as_ref()).map_err(e2s)?;
    for (i, l) in out.pyramid.iter().enumerate() {
        let s = g.shape(*l);
        let k = 1 << (i + 1);
        ensure(s[2] == h / k && s[3] == w / k, || format!("level {} is {:?} for {h}x{w}", i + 1, s))?;
    }
    let l = (h / 32) * (w / 32);
    for p in &out.pooled {
        ensure(g.shape(*p) == [1, l, cfg.attention.d_model], || format!("pooled {:?}", g.shape(*p)))?;
    }
    ensure(out.pooled.len() == NUM_LEVELS, || "pooled count".into())?;
    ensure(out.encoder.fused.len() == FUSED_LEVELS, || format!("{} fused outputs", out.encoder.fused.len()))?;
    ensure(out.regression_width == 160, || format!("regression width {}", out.regression_width))?;
    ensure(g.value(out.score).iter().all(|v| v.is_finite()), || "non-finite score".into())
}

fn shape_law(ctx: &Ctx) -> Result<String, String> {
    let mut cfg = ModelConfig::tiny(Mode::Fr, 64);
    cfg.head.d_text = 32;
    let bank = unit_bank(32, 1);
    for size in [384, 64] {
        cfg.backbone = BackboneConfig::tiny(size);
        shape_law_for(cfg.clone(), &bank)?;
    }
    if let Some(b) = &ctx.bank {
        let mut c = ModelConfig::tiny(Mode::Nr, 64);
        c.head.d_text = b.d_text();
        shape_law_for(c, b)?;
    }
    Ok("384x384 and 64x64: H_i = H/2^i, 5 pooled levels, 4 fused, 160-wide regression input".into())
}

fn glp_invariants(_: &Ctx) -> Result<String, String> {
    let mut cfg = ModelConfig::tiny(Mode::Fr, 64);
    cfg.head.d_text = 16;
    let model = Bpclip::new(cfg).map_err(e2s)?;
    let params = model.init_params(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = Tensor::from_shape_fn(IxDyn(&[1, 3, 64, 64]), |_| rng.gen::<f64>());
    let bank = unit_bank(16, 2);
    let (g, _, out) = model.run(&params, Some(&bank), &img, Some(&img)).map_err(e2s)?;
    for (i, gt) in out.gated.iter().enumerate() {
        let m = g.value(gt.mask);
        let first = m.iter().next().copied().unwrap_or_default();
        ensure(m.iter().all(|v| *v == first), || format!("level {} mask not constant", i + 1))?;
    }
    let mut worst: f64 = 0.0;
    for (h, w, win) in [(8, 8, (4, 4)), (12, 6, (3, 2)), (6, 9, (6, 9))] {
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[2, 3, h, w]));
        let p = g.avg_pool2d(x, win);
        for b in 0..2 {
            for c in 0..3 {
                let a = g.value(x).index_axis(Axis(0), b).index_axis(Axis(0), c).mean().unwrap();
                let q = g.value(p).index_axis(Axis(0), b).index_axis(Axis(0), c).mean().unwrap();
                worst = worst.max((a - q).abs() / a.abs().max(1e-12));
            }
        }
    }
    ensure(worst <= 1e-6, || format!("pooling mean drift {worst:.3e}"))?;
    Ok(format!("zero-difference masks constant; pooled mean drift {worst:.2e}"))
}

fn similarity_invariants(_: &Ctx) -> Result<String, String> {
    let bank = unit_bank(24, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[3, 24]);
    let run = |x: &Tensor, tau: f64| -> Result<Tensor, String> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let b = g.constant(bank.embeddings().clone().into_dyn());
        let t = g.constant(Tensor::from_elem(IxDyn(&[1]), tau));
        let s = clip_head::adjective_similarity(&mut g, xv, b, t).map_err(e2s)?;
        Ok(g.value(s.probs).clone())
    };
    let base = run(&x, 100.0)?;
    let mut worst: f64 = 0.0;
    for alpha in [0.1, 1.0, 10.0] {
        let s = run(&x.mapv(|v| v * alpha), 100.0)?;
        worst = worst.max((&s - &base).iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    ensure(worst <= 1e-6, || format!("scale drift {worst:.3e}"))?;
    ensure(base.iter().all(|v| *v > 0.0), || "non-positive similarity".into())?;
    for row in base.axis_iter(Axis(0)) {
        ensure((row.sum() - 1.0).abs() <= 1e-12, || format!("row sums to {}", row.sum()))?;
    }
    let u = run(&x, 0.0)?;
    ensure(u.iter().all(|v| (v - 1.0 / 40.0).abs() <= 1e-15), || "tau = 0 not uniform".into())?;
    Ok(format!("scale drift {worst:.2e}; rows positive, sum to 1; tau=0 uniform"))
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn oracle_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let less = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn metric_oracles(_: &Ctx) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(5..40);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0f64).round()).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (Ok(s), Ok(l)) = (metrics::srcc(&p, &g), metrics::plcc(&p, &g)) else { continue };
        worst = worst.max((s - oracle_pearson(&oracle_ranks(&p), &oracle_ranks(&g))).abs());
        worst = worst.max((l - oracle_pearson(&p, &g)).abs());
        let cubed: Vec<f64> = p.iter().map(|x| x * x * x + 2.0).collect();
        ensure(metrics::srcc(&cubed, &g).map_err(e2s)? == s, || "SRCC changed under monotone map".into())?;
        let affine: Vec<f64> = p.iter().map(|x| 3.5 * x - 1.25).collect();
        let la = metrics::plcc(&affine, &g).map_err(e2s)?;
        ensure((la - l).abs() <= 1e-12, || format!("PLCC affine drift {:.3e}", (la - l).abs()))?;
    }
    ensure(worst <= 1e-10, || format!("oracle mismatch {worst:.3e}"))?;
    Ok(format!("50 random vectors with ties, max deviation {worst:.2e}"))
}

fn protocol(_: &Ctx) -> Result<String, String> {
    let fr: Vec<Entry> = (0..10)
        .flat_map(|gk| {
            (0..3).map(move |k| Entry {
                id: format!("g{gk}d{k}"),
                image_path: format!("d/{gk}_{k}.png").into(),
                reference_path: Some(format!("r/{gk}.png").into()),
                mos: (gk * 3 + k) as f64,
                group_key: format!("g{gk}"),
            })
        })
        .collect();
    let m = SampleManifest::new(fr, Mode::Fr, Polarity::HigherBetter, None, "".into(), false).map_err(e2s)?;
    for repeat in 0..10 {
        let s = data::split_dataset(&m, &SplitSpec::for_mode(Mode::Fr, 42, repeat)).map_err(e2s)?;
        let groups = |idx: &[usize]| {
            idx.iter()
                .map(|&i| m.entries[i].group_key.clone())
                .collect::<std::collections::BTreeSet<_>>()
        };
        let (a, b, c) = (groups(&s.train), groups(&s.val), groups(&s.test));
        ensure((a.len(), b.len(), c.len()) == (6, 2, 2), || format!("repeat {repeat}: group counts"))?;
        ensure(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c), || {
            format!("repeat {repeat}: groups overlap")
        })?;
    }
    let nr: Vec<Entry> = (0..10)
        .map(|i| Entry {
            id: format!("i{i}"),
            image_path: format!("i/{i}.png").into(),
            reference_path: None,
            mos: i as f64,
            group_key: String::new(),
        })
        .collect();
    let m = SampleManifest::new(nr, Mode::Nr, Polarity::HigherBetter, None, "".into(), false).map_err(e2s)?;
    let s = data::split_dataset(&m, &SplitSpec::for_mode(Mode::Nr, 42, 0)).map_err(e2s)?;
    ensure((s.train.len(), s.test.len()) == (8, 2), || "NR 8:2 counts".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = Arc::new(Tensor::from_shape_fn(IxDyn(&[3, 40, 52]), |_| rng.gen::<f64>()).into_dimensionality().unwrap());
    let reference = Arc::new(img.mapv(|v: f64| v + 2.0));
    let sample = LoadedSample {
        id: "pair".into(),
        image_path: "d.png".into(),
        image: img,
        reference_path: Some("r.png".into()),
        reference: Some(reference),
        mos: 0.5,
    };
    for _ in 0..1000 {
        let p = data::augment_patch(&sample, &mut rng, 16, true).map_err(e2s)?;
        ensure(Some(p.distorted_crop) == p.reference_crop, || "crop metadata differs".into())?;
        let diff = p.reference.as_ref().unwrap() - &p.distorted;
        ensure(diff.iter().all(|v| (v - 2.0).abs() < 1e-12), || "pair misaligned".into())?;
    }

    let (eta_max, eta_min, t_max) = (1e-4, 1e-6, 50.0);
    for (t, want) in [(0.0, eta_max), (t_max, eta_min), (t_max / 2.0, (eta_max + eta_min) / 2.0)] {
        let got = cosine_lr(t, t_max, eta_max, eta_min);
        ensure((got - want).abs() <= 1e-12, || format!("lr({t}) = {got}, want {want}"))?;
    }
    Ok("10 FR repeats disjoint 6:2:2; NR 8:2; 1000 synchronized FR crops; cosine endpoints/midpoint".into())
}

fn frozen_and_bank(ctx: &Ctx) -> Result<String, String> {
    let bank = ctx.bank.clone().unwrap_or_else(|| unit_bank(512, 4));
    let dir = std::env::temp_dir().join(format!("bpclip-verify-{}", std::process::id()));
    let bank_path = dir.join("bank.bpta");
    std::fs::create_dir_all(&dir).map_err(e2s)?;
    bank.save(&bank_path).map_err(e2s)?;
    let before = std::fs::read(&bank_path).map_err(e2s)?;
    let loaded = load_text_bank(&bank_path).map_err(e2s)?;

    let model = Bpclip::new(ModelConfig::tiny(Mode::Nr, 32)).map_err(e2s)?;
    let params = model.init_params(9);
    let frozen = params.frozen_bytes();
    ensure(!frozen.is_empty(), || "no frozen parameters".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let samples: Vec<LoadedSample> = (0..4)
        .map(|i| LoadedSample {
            id: format!("s{i}"),
            image_path: format!("s{i}.png").into(),
            image: Arc::new(ndarray::Array3::from_shape_fn((3, 32, 32), |_| rng.gen::<f64>())),
            reference_path: None,
            reference: None,
            mos: i as f64 / 3.0,
        })
        .collect();
    let cfg = TrainConfig {
        lr: Some(1e-3),
        epochs: 3,
        batch_size: 2,
        crop_size: 32,
        ..Default::default()
    };
    let data = TrainData {
        train: samples,
        val: vec![],
    };
    let out = train::train(&model, &cfg, &data, params, Some(&loaded), None).map_err(e2s)?;
    ensure(out.params.frozen_bytes() == frozen, || "frozen tensors changed".into())?;
    ensure(std::fs::read(&bank_path).map_err(e2s)? == before, || "bank file changed".into())?;
    let _ = std::fs::remove_dir_all(&dir);
    Ok(format!("{} frozen tensors and the text bank unchanged after {} steps", frozen.len(), out.steps))
}

fn archive_roundtrip(_: &Ctx) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut a = TensorArchive::new();
    a.insert("x", StoredTensor::new(DType::F64, rand_tensor(&mut rng, &[3, 4])));
    a.insert("y", StoredTensor::new(DType::F32, rand_tensor(&mut rng, &[5]).mapv(|v| v as f32 as f64)));
    let bytes = a.to_bytes();
    let back = TensorArchive::from_bytes(&bytes).map_err(e2s)?;
    ensure(back.to_bytes() == bytes && back == a, || "round trip not bitwise identical".into())?;
    let mut bad = bytes.clone();
    let at = bad.len() - 10;
    bad[at] ^= 0x40;
    ensure(
        matches!(TensorArchive::from_bytes(&bad), Err(crate::archive::ArchiveError::ChecksumMismatch { .. })),
        || "payload corruption not detected".into(),
    )?;
    Ok("bitwise round trip; flipped payload byte rejected by CRC".into())
}

fn ablations(_: &Ctx) -> Result<String, String> {
    let bank = unit_bank(16, 5);
    let mut names = Vec::new();
    for (name, edit) in [
        ("single-branch", (|c: &mut ModelConfig| c.attention.dual_branch = false) as fn(&mut ModelConfig)),
        ("top-down", |c| c.attention.direction = MscaDirection::TopDown),
        ("no-text-head", |c| c.head.text_head = false),
    ] {
        for mode in [Mode::Fr, Mode::Nr] {
            let mut cfg = ModelConfig::tiny(mode, 64);
            cfg.head.d_text = 16;
            edit(&mut cfg);
            shape_law_for(cfg.clone(), &bank).map_err(|e| format!("{name} {mode}: {e}"))?;
            gradient_suite_for(&cfg).map_err(|e| format!("{name} {mode}: {e}"))?;
        }
        names.push(name);
    }
    Ok(format!("{} build and pass shape and gradient checks", names.join(", ")))
}

fn text_bank_fixture(ctx: &Ctx) -> Result<String, String> {
    let Some(b) = &ctx.bank else {
        return Ok("skipped (no bank given)".into());
    };
    ensure(b.embeddings().nrows() == 40 && b.dimensions().len() == 6, || "bank shape".into())?;
    ensure(b.renormalized_rows().is_empty(), || format!("rows {:?} off unit norm", b.renormalized_rows()))?;
    Ok(format!("(40, {}) with 6 dimensions, rows unit-norm", b.d_text()))
}

/// Trains the tiny FR model on a generated 16-pair set for `steps` steps.
/// Returns `(first loss, final loss, training SRCC)`.
pub fn overfit_run(dir: &Path, bank: &TextBank, steps: usize) -> crate::Result<(f64, f64, f64)> {
    let manifest_path = crate::synthetic::write_fr_dataset(dir, 4, 4, 64, 7)?;
    let manifest = data::load_manifest(
        &manifest_path,
        &data::ManifestOptions {
            mos_range: Some((1.0, 5.0)),
            check_files: true,
            ..Default::default()
        },
    )?;
    let norm = data::normalize_mos(&manifest)?;
    let all: Vec<usize> = (0..norm.len()).collect();
    let samples = train::load_split(&norm, &all, None)?;
    let model = Bpclip::new(overfit_model(bank.d_text()))?;
    let cfg = overfit_config(steps);
    let data = TrainData {
        train: samples.clone(),
        val: vec![],
    };
    let out = train::train(&model, &cfg, &data, model.init_params(1), Some(bank), None)?;
    let m = train::evaluate(&model, &out.params, Some(bank), &samples, 64)?;
    let last = out.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    Ok((out.first_loss, last, m.srcc))
}

/// Tiny FR model on 64x64 inputs with a 32-wide encoder.
pub fn overfit_model(d_text: usize) -> ModelConfig {
    let mut mc = ModelConfig::tiny(Mode::Fr, 64);
    mc.attention.d_model = 32;
    mc.head.d_text = d_text;
    mc
}

/// Full-batch, one step per epoch, cosine-annealed to zero over the run.
pub fn overfit_config(steps: usize) -> TrainConfig {
    TrainConfig {
        lr: Some(3e-3),
        epochs: steps,
        max_steps: Some(steps),
        batch_size: 16,
        crop_size: 64,
        scheduler: train::SchedulerConfig {
            t_max: steps as f64,
            eta_min: 0.0,
        },
        ..Default::default()
    }
}

fn overfit(ctx: &Ctx) -> Result<String, String> {
    let bank = ctx.bank.clone().unwrap_or_else(|| unit_bank(512, 4));
    let dir = std::env::temp_dir().join(format!("bpclip-overfit-{}", std::process::id()));
    let (first, last, srcc) = overfit_run(&dir, &bank, 500).map_err(e2s)?;
    let _ = std::fs::remove_dir_all(&dir);
    ensure(srcc >= 0.95 && first / last >= 10.0, || {
        format!("SRCC {srcc:.4}, loss {first:.4} -> {last:.4}")
    })?;
    Ok(format!("SRCC {srcc:.4}, loss {first:.4} -> {last:.5} ({:.0}x)", first / last))
}

pub const CHECKS: [(&str, Check); 11] = [
    ("attention-oracle", attention_oracle),
    ("gradients", gradients),
    ("shape-law", shape_law),
    ("glp-invariants", glp_invariants),
    ("similarity-invariants", similarity_invariants),
    ("metric-oracles", metric_oracles),
    ("protocol", protocol),
    ("frozen-and-bank", frozen_and_bank),
    ("archive-roundtrip", archive_roundtrip),
    ("ablations", ablations),
    ("text-bank", text_bank_fixture),
];

/// Runs every fast check, plus the 500-step overfit run when `full`.
pub fn run_all(bank: Option<TextBank>, full: bool) -> Vec<CheckResult> {
    let ctx = Ctx { bank };
    let mut checks: Vec<(&'static str, Check)> = CHECKS.to_vec();
    if full {
        checks.push(("overfit", overfit));
    }
    checks
        .into_iter()
        .map(|(name, f)| {
            let t = Instant::now();
            let r = f(&ctx);
            let seconds = t.elapsed().as_secs_f64();
            match r {
                Ok(detail) => CheckResult {
                    name,
                    passed: true,
                    detail,
                    seconds,
                },
                Err(detail) => CheckResult {
                    name,
                    passed: false,
                    detail,
                    seconds,
                },
            }
        })
        .collect()
}
