//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion (written straight to stdout so it shows without
//! `--nocapture`) and then asserts.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use bpclip::archive::{ArchiveError, DType, StoredTensor, TensorArchive};
use bpclip::attention::{self, MscaDirection};
use bpclip::autodiff::{Graph, Tensor};
use bpclip::backbone::{BackboneConfig, BackboneVariant};
use bpclip::clip_head::{self, default_inventory, load_text_bank, TextBank};
use bpclip::data::{self, Entry, LoadedSample, Polarity, SampleManifest, SplitSpec};
use bpclip::glp;
use bpclip::gradcheck::{self, Fragment, GradCheckOptions};
use bpclip::metrics;
use bpclip::model::{Bpclip, ModelConfig};
use bpclip::params::ParameterSet;
use bpclip::train::{self, cosine_lr, TrainConfig, TrainData};
use bpclip::{synthetic, verify, Mode};
use ndarray::{Array2, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn criterion(name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
    let t = Instant::now();
    let mut r = f();
    let elapsed = t.elapsed();
    if let (Ok(_), Some(l)) = (&r, limit) {
        if elapsed > l {
            r = Err(format!("took {elapsed:.2?}, limit {l:?}"));
        }
    }
    let line = match &r {
        Ok(d) => format!("PASS {name}: {d} [{elapsed:.2?}]"),
        Err(d) => format!("FAIL {name}: {d} [{elapsed:.2?}]"),
    };
    let _ = writeln!(std::io::stdout().lock(), "{line}");
    if let Err(d) = r {
        panic!("{name}: {d}");
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

fn unit_bank(d: usize, seed: u64) -> TextBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = Array2::from_shape_fn((40, d), |_| rng.gen_range(-1.0..1.0));
    for mut r in e.axis_iter_mut(Axis(0)) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.mapv_inplace(|v| v / n);
    }
    let (t, dims) = default_inventory();
    TextBank::new(e, dims, t, "acceptance").unwrap()
}

// Scalar-loop multi-head attention: softmax(q k^T / sqrt(d_k)) v per head.
fn oracle_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (b, lq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let lk = k.shape()[1];
    let dk = d / heads;
    let mut out = vec![0.0; b * lq * d];
    let mut rows = Vec::new();
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..lq {
                let mut logits = vec![0.0; lk];
                for (j, l) in logits.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for c in 0..dk {
                        dot += q[[bi, i, h * dk + c]] * k[[bi, j, h * dk + c]];
                    }
                    *l = dot / (dk as f64).sqrt();
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                let p: Vec<f64> = exps.iter().map(|e| e / z).collect();
                for c in 0..dk {
                    let mut acc = 0.0;
                    for j in 0..lk {
                        acc += p[j] * v[[bi, j, h * dk + c]];
                    }
                    out[(bi * lq + i) * d + h * dk + c] = acc;
                }
                rows.push(p);
            }
        }
    }
    (out, rows)
}

#[test]
fn attention_oracle() {
    criterion("attention oracle", Some(Duration::from_secs(1)), || {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut worst: f64 = 0.0;
        let mut worst_row: f64 = 0.0;
        for _ in 0..20 {
            let b = rng.gen_range(1..=2);
            let lq = rng.gen_range(1..=4);
            let lk = rng.gen_range(1..=4);
            let heads = [1, 2][rng.gen_range(0..2)];
            let d = heads * rng.gen_range(1..=8 / heads);
            let q = rand_tensor(&mut rng, &[b, lq, d]);
            let k = rand_tensor(&mut rng, &[b, lk, d]);
            let v = rand_tensor(&mut rng, &[b, lk, d]);
            let (got, probs) = attention::attention(&q, &k, &v, heads).map_err(s)?;
            let (want, _) = oracle_attention(&q, &k, &v, heads);
            for (g, w) in got.iter().zip(&want) {
                worst = worst.max((g - w).abs() / w.abs().max(1e-12));
            }
            for row in probs.lanes(Axis(3)) {
                worst_row = worst_row.max((row.sum() - 1.0).abs());
            }
        }
        check(worst <= 1e-6, || format!("relative error {worst:.3e}"))?;
        check(worst_row <= 1e-12, || format!("row sum error {worst_row:.3e}"))?;
        Ok(format!("20 cases, rel err {worst:.2e}, row sum err {worst_row:.2e}"))
    });
}

// Central differences of the full model score, computed here rather than by
// the library's checker.
fn end_to_end_fd(cfg: &ModelConfig, bank: &TextBank) -> Result<f64, String> {
    let model = Bpclip::new(cfg.clone()).map_err(s)?;
    let params = model.init_params(17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let (h, w) = cfg.backbone.input_size;
    let img = Tensor::from_shape_fn(IxDyn(&[2, 3, h, w]), |_| rng.gen::<f64>());
    let reference = (cfg.mode == Mode::Fr).then(|| img.mapv(|v| (v * 0.7 + 0.2).min(1.0)));
    let bank = cfg.head.text_head.then_some(bank);
    let total = |p: &ParameterSet| -> Result<f64, String> {
        let (g, _, out) = model.run(p, bank, &img, reference.as_ref()).map_err(s)?;
        Ok(g.value(out.score).sum())
    };
    let (mut g, pv, out) = model.run(&params, bank, &img, reference.as_ref()).map_err(s)?;
    let loss = g.sum_all(out.score);
    let grads = g.backward(loss);
    let mask = format!("{}.mask.conv1.weight", glp::prefix(1));
    let names = [
        mask.as_str(),
        glp::POS_EMBED,
        "encoder.msca1.wq.weight",
        "encoder.msca4.wv.weight",
        "encoder.info2.fc1.weight",
        "encoder.gate3.fc2.weight",
        "head.proj1.fc1.weight",
        "head.reg.fc1.weight",
    ];
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let h = 1e-5;
    for name in names {
        let Some(p) = params.get(name) else { continue };
        if !p.trainable {
            continue;
        }
        let Some(analytic) = grads.get(pv.get(name).map_err(s)?) else { continue };
        let n = analytic.len();
        for _ in 0..3 {
            let idx = rng.gen_range(0..n);
            let mut work = params.clone();
            let orig = p.value.as_slice_memory_order().unwrap()[idx];
            work.get_mut(name).unwrap().value.as_slice_memory_order_mut().unwrap()[idx] = orig + h;
            let plus = total(&work)?;
            work.get_mut(name).unwrap().value.as_slice_memory_order_mut().unwrap()[idx] = orig - h;
            let minus = total(&work)?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.as_slice_memory_order().unwrap()[idx];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
            checked += 1;
        }
    }
    check(checked >= 15, || format!("only {checked} entries checked end to end"))?;
    Ok(worst)
}

fn small_config(mode: Mode) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(mode, 64);
    cfg.attention.d_model = 8;
    cfg.head.d_text = 12;
    cfg.head.regression_hidden = 8;
    cfg.head.tau = 5.0;
    cfg
}

fn gradient_suite_for(cfg: &ModelConfig, bank: &TextBank) -> Result<String, String> {
    let reports = gradcheck::gradient_suite(cfg, &GradCheckOptions::default()).map_err(s)?;
    let needed = [Fragment::Glp, Fragment::Msca, Fragment::Fuse, Fragment::ClipHead, Fragment::Mse];
    for f in needed {
        check(reports.iter().any(|r| r.fragment == f), || format!("{} not checked", f.name()))?;
    }
    if cfg.attention.dual_branch {
        check(reports.iter().any(|r| r.fragment == Fragment::Sa), || "sa not checked".into())?;
    }
    let mut worst: f64 = 0.0;
    for r in &reports {
        check(r.passes(1e-6), || format!("{} at {:.3e} ({})", r.fragment.name(), r.max_rel_error, r.worst))?;
        worst = worst.max(r.max_rel_error);
    }
    let e2e = end_to_end_fd(&small_config_like(cfg), bank)?;
    check(e2e <= 1e-6, || format!("end-to-end finite differences {e2e:.3e}"))?;
    Ok(format!("{} fragments <= {worst:.1e}, end-to-end {e2e:.1e}", reports.len()))
}

fn small_config_like(base: &ModelConfig) -> ModelConfig {
    let mut cfg = small_config(base.mode);
    cfg.attention.dual_branch = base.attention.dual_branch;
    cfg.attention.direction = base.attention.direction;
    cfg.head.text_head = base.head.text_head;
    cfg
}

#[test]
fn gradient_suite() {
    criterion("gradient suite", Some(Duration::from_secs(30)), || {
        let bank = unit_bank(12, 21);
        let fr = gradient_suite_for(&ModelConfig::tiny(Mode::Fr, 64), &bank)?;
        let nr = gradient_suite_for(&ModelConfig::tiny(Mode::Nr, 64), &bank)?;
        let corrupt = GradCheckOptions {
            corrupt: Some(1.01),
            ..Default::default()
        };
        for f in [Fragment::Sdp, Fragment::Mse, Fragment::Glp] {
            let r = gradcheck::gradient_check(f, &ModelConfig::default(), &corrupt).map_err(s)?.unwrap();
            check(!r.passes(1e-6), || format!("corrupted {} gradient accepted", f.name()))?;
        }
        Ok(format!("FR: {fr}; NR: {nr}; corrupted control rejected"))
    });
}

fn shape_law_for(cfg: &ModelConfig, bank: &TextBank) -> Result<(), String> {
    let (h, w) = cfg.backbone.input_size;
    let model = Bpclip::new(cfg.clone()).map_err(s)?;
    let params = model.init_params(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = Tensor::from_shape_fn(IxDyn(&[1, 3, h, w]), |_| rng.gen::<f64>());
    let reference = (cfg.mode == Mode::Fr).then(|| img.mapv(|v| 1.0 - v));
    let bank = cfg.head.text_head.then_some(bank);
    let (g, _, out) = model.run(&params, bank, &img, reference.as_ref()).map_err(s)?;
    check(out.pyramid.len() == 5, || format!("{} pyramid levels", out.pyramid.len()))?;
    for (i, l) in out.pyramid.iter().enumerate() {
        let sh = g.shape(*l);
        let f = 1 << (i + 1);
        check(sh[2] == h / f && sh[3] == w / f, || format!("level {} is {sh:?} for {h}x{w}", i + 1))?;
    }
    let (h5, w5) = (h / 32, w / 32);
    check(out.pooled.len() == 5, || "pooled level count".into())?;
    for p in &out.pooled {
        check(g.shape(*p) == [1, h5 * w5, cfg.attention.d_model], || format!("pooled {:?}", g.shape(*p)))?;
    }
    check(out.encoder.fused.len() == 4, || format!("{} MSCA outputs", out.encoder.fused.len()))?;
    let width: usize = out.similarities.iter().map(|v| g.shape(*v)[1]).sum();
    check(width == 160 && out.regression_width == 160, || format!("regression input {width}"))?;
    check(g.shape(out.score) == [1], || format!("score {:?}", g.shape(out.score)))
}

#[test]
fn shape_law() {
    criterion("shape law", Some(Duration::from_secs(5)), || {
        let bank = unit_bank(16, 31);
        for mode in [Mode::Fr, Mode::Nr] {
            for size in [384, 64] {
                let mut cfg = ModelConfig::tiny(mode, size);
                cfg.backbone = BackboneConfig::tiny(size);
                cfg.head.d_text = 16;
                shape_law_for(&cfg, &bank).map_err(|e| format!("{mode} {size}: {e}"))?;
            }
        }
        Ok("FR and NR at 384 and 64: H_i = H/2^i, pooled (H5*W5, D), 4 MSCA outputs, 160-wide".into())
    });
}

#[test]
fn glp_invariants() {
    criterion("GLP invariants", None, || {
        let mut cfg = ModelConfig::tiny(Mode::Fr, 64);
        cfg.head.d_text = 16;
        let model = Bpclip::new(cfg).map_err(s)?;
        let params = model.init_params(41);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let img = Tensor::from_shape_fn(IxDyn(&[2, 3, 64, 64]), |_| rng.gen::<f64>());
        let (g, _, out) = model.run(&params, Some(&unit_bank(16, 43)), &img, Some(&img)).map_err(s)?;
        for (i, gated) in out.gated.iter().enumerate() {
            let m = g.value(gated.mask);
            for item in m.axis_iter(Axis(0)) {
                let first = item.iter().next().copied().unwrap();
                check(item.iter().all(|v| *v == first), || format!("level {} mask varies", i + 1))?;
            }
        }

        // With an identity projection the pooled sequence is the window
        // average itself, so its mean over positions must equal the input
        // spatial mean per channel.
        let mut worst: f64 = 0.0;
        for (c, h, w, target) in [(4, 16, 16, (2, 2)), (3, 12, 8, (3, 2)), (5, 8, 8, (1, 1))] {
            let mut set = ParameterSet::new();
            set.insert(format!("{}.proj.weight", glp::prefix(1)), Array2::<f64>::eye(c).into_dyn(), true);
            set.insert(format!("{}.proj.bias", glp::prefix(1)), Tensor::zeros(IxDyn(&[c])), true);
            let mut g = Graph::new();
            let pv = set.bind(&mut g);
            let xt = rand_tensor(&mut rng, &[2, c, h, w]).mapv(|v| v + 1.5);
            let x = g.constant(xt.clone());
            let pooled = glp::pool_project(&mut g, &pv, 1, x, target).map_err(s)?;
            let pv = g.value(pooled);
            for b in 0..2 {
                for ch in 0..c {
                    let want = xt.index_axis(Axis(0), b).index_axis(Axis(0), ch).mean().unwrap();
                    let got = pv.index_axis(Axis(0), b).index_axis(Axis(1), ch).mean().unwrap();
                    worst = worst.max((got - want).abs() / want.abs());
                }
            }
        }
        check(worst <= 1e-6, || format!("spatial mean drift {worst:.3e}"))?;
        Ok(format!("zero-difference masks constant on all 5 levels; mean drift {worst:.2e}"))
    });
}

fn oracle_similarity(x: &[f64], bank: &Array2<f64>, tau: f64) -> Vec<f64> {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let logits: Vec<f64> = bank
        .axis_iter(Axis(0))
        .map(|t| {
            let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            tau * x.iter().zip(t.iter()).map(|(a, b)| a * b).sum::<f64>() / (nx * nt)
        })
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
    logits.iter().map(|l| (l - mx).exp() / z).collect()
}

#[test]
fn similarity_invariants() {
    criterion("similarity invariants", None, || {
        let bank = unit_bank(24, 51);
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let x = rand_tensor(&mut rng, &[4, 24]);
        let run = |x: &Tensor, tau: f64| -> Result<Tensor, String> {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let b = g.constant(bank.embeddings().clone().into_dyn());
            let t = g.constant(Tensor::from_elem(IxDyn(&[1]), tau));
            let sim = clip_head::adjective_similarity(&mut g, xv, b, t).map_err(s)?;
            Ok(g.value(sim.probs).clone())
        };
        let base = run(&x, 100.0)?;
        let mut oracle_err: f64 = 0.0;
        for (row, xr) in base.axis_iter(Axis(0)).zip(x.axis_iter(Axis(0))) {
            let want = oracle_similarity(&xr.iter().copied().collect::<Vec<f64>>(), bank.embeddings(), 100.0);
            for (a, b) in row.iter().zip(&want) {
                oracle_err = oracle_err.max((a - b).abs());
            }
            check(row.iter().all(|v| *v > 0.0), || "non-positive s_i".into())?;
            check((row.sum() - 1.0).abs() <= 1e-12, || format!("row sums to {}", row.sum()))?;
        }
        check(oracle_err <= 1e-10, || format!("oracle mismatch {oracle_err:.3e}"))?;
        let mut drift: f64 = 0.0;
        for alpha in [0.1, 1.0, 10.0] {
            let scaled = run(&x.mapv(|v| v * alpha), 100.0)?;
            drift = drift.max((&scaled - &base).iter().fold(0.0, |m, v| m.max(v.abs())));
        }
        check(drift <= 1e-6, || format!("scale drift {drift:.3e}"))?;
        let uniform = run(&x, 0.0)?;
        check(uniform.iter().all(|v| (v - 1.0 / 40.0).abs() <= 1e-15), || "tau = 0 not uniform".into())?;
        Ok(format!("oracle err {oracle_err:.1e}, scale drift {drift:.1e}, positive, sums to 1, tau=0 uniform"))
    });
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

// Average rank by counting: 1-based, ties share the mean of their positions.
fn oracle_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let below = v.iter().filter(|y| *y < x).count() as f64;
            let tied = v.iter().filter(|y| *y == x).count() as f64;
            below + (tied + 1.0) / 2.0
        })
        .collect()
}

#[test]
fn metric_correctness() {
    criterion("metric correctness", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mut worst: f64 = 0.0;
        let mut affine_drift: f64 = 0.0;
        let mut with_ties = 0;
        for case in 0..50 {
            let n = rng.gen_range(5..60);
            let levels: f64 = if case % 2 == 0 { 6.0 } else { 1e6 };
            let p: Vec<f64> = (0..n).map(|_| (rng.gen_range(0.0..1.0f64) * levels).floor()).collect();
            let g: Vec<f64> = (0..n).map(|_| (rng.gen_range(0.0..1.0f64) * levels).floor() / levels).collect();
            if p.iter().all(|v| *v == p[0]) || g.iter().all(|v| *v == g[0]) {
                continue;
            }
            if p.iter().map(|v| v.to_bits()).collect::<BTreeSet<_>>().len() < n {
                with_ties += 1;
            }
            let sr = metrics::srcc(&p, &g).map_err(s)?;
            let pl = metrics::plcc(&p, &g).map_err(s)?;
            worst = worst.max((sr - oracle_pearson(&oracle_ranks(&p), &oracle_ranks(&g))).abs());
            worst = worst.max((pl - oracle_pearson(&p, &g)).abs());
            let mono: Vec<f64> = p.iter().map(|x| 3.0 * x + (x + 1.0).ln()).collect();
            check(metrics::srcc(&mono, &g).map_err(s)? == sr, || "SRCC moved under a monotone map".into())?;
            for (a, b) in [(2.5, -7.0), (1e-3, 4.0), (300.0, 0.5)] {
                let t: Vec<f64> = p.iter().map(|x| a * x + b).collect();
                affine_drift = affine_drift.max((metrics::plcc(&t, &g).map_err(s)? - pl).abs());
            }
        }
        check(with_ties >= 20, || format!("only {with_ties} cases had ties"))?;
        check(worst <= 1e-10, || format!("oracle mismatch {worst:.3e}"))?;
        check(affine_drift <= 1e-12, || format!("PLCC affine drift {affine_drift:.3e}"))?;
        Ok(format!("50 vectors ({with_ties} with ties): oracle err {worst:.1e}, affine drift {affine_drift:.1e}"))
    });
}

#[test]
fn overfit_smoke() {
    criterion("overfit smoke test", Some(Duration::from_secs(300)), || {
        let dir = tempfile::tempdir().map_err(s)?;
        let path = synthetic::write_fr_dataset(dir.path(), 4, 4, 64, 7).map_err(s)?;
        let opts = data::ManifestOptions {
            mos_range: Some((1.0, 5.0)),
            check_files: true,
            ..Default::default()
        };
        let manifest = data::normalize_mos(&data::load_manifest(&path, &opts).map_err(s)?).map_err(s)?;
        check(manifest.len() == 16, || format!("{} samples", manifest.len()))?;
        let all: Vec<usize> = (0..16).collect();
        let samples = train::load_split(&manifest, &all, None).map_err(s)?;
        let bank = clip_head::bundled_text_bank();
        let model = Bpclip::new(verify::overfit_model(bank.d_text())).map_err(s)?;
        check(model.config.backbone.variant == BackboneVariant::Tiny, || "not the tiny backbone".into())?;
        let data = TrainData {
            train: samples.clone(),
            val: vec![],
        };
        let tc = verify::overfit_config(500);
        let out = train::train(&model, &tc, &data, model.init_params(1), Some(&bank), None).map_err(s)?;
        check(out.steps == 500, || format!("{} steps", out.steps))?;
        let last = out.log.last().unwrap().loss;
        let pred = train::predict_samples(&model, &out.params, Some(&bank), &samples, 64, 16).map_err(s)?;
        let mos: Vec<f64> = samples.iter().map(|x| x.mos).collect();
        let srcc = oracle_pearson(&oracle_ranks(&pred), &oracle_ranks(&mos));
        let ratio = out.first_loss / last;
        check(srcc >= 0.95, || format!("training SRCC {srcc:.4}"))?;
        check(ratio >= 10.0, || format!("loss {:.4} -> {last:.4} ({ratio:.1}x)", out.first_loss))?;
        Ok(format!("500 steps, SRCC {srcc:.4}, loss {:.4} -> {last:.5} ({ratio:.0}x)", out.first_loss))
    });
}

fn fr_manifest(groups: usize, per: usize) -> SampleManifest {
    let entries = (0..groups)
        .flat_map(|gk| {
            (0..per).map(move |k| Entry {
                id: format!("g{gk}_{k}"),
                image_path: format!("dist/{gk}_{k}.png").into(),
                reference_path: Some(format!("ref/{gk}.png").into()),
                mos: (gk * per + k) as f64,
                group_key: format!("g{gk}"),
            })
        })
        .collect();
    SampleManifest::new(entries, Mode::Fr, Polarity::HigherBetter, None, "".into(), false).unwrap()
}

#[test]
fn protocol_checks() {
    criterion("protocol checks", None, || {
        let m = fr_manifest(10, 3);
        let mut seen_tests = BTreeSet::new();
        for repeat in 0..10 {
            let sp = data::split_dataset(&m, &SplitSpec::for_mode(Mode::Fr, 2024, repeat)).map_err(s)?;
            let groups = |idx: &[usize]| idx.iter().map(|&i| m.entries[i].group_key.clone()).collect::<BTreeSet<_>>();
            let (a, b, c) = (groups(&sp.train), groups(&sp.val), groups(&sp.test));
            check((a.len(), b.len(), c.len()) == (6, 2, 2), || format!("repeat {repeat}: {}/{}/{}", a.len(), b.len(), c.len()))?;
            check(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c), || format!("repeat {repeat} overlaps"))?;
            check(sp.train.len() + sp.val.len() + sp.test.len() == 30, || "samples lost".into())?;
            seen_tests.insert(c.into_iter().collect::<Vec<_>>());
        }
        check(seen_tests.len() > 1, || "repeats produce identical splits".into())?;

        let nr = (0..50)
            .map(|i| Entry {
                id: format!("n{i}"),
                image_path: format!("img/{i}.png").into(),
                reference_path: None,
                mos: i as f64,
                group_key: String::new(),
            })
            .collect();
        let nr = SampleManifest::new(nr, Mode::Nr, Polarity::HigherBetter, None, "".into(), false).map_err(s)?;
        let sp = data::split_dataset(&nr, &SplitSpec::for_mode(Mode::Nr, 2024, 0)).map_err(s)?;
        check((sp.train.len(), sp.val.len(), sp.test.len()) == (40, 0, 10), || "NR 8:2".into())?;

        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let img = Arc::new(ndarray::Array3::from_shape_fn((3, 48, 56), |_| rng.gen::<f64>()));
        let reference = Arc::new(img.mapv(|v| v * 0.5 + 3.0));
        let sample = LoadedSample {
            id: "pair".into(),
            image_path: "d.png".into(),
            image: img,
            reference_path: Some("r.png".into()),
            reference: Some(reference),
            mos: 0.5,
        };
        let mut flips = [0usize; 2];
        for _ in 0..1000 {
            let p = data::augment_patch(&sample, &mut rng, 24, true).map_err(s)?;
            check(p.reference_crop == Some(p.distorted_crop), || "crop metadata differs".into())?;
            let r = p.reference.unwrap();
            check(r.iter().zip(p.distorted.iter()).all(|(r, d)| (r - (d * 0.5 + 3.0)).abs() < 1e-12), || {
                "pixels misaligned".into()
            })?;
            flips[0] += p.distorted_crop.hflip as usize;
            flips[1] += p.distorted_crop.vflip as usize;
        }
        check(flips.iter().all(|f| (300..700).contains(f)), || format!("flip counts {flips:?}"))?;

        let bank_dir = tempfile::tempdir().map_err(s)?;
        let bank_path = bank_dir.path().join("bank.bpta");
        clip_head::bundled_text_bank().save(&bank_path).map_err(s)?;
        let bank_bytes = std::fs::read(&bank_path).map_err(s)?;
        let sidecar_bytes = std::fs::read(clip_head::sidecar_path(&bank_path)).map_err(s)?;
        let bank = load_text_bank(&bank_path).map_err(s)?;
        let emb_before = bank.embeddings().clone();
        let model = Bpclip::new(ModelConfig::tiny(Mode::Fr, 32)).map_err(s)?;
        let params = model.init_params(72);
        let frozen = params.frozen_bytes();
        check(!frozen.is_empty(), || "no frozen norm statistics".into())?;
        let pairs: Vec<LoadedSample> = (0..4)
            .map(|i| {
                let d = Arc::new(ndarray::Array3::from_shape_fn((3, 32, 32), |_| rng.gen::<f64>()));
                LoadedSample {
                    id: format!("p{i}"),
                    image_path: format!("p{i}.png").into(),
                    reference: Some(Arc::new(d.mapv(|v| 1.0 - v))),
                    image: d,
                    reference_path: Some(format!("r{i}.png").into()),
                    mos: i as f64 / 3.0,
                }
            })
            .collect();
        let tc = TrainConfig {
            lr: Some(1e-2),
            epochs: 2,
            batch_size: 2,
            crop_size: 32,
            ..Default::default()
        };
        let data = TrainData {
            train: pairs,
            val: vec![],
        };
        let out = train::train(&model, &tc, &data, params.clone(), Some(&bank), None).map_err(s)?;
        check(out.params.frozen_bytes() == frozen, || "frozen tensors changed".into())?;
        let moved = out
            .params
            .iter()
            .any(|(n, p)| p.trainable && p.value != params.get(n).unwrap().value);
        check(moved, || "training changed nothing".into())?;
        check(std::fs::read(&bank_path).map_err(s)? == bank_bytes, || "bank archive changed".into())?;
        check(std::fs::read(clip_head::sidecar_path(&bank_path)).map_err(s)? == sidecar_bytes, || "sidecar changed".into())?;
        check(*bank.embeddings() == emb_before, || "bank embeddings changed".into())?;

        let (eta_max, eta_min, t_max) = (1e-4, 1e-6, 50.0);
        for (t, want) in [(0.0, eta_max), (t_max, eta_min), (t_max / 2.0, 0.5 * (eta_max + eta_min))] {
            let got = cosine_lr(t, t_max, eta_max, eta_min);
            check((got - want).abs() <= 1e-12, || format!("lr({t}) = {got:e}, want {want:e}"))?;
        }
        Ok(format!(
            "10 FR repeats 6:2:2 disjoint; NR 40/10; 1000 synced crops; {} frozen tensors and bank unchanged; cosine exact",
            frozen.len()
        ))
    });
}

#[test]
fn format_round_trip() {
    criterion("format round-trip", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let mut a = TensorArchive::new();
        a.insert("w", StoredTensor::new(DType::F64, rand_tensor(&mut rng, &[4, 3, 2])));
        a.insert("b", StoredTensor::new(DType::F32, rand_tensor(&mut rng, &[7]).mapv(|v| v as f32 as f64)));
        a.insert("s", StoredTensor::new(DType::F64, Tensor::from_elem(IxDyn(&[]), -0.0)));
        let dir = tempfile::tempdir().map_err(s)?;
        let path = dir.path().join("a.bpta");
        a.save(&path).map_err(s)?;
        let bytes = std::fs::read(&path).map_err(s)?;
        let back = TensorArchive::load(&path).map_err(s)?;
        check(back.to_bytes() == bytes, || "re-serialized bytes differ".into())?;
        for name in ["w", "b", "s"] {
            let (x, y) = (a.get(name).unwrap(), back.get(name).unwrap());
            check(x.dtype == y.dtype && x.data.shape() == y.data.shape(), || format!("{name} header differs"))?;
            let same = x.data.iter().zip(y.data.iter()).all(|(p, q)| p.to_bits() == q.to_bits());
            check(same, || format!("{name} values differ bitwise"))?;
        }
        let mut bad = bytes.clone();
        let at = bad.len() - 12;
        bad[at] ^= 0x01;
        std::fs::write(&path, &bad).map_err(s)?;
        check(matches!(TensorArchive::load(&path), Err(ArchiveError::ChecksumMismatch { .. })), || {
            "corrupted payload accepted".into()
        })?;
        Ok("save/load bitwise identical; flipped payload bit rejected by CRC".into())
    });
}

#[test]
fn ablation_switches() {
    criterion("ablation switches", Some(Duration::from_secs(60)), || {
        let bank = unit_bank(16, 91);
        let small = unit_bank(12, 92);
        type Edit = fn(&mut ModelConfig);
        let variants: [(&str, Edit); 3] = [
            ("single-branch", |c| c.attention.dual_branch = false),
            ("top-down", |c| c.attention.direction = MscaDirection::TopDown),
            ("no-text-head", |c| c.head.text_head = false),
        ];
        let mut done = Vec::new();
        for (name, edit) in variants {
            for mode in [Mode::Fr, Mode::Nr] {
                let mut cfg = ModelConfig::tiny(mode, 64);
                cfg.head.d_text = 16;
                edit(&mut cfg);
                let cfg: ModelConfig = toml::from_str(&toml::to_string(&cfg).map_err(s)?).map_err(s)?;
                shape_law_for(&cfg, &bank).map_err(|e| format!("{name} {mode}: {e}"))?;
                gradient_suite_for(&cfg, &small).map_err(|e| format!("{name} {mode}: {e}"))?;
            }
            done.push(name);
        }
        Ok(format!("{} build in FR and NR and pass shape and gradient checks", done.join(", ")))
    });
}
