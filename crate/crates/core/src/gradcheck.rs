//! Central finite-difference checks of analytic gradients on model
//! fragments.

use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionConfig};
use crate::autodiff::{Graph, Tensor, Var};
use crate::backbone::NUM_LEVELS;
use crate::clip_head::{self, NUM_ADJECTIVES, TAU};
use crate::error::{config, Error, Result};
use crate::glp;
use crate::model::{Bpclip, ModelConfig, FUSED_LEVELS};
use crate::params::{ParamVars, ParameterSet};
use crate::train::mse_loss;
use crate::Mode;

/// Which piece of the network to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fragment {
    /// Level-1 gating, pooling and positional encoding.
    Glp,
    Msca,
    Sa,
    Fuse,
    /// Full encoder over five levels, following the configured wiring.
    Encoder,
    /// Projection, similarity softmax and score regression.
    ClipHead,
    Sdp,
    Mse,
    Linear,
}

impl Fragment {
    pub const ALL: [Fragment; 9] = [
        Fragment::Glp,
        Fragment::Msca,
        Fragment::Sa,
        Fragment::Fuse,
        Fragment::Encoder,
        Fragment::ClipHead,
        Fragment::Sdp,
        Fragment::Mse,
        Fragment::Linear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Fragment::Glp => "glp",
            Fragment::Msca => "msca",
            Fragment::Sa => "sa",
            Fragment::Fuse => "fuse",
            Fragment::Encoder => "encoder",
            Fragment::ClipHead => "clip_head",
            Fragment::Sdp => "sdp",
            Fragment::Mse => "mse",
            Fragment::Linear => "linear",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Entries sampled per tensor (all entries when the tensor is smaller).
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Multiplies every analytic gradient; `Some(1.01)` is a sensitivity
    /// control that must fail.
    pub corrupt: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            samples_per_tensor: 6,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub fragment: Fragment,
    pub max_rel_error: f64,
    /// `name[flat index]` of the worst entry.
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-4)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

type Builder<'a> = dyn Fn(&mut Graph, &ParamVars) -> Result<Var> + 'a;

fn eval_loss(set: &ParameterSet, build: &Builder) -> Result<f64> {
    let mut g = Graph::new();
    let pv = set.bind(&mut g);
    let l = build(&mut g, &pv)?;
    Ok(g.value(l).sum())
}

/// Checks every trainable tensor in `set` whose gradient the builder
/// produces. The builder's output is summed to a scalar.
pub fn check_builder(
    fragment: Fragment,
    set: &ParameterSet,
    build: &Builder,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let pv = set.bind(&mut g);
    let out = build(&mut g, &pv)?;
    let loss = g.sum_all(out);
    let grads = g.backward(loss);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = set.clone();
    let mut report = GradCheckReport {
        fragment,
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let names: Vec<String> = set.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.clone()).collect();
    for name in names {
        let Some(analytic) = grads.get(pv.get(&name)?) else { continue };
        if analytic.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite analytic gradient for `{name}`")));
        }
        let n = analytic.len();
        let picks: Vec<usize> = if n <= opts.samples_per_tensor {
            (0..n).collect()
        } else {
            (0..opts.samples_per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for idx in picks {
            let orig = set.value(&name)?.as_slice_memory_order().expect("contiguous")[idx];
            let mut at = |x: f64| -> Result<f64> {
                work.get_mut(&name).expect("present").value.as_slice_memory_order_mut().expect("contiguous")[idx] = x;
                eval_loss(&work, build)
            };
            let plus = at(orig + opts.h)?;
            let minus = at(orig - opts.h)?;
            at(orig)?;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let mut a = analytic.as_slice_memory_order().expect("contiguous")[idx];
            if let Some(c) = opts.corrupt {
                a *= c;
            }
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!("non-finite numeric gradient for `{name}[{idx}]`")));
            }
            let e = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_empty() || e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = format!("{name}[{idx}]");
            }
        }
    }
    if report.checked == 0 {
        return Err(config(format!("fragment {} has no trainable inputs", fragment.name())));
    }
    Ok(report)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-scale..scale))
}

/// Small model configuration the fragment checks run against. Ablation
/// switches are taken from `base`; sizes are shrunk.
pub fn fragment_config(base: &ModelConfig) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(base.mode, 64);
    cfg.attention = AttentionConfig {
        d_model: 8,
        num_heads: 2,
        ..base.attention.clone()
    };
    cfg.head.text_head = base.head.text_head;
    cfg.head.d_text = 12;
    cfg.head.tau = 5.0;
    cfg.head.learn_tau = base.head.learn_tau;
    cfg.head.regression_hidden = 6;
    cfg
}

/// Runs the check for one fragment of `base`'s architecture. Returns
/// `Ok(None)` when the fragment does not exist in that configuration (the
/// weight branch of a single-branch model).
pub fn gradient_check(fragment: Fragment, base: &ModelConfig, opts: &GradCheckOptions) -> Result<Option<GradCheckReport>> {
    let cfg = fragment_config(base);
    if !cfg.attention.dual_branch && fragment == Fragment::Sa {
        return Ok(None);
    }
    let model = Bpclip::new(cfg.clone())?;
    let mut set = model.init_params(opts.seed.wrapping_add(17));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(99));
    let d = cfg.attention.d_model;
    let l = cfg.seq_len();
    let b = 2;
    // Biases start at zero; perturb so every path carries signal.
    for (_, p) in set.iter_mut() {
        if p.trainable {
            p.value.mapv_inplace(|v| v + rng.gen_range(-0.1..0.1));
        }
    }
    let seq = |rng: &mut ChaCha8Rng| random(rng, &[b, l, d], 1.0);
    let weights = random(&mut rng, &[b, l, d], 1.0);
    let acfg = cfg.attention.clone();

    let report = match fragment {
        Fragment::Glp => {
            let c = cfg.backbone.stage_channels[0];
            let fd = random(&mut rng, &[b, c, 8, 8], 1.0);
            set.insert("input.fd", fd.clone(), true);
            if cfg.mode == Mode::Fr {
                // Keep |fd - fr| away from the kink at zero.
                let off = Tensor::from_shape_fn(IxDyn(&[b, c, 8, 8]), |_| {
                    let m = rng.gen_range(0.2..1.0);
                    if rng.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                });
                set.insert("input.fr", &fd + &off, true);
            }
            let w = random(&mut rng, &[b, l, d], 1.0);
            let mode = cfg.mode;
            check_builder(
                fragment,
                &set,
                &move |g, p| {
                    let fd = p.get("input.fd")?;
                    let gated = match mode {
                        Mode::Fr => glp::gated_fuse_fr(g, p, 1, fd, p.get("input.fr")?)?,
                        Mode::Nr => glp::gated_fuse_nr(g, p, 1, fd)?,
                    };
                    let seq = glp::pool_project(g, p, 1, gated.out, (2, 2))?;
                    let pos = p.get(glp::POS_EMBED)?;
                    let out = glp::add_positional(g, seq, pos)?;
                    let wv = g.constant(w.clone());
                    Ok(g.mul(out, wv))
                },
                opts,
            )?
        }
        Fragment::Msca => {
            set.insert("input.q", seq(&mut rng), true);
            set.insert("input.kv", seq(&mut rng), true);
            check_builder(
                fragment,
                &set,
                &|g, p| {
                    let a = attention::msca_block(g, p, &acfg, 1, p.get("input.q")?, Some(p.get("input.kv")?))?;
                    let wv = g.constant(weights.clone());
                    Ok(g.mul(a.out, wv))
                },
                opts,
            )?
        }
        Fragment::Sa => {
            set.insert("input.x", seq(&mut rng), true);
            check_builder(
                fragment,
                &set,
                &|g, p| {
                    let a = attention::sa_block(g, p, &acfg, 1, p.get("input.x")?)?;
                    let wv = g.constant(weights.clone());
                    Ok(g.mul(a.out, wv))
                },
                opts,
            )?
        }
        Fragment::Fuse => {
            set.insert("input.info", seq(&mut rng), true);
            if acfg.dual_branch {
                set.insert("input.weight", seq(&mut rng), true);
            }
            let dual = acfg.dual_branch;
            check_builder(
                fragment,
                &set,
                &|g, p| {
                    let w = if dual { Some(p.get("input.weight")?) } else { None };
                    let f = attention::fuse_branches(g, p, 1, p.get("input.info")?, w)?;
                    let wv = g.constant(weights.clone());
                    Ok(g.mul(f.out, wv))
                },
                opts,
            )?
        }
        Fragment::Encoder => {
            for i in 1..=NUM_LEVELS {
                set.insert(format!("input.level{i}"), seq(&mut rng), true);
            }
            check_builder(
                fragment,
                &set,
                &|g, p| {
                    let levels = (1..=NUM_LEVELS)
                        .map(|i| p.get(&format!("input.level{i}")))
                        .collect::<Result<Vec<_>>>()?;
                    let enc = attention::encode(g, p, &acfg, &levels)?;
                    let cat = g.concat(&enc.fused, 1);
                    let w = random(&mut ChaCha8Rng::seed_from_u64(5), g.shape(cat), 1.0);
                    let wv = g.constant(w);
                    Ok(g.mul(cat, wv))
                },
                opts,
            )?
        }
        Fragment::ClipHead => {
            for i in 1..=FUSED_LEVELS {
                set.insert(format!("input.fused{i}"), seq(&mut rng), true);
            }
            let mut bank = random(&mut rng, &[NUM_ADJECTIVES, cfg.head.d_text], 1.0);
            for mut r in bank.axis_iter_mut(ndarray::Axis(0)) {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.mapv_inplace(|v| v / n);
            }
            let text_head = cfg.head.text_head;
            check_builder(
                fragment,
                &set,
                &|g, p| {
                    let bv = g.constant(bank.clone());
                    let mut sims = Vec::new();
                    for i in 1..=FUSED_LEVELS {
                        let x = clip_head::project_to_clip(g, p, i, p.get(&format!("input.fused{i}"))?)?;
                        if text_head {
                            let s = clip_head::adjective_similarity(g, x, bv, p.get(TAU)?)?;
                            sims.push(s.probs);
                        } else {
                            sims.push(x);
                        }
                    }
                    let score = clip_head::regress_score(g, p, &sims, FUSED_LEVELS)?;
                    let target = g.constant(Tensor::from_elem(IxDyn(&[b]), 0.5));
                    mse_loss(g, score, target)
                },
                opts,
            )?
        }
        Fragment::Sdp => {
            let mut s = ParameterSet::new();
            for n in ["q", "k", "v"] {
                s.insert(format!("input.{n}"), random(&mut rng, &[2, 3, 4], 1.0), true);
            }
            let w = random(&mut rng, &[2, 3, 4], 1.0);
            check_builder(
                fragment,
                &s,
                &|g, p| {
                    let a = attention::sdp_attention(g, p.get("input.q")?, p.get("input.k")?, p.get("input.v")?, 2)?;
                    let wv = g.constant(w.clone());
                    Ok(g.mul(a.out, wv))
                },
                opts,
            )?
        }
        Fragment::Mse => {
            let mut s = ParameterSet::new();
            s.insert("input.pred", random(&mut rng, &[5], 1.0), true);
            let t = Tensor::from_shape_fn(IxDyn(&[5]), |_| rng.gen_range(0.0..1.0));
            check_builder(
                fragment,
                &s,
                &|g, p| {
                    let tv = g.constant(t.clone());
                    mse_loss(g, p.get("input.pred")?, tv)
                },
                opts,
            )?
        }
        Fragment::Linear => {
            let mut s = ParameterSet::new();
            s.insert("input.x", random(&mut rng, &[3, 4], 1.0), true);
            s.insert("input.w", random(&mut rng, &[5, 4], 1.0), true);
            s.insert("input.b", random(&mut rng, &[5], 1.0), true);
            let t = random(&mut rng, &[15], 1.0);
            check_builder(
                fragment,
                &s,
                &|g, p| {
                    let y = g.linear(p.get("input.x")?, p.get("input.w")?, Some(p.get("input.b")?));
                    let y = g.reshape(y, &[15]);
                    let tv = g.constant(t.clone());
                    mse_loss(g, y, tv)
                },
                opts,
            )?
        }
    };
    Ok(Some(report))
}

/// Every applicable fragment for `base`.
pub fn gradient_suite(base: &ModelConfig, opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for f in Fragment::ALL {
        if let Some(r) = gradient_check(f, base, opts)? {
            out.push(r);
        }
    }
    Ok(out)
}
