//! Dual-branch encoder core.
//!
//! * Information branch: multiscale cross attention. Block `i` takes its
//!   query from level `i` and its key/value from level `i + 1`, so distortion
//!   evidence found at the finer level probes the coarser semantics.
//! * Weight branch: self-attention on level `i`, turned into a `(0, 1)` gate
//!   by a two-layer MLP with a terminal sigmoid.
//! * Fusion: `MLP_info(G'_i) * gate(G''_i)`.
//!
//! The top-down switch swaps the roles (query from `i + 1`, key/value from
//! `i`) for ablation runs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{config, input, Result};
use crate::params::{ones, zeros, Init, ParamVars, ParameterSet};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MscaDirection {
    #[default]
    BottomUp,
    TopDown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub num_heads: usize,
    /// Pre-normalize attention inputs with LayerNorm.
    pub layer_norm: bool,
    /// Include the self-attention weight branch.
    pub dual_branch: bool,
    pub direction: MscaDirection,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            num_heads: 4,
            layer_norm: false,
            dual_branch: true,
            direction: MscaDirection::BottomUp,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(config(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }
}

/// `(query level, key/value level)` for each MSCA block, 1-based.
pub fn wiring(direction: MscaDirection, levels: usize) -> Vec<(usize, usize)> {
    (1..levels)
        .map(|i| match direction {
            MscaDirection::BottomUp => (i, i + 1),
            MscaDirection::TopDown => (i + 1, i),
        })
        .collect()
}

fn insert_linear(init: &mut Init, set: &mut ParameterSet, name: &str, out: usize, inp: usize, bias: bool) {
    set.insert(format!("{name}.weight"), init.fan_in_uniform(&[out, inp], inp), true);
    if bias {
        set.insert(format!("{name}.bias"), zeros(&[out]), true);
    }
}

fn insert_ln(set: &mut ParameterSet, name: &str, d: usize) {
    set.insert(format!("{name}.weight"), ones(&[d]), true);
    set.insert(format!("{name}.bias"), zeros(&[d]), true);
}

/// Parameters for `blocks` MSCA/SA/fusion blocks.
pub fn init_params(cfg: &AttentionConfig, blocks: usize, init: &mut Init, set: &mut ParameterSet) {
    let d = cfg.d_model;
    for i in 1..=blocks {
        for proj in ["wq", "wk", "wv"] {
            insert_linear(init, set, &format!("encoder.msca{i}.{proj}"), d, d, false);
        }
        if cfg.layer_norm {
            insert_ln(set, &format!("encoder.msca{i}.ln_q"), d);
            insert_ln(set, &format!("encoder.msca{i}.ln_kv"), d);
        }
        insert_linear(init, set, &format!("encoder.info{i}.fc1"), d, d, true);
        insert_linear(init, set, &format!("encoder.info{i}.fc2"), d, d, true);
        if cfg.dual_branch {
            for proj in ["wq", "wk", "wv"] {
                insert_linear(init, set, &format!("encoder.sa{i}.{proj}"), d, d, false);
            }
            if cfg.layer_norm {
                insert_ln(set, &format!("encoder.sa{i}.ln"), d);
            }
            insert_linear(init, set, &format!("encoder.gate{i}.fc1"), d, d, true);
            insert_linear(init, set, &format!("encoder.gate{i}.fc2"), d, d, true);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub out: Var,
    /// Attention probabilities `(B, heads, L_q, L_k)`.
    pub probs: Var,
}

/// Multi-head `softmax(Q K^T / sqrt(d_k)) V` over `(B, L, D)` inputs.
pub fn sdp_attention(g: &mut Graph, q: Var, k: Var, v: Var, num_heads: usize) -> Result<Attended> {
    let qs = g.shape(q).to_vec();
    let ks = g.shape(k).to_vec();
    let vs = g.shape(v).to_vec();
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
        return Err(input("attention inputs must be (B, L, D)"));
    }
    if ks != vs {
        return Err(input(format!("key {ks:?} and value {vs:?} shapes differ")));
    }
    if qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(input(format!("query {qs:?} incompatible with key {ks:?}")));
    }
    let (b, lq, d) = (qs[0], qs[1], qs[2]);
    let lk = ks[1];
    if num_heads == 0 || d % num_heads != 0 {
        return Err(input(format!("width {d} not divisible by {num_heads} heads")));
    }
    let dk = d / num_heads;
    let qh = g.reshape(q, &[b, lq, num_heads, dk]);
    let qh = g.permute(qh, &[0, 2, 1, 3]);
    let kh = g.reshape(k, &[b, lk, num_heads, dk]);
    let kt = g.permute(kh, &[0, 2, 3, 1]);
    let vh = g.reshape(v, &[b, lk, num_heads, dk]);
    let vh = g.permute(vh, &[0, 2, 1, 3]);
    let scores = g.matmul(qh, kt);
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let probs = g.softmax(scores);
    let ctx = g.matmul(probs, vh);
    let ctx = g.permute(ctx, &[0, 2, 1, 3]);
    let out = g.reshape(ctx, &[b, lq, d]);
    Ok(Attended { out, probs })
}

/// Array-level attention; returns `(output, probabilities)`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, num_heads: usize) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let a = sdp_attention(&mut g, q, k, v, num_heads)?;
    Ok((g.value(a.out).clone(), g.value(a.probs).clone()))
}

fn check_seq(g: &Graph, x: Var, d: usize) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 3 || s[2] != d {
        return Err(input(format!("expected (B, L, {d}), got {s:?}")));
    }
    Ok(())
}

fn maybe_ln(g: &mut Graph, p: &ParamVars, name: &str, x: Var, enabled: bool) -> Result<Var> {
    if !enabled {
        return Ok(x);
    }
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    Ok(g.layer_norm(x, w, b, LN_EPS))
}

fn project(g: &mut Graph, p: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    Ok(g.linear(x, w, None))
}

/// `Attn(W_q G_q, W_k G_kv, W_v G_kv) + G_q` for MSCA block `i`.
///
/// `query_src` and `kv_src` are the two levels already ordered by the
/// configured direction; see [`encode`].
pub fn msca_block(
    g: &mut Graph,
    p: &ParamVars,
    cfg: &AttentionConfig,
    i: usize,
    query_src: Var,
    kv_src: Option<Var>,
) -> Result<Attended> {
    let kv_src = kv_src.ok_or_else(|| config(format!("MSCA block {i} has no paired level")))?;
    check_seq(g, query_src, cfg.d_model)?;
    check_seq(g, kv_src, cfg.d_model)?;
    let pre = format!("encoder.msca{i}");
    let qn = maybe_ln(g, p, &format!("{pre}.ln_q"), query_src, cfg.layer_norm)?;
    let kvn = maybe_ln(g, p, &format!("{pre}.ln_kv"), kv_src, cfg.layer_norm)?;
    let q = project(g, p, &format!("{pre}.wq"), qn)?;
    let k = project(g, p, &format!("{pre}.wk"), kvn)?;
    let v = project(g, p, &format!("{pre}.wv"), kvn)?;
    let a = sdp_attention(g, q, k, v, cfg.num_heads)?;
    Ok(Attended {
        out: g.add(a.out, query_src),
        probs: a.probs,
    })
}

/// `Attn(W_q G, W_k G, W_v G) + G` for SA block `i`.
pub fn sa_block(g: &mut Graph, p: &ParamVars, cfg: &AttentionConfig, i: usize, gi: Var) -> Result<Attended> {
    check_seq(g, gi, cfg.d_model)?;
    let pre = format!("encoder.sa{i}");
    let xn = maybe_ln(g, p, &format!("{pre}.ln"), gi, cfg.layer_norm)?;
    let q = project(g, p, &format!("{pre}.wq"), xn)?;
    let k = project(g, p, &format!("{pre}.wk"), xn)?;
    let v = project(g, p, &format!("{pre}.wv"), xn)?;
    let a = sdp_attention(g, q, k, v, cfg.num_heads)?;
    Ok(Attended {
        out: g.add(a.out, gi),
        probs: a.probs,
    })
}

/// Two-layer GELU MLP `fc2(gelu(fc1(x)))`.
pub fn mlp(g: &mut Graph, p: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let w1 = p.get(&format!("{name}.fc1.weight"))?;
    let b1 = p.get(&format!("{name}.fc1.bias"))?;
    let w2 = p.get(&format!("{name}.fc2.weight"))?;
    let b2 = p.get(&format!("{name}.fc2.bias"))?;
    let h = g.linear(x, w1, Some(b1));
    let h = g.gelu(h);
    Ok(g.linear(h, w2, Some(b2)))
}

#[derive(Debug, Clone, Copy)]
pub struct Fused {
    pub out: Var,
    /// Sigmoid gate values, absent for single-branch models.
    pub gate: Option<Var>,
}

/// `MLP_info(G') * sigmoid(MLP_weight(G''))`; with no weight input the
/// information MLP output passes through unweighted.
pub fn fuse_branches(g: &mut Graph, p: &ParamVars, i: usize, info: Var, weight: Option<Var>) -> Result<Fused> {
    let info_out = mlp(g, p, &format!("encoder.info{i}"), info)?;
    let Some(weight) = weight else {
        return Ok(Fused {
            out: info_out,
            gate: None,
        });
    };
    if g.shape(info) != g.shape(weight) {
        return Err(input(format!(
            "branch shapes differ: {:?} vs {:?}",
            g.shape(info),
            g.shape(weight)
        )));
    }
    let pre = mlp(g, p, &format!("encoder.gate{i}"), weight)?;
    let gate = g.sigmoid(pre);
    Ok(Fused {
        out: g.mul(info_out, gate),
        gate: Some(gate),
    })
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `G'''_1..G'''_{n-1}`.
    pub fused: Vec<Var>,
    /// `G'_i` outputs of the information branch.
    pub info: Vec<Attended>,
    /// `G''_i` outputs of the weight branch, empty for single-branch models.
    pub weight: Vec<Attended>,
    pub gates: Vec<Option<Var>>,
    pub wiring: Vec<(usize, usize)>,
}

/// Runs all blocks over the positional-encoded levels `G_1..G_n`.
pub fn encode(g: &mut Graph, p: &ParamVars, cfg: &AttentionConfig, levels: &[Var]) -> Result<EncoderOutput> {
    cfg.validate()?;
    if levels.len() < 2 {
        return Err(config("the encoder needs at least two levels"));
    }
    let wiring = wiring(cfg.direction, levels.len());
    let mut out = EncoderOutput {
        fused: Vec::with_capacity(wiring.len()),
        info: Vec::new(),
        weight: Vec::new(),
        gates: Vec::new(),
        wiring: wiring.clone(),
    };
    for (k, &(qi, kvi)) in wiring.iter().enumerate() {
        let i = k + 1;
        let info = msca_block(g, p, cfg, i, levels[qi - 1], levels.get(kvi - 1).copied())?;
        let weight = if cfg.dual_branch {
            let w = sa_block(g, p, cfg, i, levels[i - 1])?;
            out.weight.push(w);
            Some(w.out)
        } else {
            None
        };
        let fused = fuse_branches(g, p, i, info.out, weight)?;
        out.info.push(info);
        out.fused.push(fused.out);
        out.gates.push(fused.gate);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, Axis, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    fn params(cfg: &AttentionConfig, seed: u64) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParameterSet::new();
        init_params(cfg, 4, &mut Init { rng: &mut rng }, &mut set);
        set
    }

    #[test]
    fn single_key_returns_value_row() {
        let q = rand(&[2, 3, 4], 1);
        let k = rand(&[2, 1, 4], 2);
        let v = rand(&[2, 1, 4], 3);
        let (out, _) = attention(&q, &k, &v, 2).unwrap();
        for b in 0..2 {
            for l in 0..3 {
                for d in 0..4 {
                    assert!((out[[b, l, d]] - v[[b, 0, d]]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn zero_query_averages_values() {
        let q = Tensor::zeros(IxDyn(&[1, 2, 4]));
        let k = rand(&[1, 5, 4], 2);
        let v = rand(&[1, 5, 4], 3);
        let (out, _) = attention(&q, &k, &v, 1).unwrap();
        let mean = v.mean_axis(Axis(1)).unwrap();
        for l in 0..2 {
            for d in 0..4 {
                assert!((out[[0, l, d]] - mean[[0, d]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let q = rand(&[1, 2, 4], 1);
        assert!(attention(&q, &rand(&[1, 3, 4], 1), &rand(&[1, 2, 4], 1), 1).is_err());
        assert!(attention(&q, &rand(&[1, 3, 4], 1), &rand(&[1, 3, 4], 1), 3).is_err());
    }

    #[test]
    fn zeroed_blocks_are_identities() {
        let cfg = AttentionConfig {
            d_model: 8,
            num_heads: 2,
            ..Default::default()
        };
        let mut set = params(&cfg, 1);
        for (_, prm) in set.iter_mut() {
            prm.value.fill(0.0);
        }
        let mut g = Graph::new();
        let p = set.bind(&mut g);
        let a = g.constant(rand(&[2, 4, 8], 1));
        let b = g.constant(rand(&[2, 4, 8], 2));
        let m = msca_block(&mut g, &p, &cfg, 1, a, Some(b)).unwrap();
        assert_eq!(g.value(m.out), g.value(a));
        let s = sa_block(&mut g, &p, &cfg, 1, a).unwrap();
        assert_eq!(g.value(s.out), g.value(a));
        assert!(msca_block(&mut g, &p, &cfg, 1, a, None).is_err());
    }

    #[test]
    fn sa_single_position() {
        let cfg = AttentionConfig {
            d_model: 4,
            num_heads: 1,
            ..Default::default()
        };
        let set = params(&cfg, 4);
        let x = rand(&[1, 1, 4], 5);
        let mut g = Graph::new();
        let p = set.bind(&mut g);
        let xv = g.constant(x.clone());
        let s = sa_block(&mut g, &p, &cfg, 2, xv).unwrap();
        let wv = set.value("encoder.sa2.wv.weight").unwrap();
        for d in 0..4 {
            let proj: f64 = (0..4).map(|c| wv[[d, c]] * x[[0, 0, c]]).sum();
            assert!((g.value(s.out)[[0, 0, d]] - (proj + x[[0, 0, d]])).abs() < 1e-14);
        }
    }

    #[test]
    fn gate_limits() {
        let cfg = AttentionConfig {
            d_model: 4,
            num_heads: 1,
            ..Default::default()
        };
        let mut set = params(&cfg, 6);
        let gi = rand(&[1, 3, 4], 7);
        let wi = rand(&[1, 3, 4], 8);
        for (bias, expect_scale, tol) in [(0.0, 0.5, 1e-15), (40.0, 1.0, 1e-4)] {
            set.get_mut("encoder.gate1.fc2.weight").unwrap().value.fill(0.0);
            set.get_mut("encoder.gate1.fc2.bias").unwrap().value.fill(bias);
            let mut g = Graph::new();
            let p = set.bind(&mut g);
            let a = g.constant(gi.clone());
            let b = g.constant(wi.clone());
            let fused = fuse_branches(&mut g, &p, 1, a, Some(b)).unwrap();
            let info = mlp(&mut g, &p, "encoder.info1", a).unwrap();
            for (x, y) in g.value(fused.out).iter().zip(g.value(info).iter()) {
                assert!((x - expect_scale * y).abs() <= tol * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn encoder_wiring_and_count() {
        for direction in [MscaDirection::BottomUp, MscaDirection::TopDown] {
            for dual_branch in [true, false] {
                let cfg = AttentionConfig {
                    d_model: 8,
                    num_heads: 2,
                    layer_norm: true,
                    dual_branch,
                    direction,
                };
                let set = params(&cfg, 9);
                let mut g = Graph::new();
                let p = set.bind(&mut g);
                let levels: Vec<Var> = (0..5).map(|i| g.constant(rand(&[1, 4, 8], 20 + i))).collect();
                let out = encode(&mut g, &p, &cfg, &levels).unwrap();
                assert_eq!(out.fused.len(), 4);
                assert_eq!(out.weight.len(), if dual_branch { 4 } else { 0 });
                let expect: Vec<(usize, usize)> = match direction {
                    MscaDirection::BottomUp => vec![(1, 2), (2, 3), (3, 4), (4, 5)],
                    MscaDirection::TopDown => vec![(2, 1), (3, 2), (4, 3), (5, 4)],
                };
                assert_eq!(out.wiring, expect);
            }
        }
    }
}
