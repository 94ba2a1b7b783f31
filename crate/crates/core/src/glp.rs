//! Gated local pooling: sigmoid-gated fusion of each backbone level followed
//! by window averaging to the coarsest grid and a channel projection to the
//! shared width `D`.
//!
//! The gate `phi_i` is a bottleneck `conv3x3 (C -> max(C/4, 1)) -> GELU ->
//! conv1x1 (-> 1)`, giving one spatial mask per level that multiplies every
//! channel of the gated value. Gating runs at the level's native resolution;
//! pooling comes after.
//!
//! Parameters live under `glp.level{i}.`; the positional encoding shared by
//! all levels is the single tensor `glp.pos_embed`.

use crate::autodiff::{Graph, Var};
use crate::error::{config, input, Result};
use crate::params::{zeros, Init, ParamVars, ParameterSet};
use crate::Mode;

pub const POS_EMBED: &str = "glp.pos_embed";

pub fn bottleneck_width(channels: usize) -> usize {
    (channels / 4).max(1)
}

/// Width of the gated features at a level: `3C` for FR, `C` for NR.
pub fn gated_width(mode: Mode, channels: usize) -> usize {
    match mode {
        Mode::Fr => 3 * channels,
        Mode::Nr => channels,
    }
}

pub fn prefix(level: usize) -> String {
    format!("glp.level{level}")
}

pub fn init_params(
    mode: Mode,
    channels: &[usize],
    d_model: usize,
    seq_len: usize,
    init: &mut Init,
    set: &mut ParameterSet,
) {
    for (i, &c) in channels.iter().enumerate() {
        let p = prefix(i + 1);
        let m = bottleneck_width(c);
        set.insert(format!("{p}.mask.conv1.weight"), init.fan_in_uniform(&[m, c, 3, 3], c * 9), true);
        set.insert(format!("{p}.mask.conv1.bias"), zeros(&[m]), true);
        set.insert(format!("{p}.mask.conv2.weight"), init.fan_in_uniform(&[1, m, 1, 1], m), true);
        set.insert(format!("{p}.mask.conv2.bias"), zeros(&[1]), true);
        if mode == Mode::Nr {
            set.insert(format!("{p}.value.weight"), init.fan_in_uniform(&[c, c, 1, 1], c), true);
        }
        let cw = gated_width(mode, c);
        set.insert(format!("{p}.proj.weight"), init.fan_in_uniform(&[d_model, cw], cw), true);
        set.insert(format!("{p}.proj.bias"), zeros(&[d_model]), true);
    }
    set.insert(POS_EMBED, init.normal(&[seq_len, d_model], 0.02), true);
}

/// `sigmoid(phi_i(x))`, shaped `(B, 1, H, W)`.
pub fn mask(g: &mut Graph, p: &ParamVars, level: usize, x: Var) -> Result<Var> {
    let pre = prefix(level);
    let w1 = p.get(&format!("{pre}.mask.conv1.weight"))?;
    let b1 = p.get(&format!("{pre}.mask.conv1.bias"))?;
    let w2 = p.get(&format!("{pre}.mask.conv2.weight"))?;
    let b2 = p.get(&format!("{pre}.mask.conv2.bias"))?;
    if g.shape(x).len() != 4 || g.shape(x)[1] != g.shape(w1)[1] {
        return Err(config(format!(
            "level {level} gate expects {} channels, got shape {:?}",
            g.shape(w1)[1],
            g.shape(x)
        )));
    }
    let h = g.conv2d(x, w1, Some(b1), 1, 1);
    let h = g.gelu(h);
    let logits = g.conv2d(h, w2, Some(b2), 1, 0);
    Ok(g.sigmoid(logits))
}

#[derive(Debug, Clone, Copy)]
pub struct Gated {
    pub out: Var,
    pub mask: Var,
}

/// `sigmoid(phi(|Fd - Fr|)) * (Fd ++ Fr ++ |Fd - Fr|)`.
pub fn gated_fuse_fr(g: &mut Graph, p: &ParamVars, level: usize, fd: Var, fr: Var) -> Result<Gated> {
    if g.shape(fd) != g.shape(fr) {
        return Err(input(format!(
            "distorted/reference features differ in shape: {:?} vs {:?}",
            g.shape(fd),
            g.shape(fr)
        )));
    }
    let diff = g.sub(fd, fr);
    let diff = g.abs(diff);
    let m = mask(g, p, level, diff)?;
    let cat = g.concat(&[fd, fr, diff], 1);
    Ok(Gated {
        out: g.mul(m, cat),
        mask: m,
    })
}

/// `sigmoid(phi(F)) * (W_f F)` with `W_f` a bias-free 1x1 convolution.
pub fn gated_fuse_nr(g: &mut Graph, p: &ParamVars, level: usize, f: Var) -> Result<Gated> {
    let wf = p.get(&format!("{}.value.weight", prefix(level))).map_err(|_| {
        config(format!(
            "level {level} has no NR value map; the model is configured for FR"
        ))
    })?;
    let m = mask(g, p, level, f)?;
    let v = g.conv2d(f, wf, None, 1, 0);
    Ok(Gated {
        out: g.mul(m, v),
        mask: m,
    })
}

/// Window-average `fmask` down to `target` then project channels to `D`,
/// returning the flattened sequence `(B, H_t * W_t, D)`.
pub fn pool_project(
    g: &mut Graph,
    p: &ParamVars,
    level: usize,
    fmask: Var,
    target: (usize, usize),
) -> Result<Var> {
    let s = g.shape(fmask).to_vec();
    if s.len() != 4 {
        return Err(input(format!("expected (B, C, H, W), got {s:?}")));
    }
    let (th, tw) = target;
    if th == 0 || tw == 0 || !s[2].is_multiple_of(th) || !s[3].is_multiple_of(tw) {
        return Err(input(format!(
            "level {level}: {}x{} is not a multiple of the {th}x{tw} target grid",
            s[2], s[3]
        )));
    }
    let pooled = g.avg_pool2d(fmask, (s[2] / th, s[3] / tw));
    let seq = g.permute(pooled, &[0, 2, 3, 1]);
    let seq = g.reshape(seq, &[s[0], th * tw, s[1]]);
    let pre = prefix(level);
    let w = p.get(&format!("{pre}.proj.weight"))?;
    let b = p.get(&format!("{pre}.proj.bias"))?;
    if g.shape(w)[1] != s[1] {
        return Err(config(format!(
            "level {level} projection expects {} channels, got {}",
            g.shape(w)[1],
            s[1]
        )));
    }
    Ok(g.linear(seq, w, Some(b)))
}

/// `G_i + P`, broadcasting `P: (L, D)` over the batch.
pub fn add_positional(g: &mut Graph, gi: Var, pos: Var) -> Result<Var> {
    let gs = g.shape(gi);
    let ps = g.shape(pos);
    if gs.len() != 3 || ps.len() != 2 || gs[1..] != ps[..] {
        return Err(config(format!(
            "positional encoding {ps:?} does not match features {gs:?}"
        )));
    }
    Ok(g.add(gi, pos))
}
