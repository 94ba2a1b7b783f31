//! Five-level convolutional feature extractor.
//!
//! Two variants share the tap contract `level i = (B, C_i, H/2^i, W/2^i)`:
//!
//! * `tiny`: five stride-2 `conv3x3 -> norm -> relu` stages, used for tests
//!   and desk-scale training.
//! * `resnet50-like`: the standard bottleneck ResNet-50 tapped after the stem
//!   and after each of `layer1..layer4`. Parameter names follow the usual
//!   `conv1`/`bn1`/`layerK.J.convN`/`downsample.{0,1}` scheme under a
//!   `backbone.` prefix so converted weights load directly.
//!
//! Normalization layers always run on their stored running statistics; the
//! statistics are never updated.

use ndarray::{Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{config, input, Result};
use crate::params::{ones, zeros, Init, ParamVars, ParameterSet};

pub const NUM_LEVELS: usize = 5;
pub const RESNET50_CHANNELS: [usize; NUM_LEVELS] = [64, 256, 512, 1024, 2048];
const RESNET50_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const NORM_EPS: f64 = 1e-5;

/// ImageNet channel statistics.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneVariant {
    #[default]
    Tiny,
    Resnet50Like,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub stage_channels: Vec<usize>,
    /// (H, W) of the network input in pixels.
    pub input_size: (usize, usize),
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            variant: BackboneVariant::Tiny,
            stage_channels: vec![8, 16, 32, 64, 128],
            input_size: (384, 384),
            norm_mean: IMAGENET_MEAN,
            norm_std: IMAGENET_STD,
        }
    }
}

impl BackboneConfig {
    pub fn tiny(input: usize) -> Self {
        Self {
            input_size: (input, input),
            ..Self::default()
        }
    }

    pub fn resnet50_like(input: usize) -> Self {
        Self {
            variant: BackboneVariant::Resnet50Like,
            stage_channels: RESNET50_CHANNELS.to_vec(),
            input_size: (input, input),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != NUM_LEVELS {
            return Err(config(format!(
                "backbone needs exactly {NUM_LEVELS} stages, got {}",
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.contains(&0) {
            return Err(config("stage channel counts must be positive"));
        }
        if self.variant == BackboneVariant::Resnet50Like && self.stage_channels != RESNET50_CHANNELS {
            return Err(config(format!(
                "resnet50-like backbone has fixed widths {RESNET50_CHANNELS:?}"
            )));
        }
        let (h, w) = self.input_size;
        let stride = 1 << NUM_LEVELS;
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return Err(config(format!(
                "input size {h}x{w} must be a positive multiple of {stride}"
            )));
        }
        if self.norm_std.iter().any(|s| *s <= 0.0) {
            return Err(config("normalization std must be positive"));
        }
        Ok(())
    }

    /// Spatial size of level `i` (1-based) for an `h x w` input.
    pub fn level_size(h: usize, w: usize, level: usize) -> (usize, usize) {
        (h >> level, w >> level)
    }

    pub fn coarsest(&self) -> (usize, usize) {
        Self::level_size(self.input_size.0, self.input_size.1, NUM_LEVELS)
    }
}

/// The five backbone taps, level `i` shaped `(B, C_i, H/2^i, W/2^i)`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

/// Per-channel `(x - mean) / std` on a `(B, 3, H, W)` image in `[0, 1]`.
pub fn normalize_image(image: &Tensor, mean: &[f64; 3], std: &[f64; 3]) -> Tensor {
    let mut out = image.clone();
    for (c, mut plane) in out.axis_iter_mut(Axis(1)).enumerate() {
        plane.mapv_inplace(|v| (v - mean[c]) / std[c]);
    }
    out
}

/// Adds freshly initialized backbone parameters to `set`.
pub fn init_params(cfg: &BackboneConfig, init: &mut Init, set: &mut ParameterSet) {
    match cfg.variant {
        BackboneVariant::Tiny => {
            let mut cin = 3;
            for (i, &c) in cfg.stage_channels.iter().enumerate() {
                let p = format!("backbone.stage{}", i + 1);
                set.insert(
                    format!("{p}.conv.weight"),
                    init.kaiming_normal(&[c, cin, 3, 3], cin * 9),
                    true,
                );
                set.insert(format!("{p}.conv.bias"), zeros(&[c]), true);
                insert_norm(set, &format!("{p}.norm"), c);
                cin = c;
            }
        }
        BackboneVariant::Resnet50Like => {
            set.insert(
                "backbone.conv1.weight",
                init.kaiming_normal(&[64, 3, 7, 7], 3 * 49),
                true,
            );
            insert_norm(set, "backbone.bn1", 64);
            let mut cin = 64;
            for (li, &blocks) in RESNET50_BLOCKS.iter().enumerate() {
                let width = 64 << li;
                let cout = width * 4;
                for bi in 0..blocks {
                    let p = format!("backbone.layer{}.{bi}", li + 1);
                    set.insert(
                        format!("{p}.conv1.weight"),
                        init.kaiming_normal(&[width, cin, 1, 1], cin),
                        true,
                    );
                    insert_norm(set, &format!("{p}.bn1"), width);
                    set.insert(
                        format!("{p}.conv2.weight"),
                        init.kaiming_normal(&[width, width, 3, 3], width * 9),
                        true,
                    );
                    insert_norm(set, &format!("{p}.bn2"), width);
                    set.insert(
                        format!("{p}.conv3.weight"),
                        init.kaiming_normal(&[cout, width, 1, 1], width),
                        true,
                    );
                    insert_norm(set, &format!("{p}.bn3"), cout);
                    if bi == 0 {
                        set.insert(
                            format!("{p}.downsample.0.weight"),
                            init.kaiming_normal(&[cout, cin, 1, 1], cin),
                            true,
                        );
                        insert_norm(set, &format!("{p}.downsample.1"), cout);
                    }
                    cin = cout;
                }
            }
        }
    }
}

fn insert_norm(set: &mut ParameterSet, prefix: &str, c: usize) {
    set.insert(format!("{prefix}.weight"), ones(&[c]), true);
    set.insert(format!("{prefix}.bias"), zeros(&[c]), true);
    set.insert(format!("{prefix}.running_mean"), zeros(&[c]), false);
    set.insert(format!("{prefix}.running_var"), ones(&[c]), false);
}

/// True for normalization-layer tensors (statistics and affine terms).
pub fn is_norm_param(name: &str) -> bool {
    if !name.starts_with("backbone.") {
        return false;
    }
    let segs: Vec<&str> = name.split('.').collect();
    segs.iter()
        .any(|s| s.starts_with("bn") || s.starts_with("norm"))
        || segs.windows(2).any(|w| w == ["downsample", "1"])
}

/// Flags every normalization tensor as non-trainable. Everything else keeps
/// its current flag.
pub fn set_norm_frozen(mut params: ParameterSet) -> ParameterSet {
    for (name, p) in params.iter_mut() {
        if is_norm_param(name) {
            p.trainable = false;
        }
    }
    params
}

fn frozen_norm(g: &mut Graph, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let rm = p.get(&format!("{prefix}.running_mean"))?;
    let rv = p.get(&format!("{prefix}.running_var"))?;
    let c = g.shape(w)[0];
    let eps = g.constant(Tensor::from_elem(IxDyn(&[1]), NORM_EPS));
    let var = g.add(rv, eps);
    let sd = g.sqrt(var);
    let scale = g.div(w, sd);
    let ms = g.mul(rm, scale);
    let shift = g.sub(b, ms);
    let scale = g.reshape(scale, &[1, c, 1, 1]);
    let shift = g.reshape(shift, &[1, c, 1, 1]);
    let y = g.mul(x, scale);
    Ok(g.add(y, shift))
}

fn conv(g: &mut Graph, p: &ParamVars, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let bname = format!("{prefix}.bias");
    let b = if p.has(&bname) { Some(p.get(&bname)?) } else { None };
    if g.shape(x)[1] != g.shape(w)[1] {
        return Err(config(format!(
            "`{prefix}` expects {} input channels, got {}",
            g.shape(w)[1],
            g.shape(x)[1]
        )));
    }
    Ok(g.conv2d(x, w, b, stride, pad))
}

/// Graph-level forward over an already normalized `(B, 3, H, W)` image.
pub fn forward(g: &mut Graph, p: &ParamVars, cfg: &BackboneConfig, image: Var) -> Result<Vec<Var>> {
    let shape = g.shape(image).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(input(format!("backbone expects (B, 3, H, W), got {shape:?}")));
    }
    let stride = 1 << NUM_LEVELS;
    if !shape[2].is_multiple_of(stride) || !shape[3].is_multiple_of(stride) || shape[2] == 0 || shape[3] == 0 {
        return Err(input(format!(
            "image {}x{} is not a positive multiple of {stride}",
            shape[2], shape[3]
        )));
    }
    if g.value(image).iter().any(|v| !v.is_finite()) {
        return Err(input("image contains non-finite values"));
    }
    let mut levels = Vec::with_capacity(NUM_LEVELS);
    match cfg.variant {
        BackboneVariant::Tiny => {
            let mut x = image;
            for i in 1..=NUM_LEVELS {
                let pre = format!("backbone.stage{i}");
                let y = conv(g, p, &format!("{pre}.conv"), x, 2, 1)?;
                let y = frozen_norm(g, p, &format!("{pre}.norm"), y)?;
                x = g.relu(y);
                levels.push(x);
            }
        }
        BackboneVariant::Resnet50Like => {
            let y = conv(g, p, "backbone.conv1", image, 2, 3)?;
            let y = frozen_norm(g, p, "backbone.bn1", y)?;
            let mut x = g.relu(y);
            levels.push(x);
            x = g.max_pool2d(x);
            for (li, &blocks) in RESNET50_BLOCKS.iter().enumerate() {
                for bi in 0..blocks {
                    let stride = if bi == 0 && li > 0 { 2 } else { 1 };
                    x = bottleneck(g, p, &format!("backbone.layer{}.{bi}", li + 1), x, stride)?;
                }
                levels.push(x);
            }
        }
    }
    Ok(levels)
}

fn bottleneck(g: &mut Graph, p: &ParamVars, pre: &str, x: Var, stride: usize) -> Result<Var> {
    let y = conv(g, p, &format!("{pre}.conv1"), x, 1, 0)?;
    let y = frozen_norm(g, p, &format!("{pre}.bn1"), y)?;
    let y = g.relu(y);
    let y = conv(g, p, &format!("{pre}.conv2"), y, stride, 1)?;
    let y = frozen_norm(g, p, &format!("{pre}.bn2"), y)?;
    let y = g.relu(y);
    let y = conv(g, p, &format!("{pre}.conv3"), y, 1, 0)?;
    let y = frozen_norm(g, p, &format!("{pre}.bn3"), y)?;
    let skip = if p.has(&format!("{pre}.downsample.0.weight")) {
        let s = conv(g, p, &format!("{pre}.downsample.0"), x, stride, 0)?;
        frozen_norm(g, p, &format!("{pre}.downsample.1"), s)?
    } else {
        x
    };
    let sum = g.add(y, skip);
    Ok(g.relu(sum))
}

/// Array-level forward: validates `params` against `cfg` and returns the
/// pyramid values.
pub fn backbone_forward(image: &Tensor, params: &ParameterSet, cfg: &BackboneConfig) -> Result<FeaturePyramid> {
    cfg.validate()?;
    check_params(params, cfg)?;
    let mut g = Graph::new();
    let pv = params.bind(&mut g);
    let x = g.constant(image.clone());
    let levels = forward(&mut g, &pv, cfg, x)?;
    Ok(FeaturePyramid {
        levels: levels.into_iter().map(|v| g.value(v).clone()).collect(),
    })
}

/// Shape check of the backbone tensors in `params` against a fresh template.
pub fn check_params(params: &ParameterSet, cfg: &BackboneConfig) -> Result<()> {
    let mut tmpl = ParameterSet::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    init_params(cfg, &mut Init { rng: &mut rng }, &mut tmpl);
    for (name, t) in tmpl.iter() {
        let found = params
            .get(name)
            .ok_or_else(|| config(format!("backbone parameter `{name}` missing")))?;
        if found.value.shape() != t.value.shape() {
            return Err(config(format!(
                "backbone parameter `{name}` has shape {:?}, config implies {:?}",
                found.value.shape(),
                t.value.shape()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(cfg: &BackboneConfig, seed: u64) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParameterSet::new();
        init_params(cfg, &mut Init { rng: &mut rng }, &mut set);
        set
    }

    #[test]
    fn tiny_32_level_sizes() {
        let cfg = BackboneConfig::tiny(32);
        let p = params(&cfg, 1);
        let img = Tensor::from_elem(IxDyn(&[2, 3, 32, 32]), 0.3);
        let pyr = backbone_forward(&img, &p, &cfg).unwrap();
        let sizes: Vec<usize> = pyr.levels.iter().map(|l| l.shape()[2]).collect();
        assert_eq!(sizes, vec![16, 8, 4, 2, 1]);
        for (l, c) in pyr.levels.iter().zip(&cfg.stage_channels) {
            assert_eq!(l.shape()[0], 2);
            assert_eq!(l.shape()[1], *c);
        }
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_pyramid() {
        let cfg = BackboneConfig::tiny(32);
        let p = params(&cfg, 7);
        let img = Tensor::zeros(IxDyn(&[1, 3, 32, 32]));
        let pyr = backbone_forward(&img, &p, &cfg).unwrap();
        assert!(pyr.levels.iter().all(|l| l.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn deterministic() {
        let cfg = BackboneConfig::tiny(64);
        let p = params(&cfg, 3);
        let img = Tensor::from_shape_fn(IxDyn(&[1, 3, 64, 64]), |ix| ((ix[2] * 7 + ix[3]) % 13) as f64 / 13.0);
        let a = backbone_forward(&img, &p, &cfg).unwrap();
        let b = backbone_forward(&img, &p, &cfg).unwrap();
        for (x, y) in a.levels.iter().zip(&b.levels) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = BackboneConfig::tiny(32);
        let p = params(&cfg, 1);
        let mut img = Tensor::zeros(IxDyn(&[1, 3, 32, 32]));
        img[[0, 0, 0, 0]] = f64::NAN;
        assert!(matches!(backbone_forward(&img, &p, &cfg), Err(crate::Error::Input(_))));
        let wrong = params(&BackboneConfig { stage_channels: vec![4, 16, 32, 64, 128], ..cfg.clone() }, 1);
        assert!(matches!(backbone_forward(&Tensor::zeros(IxDyn(&[1, 3, 32, 32])), &wrong, &cfg), Err(crate::Error::Config(_))));
        let bad = BackboneConfig { input_size: (40, 32), ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn norm_freezing() {
        let cfg = BackboneConfig::tiny(32);
        let p = set_norm_frozen(params(&cfg, 1));
        for (name, prm) in p.iter() {
            assert_eq!(prm.trainable, !name.contains(".norm."), "{name}");
        }
        let mut plain = ParameterSet::new();
        plain.insert("head.fc.weight", zeros(&[2, 2]), true);
        assert_eq!(set_norm_frozen(plain.clone()), plain);
        assert!(is_norm_param("backbone.layer1.0.downsample.1.running_var"));
        assert!(!is_norm_param("backbone.layer1.0.downsample.0.weight"));
    }

    #[test]
    fn resnet50_like_taps() {
        let cfg = BackboneConfig::resnet50_like(32);
        let p = params(&cfg, 2);
        let img = Tensor::from_elem(IxDyn(&[1, 3, 32, 32]), 0.1);
        let pyr = backbone_forward(&img, &p, &cfg).unwrap();
        let shapes: Vec<Vec<usize>> = pyr.levels.iter().map(|l| l.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 64, 16, 16],
                vec![1, 256, 8, 8],
                vec![1, 512, 4, 4],
                vec![1, 1024, 2, 2],
                vec![1, 2048, 1, 1]
            ]
        );
        assert!(pyr.levels.iter().all(|l| l.iter().all(|v| v.is_finite())));
    }
}
