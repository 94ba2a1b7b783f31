//! Full network assembly: backbone, gated pooling, dual-branch encoder and
//! text-space score head.

use ndarray::{Array2, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionConfig, EncoderOutput};
use crate::autodiff::{Graph, Tensor, Var};
use crate::backbone::{self, BackboneConfig, NUM_LEVELS};
use crate::clip_head::{self, HeadConfig, TextBank, NUM_ADJECTIVES, TAU};
use crate::error::{config, input, Result};
use crate::glp::{self, Gated};
use crate::params::{Init, ParamVars, ParameterSet};
use crate::Mode;

/// Number of fused levels (`n - 1`).
pub const FUSED_LEVELS: usize = NUM_LEVELS - 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: Mode,
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    /// Small FR/NR configuration used throughout the tests.
    pub fn tiny(mode: Mode, input: usize) -> Self {
        Self {
            mode,
            backbone: BackboneConfig::tiny(input),
            attention: AttentionConfig {
                d_model: 16,
                num_heads: 2,
                ..Default::default()
            },
            head: HeadConfig {
                d_text: 512,
                regression_hidden: 32,
                ..Default::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.attention.validate()?;
        self.head.validate()
    }

    pub fn seq_len(&self) -> usize {
        let (h, w) = self.backbone.coarsest();
        h * w
    }

    pub fn regression_width(&self) -> usize {
        FUSED_LEVELS * NUM_ADJECTIVES
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(B,)` predicted quality.
    pub score: Var,
    /// Per-level `(B, 40)` regression inputs.
    pub similarities: Vec<Var>,
    /// Per-level `(B, 40)` raw cosines; empty without the text head.
    pub cosines: Vec<Var>,
    /// Distorted-image backbone levels.
    pub pyramid: Vec<Var>,
    pub gated: Vec<Gated>,
    /// `G_1..G_5` after positional encoding.
    pub pooled: Vec<Var>,
    pub encoder: EncoderOutput,
    /// The regression input `(B, 160)` width, recorded for shape checks.
    pub regression_width: usize,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub scores: Vec<f64>,
    /// Four `(B, 40)` similarity matrices.
    pub similarities: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct Bpclip {
    pub config: ModelConfig,
}

impl Bpclip {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    /// Fresh weights from `seed`, with normalization layers frozen.
    pub fn init_params(&self, seed: u64) -> ParameterSet {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut set = ParameterSet::new();
        backbone::init_params(&cfg.backbone, &mut init, &mut set);
        glp::init_params(
            cfg.mode,
            &cfg.backbone.stage_channels,
            cfg.attention.d_model,
            cfg.seq_len(),
            &mut init,
            &mut set,
        );
        attention::init_params(&cfg.attention, FUSED_LEVELS, &mut init, &mut set);
        clip_head::init_params(&cfg.head, cfg.attention.d_model, FUSED_LEVELS, &mut init, &mut set);
        backbone::set_norm_frozen(set)
    }

    /// Per-channel normalization of `[0, 1]` images with the configured
    /// statistics.
    pub fn preprocess(&self, image: &Tensor) -> Tensor {
        backbone::normalize_image(image, &self.config.backbone.norm_mean, &self.config.backbone.norm_std)
    }

    pub fn check_bank(&self, bank: &TextBank) -> Result<()> {
        if bank.d_text() != self.config.head.d_text {
            return Err(config(format!(
                "text bank width {} does not match model d_text {}",
                bank.d_text(),
                self.config.head.d_text
            )));
        }
        Ok(())
    }

    /// Forward over normalized images. `bank` is the `(40, d_text)` constant
    /// and is required when the text head is enabled.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        bank: Option<Var>,
        distorted: Var,
        reference: Option<Var>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let ds = g.shape(distorted).to_vec();
        if ds.len() != 4 {
            return Err(input(format!("expected (B, 3, H, W) image, got {ds:?}")));
        }
        if (ds[2], ds[3]) != cfg.backbone.input_size {
            return Err(input(format!(
                "image is {}x{}, model expects {}x{}",
                ds[2], ds[3], cfg.backbone.input_size.0, cfg.backbone.input_size.1
            )));
        }
        let b = ds[0];

        // FR pairs share one backbone pass: [distorted; reference] on the batch axis.
        let (dist_levels, ref_levels) = match (cfg.mode, reference) {
            (Mode::Fr, Some(r)) => {
                if g.shape(r) != ds.as_slice() {
                    return Err(input(format!(
                        "reference {:?} and distorted {ds:?} differ in shape",
                        g.shape(r)
                    )));
                }
                let both = g.concat(&[distorted, r], 0);
                let levels = backbone::forward(g, p, &cfg.backbone, both)?;
                let d: Vec<Var> = levels.iter().map(|&l| g.narrow(l, 0, 0, b)).collect();
                let r: Vec<Var> = levels.iter().map(|&l| g.narrow(l, 0, b, b)).collect();
                (d, Some(r))
            }
            (Mode::Fr, None) => return Err(config("FR model needs a reference image")),
            (Mode::Nr, Some(_)) => return Err(config("NR model does not take a reference image")),
            (Mode::Nr, None) => (backbone::forward(g, p, &cfg.backbone, distorted)?, None),
        };

        let target = BackboneConfig::level_size(ds[2], ds[3], NUM_LEVELS);
        let pos = p.get(glp::POS_EMBED)?;
        let mut gated = Vec::with_capacity(NUM_LEVELS);
        let mut pooled = Vec::with_capacity(NUM_LEVELS);
        for i in 0..NUM_LEVELS {
            let gt = match &ref_levels {
                Some(r) => glp::gated_fuse_fr(g, p, i + 1, dist_levels[i], r[i])?,
                None => glp::gated_fuse_nr(g, p, i + 1, dist_levels[i])?,
            };
            let seq = glp::pool_project(g, p, i + 1, gt.out, target)?;
            pooled.push(glp::add_positional(g, seq, pos)?);
            gated.push(gt);
        }

        let encoder = attention::encode(g, p, &cfg.attention, &pooled)?;

        let mut similarities = Vec::with_capacity(FUSED_LEVELS);
        let mut cosines = Vec::new();
        for (k, &fused) in encoder.fused.iter().enumerate() {
            let x = clip_head::project_to_clip(g, p, k + 1, fused)?;
            if cfg.head.text_head {
                let bank = bank.ok_or_else(|| config("text head enabled but no text bank supplied"))?;
                let tau = p.get(TAU)?;
                let s = clip_head::adjective_similarity(g, x, bank, tau)?;
                cosines.push(s.cosine);
                similarities.push(s.probs);
            } else {
                similarities.push(x);
            }
        }
        let regression_width = similarities.iter().map(|s| g.shape(*s)[1]).sum();
        let score = clip_head::regress_score(g, p, &similarities, FUSED_LEVELS)?;
        Ok(ForwardOutput {
            score,
            similarities,
            cosines,
            pyramid: dist_levels,
            gated,
            pooled,
            encoder,
            regression_width,
        })
    }

    /// Builds a graph for `[0, 1]` images, binding `params` and the bank.
    pub fn run(
        &self,
        params: &ParameterSet,
        bank: Option<&TextBank>,
        distorted: &Tensor,
        reference: Option<&Tensor>,
    ) -> Result<(Graph, ParamVars, ForwardOutput)> {
        let mut g = Graph::new();
        let pv = params.bind(&mut g);
        let bank_var = match bank {
            Some(b) => {
                self.check_bank(b)?;
                Some(g.constant(b.embeddings().clone().into_dyn()))
            }
            None => None,
        };
        let d = g.constant(self.preprocess(distorted));
        let r = reference.map(|r| g.constant(self.preprocess(r)));
        let out = self.forward(&mut g, &pv, bank_var, d, r)?;
        Ok((g, pv, out))
    }

    pub fn predict(
        &self,
        params: &ParameterSet,
        bank: Option<&TextBank>,
        distorted: &Tensor,
        reference: Option<&Tensor>,
    ) -> Result<Prediction> {
        let (g, _, out) = self.run(params, bank, distorted, reference)?;
        Ok(Prediction {
            scores: g.value(out.score).iter().copied().collect(),
            similarities: out
                .similarities
                .iter()
                .map(|s| g.value(*s).clone().into_dimensionality().expect("2-d"))
                .collect(),
        })
    }
}

/// Stack `(3, H, W)` images into a `(B, 3, H, W)` batch.
pub fn stack_images(images: &[&ndarray::Array3<f64>]) -> Result<Tensor> {
    let views: Vec<_> = images.iter().map(|i| i.view().insert_axis(Axis(0))).collect();
    let batch = ndarray::concatenate(Axis(0), &views).map_err(|e| input(format!("cannot batch images: {e}")))?;
    Ok(batch.into_dyn())
}

pub fn scalar(v: f64) -> Tensor {
    Tensor::from_elem(IxDyn(&[1]), v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip_head::default_inventory;
    use rand::Rng;

    fn bank(d: usize) -> TextBank {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut e = Array2::from_shape_fn((40, d), |_| rng.gen_range(-1.0..1.0));
        for mut r in e.axis_iter_mut(Axis(0)) {
            let n: f64 = r.dot(&r);
            let n = n.sqrt();
            r /= n;
        }
        let (t, dims) = default_inventory();
        TextBank::new(e, dims, t, "test").unwrap()
    }

    fn image(seed: u64, s: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_shape_fn(IxDyn(&[2, 3, s, s]), |_| rng.gen::<f64>())
    }

    #[test]
    fn fr_forward_shapes() {
        let mut cfg = ModelConfig::tiny(Mode::Fr, 64);
        cfg.head.d_text = 32;
        let m = Bpclip::new(cfg).unwrap();
        let params = m.init_params(1);
        let bank = bank(32);
        let (d, r) = (image(1, 64), image(2, 64));
        let (g, _, out) = m.run(&params, Some(&bank), &d, Some(&r)).unwrap();
        assert_eq!(out.pooled.len(), 5);
        for p in &out.pooled {
            assert_eq!(g.shape(*p), &[2, 4, 16]);
        }
        assert_eq!(out.encoder.fused.len(), 4);
        assert_eq!(out.regression_width, 160);
        assert_eq!(g.shape(out.score), &[2]);
        assert!(g.value(out.score).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mode_mismatch() {
        let mut cfg = ModelConfig::tiny(Mode::Fr, 32);
        cfg.head.d_text = 8;
        let m = Bpclip::new(cfg.clone()).unwrap();
        let p = m.init_params(1);
        let b = bank(8);
        assert!(matches!(m.predict(&p, Some(&b), &image(1, 32), None), Err(crate::Error::Config(_))));
        cfg.mode = Mode::Nr;
        let m = Bpclip::new(cfg).unwrap();
        let p = m.init_params(1);
        let img = image(1, 32);
        assert!(matches!(m.predict(&p, Some(&b), &img, Some(&img)), Err(crate::Error::Config(_))));
        assert_eq!(m.predict(&p, Some(&b), &img, None).unwrap().scores.len(), 2);
    }

    #[test]
    fn batch_items_are_independent() {
        let mut cfg = ModelConfig::tiny(Mode::Nr, 32);
        cfg.head.d_text = 8;
        let m = Bpclip::new(cfg).unwrap();
        let p = m.init_params(3);
        let b = bank(8);
        let img = image(4, 32);
        let mut swapped = img.clone();
        swapped.index_axis_mut(Axis(0), 0).assign(&img.index_axis(Axis(0), 1));
        swapped.index_axis_mut(Axis(0), 1).assign(&img.index_axis(Axis(0), 0));
        let a = m.predict(&p, Some(&b), &img, None).unwrap().scores;
        let s = m.predict(&p, Some(&b), &swapped, None).unwrap().scores;
        assert!((a[0] - s[1]).abs() < 1e-12 && (a[1] - s[0]).abs() < 1e-12);
    }
}
