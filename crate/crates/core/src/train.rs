//! Loss, AdamW, cosine-annealed learning rate, the training loop and
//! evaluation.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::IxDyn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::clip_head::TextBank;
use crate::data::{self, LoadedSample, SampleManifest, SplitSpec, Splits};
use crate::error::{config, input, Result};
use crate::metrics::{MetricsReport, SplitMetrics};
use crate::model::{stack_images, Bpclip, ModelConfig};
use crate::params::{load_parameter_archive, ParameterSet};
use crate::Mode;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(
        "non-finite loss at epoch {epoch}, step {step}; last good checkpoint: {}",
        last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into())
    )]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        last_good: Option<PathBuf>,
    },
    #[error("frozen parameter `{0}` changed during training")]
    FrozenMutated(String),
    #[error("text bank changed during training")]
    BankMutated,
    #[error("manifest is {manifest} but the model is {model}")]
    ModeMismatch { manifest: Mode, model: Mode },
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
}

/// `mean((pred - target)^2)` on plain slices.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(input(format!(
            "mse needs equal non-empty lengths, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

/// Graph version of [`mse`]: `pred` and `target` are `(N,)`.
pub fn mse_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let (ps, ts) = (g.shape(pred), g.shape(target));
    if ps != ts || ps.len() != 1 || ps[0] == 0 {
        return Err(input(format!("mse needs equal (N,) shapes, got {ps:?} and {ts:?}")));
    }
    let d = g.sub(pred, target);
    let sq = g.square(d);
    Ok(g.mean_all(sq))
}

/// Closed-form cosine annealing: `eta_min + (eta_max - eta_min)(1 + cos(pi t / t_max)) / 2`.
///
/// Past `t_max` the curve keeps following the cosine, rising back to
/// `eta_max` at `2 t_max`.
pub fn cosine_lr(t: f64, t_max: f64, eta_max: f64, eta_min: f64) -> f64 {
    eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (std::f64::consts::PI * t / t_max).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    /// In epochs.
    pub t_max: f64,
    pub eta_min: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            t_max: 50.0,
            eta_min: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay, updating trainable entries only.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Applies one update with learning rate `lr`. Gradients for frozen
    /// entries are ignored.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &HashMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.raw_dim()));
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|w, m, v, &g| {
                    *w *= 1.0 - lr * wd;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Peak learning rate; defaults to 1e-4 (FR) or 3e-5 (NR).
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub scheduler: SchedulerConfig,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub crop_size: usize,
    /// Resize so the shorter side has this length before cropping.
    pub resize_shorter: Option<usize>,
    /// Split ratios; defaults to 6:2:2 (FR) or 8:2 (NR).
    pub split_ratios: Option<Vec<f64>>,
    pub repeat_index: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: None,
            weight_decay: 1e-5,
            scheduler: SchedulerConfig::default(),
            epochs: 200,
            max_steps: None,
            batch_size: 16,
            seed: 0,
            crop_size: data::DEFAULT_CROP,
            resize_shorter: None,
            split_ratios: None,
            repeat_index: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_for(&self, mode: Mode) -> f64 {
        self.lr.unwrap_or(match mode {
            Mode::Fr => 1e-4,
            Mode::Nr => 3e-5,
        })
    }

    pub fn lr_at(&self, mode: Mode, epoch: usize) -> f64 {
        cosine_lr(epoch as f64, self.scheduler.t_max, self.lr_for(mode), self.scheduler.eta_min)
    }

    pub fn split_spec(&self, mode: Mode) -> SplitSpec {
        let mut s = SplitSpec::for_mode(mode, self.seed, self.repeat_index);
        if let Some(r) = &self.split_ratios {
            s.ratios = r.clone();
        }
        s
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        let lr = self.lr_for(mode);
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(config(format!("lr must be positive, got {lr}")));
        }
        if self.epochs == 0 {
            return Err(config("epochs must be at least 1"));
        }
        if self.batch_size == 0 || self.crop_size == 0 {
            return Err(config("batch_size and crop_size must be positive"));
        }
        if self.max_steps == Some(0) {
            return Err(config("max_steps must be at least 1"));
        }
        if !(self.scheduler.t_max > 0.0) {
            return Err(config("scheduler.t_max must be positive"));
        }
        if !(self.scheduler.eta_min >= 0.0 && self.scheduler.eta_min <= lr) {
            return Err(config(format!(
                "scheduler.eta_min {} must lie in [0, lr = {lr}]",
                self.scheduler.eta_min
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_srcc: Option<f64>,
    pub val_plcc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub t: f64,
    pub lr: f64,
    pub t_max: f64,
    pub eta_max: f64,
    pub eta_min: f64,
}

/// JSON sidecar written next to each checkpoint archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub epoch: usize,
    pub step: usize,
    pub rng: RngState,
    pub scheduler: SchedulerState,
    pub val_srcc: Option<f64>,
    pub loss: f64,
}

pub fn checkpoint_sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint(path: &Path, params: &ParameterSet, meta: &CheckpointMeta) -> Result<()> {
    params.save(path)?;
    std::fs::write(checkpoint_sidecar(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Rebuilds the model from the sidecar and validates the archive against its
/// parameter layout (including the freezing policy).
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Bpclip, ParameterSet, CheckpointMeta)> {
    let path = path.as_ref();
    let sc = checkpoint_sidecar(path);
    let text = std::fs::read_to_string(&sc)
        .map_err(|e| config(format!("cannot read checkpoint sidecar {}: {e}", sc.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let model = Bpclip::new(meta.model.clone())?;
    let template = model.init_params(0);
    let params = load_parameter_archive(path, Some(&template))?;
    Ok((model, params, meta))
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<LoadedSample>,
    pub val: Vec<LoadedSample>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    pub best: ParameterSet,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    /// Loss of the very first optimizer step.
    pub first_loss: f64,
    pub steps: usize,
    pub best_checkpoint: Option<PathBuf>,
}

fn batch_tensors(patches: &[data::Patch]) -> Result<(Tensor, Option<Tensor>)> {
    let d: Vec<&ndarray::Array3<f64>> = patches.iter().map(|p| &p.distorted).collect();
    let dist = stack_images(&d)?;
    let refs: Option<Vec<&ndarray::Array3<f64>>> = patches.iter().map(|p| p.reference.as_ref()).collect();
    let reference = refs.map(|r| stack_images(&r)).transpose()?;
    Ok((dist, reference))
}

/// Deterministic center-crop predictions, in `samples` order.
pub fn predict_samples(
    model: &Bpclip,
    params: &ParameterSet,
    bank: Option<&TextBank>,
    samples: &[LoadedSample],
    crop: usize,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in samples.chunks(batch_size.max(1)) {
        let patches = chunk
            .iter()
            .map(|s| data::augment_patch(s, &mut rng, crop, false))
            .collect::<Result<Vec<_>, _>>()?;
        let (d, r) = batch_tensors(&patches)?;
        out.extend(model.predict(params, bank, &d, r.as_ref())?.scores);
    }
    Ok(out)
}

/// SRCC/PLCC of center-crop predictions against normalized MOS.
pub fn evaluate(
    model: &Bpclip,
    params: &ParameterSet,
    bank: Option<&TextBank>,
    samples: &[LoadedSample],
    crop: usize,
) -> Result<SplitMetrics> {
    let pred = predict_samples(model, params, bank, samples, crop, 16)?;
    let gt: Vec<f64> = samples.iter().map(|s| s.mos).collect();
    Ok(SplitMetrics::compute(&pred, &gt)?)
}

fn bank_bytes(bank: Option<&TextBank>) -> Vec<u8> {
    bank.map(|b| b.embeddings().iter().flat_map(|v| v.to_le_bytes()).collect())
        .unwrap_or_default()
}

/// Runs the training loop. Writes `log.jsonl`, `best.bpta` and `last.bpta`
/// (with JSON sidecars) under `out_dir` when given.
pub fn train(
    model: &Bpclip,
    cfg: &TrainConfig,
    data: &TrainData,
    mut params: ParameterSet,
    bank: Option<&TextBank>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mode = model.mode();
    cfg.validate(mode)?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit("training").into());
    }
    if let Some(b) = bank {
        model.check_bank(b)?;
    }
    let mut log_file = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(std::fs::File::create(d.join("log.jsonl"))?)
        }
        None => None,
    };
    let frozen_before = params.frozen_bytes();
    let bank_before = bank_bytes(bank);
    let eta_max = cfg.lr_for(mode);

    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut first_loss = f64::NAN;
    let mut best: Option<(f64, usize, ParameterSet)> = None;
    let mut best_path: Option<PathBuf> = None;

    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(mode, epoch);
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let patches = chunk
                .iter()
                .map(|&i| {
                    let s = &data.train[i];
                    let mut rng = data::sample_rng(cfg.seed, &s.id, epoch as u64);
                    data::augment_patch(s, &mut rng, cfg.crop_size, true)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let (d, r) = batch_tensors(&patches)?;
            let target: Vec<f64> = chunk.iter().map(|&i| data.train[i].mos).collect();

            let (mut g, pv, out) = model.run(&params, bank, &d, r.as_ref())?;
            let t = g.constant(Tensor::from_shape_vec(IxDyn(&[target.len()]), target).expect("1-d"));
            let loss = mse_loss(&mut g, out.score, t)?;
            let loss_val = g.value(loss)[[]];
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step,
                    last_good: best_path.clone(),
                }
                .into());
            }
            let mut grads = g.backward(loss);
            let named: HashMap<String, Tensor> = pv
                .iter()
                .filter_map(|(n, v)| grads.take(*v).map(|gr| (n.clone(), gr)))
                .collect();
            opt.step(&mut params, &named, lr);
            step += 1;
            if step == 1 {
                first_loss = loss_val;
            }
            loss_sum += loss_val;
            batches += 1;
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
        }

        if params.frozen_bytes() != frozen_before {
            let changed = params
                .frozen_bytes()
                .into_iter()
                .zip(&frozen_before)
                .find(|(a, b)| a != *b)
                .map(|(a, _)| a.0)
                .unwrap_or_default();
            return Err(TrainError::FrozenMutated(changed).into());
        }

        let val = if data.val.len() >= 3 {
            evaluate(model, &params, bank, &data.val, cfg.crop_size).ok()
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            step,
            loss: loss_sum / batches.max(1) as f64,
            lr,
            val_srcc: val.as_ref().map(|m| m.srcc),
            val_plcc: val.as_ref().map(|m| m.plcc),
        };
        log::info!(
            "epoch {epoch} step {step} loss {:.6} lr {lr:.3e} val_srcc {:?}",
            rec.loss,
            rec.val_srcc
        );
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }

        // Higher is better: validation SRCC when available, else negative loss.
        let key = rec.val_srcc.unwrap_or(-rec.loss);
        let improved = best.as_ref().is_none_or(|(k, _, _)| key > *k);
        let meta = CheckpointMeta {
            model: model.config.clone(),
            epoch,
            step,
            rng: RngState::of(&order_rng),
            scheduler: SchedulerState {
                t: epoch as f64,
                lr,
                t_max: cfg.scheduler.t_max,
                eta_max,
                eta_min: cfg.scheduler.eta_min,
            },
            val_srcc: rec.val_srcc,
            loss: rec.loss,
        };
        if improved {
            best = Some((key, epoch, params.clone()));
            if let Some(d) = out_dir {
                let p = d.join("best.bpta");
                save_checkpoint(&p, &params, &meta)?;
                best_path = Some(p);
            }
        }
        if let Some(d) = out_dir {
            save_checkpoint(&d.join("last.bpta"), &params, &meta)?;
        }
        log.push(rec);
        if cfg.max_steps.is_some_and(|m| step >= m) {
            break 'epochs;
        }
    }

    if bank_bytes(bank) != bank_before {
        return Err(TrainError::BankMutated.into());
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        best: best_params,
        best_epoch,
        log,
        first_loss,
        steps: step,
        best_checkpoint: best_path,
    })
}

/// Loads the images for one split assignment, resizing when configured.
pub fn load_split(manifest: &SampleManifest, indices: &[usize], resize: Option<usize>) -> Result<Vec<LoadedSample>> {
    let mut samples = data::load_samples(manifest, indices)?;
    if let Some(target) = resize {
        let mut cache: HashMap<*const ndarray::Array3<f64>, std::sync::Arc<ndarray::Array3<f64>>> = HashMap::new();
        let mut resize_shared = |img: &std::sync::Arc<ndarray::Array3<f64>>| -> Result<std::sync::Arc<ndarray::Array3<f64>>> {
            let key = std::sync::Arc::as_ptr(img);
            if let Some(r) = cache.get(&key) {
                return Ok(r.clone());
            }
            let r = std::sync::Arc::new(data::resize_shorter_side(img, target)?);
            cache.insert(key, r.clone());
            Ok(r)
        };
        for s in &mut samples {
            s.image = resize_shared(&s.image)?;
            if let Some(r) = &s.reference {
                s.reference = Some(resize_shared(r)?);
            }
        }
    }
    Ok(samples)
}

/// Normalizes MOS, splits by `cfg` and loads train/val/test images.
pub fn prepare(
    model: &Bpclip,
    cfg: &TrainConfig,
    manifest: &SampleManifest,
) -> Result<(TrainData, Vec<LoadedSample>, Splits)> {
    if manifest.meta.mode != model.mode() {
        return Err(TrainError::ModeMismatch {
            manifest: manifest.meta.mode,
            model: model.mode(),
        }
        .into());
    }
    let norm = data::normalize_mos(manifest)?;
    let splits = data::split_dataset(&norm, &cfg.split_spec(model.mode()))?;
    let train = load_split(&norm, &splits.train, cfg.resize_shorter)?;
    let val = load_split(&norm, &splits.val, cfg.resize_shorter)?;
    let test = load_split(&norm, &splits.test, cfg.resize_shorter)?;
    Ok((TrainData { train, val }, test, splits))
}

/// Aggregates per-repeat test metrics into a report.
pub fn aggregate(splits: Vec<SplitMetrics>) -> Result<MetricsReport> {
    if splits.is_empty() {
        return Err(config("no evaluation splits to aggregate"));
    }
    Ok(MetricsReport::from_splits(splits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn mse_examples() {
        let p = [0.1, 0.5, 0.9];
        assert_eq!(mse(&p, &p).unwrap(), 0.0);
        let q: Vec<f64> = p.iter().map(|x| x + 0.1).collect();
        assert!((mse(&q, &p).unwrap() - 0.01).abs() < 1e-15);
        assert!(mse(&p, &p[..2]).is_err());
    }

    #[test]
    fn mse_graph_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..5).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.gen()).collect();
        let mut g = Graph::new();
        let av = g.param(Tensor::from_shape_vec(IxDyn(&[5]), a.clone()).unwrap());
        let bv = g.constant(Tensor::from_shape_vec(IxDyn(&[5]), b.clone()).unwrap());
        let l = mse_loss(&mut g, av, bv).unwrap();
        let mut oracle = 0.0;
        for i in 0..5 {
            oracle += (a[i] - b[i]).powi(2);
        }
        assert!((g.value(l)[[]] - oracle / 5.0).abs() < 1e-15);
        let short = g.constant(Tensor::zeros(IxDyn(&[4])));
        assert!(mse_loss(&mut g, av, short).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.0, 50.0, 1e-4, 0.0), 1e-4);
        assert!((cosine_lr(50.0, 50.0, 1e-4, 1e-6) - 1e-6).abs() < 1e-12);
        assert!((cosine_lr(25.0, 50.0, 1e-4, 0.0) - 5e-5).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_and_frozen() {
        let mut set = ParameterSet::new();
        set.insert("w", Tensor::from_elem(IxDyn(&[2]), 1.0), true);
        set.insert("f", Tensor::from_elem(IxDyn(&[2]), 1.0), false);
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), Tensor::from_elem(IxDyn(&[2]), 0.5));
        grads.insert("f".to_string(), Tensor::from_elem(IxDyn(&[2]), 0.5));
        let mut opt = AdamW::new(0.1);
        opt.step(&mut set, &grads, 0.01);
        // decay 1 * (1 - 0.001), then a unit-magnitude Adam step of lr.
        let expect = 1.0 * (1.0 - 0.01 * 0.1) - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!(set.value("w").unwrap().iter().all(|v| (v - expect).abs() < 1e-15));
        assert!(set.value("f").unwrap().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate(Mode::Fr).is_ok());
        assert_eq!(c.lr_for(Mode::Nr), 3e-5);
        c.epochs = 0;
        assert!(c.validate(Mode::Fr).is_err());
        c.epochs = 1;
        c.scheduler.eta_min = 1.0;
        assert!(c.validate(Mode::Fr).is_err());
        c.scheduler.eta_min = 0.0;
        c.lr = Some(-1.0);
        assert!(c.validate(Mode::Fr).is_err());
    }
}
