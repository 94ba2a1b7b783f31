//! The `bpclip` command line.
//!
//! Exit codes: 0 on success, 2 for usage, configuration and I/O errors, 3 for
//! runtime failures (divergence, undefined metrics, failed self-checks).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::clip_head::{bundled_text_bank, load_text_bank, TextBank};
use crate::config::RunConfig;
use crate::data::{self, ManifestOptions, Polarity, SplitSpec};
use crate::error::{config, input, Error, Result};
use crate::heatmap::{self, Branch};
use crate::metrics::MetricsReport;
use crate::model::{stack_images, Bpclip, FUSED_LEVELS};
use crate::params::ParameterSet;
use crate::train::{self, load_checkpoint, TrainError};
use crate::{verify, Mode};

#[derive(Debug, Parser)]
#[command(name = "bpclip", version, about = "Image quality assessment with multiscale attention and CLIP text-space scoring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Score one image (and its reference for FR checkpoints).
    Score(ScoreArgs),
    /// Write the eight branch maps (four information, four weight) as PNGs.
    ExportAttn(ExportArgs),
    /// Run the built-in oracle and invariant checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML or JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Override a config key, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for splits, initialization, shuffling and augmentation.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train and test on this many split repeats (repeat_index 0..N).
    #[arg(long, default_value_t = 1)]
    pub repeats: u32,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Rating scale as MIN,MAX (defaults to the observed range).
    #[arg(long, value_parser = parse_range)]
    pub mos_range: Option<(f64, f64)>,
    /// The MOS column is lower-is-better (e.g. DMOS).
    #[arg(long)]
    pub lower_better: bool,
    /// Resolve manifest paths against this directory.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub text_bank: Option<PathBuf>,
    /// Evaluate every entry, or only the held-out test split.
    #[arg(long, value_parser = ["all", "test"], default_value = "all")]
    pub split: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub repeats: u32,
    #[arg(long)]
    pub resize_shorter: Option<usize>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ImageArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Text bank archive; defaults to the bundled one.
    #[arg(long)]
    pub text_bank: Option<PathBuf>,
    /// Resize so the shorter side has this length before the center crop.
    #[arg(long)]
    pub resize_shorter: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub image: ImageArgs,
    /// Adjectives listed per dimension.
    #[arg(long, default_value_t = 3)]
    pub top: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub image: ImageArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Only this encoder block (1-4).
    #[arg(long)]
    pub level: Option<usize>,
    /// Only this branch.
    #[arg(long, value_parser = ["info", "weight"])]
    pub branch: Option<String>,
    /// Also write the raw grids to attention_maps.bpta.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub text_bank: Option<PathBuf>,
    /// Include the 500-step overfit run (a few minutes).
    #[arg(long)]
    pub full: bool,
    #[arg(long)]
    pub json: bool,
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected MIN,MAX")?;
    let a: f64 = a.trim().parse().map_err(|_| format!("bad number `{a}`"))?;
    let b: f64 = b.trim().parse().map_err(|_| format!("bad number `{b}`"))?;
    Ok((a, b))
}

/// Maps an error to the documented exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) | Error::Metric(_) => 3,
        Error::Train(TrainError::NonFiniteLoss { .. } | TrainError::FrozenMutated(_) | TrainError::BankMutated) => 3,
        _ => 2,
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Score(a) => cmd_score(a),
        Command::ExportAttn(a) => cmd_export(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn bank_for(path: Option<&Path>, needed: bool) -> Result<Option<TextBank>> {
    if !needed {
        return Ok(None);
    }
    Ok(Some(match path {
        Some(p) => load_text_bank(p)?,
        None => bundled_text_bank(),
    }))
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    repeats: Vec<RepeatSummary>,
    report: Option<MetricsReport>,
}

#[derive(Debug, Serialize)]
struct RepeatSummary {
    repeat_index: u32,
    dir: PathBuf,
    steps: usize,
    best_epoch: usize,
    final_loss: f64,
    test: Option<crate::metrics::SplitMetrics>,
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let mut cfg = RunConfig::load(&a.config)?.with_overrides(&a.overrides)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let mode = cfg.model.mode;
    let manifest_path = cfg
        .data
        .manifest
        .clone()
        .ok_or_else(|| config("data.manifest is not set"))?;
    let manifest = data::load_manifest(&manifest_path, &cfg.data.manifest_options(mode))?;
    let bank = bank_for(cfg.data.text_bank.as_deref(), cfg.model.head.text_head)?;
    let model = Bpclip::new(cfg.model.clone())?;
    std::fs::create_dir_all(&a.out_dir)?;
    std::fs::write(a.out_dir.join("config.toml"), cfg.to_toml()?)?;

    let mut repeats = Vec::new();
    let mut tests = Vec::new();
    for r in 0..a.repeats.max(1) {
        let mut tc = cfg.train.clone();
        tc.repeat_index = r;
        let dir = if a.repeats > 1 {
            a.out_dir.join(format!("repeat{r}"))
        } else {
            a.out_dir.clone()
        };
        let (data, test, _) = train::prepare(&model, &tc, &manifest)?;
        let params = model.init_params(tc.seed.wrapping_add(r as u64));
        let out = train::train(&model, &tc, &data, params, bank.as_ref(), Some(&dir))?;
        let test_metrics = if test.len() >= 3 {
            Some(train::evaluate(&model, &out.best, bank.as_ref(), &test, tc.crop_size)?)
        } else {
            None
        };
        if let Some(m) = &test_metrics {
            tests.push(m.clone());
            std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(m)?)?;
        }
        if !a.json {
            println!(
                "repeat {r}: {} steps, best epoch {}, final loss {:.6}{}",
                out.steps,
                out.best_epoch,
                out.log.last().map(|l| l.loss).unwrap_or(f64::NAN),
                test_metrics
                    .as_ref()
                    .map(|m| format!(", test SRCC {:.4} PLCC {:.4}", m.srcc, m.plcc))
                    .unwrap_or_default()
            );
        }
        repeats.push(RepeatSummary {
            repeat_index: r,
            dir,
            steps: out.steps,
            best_epoch: out.best_epoch,
            final_loss: out.log.last().map(|l| l.loss).unwrap_or(f64::NAN),
            test: test_metrics,
        });
    }
    let report = (!tests.is_empty()).then(|| MetricsReport::from_splits(tests));
    if let Some(r) = &report {
        std::fs::write(a.out_dir.join("report.json"), serde_json::to_string_pretty(r)?)?;
        if !a.json {
            println!("{r}");
        }
    }
    if a.json {
        print_json(&TrainSummary { repeats, report })?;
    }
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let (model, params, _) = load_checkpoint(&a.checkpoint)?;
    let mode = model.mode();
    let opts = ManifestOptions {
        mode: Some(mode),
        polarity: if a.data.lower_better {
            Polarity::LowerBetter
        } else {
            Polarity::HigherBetter
        },
        mos_range: a.data.mos_range,
        check_files: true,
        root: a.data.data_root.clone(),
    };
    let manifest = data::normalize_mos(&data::load_manifest(&a.data.manifest, &opts)?)?;
    let bank = bank_for(a.text_bank.as_deref(), model.config.head.text_head)?;
    let (h, _) = model.config.backbone.input_size;
    let mut splits = Vec::new();
    if a.split == "all" {
        let all: Vec<usize> = (0..manifest.len()).collect();
        let samples = train::load_split(&manifest, &all, a.resize_shorter)?;
        splits.push(train::evaluate(&model, &params, bank.as_ref(), &samples, h)?);
    } else {
        for r in 0..a.repeats.max(1) {
            let s = data::split_dataset(&manifest, &SplitSpec::for_mode(mode, a.seed, r))?;
            let samples = train::load_split(&manifest, &s.test, a.resize_shorter)?;
            splits.push(train::evaluate(&model, &params, bank.as_ref(), &samples, h)?);
        }
    }
    let report = MetricsReport::from_splits(splits);
    if a.json {
        print_json(&report)?;
    } else {
        println!("{report}");
    }
    Ok(0)
}

struct Loaded {
    model: Bpclip,
    params: ParameterSet,
    bank: Option<TextBank>,
    distorted: crate::autodiff::Tensor,
    reference: Option<crate::autodiff::Tensor>,
}

fn load_pair(a: &ImageArgs) -> Result<Loaded> {
    let (model, params, _) = load_checkpoint(&a.checkpoint)?;
    match (model.mode(), &a.reference) {
        (Mode::Fr, None) => return Err(config("FR checkpoint needs --reference")),
        (Mode::Nr, Some(_)) => return Err(config("NR checkpoint does not take --reference")),
        _ => {}
    }
    let bank = bank_for(a.text_bank.as_deref(), model.config.head.text_head)?;
    let (h, w) = model.config.backbone.input_size;
    if h != w {
        return Err(config("scoring needs a square model input"));
    }
    let prep = |p: &Path| -> Result<ndarray::Array3<f64>> {
        let mut img = data::load_image(p)?;
        if let Some(t) = a.resize_shorter {
            img = data::resize_shorter_side(&img, t)?;
        }
        let sample = data::LoadedSample {
            id: p.display().to_string(),
            image_path: p.to_path_buf(),
            image: std::sync::Arc::new(img),
            reference_path: None,
            reference: None,
            mos: 0.0,
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Ok(data::augment_patch(&sample, &mut rng, h, false)?.distorted)
    };
    let d = prep(&a.image)?;
    let r = a.reference.as_deref().map(prep).transpose()?;
    if let Some(r) = &r {
        if r.shape() != d.shape() {
            return Err(input("image and reference differ in size"));
        }
    }
    Ok(Loaded {
        distorted: stack_images(&[&d])?,
        reference: r.as_ref().map(|r| stack_images(&[r])).transpose()?,
        model,
        params,
        bank,
    })
}

#[derive(Debug, Serialize)]
pub struct ScoreReport {
    pub score: f64,
    pub levels: usize,
    /// Four levels of 40 values, level-major.
    pub similarities: Vec<f64>,
    pub adjectives: Vec<String>,
    pub dimensions: Vec<DimensionScore>,
}

#[derive(Debug, Serialize)]
pub struct DimensionScore {
    pub name: String,
    /// Summed level-averaged similarity over the dimension's adjectives.
    pub weight: f64,
    pub top: Vec<(String, f64)>,
}

fn cmd_score(a: ScoreArgs) -> Result<i32> {
    let l = load_pair(&a.image)?;
    let pred = l.model.predict(&l.params, l.bank.as_ref(), &l.distorted, l.reference.as_ref())?;
    let score = pred.scores[0];
    if !score.is_finite() {
        return Err(Error::Numeric(format!("score is {score}")));
    }
    let sims: Vec<f64> = pred.similarities.iter().flat_map(|s| s.row(0).to_vec()).collect();
    let mut dimensions = Vec::new();
    let mut adjectives = Vec::new();
    if let Some(bank) = &l.bank {
        adjectives = bank.adjectives().to_vec();
        let avg: Vec<f64> = (0..40)
            .map(|k| (0..FUSED_LEVELS).map(|lv| sims[lv * 40 + k]).sum::<f64>() / FUSED_LEVELS as f64)
            .collect();
        let mut k = 0;
        for d in bank.dimensions() {
            let mut members: Vec<(String, f64)> =
                d.adjectives.iter().enumerate().map(|(j, adj)| (adj.clone(), avg[k + j])).collect();
            k += d.adjectives.len();
            let weight = members.iter().map(|m| m.1).sum();
            members.sort_by(|x, y| y.1.total_cmp(&x.1));
            members.truncate(a.top);
            dimensions.push(DimensionScore {
                name: d.name.clone(),
                weight,
                top: members,
            });
        }
    }
    let report = ScoreReport {
        score,
        levels: FUSED_LEVELS,
        similarities: sims,
        adjectives,
        dimensions,
    };
    if a.json {
        print_json(&report)?;
    } else {
        println!("score {:.6}", report.score);
        for d in &report.dimensions {
            let top: Vec<String> = d.top.iter().map(|(n, v)| format!("{n} {v:.4}")).collect();
            println!("  {:16} {:.4}  {}", d.name, d.weight, top.join(", "));
        }
    }
    Ok(0)
}

fn cmd_export(a: ExportArgs) -> Result<i32> {
    let l = load_pair(&a.image)?;
    let mut maps = heatmap::attention_maps(&l.model, &l.params, l.bank.as_ref(), &l.distorted, l.reference.as_ref())?;
    if let Some(level) = a.level {
        if !(1..=FUSED_LEVELS).contains(&level) {
            return Err(config(format!("--level must be in 1..={FUSED_LEVELS}")));
        }
        maps.retain(|m| m.level == level);
    }
    if let Some(b) = &a.branch {
        let b: Branch = b.parse()?;
        if b == Branch::Weight && !l.model.config.attention.dual_branch {
            return Err(config("single-branch model has no weight branch"));
        }
        maps.retain(|m| m.branch == b);
    }
    let (h, w) = l.model.config.backbone.input_size;
    for p in heatmap::export_maps(&maps, &a.out_dir, (h, w), a.raw)? {
        println!("{}", p.display());
    }
    Ok(0)
}

fn cmd_verify(a: VerifyArgs) -> Result<i32> {
    let bank = match &a.text_bank {
        Some(p) => load_text_bank(p)?,
        None => bundled_text_bank(),
    };
    let results = verify::run_all(Some(bank), a.full);
    let ok = results.iter().all(|r| r.passed);
    if a.json {
        print_json(&results)?;
    } else {
        for r in &results {
            println!(
                "{} {:22} {:6.2}s  {}",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.seconds,
                r.detail
            );
        }
    }
    Ok(if ok { 0 } else { 3 })
}
