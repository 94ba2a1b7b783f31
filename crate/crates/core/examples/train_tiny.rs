//! Fits a tiny FR model on a generated 16-pair dataset and reports
//! training-set correlation.
//!
//! ```text
//! cargo run --release --example train_tiny -- [steps]
//! ```

use bpclip::clip_head::bundled_text_bank;
use bpclip::model::Bpclip;
use bpclip::train::{self, TrainData};
use bpclip::{data, synthetic, verify};

fn main() -> bpclip::Result<()> {
    env_logger::init();
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let dir = std::env::temp_dir().join("bpclip_train_tiny");
    let manifest_path = synthetic::write_fr_dataset(&dir, 4, 4, 64, 7)?;
    let manifest = data::load_manifest(&manifest_path, &data::ManifestOptions {
        mos_range: Some((1.0, 5.0)),
        check_files: true,
        ..Default::default()
    })?;
    let norm = data::normalize_mos(&manifest)?;
    let all: Vec<usize> = (0..norm.len()).collect();
    let samples = train::load_split(&norm, &all, None)?;

    let bank = bundled_text_bank();
    let model = Bpclip::new(verify::overfit_model(bank.d_text()))?;
    let cfg = verify::overfit_config(steps);
    let t0 = std::time::Instant::now();
    let data = TrainData { train: samples.clone(), val: vec![] };
    let out = train::train(&model, &cfg, &data, model.init_params(1), Some(&bank), None)?;
    let m = train::evaluate(&model, &out.params, Some(&bank), &samples, 64)?;
    println!(
        "{} steps in {:.1}s: loss {:.5} -> {:.5}, train SRCC {:.4}, PLCC {:.4}",
        out.steps,
        t0.elapsed().as_secs_f64(),
        out.first_loss,
        out.log.last().map(|r| r.loss).unwrap_or(f64::NAN),
        m.srcc,
        m.plcc
    );
    Ok(())
}
