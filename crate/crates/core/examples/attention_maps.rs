//! Renders the four information and four weight maps for one FR pair.
//!
//! ```text
//! cargo run --example attention_maps -- [out_dir]
//! ```

use bpclip::clip_head::bundled_text_bank;
use bpclip::heatmap;
use bpclip::model::{stack_images, Bpclip, ModelConfig};
use bpclip::{synthetic, Mode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bpclip::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "attention_maps".into());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let reference = synthetic::reference_image(&mut rng, 64, 64);
    let distorted = synthetic::distort(&reference, 0.8, &mut rng);

    let model = Bpclip::new(ModelConfig::tiny(Mode::Fr, 64))?;
    let params = model.init_params(0);
    let maps = heatmap::attention_maps(
        &model,
        &params,
        Some(&bundled_text_bank()),
        &stack_images(&[&distorted])?,
        Some(&stack_images(&[&reference])?),
    )?;
    for m in &maps {
        let (lo, hi) = m.grid.iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
        println!("{:14} grid {:?} range [{lo:.4}, {hi:.4}]", m.file_stem(), m.grid.dim());
    }
    for p in heatmap::export_maps(&maps, out.as_ref(), (64, 64), false)? {
        println!("{}", p.display());
    }
    Ok(())
}
