//! Scores a distorted/reference pair with a freshly initialized tiny FR
//! model and prints the per-dimension adjective distribution.
//!
//! ```text
//! cargo run --example score_pair
//! ```

use bpclip::clip_head::bundled_text_bank;
use bpclip::model::{stack_images, Bpclip, ModelConfig};
use bpclip::{synthetic, Mode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bpclip::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let reference = synthetic::reference_image(&mut rng, 64, 64);
    let distorted = synthetic::distort(&reference, 0.6, &mut rng);

    let bank = bundled_text_bank();
    let model = Bpclip::new(ModelConfig::tiny(Mode::Fr, 64))?;
    let params = model.init_params(0);
    let pred = model.predict(&params, Some(&bank), &stack_images(&[&distorted])?, Some(&stack_images(&[&reference])?))?;

    println!("score {:.4}", pred.scores[0]);
    let top = &pred.similarities[3];
    let rows = bank.row_dimensions();
    for dim in bank.dimensions() {
        let mass: f64 = (0..40).filter(|&j| rows[j] == dim.name).map(|j| top[[0, j]]).sum();
        println!("{:16} {mass:.4}", dim.name);
    }
    Ok(())
}
