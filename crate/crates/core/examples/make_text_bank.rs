//! Writes a deterministic stand-in text bank (40 x 512, unit rows) with the
//! shipped adjective inventory.
//!
//! Rows in the same quality dimension share a common direction, so the bank
//! has the block structure a real text encoder would give, but it carries no
//! language semantics. Replace it with real CLIP text embeddings for
//! meaningful scores.
//!
//! ```text
//! cargo run --example make_text_bank -- [out.bpta]
//! ```

use bpclip::clip_head::{default_inventory, TextBank, NUM_ADJECTIVES};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const D_TEXT: usize = 512;
const SEED: u64 = 2024;

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

fn main() -> bpclip::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/assets/text_bank.bpta").to_string());
    let (template, dims) = default_inventory();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut gauss = |n: usize| Array1::from_shape_fn(n, |_| StandardNormal.sample(&mut rng));
    let mut rows = Array2::zeros((NUM_ADJECTIVES, D_TEXT));
    let mut r = 0;
    for d in &dims {
        let axis = unit(gauss(D_TEXT));
        for _ in &d.adjectives {
            let v = unit(&axis * 2.0 + &unit(gauss(D_TEXT)));
            rows.row_mut(r).assign(&v);
            r += 1;
        }
    }
    let bank = TextBank::new(rows, dims, template, format!("synthetic-block-gaussian-seed{SEED}"))?;
    bank.save(&out)?;
    println!("wrote {out} ({} x {})", NUM_ADJECTIVES, bank.d_text());
    Ok(())
}
