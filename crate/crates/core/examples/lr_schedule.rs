//! Prints the per-epoch learning rate for the FR and NR defaults.
//!
//! ```text
//! cargo run --example lr_schedule
//! ```

use bpclip::train::TrainConfig;
use bpclip::Mode;

fn main() {
    let cfg = TrainConfig::default();
    println!("epoch  FR          NR");
    for epoch in (0..=100).step_by(10) {
        println!("{epoch:5}  {:.4e}  {:.4e}", cfg.lr_at(Mode::Fr, epoch), cfg.lr_at(Mode::Nr, epoch));
    }
}
