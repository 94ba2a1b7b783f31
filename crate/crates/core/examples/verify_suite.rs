//! Runs the fast self-check suite against the bundled text bank.
//!
//! ```text
//! cargo run --release --example verify_suite
//! ```

use bpclip::clip_head::bundled_text_bank;
use bpclip::verify;

fn main() {
    let results = verify::run_all(Some(bundled_text_bank()), false);
    for r in &results {
        println!("{} {:22} {:6.2}s  {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.seconds, r.detail);
    }
    if results.iter().any(|r| !r.passed) {
        std::process::exit(1);
    }
}
