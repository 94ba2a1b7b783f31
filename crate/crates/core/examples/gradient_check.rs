//! Finite-difference gradient checks on every model fragment, plus the
//! corrupted-gradient control.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use bpclip::gradcheck::{gradient_check, gradient_suite, Fragment, GradCheckOptions};
use bpclip::model::ModelConfig;
use bpclip::Mode;

fn main() -> bpclip::Result<()> {
    let opts = GradCheckOptions::default();
    for mode in [Mode::Fr, Mode::Nr] {
        for r in gradient_suite(&ModelConfig::tiny(mode, 64), &opts)? {
            println!("{mode} {:10} {:3} entries  max rel err {:.2e}  ({})", r.fragment.name(), r.checked, r.max_rel_error, r.worst);
        }
    }
    let corrupt = GradCheckOptions { corrupt: Some(1.01), ..opts };
    if let Some(r) = gradient_check(Fragment::Sdp, &ModelConfig::default(), &corrupt)? {
        println!("control (x1.01): max rel err {:.2e}, passes 1e-6: {}", r.max_rel_error, r.passes(1e-6));
    }
    Ok(())
}
