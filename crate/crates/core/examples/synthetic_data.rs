//! Generates a small synthetic FR or NR dataset with a CSV manifest.
//!
//! ```text
//! cargo run --example synthetic_data -- fr out/fr_data
//! cargo run --example synthetic_data -- nr out/nr_data
//! ```

use std::path::PathBuf;

use bpclip::synthetic;

fn main() -> bpclip::Result<()> {
    let mut args = std::env::args().skip(1);
    let mode = args.next().unwrap_or_else(|| "fr".into());
    let dir = PathBuf::from(args.next().unwrap_or_else(|| format!("synthetic_{mode}")));
    let manifest = match mode.as_str() {
        "nr" => synthetic::write_nr_dataset(&dir, 20, 64, 3)?,
        _ => synthetic::write_fr_dataset(&dir, 10, 3, 64, 3)?,
    };
    println!("{}", manifest.display());
    Ok(())
}
