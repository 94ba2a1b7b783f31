//! Writes a tensor archive, reads it back, then shows the checksum catching
//! a flipped payload byte.
//!
//! ```text
//! cargo run --example tensor_archive
//! ```

use bpclip::archive::{DType, StoredTensor, TensorArchive};
use ndarray::{ArrayD, IxDyn};

fn main() -> bpclip::Result<()> {
    let mut a = TensorArchive::new();
    a.insert("weights", StoredTensor::new(DType::F32, ArrayD::from_shape_fn(IxDyn(&[2, 3]), |ix| (ix[0] * 3 + ix[1]) as f64 * 0.5)));
    a.insert("scale", StoredTensor::new(DType::F64, ArrayD::from_elem(IxDyn(&[1]), std::f64::consts::PI)));

    let path = std::env::temp_dir().join("bpclip_example.bpta");
    a.save(&path)?;
    let bytes = std::fs::read(&path)?;
    let back = TensorArchive::load(&path)?;
    println!("{} bytes, round trip identical: {}", bytes.len(), back.to_bytes() == bytes);
    println!("scale = {}", back.get("scale")?.data[[0]]);

    let mut bad = bytes;
    let n = bad.len();
    bad[n - 6] ^= 0x10;
    match TensorArchive::from_bytes(&bad) {
        Ok(_) => println!("corruption went unnoticed"),
        Err(e) => println!("corrupted copy: {e}"),
    }
    Ok(())
}
