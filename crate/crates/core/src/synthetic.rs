//! Procedural datasets for smoke tests and demos: smooth random references
//! and blur-plus-noise distortions whose MOS falls with distortion strength.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{self, Entry, Image, Polarity, SampleManifest};
use crate::error::Result;
use crate::Mode;

/// Sum of a few random oriented sinusoids per channel, in `[0, 1]`.
pub fn reference_image(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Image {
    let waves: Vec<[f64; 5]> = (0..12)
        .map(|_| {
            [
                rng.gen_range(0.0..3.0),                       // channel
                rng.gen_range(-0.4..0.4),                      // fy
                rng.gen_range(-0.4..0.4),                      // fx
                rng.gen_range(0.0..std::f64::consts::TAU),     // phase
                rng.gen_range(0.05..0.2),                      // amplitude
            ]
        })
        .collect();
    let base: [f64; 3] = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
    Image::from_shape_fn((3, height, width), |(c, y, x)| {
        let mut v = base[c];
        for w in &waves {
            if w[0] as usize == c {
                v += w[4] * (w[1] * y as f64 + w[2] * x as f64 + w[3]).sin();
            }
        }
        v.clamp(0.0, 1.0)
    })
}

/// Gaussian blur (sigma `2 s`) then additive noise (std `0.08 s`) for
/// strength `s` in `[0, 1]`. `s = 0` returns the input unchanged.
pub fn distort(img: &Image, strength: f64, rng: &mut ChaCha8Rng) -> Image {
    if strength <= 0.0 {
        return img.clone();
    }
    let blurred = image::imageops::blur(&data::to_rgb32f(img), (2.0 * strength) as f32);
    let mut out = data::from_rgb32f(&blurred);
    let noise = Normal::new(0.0, 0.08 * strength).expect("valid std");
    out.mapv_inplace(|v| (v + noise.sample(rng)).clamp(0.0, 1.0));
    out
}

/// MOS on a 1..5 scale for strength `s`.
pub fn mos_for(strength: f64) -> f64 {
    5.0 - 4.0 * strength
}

/// Writes `refs * levels` FR pairs (PNG) and `manifest.csv` under `dir`.
/// Every sample gets a distinct strength, so MOS values are all distinct.
pub fn write_fr_dataset(dir: &Path, refs: usize, levels: usize, size: usize, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("ref"))?;
    std::fs::create_dir_all(dir.join("dist"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = (refs * levels).max(2) - 1;
    let mut entries = Vec::new();
    for r in 0..refs {
        let reference = reference_image(&mut rng, size, size);
        let ref_rel = PathBuf::from(format!("ref/r{r}.png"));
        data::to_rgb8(&reference).save(dir.join(&ref_rel))?;
        for k in 0..levels {
            let s = (k * refs + r) as f64 / total as f64;
            let d = distort(&reference, s, &mut rng);
            let rel = PathBuf::from(format!("dist/r{r}_l{k}.png"));
            data::to_rgb8(&d).save(dir.join(&rel))?;
            entries.push(Entry {
                id: format!("r{r}_l{k}"),
                image_path: rel,
                reference_path: Some(ref_rel.clone()),
                mos: mos_for(s),
                group_key: format!("r{r}"),
            });
        }
    }
    write_manifest(dir, entries, Mode::Fr)
}

/// Writes `n` distorted images (no references) and `manifest.csv`.
pub fn write_nr_dataset(dir: &Path, n: usize, size: usize, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("img"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for i in 0..n {
        let s = i as f64 / (n.max(2) - 1) as f64;
        let reference = reference_image(&mut rng, size, size);
        let d = distort(&reference, s, &mut rng);
        let rel = PathBuf::from(format!("img/i{i}.png"));
        data::to_rgb8(&d).save(dir.join(&rel))?;
        entries.push(Entry {
            id: format!("i{i}"),
            image_path: rel,
            reference_path: None,
            mos: mos_for(s),
            group_key: String::new(),
        });
    }
    write_manifest(dir, entries, Mode::Nr)
}

fn write_manifest(dir: &Path, entries: Vec<Entry>, mode: Mode) -> Result<PathBuf> {
    let m = SampleManifest::new(entries, mode, Polarity::HigherBetter, Some((1.0, 5.0)), dir.to_path_buf(), true)?;
    let path = dir.join("manifest.csv");
    std::fs::write(&path, m.to_csv())?;
    Ok(path)
}
