//! Spatial maps of the two encoder branches and their PNG rendering.
//!
//! The information-branch map of block `i` is the cross-attention
//! distribution over key positions, averaged over heads and queries (it sums
//! to 1). The weight-branch map is the sigmoid gate averaged over channels,
//! so every cell lies in `(0, 1)`. Both live on the coarsest `H/32 x W/32`
//! grid.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::archive::{DType, StoredTensor, TensorArchive};
use crate::autodiff::Tensor;
use crate::clip_head::TextBank;
use crate::error::{config, input, Result};
use crate::model::Bpclip;
use crate::params::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Info,
    Weight,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Info => "info",
            Branch::Weight => "weight",
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "info" => Ok(Branch::Info),
            "weight" => Ok(Branch::Weight),
            _ => Err(config(format!("unknown branch `{s}` (expected info or weight)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// Encoder block, 1-based.
    pub level: usize,
    pub branch: Branch,
    pub grid: Array2<f64>,
}

impl AttentionMap {
    pub fn file_stem(&self) -> String {
        format!("level{}_{}", self.level, self.branch.name())
    }
}

/// Maps for the first image of the batch. Single-branch models yield
/// information maps only.
pub fn attention_maps(
    model: &Bpclip,
    params: &ParameterSet,
    bank: Option<&TextBank>,
    distorted: &Tensor,
    reference: Option<&Tensor>,
) -> Result<Vec<AttentionMap>> {
    let (g, _, out) = model.run(params, bank, distorted, reference)?;
    let (gh, gw) = model.config.backbone.coarsest();
    let mut maps = Vec::new();
    for (k, a) in out.encoder.info.iter().enumerate() {
        // (B, heads, Lq, Lk) -> mean over heads and queries of item 0.
        let probs = g.value(a.probs).index_axis(Axis(0), 0).to_owned();
        let (heads, lq, lk) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
        let flat = probs.into_shape_with_order((heads * lq, lk)).expect("reshape");
        let mean = flat.mean_axis(Axis(0)).expect("non-empty");
        maps.push(AttentionMap {
            level: k + 1,
            branch: Branch::Info,
            grid: mean.into_shape_with_order((gh, gw)).expect("grid"),
        });
    }
    for (k, gate) in out.encoder.gates.iter().enumerate() {
        let Some(gate) = gate else { continue };
        // (B, L, D) -> mean over channels of item 0.
        let v = g.value(*gate).index_axis(Axis(0), 0).to_owned();
        let mean = v.mean_axis(Axis(1)).expect("non-empty");
        maps.push(AttentionMap {
            level: k + 1,
            branch: Branch::Weight,
            grid: mean.into_shape_with_order((gh, gw)).expect("grid"),
        });
    }
    Ok(maps)
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn bilinear_upsample(grid: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = grid.dim();
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, x - x0 as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = coord(y, out_h, h);
        let (x0, x1, fx) = coord(x, out_w, w);
        let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x1]] * fx;
        let bot = grid[[y1, x0]] * (1.0 - fx) + grid[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Five-stop approximation of the viridis colormap (dark purple, blue,
/// teal, green, yellow), linearly interpolated. `t` is clamped to `[0, 1]`.
pub fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f).round() as u8;
    }
    out
}

/// Min-max normalizes, upsamples to `(height, width)` and colorizes. A
/// constant map renders as the bottom color.
pub fn render(grid: &Array2<f64>, height: usize, width: usize) -> Result<image::RgbImage> {
    if grid.is_empty() || height == 0 || width == 0 {
        return Err(input("cannot render an empty map"));
    }
    let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let up = bilinear_upsample(grid, height, width);
    Ok(image::RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let v = up[[y as usize, x as usize]];
        let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
        image::Rgb(colormap(t))
    }))
}

/// Writes one `level{i}_{branch}.png` per map, and `attention_maps.bpta`
/// with the raw grids when `raw` is set. Returns the written paths.
pub fn export_maps(maps: &[AttentionMap], dir: &Path, size: (usize, usize), raw: bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for m in maps {
        let path = dir.join(format!("{}.png", m.file_stem()));
        render(&m.grid, size.0, size.1)?.save(&path)?;
        written.push(path);
    }
    if raw {
        let mut a = TensorArchive::new();
        for m in maps {
            a.insert(m.file_stem(), StoredTensor::new(DType::F64, m.grid.clone().into_dyn()));
        }
        let path = dir.join("attention_maps.bpta");
        a.save(&path)?;
        written.push(path);
    }
    Ok(written)
}
