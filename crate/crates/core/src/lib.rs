//! Image quality assessment with a bottom-up multiscale attention encoder and
//! a score head that regresses quality from CLIP text-space similarities.
//!
//! The pipeline is: [`backbone`] feature pyramid, [`glp`] gated local pooling
//! to a common grid, the dual-branch cross-scale [`attention`] encoder, and
//! the [`clip_head`] that compares each fused level against 40 quality
//! adjectives before a small regressor produces the score. [`model::Bpclip`]
//! wires these together; [`train`] fits it and [`metrics`] scores it.
//!
//! Everything runs on a small reverse-mode [`autodiff`] engine in `f64`.

pub mod archive;
pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod clip_head;
pub mod config;
pub mod data;
pub mod error;
pub mod glp;
pub mod gradcheck;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synthetic;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Full-reference (distorted + pristine reference) or no-reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    #[serde(alias = "FR")]
    Fr,
    #[serde(alias = "NR")]
    Nr,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Fr => "FR",
            Mode::Nr => "NR",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fr" => Ok(Mode::Fr),
            "nr" => Ok(Mode::Nr),
            _ => Err(error::config(format!("unknown mode `{s}` (expected fr or nr)"))),
        }
    }
}
