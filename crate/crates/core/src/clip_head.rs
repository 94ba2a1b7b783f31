//! Text-space score head.
//!
//! Each fused level is mean-pooled over positions and mapped by its own MLP
//! into the text-embedding space. Cosine similarities against the 40
//! adjective embeddings are turned into a distribution with
//! `softmax(tau * cos)`, and the four distributions are concatenated into a
//! 160-wide vector that a small MLP regresses to the quality score. The
//! score has no output squashing.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveError, DType, StoredTensor, TensorArchive};
use crate::attention::mlp;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{config, input, Error, Result};
use crate::params::{Init, ParamVars, ParameterSet};

pub const NUM_ADJECTIVES: usize = 40;
pub const NUM_DIMENSIONS: usize = 6;
pub const EMBEDDINGS: &str = "text.embeddings";
pub const TAU: &str = "head.tau";

const DEFAULT_INVENTORY: &str = include_str!("../assets/adjectives.json");

#[derive(Debug, thiserror::Error)]
pub enum TextBankError {
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("text bank sidecar {path}: {msg}")]
    Sidecar { path: String, msg: String },
    #[error("text bank has {0} rows, expected 40")]
    RowCount(usize),
    #[error("text bank has {0} dimensions, expected 6")]
    DimensionCount(usize),
    #[error("sidecar lists {sidecar} adjectives but the matrix has {rows} rows")]
    AdjectiveCount { sidecar: usize, rows: usize },
    #[error("adjective `{0}` appears more than once")]
    DuplicateAdjective(String),
    #[error("dimension `{0}` has no adjectives")]
    EmptyDimension(String),
    #[error("row {row} has norm {norm}, too far from 1 to renormalize")]
    RowNorm { row: usize, norm: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub adjectives: Vec<String>,
}

/// The sidecar document stored next to the embeddings archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankSidecar {
    pub template: String,
    pub model_id: String,
    pub dimensions: Vec<Dimension>,
}

#[derive(Debug, Deserialize)]
struct Inventory {
    template: String,
    dimensions: Vec<Dimension>,
}

/// The shipped six-dimension, 40-adjective inventory and its prompt template.
pub fn default_inventory() -> (String, Vec<Dimension>) {
    let inv: Inventory = serde_json::from_str(DEFAULT_INVENTORY).expect("bundled inventory parses");
    (inv.template, inv.dimensions)
}

/// Precomputed adjective embeddings, immutable after load.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    embeddings: Array2<f64>,
    adjectives: Vec<String>,
    dimensions: Vec<Dimension>,
    template: String,
    model_id: String,
    renormalized: Vec<usize>,
}

pub fn sidecar_path(archive: &Path) -> PathBuf {
    archive.with_extension("json")
}

impl TextBank {
    /// Validates and builds a bank. Rows within `1e-3` of unit norm are
    /// renormalized; anything further off is rejected.
    pub fn new(
        embeddings: Array2<f64>,
        dimensions: Vec<Dimension>,
        template: impl Into<String>,
        model_id: impl Into<String>,
    ) -> Result<Self, TextBankError> {
        if embeddings.nrows() != NUM_ADJECTIVES {
            return Err(TextBankError::RowCount(embeddings.nrows()));
        }
        if dimensions.len() != NUM_DIMENSIONS {
            return Err(TextBankError::DimensionCount(dimensions.len()));
        }
        let mut seen = HashSet::new();
        let mut adjectives = Vec::with_capacity(NUM_ADJECTIVES);
        for d in &dimensions {
            if d.adjectives.is_empty() {
                return Err(TextBankError::EmptyDimension(d.name.clone()));
            }
            for a in &d.adjectives {
                if !seen.insert(a.clone()) {
                    return Err(TextBankError::DuplicateAdjective(a.clone()));
                }
                adjectives.push(a.clone());
            }
        }
        if adjectives.len() != embeddings.nrows() {
            return Err(TextBankError::AdjectiveCount {
                sidecar: adjectives.len(),
                rows: embeddings.nrows(),
            });
        }
        let mut embeddings = embeddings;
        let mut renormalized = Vec::new();
        for (row, mut r) in embeddings.axis_iter_mut(Axis(0)).enumerate() {
            let norm = r.dot(&r).sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-3 {
                return Err(TextBankError::RowNorm { row, norm });
            }
            if (norm - 1.0).abs() > 1e-12 {
                r.mapv_inplace(|v| v / norm);
                if (norm - 1.0).abs() > 1e-5 {
                    renormalized.push(row);
                }
            }
        }
        if !renormalized.is_empty() {
            log::warn!("text bank rows {renormalized:?} were renormalized to unit length");
        }
        Ok(Self {
            embeddings,
            adjectives,
            dimensions,
            template: template.into(),
            model_id: model_id.into(),
            renormalized,
        })
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn d_text(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn adjectives(&self) -> &[String] {
        &self.adjectives
    }

    pub fn dimensions(&self) -> &[Dimension] {
        &self.dimensions
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    /// Rows whose norm was off by more than `1e-5` at load time.
    pub fn renormalized_rows(&self) -> &[usize] {
        &self.renormalized
    }

    /// Dimension name for each of the 40 rows.
    pub fn row_dimensions(&self) -> Vec<&str> {
        self.dimensions
            .iter()
            .flat_map(|d| d.adjectives.iter().map(move |_| d.name.as_str()))
            .collect()
    }

    pub fn sidecar(&self) -> BankSidecar {
        BankSidecar {
            template: self.template.clone(),
            model_id: self.model_id.clone(),
            dimensions: self.dimensions.clone(),
        }
    }

    /// Writes `path` (archive, f32) and its `.json` sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut a = TensorArchive::new();
        a.insert(
            EMBEDDINGS,
            StoredTensor::new(DType::F32, self.embeddings.clone().into_dyn()),
        );
        a.save(path)?;
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.sidecar())?)?;
        Ok(())
    }
}

/// Loads a bank archive plus its `.json` sidecar.
pub fn load_text_bank(path: impl AsRef<Path>) -> Result<TextBank, TextBankError> {
    let path = path.as_ref();
    let archive = TensorArchive::load(path)?;
    let emb = archive.get(EMBEDDINGS)?;
    if emb.data.ndim() != 2 {
        return Err(ArchiveError::ShapeMismatch {
            name: EMBEDDINGS.into(),
            expected: vec![NUM_ADJECTIVES, 0],
            found: emb.data.shape().to_vec(),
        }
        .into());
    }
    let embeddings = emb.data.clone().into_dimensionality().expect("2-d");
    let sc = sidecar_path(path);
    let sidecar_err = |msg: String| TextBankError::Sidecar {
        path: sc.display().to_string(),
        msg,
    };
    let text = std::fs::read_to_string(&sc).map_err(|e| sidecar_err(e.to_string()))?;
    let meta: BankSidecar = serde_json::from_str(&text).map_err(|e| sidecar_err(e.to_string()))?;
    TextBank::new(embeddings, meta.dimensions, meta.template, meta.model_id)
}

const BUNDLED_BANK: &[u8] = include_bytes!("../assets/text_bank.bpta");
const BUNDLED_SIDECAR: &str = include_str!("../assets/text_bank.json");

/// The bank compiled into the crate (`assets/text_bank.bpta`). Its rows are
/// synthetic stand-ins with the real inventory's block structure, not CLIP
/// embeddings; see `model_id`.
pub fn bundled_text_bank() -> TextBank {
    let archive = TensorArchive::from_bytes(BUNDLED_BANK).expect("bundled bank archive is valid");
    let emb = archive.get(EMBEDDINGS).expect("bundled bank has embeddings");
    let meta: BankSidecar = serde_json::from_str(BUNDLED_SIDECAR).expect("bundled sidecar parses");
    let e = emb.data.clone().into_dimensionality().expect("2-d");
    TextBank::new(e, meta.dimensions, meta.template, meta.model_id).expect("bundled bank validates")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Score through text-embedding similarities; when off, each level maps
    /// straight to 40 learned logits.
    pub text_head: bool,
    pub d_text: usize,
    pub tau: f64,
    pub learn_tau: bool,
    pub regression_hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            text_head: true,
            d_text: 512,
            tau: 100.0,
            learn_tau: false,
            regression_hidden: 64,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(config(format!("tau must be finite and non-negative, got {}", self.tau)));
        }
        if self.d_text == 0 || self.regression_hidden == 0 {
            return Err(config("d_text and regression_hidden must be positive"));
        }
        Ok(())
    }

    pub fn projection_width(&self) -> usize {
        if self.text_head {
            self.d_text
        } else {
            NUM_ADJECTIVES
        }
    }
}

pub fn init_params(cfg: &HeadConfig, d_model: usize, levels: usize, init: &mut Init, set: &mut ParameterSet) {
    let out = cfg.projection_width();
    for i in 1..=levels {
        let p = format!("head.proj{i}");
        set.insert(format!("{p}.fc1.weight"), init.fan_in_uniform(&[d_model, d_model], d_model), true);
        set.insert(format!("{p}.fc1.bias"), crate::params::zeros(&[d_model]), true);
        set.insert(format!("{p}.fc2.weight"), init.fan_in_uniform(&[out, d_model], d_model), true);
        set.insert(format!("{p}.fc2.bias"), crate::params::zeros(&[out]), true);
    }
    if cfg.text_head {
        set.insert(TAU, Tensor::from_elem(IxDyn(&[1]), cfg.tau), cfg.learn_tau);
    }
    let width = levels * NUM_ADJECTIVES;
    let h = cfg.regression_hidden;
    set.insert("head.reg.fc1.weight", init.fan_in_uniform(&[h, width], width), true);
    set.insert("head.reg.fc1.bias", crate::params::zeros(&[h]), true);
    set.insert("head.reg.fc2.weight", init.fan_in_uniform(&[1, h], h), true);
    set.insert("head.reg.fc2.bias", crate::params::zeros(&[1]), true);
}

/// Mean over positions of `(B, L, D)`, then the level's projection MLP.
pub fn project_to_clip(g: &mut Graph, p: &ParamVars, i: usize, fused: Var) -> Result<Var> {
    if g.shape(fused).len() != 3 {
        return Err(input(format!("expected (B, L, D), got {:?}", g.shape(fused))));
    }
    let pooled = g.mean_axis(fused, 1, false);
    mlp(g, p, &format!("head.proj{i}"), pooled)
}

#[derive(Debug, Clone, Copy)]
pub struct Similarity {
    /// Raw cosines `(B, 40)`.
    pub cosine: Var,
    /// `softmax(tau * cosine)`, `(B, 40)`.
    pub probs: Var,
}

/// Cosine similarity of each row of `x: (B, d)` with the unit-norm rows of
/// `bank: (40, d)`, followed by a temperature softmax.
pub fn adjective_similarity(g: &mut Graph, x: Var, bank: Var, tau: Var) -> Result<Similarity> {
    let xs = g.shape(x).to_vec();
    let bs = g.shape(bank).to_vec();
    if xs.len() != 2 || bs.len() != 2 || xs[1] != bs[1] {
        return Err(config(format!(
            "image feature {xs:?} does not match text bank {bs:?}"
        )));
    }
    for (b, row) in g.value(x).axis_iter(Axis(0)).enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Numeric(format!(
                "image feature {b} has norm {n}; cosine similarity undefined"
            )));
        }
    }
    let sq = g.square(x);
    let ss = g.sum_axis(sq, 1, true);
    let norm = g.sqrt(ss);
    let xn = g.div(x, norm);
    let cosine = g.linear(xn, bank, None);
    let logits = g.mul(cosine, tau);
    let probs = g.softmax(logits);
    Ok(Similarity { cosine, probs })
}

/// Concatenate the per-level 40-vectors and regress a score per item.
pub fn regress_score(g: &mut Graph, p: &ParamVars, sims: &[Var], expected_levels: usize) -> Result<Var> {
    if sims.len() != expected_levels {
        return Err(config(format!(
            "score regression expects {expected_levels} levels, got {}",
            sims.len()
        )));
    }
    for s in sims {
        if g.shape(*s).len() != 2 || g.shape(*s)[1] != NUM_ADJECTIVES {
            return Err(input(format!("similarity vector shape {:?}", g.shape(*s))));
        }
    }
    let cat = g.concat(sims, 1);
    let out = mlp(g, p, "head.reg", cat)?;
    let b = g.shape(out)[0];
    Ok(g.reshape(out, &[b]))
}
