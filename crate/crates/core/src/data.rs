//! Dataset manifests, MOS normalization, seeded splits and patch sampling.
//!
//! Manifest paths are stored relative. They resolve against, in order: an
//! explicit root, `$BPCLIP_DATA_ROOT`, then the manifest's own directory.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use ndarray::{s, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::Mode;

pub const DATA_ROOT_ENV: &str = "BPCLIP_DATA_ROOT";
pub const DEFAULT_CROP: usize = 384;
pub const MAX_REPEATS: u32 = 10;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    Parse(String),
    #[error("manifest is missing column `{0}`")]
    MissingColumn(String),
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("sample `{id}` references missing file {path}")]
    DanglingPath { id: String, path: String },
    #[error("manifest validation failed: {0}")]
    Validation(String),
    #[error("MOS range is degenerate (min {min}, max {max})")]
    DegenerateRange { min: f64, max: f64 },
    #[error("split needs at least {needed} {unit}, found {found}")]
    TooFew {
        needed: usize,
        found: usize,
        unit: &'static str,
    },
    #[error("invalid split specification: {0}")]
    InvalidSplit(String),
    #[error("{path} is {width}x{height}, smaller than the {crop}x{crop} crop")]
    Undersized {
        path: String,
        width: usize,
        height: usize,
        crop: usize,
    },
    #[error("degenerate image: {0}")]
    DegenerateImage(String),
    #[error("cannot decode {path}: {msg}")]
    Decode { path: String, msg: String },
}

type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    #[default]
    HigherBetter,
    LowerBetter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub mos_min: f64,
    pub mos_max: f64,
    pub mos_polarity: Polarity,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_path: Option<PathBuf>,
    pub mos: f64,
    #[serde(default)]
    pub group_key: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleManifest {
    pub entries: Vec<Entry>,
    pub meta: DatasetMeta,
    /// Directory that relative paths resolve against.
    pub root: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct ManifestOptions {
    /// Required for CSV manifests that have no reference column values;
    /// checked against the JSON `meta.mode` otherwise.
    pub mode: Option<Mode>,
    /// Applies to CSV manifests; JSON manifests carry their own.
    pub polarity: Polarity,
    /// Rating-scale bounds; defaults to the observed min/max.
    pub mos_range: Option<(f64, f64)>,
    pub check_files: bool,
    pub root: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct JsonMeta {
    mode: Mode,
    #[serde(default)]
    mos_polarity: Polarity,
    mos_min: Option<f64>,
    mos_max: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct JsonManifest {
    meta: JsonMeta,
    entries: Vec<Entry>,
}

#[derive(Debug, Serialize)]
struct JsonManifestOut<'a> {
    meta: &'a DatasetMeta,
    entries: &'a [Entry],
}

const CSV_COLUMNS: [&str; 5] = ["id", "image_path", "reference_path", "mos", "group_key"];

fn resolve_root(manifest: &Path, explicit: Option<&PathBuf>) -> PathBuf {
    if let Some(r) = explicit {
        return r.clone();
    }
    if let Ok(r) = std::env::var(DATA_ROOT_ENV) {
        if !r.is_empty() {
            return PathBuf::from(r);
        }
    }
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn read_csv(text: &str) -> Result<Vec<Entry>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| DataError::Parse(e.to_string()))?.clone();
    let mut col = HashMap::new();
    for name in CSV_COLUMNS {
        let idx = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.into()))?;
        col.insert(name, idx);
    }
    let mut entries = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| DataError::Parse(e.to_string()))?;
        let field = |n: &str| rec.get(col[n]).unwrap_or("").to_string();
        let mos_text = field("mos");
        let mos = mos_text
            .parse::<f64>()
            .map_err(|_| DataError::Parse(format!("row {}: bad mos `{mos_text}`", line + 2)))?;
        let reference = field("reference_path");
        entries.push(Entry {
            id: field("id"),
            image_path: PathBuf::from(field("image_path")),
            reference_path: (!reference.is_empty()).then(|| PathBuf::from(reference)),
            mos,
            group_key: field("group_key"),
        });
    }
    Ok(entries)
}

/// Loads and validates a CSV (`.csv`) or JSON manifest.
pub fn load_manifest(path: impl AsRef<Path>, opts: &ManifestOptions) -> Result<SampleManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let (entries, mode, polarity, range) = if is_csv {
        let entries = read_csv(&text)?;
        let mode = match opts.mode {
            Some(m) => m,
            None if entries.iter().any(|e| e.reference_path.is_some()) => Mode::Fr,
            None => Mode::Nr,
        };
        (entries, mode, opts.polarity, opts.mos_range)
    } else {
        let doc: JsonManifest = serde_json::from_str(&text).map_err(|e| DataError::Parse(e.to_string()))?;
        if let Some(m) = opts.mode {
            if m != doc.meta.mode {
                return Err(DataError::Validation(format!(
                    "manifest is {:?} but {m:?} was requested",
                    doc.meta.mode
                )));
            }
        }
        let range = match (doc.meta.mos_min, doc.meta.mos_max) {
            (Some(a), Some(b)) => Some((a, b)),
            (None, None) => opts.mos_range,
            _ => return Err(DataError::Validation("set both mos_min and mos_max or neither".into())),
        };
        (doc.entries, doc.meta.mode, doc.meta.mos_polarity, range)
    };
    let root = resolve_root(path, opts.root.as_ref());
    SampleManifest::new(entries, mode, polarity, range, root, opts.check_files)
}

impl SampleManifest {
    pub fn new(
        mut entries: Vec<Entry>,
        mode: Mode,
        polarity: Polarity,
        mos_range: Option<(f64, f64)>,
        root: PathBuf,
        check_files: bool,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(DataError::Validation("manifest has no entries".into()));
        }
        let mut ids = HashSet::new();
        let mut ref_groups: HashMap<PathBuf, String> = HashMap::new();
        for e in &mut entries {
            if e.id.is_empty() {
                return Err(DataError::Validation("entry with empty id".into()));
            }
            if !ids.insert(e.id.clone()) {
                return Err(DataError::DuplicateId(e.id.clone()));
            }
            if !e.mos.is_finite() {
                return Err(DataError::Validation(format!("`{}` has non-finite MOS", e.id)));
            }
            for p in std::iter::once(&e.image_path).chain(e.reference_path.as_ref()) {
                if p.is_absolute() {
                    return Err(DataError::Validation(format!(
                        "`{}`: path {} must be relative to the data root",
                        e.id,
                        p.display()
                    )));
                }
            }
            match mode {
                Mode::Fr => {
                    let Some(r) = &e.reference_path else {
                        return Err(DataError::Validation(format!("FR entry `{}` has no reference_path", e.id)));
                    };
                    if e.group_key.is_empty() {
                        return Err(DataError::Validation(format!("FR entry `{}` has no group_key", e.id)));
                    }
                    match ref_groups.get(r) {
                        Some(g) if *g != e.group_key => {
                            return Err(DataError::Validation(format!(
                                "reference {} is used with group keys `{g}` and `{}`",
                                r.display(),
                                e.group_key
                            )))
                        }
                        _ => {
                            ref_groups.insert(r.clone(), e.group_key.clone());
                        }
                    }
                }
                Mode::Nr => {
                    if e.reference_path.is_some() {
                        return Err(DataError::Validation(format!(
                            "NR entry `{}` must not have a reference_path",
                            e.id
                        )));
                    }
                    if e.group_key.is_empty() {
                        e.group_key = e.id.clone();
                    }
                }
            }
        }
        let (mos_min, mos_max) = mos_range.unwrap_or_else(|| {
            entries.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
                (lo.min(e.mos), hi.max(e.mos))
            })
        });
        if let Some((lo, hi)) = mos_range {
            if let Some(e) = entries.iter().find(|e| e.mos < lo || e.mos > hi) {
                return Err(DataError::Validation(format!(
                    "`{}` MOS {} outside declared range [{lo}, {hi}]",
                    e.id, e.mos
                )));
            }
        }
        let m = Self {
            entries,
            meta: DatasetMeta {
                mos_min,
                mos_max,
                mos_polarity: polarity,
                mode,
            },
            root,
        };
        if check_files {
            for e in &m.entries {
                for p in std::iter::once(&e.image_path).chain(e.reference_path.as_ref()) {
                    if !m.resolve(p).is_file() {
                        return Err(DataError::DanglingPath {
                            id: e.id.clone(),
                            path: m.resolve(p).display().to_string(),
                        });
                    }
                }
            }
        }
        Ok(m)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn groups(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.group_key.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&JsonManifestOut {
            meta: &self.meta,
            entries: &self.entries,
        })
        .expect("manifest serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_COLUMNS).unwrap();
        for e in &self.entries {
            w.write_record([
                e.id.as_str(),
                &e.image_path.to_string_lossy(),
                &e.reference_path.as_ref().map(|p| p.to_string_lossy().into_owned()).unwrap_or_default(),
                &e.mos.to_string(),
                &e.group_key,
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

/// Min-max normalizes MOS into `[0, 1]`, flipping lower-is-better scales so
/// that higher always means better.
pub fn normalize_mos(manifest: &SampleManifest) -> Result<SampleManifest> {
    let DatasetMeta { mos_min, mos_max, .. } = manifest.meta;
    if !(mos_max > mos_min) {
        return Err(DataError::DegenerateRange {
            min: mos_min,
            max: mos_max,
        });
    }
    let flip = manifest.meta.mos_polarity == Polarity::LowerBetter;
    let mut out = manifest.clone();
    for e in &mut out.entries {
        let v = (e.mos - mos_min) / (mos_max - mos_min);
        e.mos = if flip { 1.0 - v } else { v };
    }
    out.meta.mos_min = 0.0;
    out.meta.mos_max = 1.0;
    out.meta.mos_polarity = Polarity::HigherBetter;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// One (train only), two (train:test) or three (train:val:test) ratios.
    pub ratios: Vec<f64>,
    pub seed: u64,
    pub repeat_index: u32,
}

impl SplitSpec {
    /// 6:2:2 by reference group for FR, 8:2 by image for NR.
    pub fn for_mode(mode: Mode, seed: u64, repeat_index: u32) -> Self {
        let ratios = match mode {
            Mode::Fr => vec![6.0, 2.0, 2.0],
            Mode::Nr => vec![8.0, 2.0],
        };
        Self {
            ratios,
            seed,
            repeat_index,
        }
    }

    fn normalized(&self) -> Result<Vec<f64>> {
        if self.ratios.is_empty() || self.ratios.len() > 3 {
            return Err(DataError::InvalidSplit(format!(
                "expected 1 to 3 ratios, got {}",
                self.ratios.len()
            )));
        }
        if self.ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(DataError::InvalidSplit("ratios must be finite and non-negative".into()));
        }
        let sum: f64 = self.ratios.iter().sum();
        if sum <= 0.0 {
            return Err(DataError::InvalidSplit("ratios sum to zero".into()));
        }
        if self.repeat_index >= MAX_REPEATS {
            return Err(DataError::InvalidSplit(format!(
                "repeat_index {} outside [0, {MAX_REPEATS})",
                self.repeat_index
            )));
        }
        Ok(self.ratios.iter().map(|r| r / sum).collect())
    }
}

/// Entry indices per split. `val` is empty for two-way splits; `val` and
/// `test` are empty for a single ratio.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Largest-remainder allocation of `n` units; every positive ratio gets at
/// least one unit.
fn allocate(n: usize, ratios: &[f64], unit: &'static str) -> Result<Vec<usize>> {
    let positive = ratios.iter().filter(|r| **r > 0.0).count();
    if n < positive {
        return Err(DataError::TooFew {
            needed: positive,
            found: n,
            unit,
        });
    }
    let raw: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|x| (x + 1e-9).floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - counts[b] as f64).total_cmp(&(raw[a] - counts[a] as f64)));
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[k] > 0.0 {
            counts[k] += 1;
            left -= 1;
        }
    }
    for k in 0..counts.len() {
        if ratios[k] > 0.0 && counts[k] == 0 {
            let donor = (0..counts.len()).max_by_key(|&j| counts[j]).unwrap();
            counts[donor] -= 1;
            counts[k] = 1;
        }
    }
    Ok(counts)
}

/// Seeded split. FR manifests are partitioned by `group_key` so that no
/// reference content is shared between splits; NR manifests by entry.
pub fn split_dataset(manifest: &SampleManifest, spec: &SplitSpec) -> Result<Splits> {
    let ratios = spec.normalized()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.repeat_index as u64);

    let parts: Vec<Vec<usize>> = match manifest.meta.mode {
        Mode::Fr => {
            let mut groups: Vec<&str> = manifest.groups().into_iter().collect();
            let needed = ratios.len().max(3);
            if groups.len() < needed {
                return Err(DataError::TooFew {
                    needed,
                    found: groups.len(),
                    unit: "reference groups",
                });
            }
            groups.shuffle(&mut rng);
            let counts = allocate(groups.len(), &ratios, "reference groups")?;
            let mut start = 0;
            counts
                .iter()
                .map(|&c| {
                    let members: HashSet<&str> = groups[start..start + c].iter().copied().collect();
                    start += c;
                    (0..manifest.entries.len())
                        .filter(|&i| members.contains(manifest.entries[i].group_key.as_str()))
                        .collect()
                })
                .collect()
        }
        Mode::Nr => {
            let mut idx: Vec<usize> = (0..manifest.entries.len()).collect();
            idx.shuffle(&mut rng);
            let counts = allocate(idx.len(), &ratios, "images")?;
            let mut start = 0;
            counts
                .iter()
                .map(|&c| {
                    let mut v = idx[start..start + c].to_vec();
                    v.sort_unstable();
                    start += c;
                    v
                })
                .collect()
        }
    };
    let mut it = parts.into_iter();
    Ok(match ratios.len() {
        1 => Splits {
            train: it.next().unwrap(),
            ..Default::default()
        },
        2 => Splits {
            train: it.next().unwrap(),
            val: vec![],
            test: it.next().unwrap(),
        },
        _ => Splits {
            train: it.next().unwrap(),
            val: it.next().unwrap(),
            test: it.next().unwrap(),
        },
    })
}

/// `(3, H, W)` image with values in `[0, 1]`.
pub type Image = Array3<f64>;

pub fn load_image(path: &Path) -> Result<Image> {
    let is_jpeg = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "jpg" | "jpeg"));
    if is_jpeg {
        log::warn!(
            "{}: JPEG decoders differ slightly; scores may move at the 1e-3 level",
            path.display()
        );
    }
    let img = image::open(path).map_err(|e| DataError::Decode {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(from_rgb32f(&img.to_rgb32f()))
}

pub fn from_rgb32f(img: &image::Rgb32FImage) -> Image {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64
    })
}

pub fn to_rgb32f(img: &Image) -> image::Rgb32FImage {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    image::Rgb32FImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([img[[0, y, x]] as f32, img[[1, y, x]] as f32, img[[2, y, x]] as f32])
    })
}

pub fn to_rgb8(img: &Image) -> image::RgbImage {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Output `(height, width)` so that the shorter side equals `target`, with
/// the longer side rounded half away from zero.
pub fn shorter_side_dims(height: usize, width: usize, target: usize) -> (usize, usize) {
    let scale = |long: usize, short: usize| ((long as f64 * target as f64 / short as f64).round() as usize).max(1);
    if height <= width {
        (target, scale(width, height))
    } else {
        (scale(height, width), target)
    }
}

/// Aspect-preserving resize (triangle filter, which widens its support when
/// downscaling) so that `min(H, W) == target`.
pub fn resize_shorter_side(img: &Image, target: usize) -> Result<Image> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if h == 0 || w == 0 || img.shape()[0] != 3 {
        return Err(DataError::DegenerateImage(format!("shape {:?}", img.shape())));
    }
    if target == 0 {
        return Err(DataError::DegenerateImage("target size must be at least 1".into()));
    }
    let (nh, nw) = shorter_side_dims(h, w, target);
    if (nh, nw) == (h, w) {
        return Ok(img.clone());
    }
    let resized = image::imageops::resize(&to_rgb32f(img), nw as u32, nh as u32, FilterType::Triangle);
    Ok(from_rgb32f(&resized))
}

/// Where a patch came from in its source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropParams {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub hflip: bool,
    pub vflip: bool,
}

/// Random crop with independent p=0.5 flips when training; centered and
/// unflipped otherwise.
pub fn sample_crop<R: Rng>(height: usize, width: usize, size: usize, rng: &mut R, train: bool) -> CropParams {
    if train {
        CropParams {
            top: rng.gen_range(0..=height - size),
            left: rng.gen_range(0..=width - size),
            size,
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
        }
    } else {
        CropParams {
            top: (height - size) / 2,
            left: (width - size) / 2,
            size,
            hflip: false,
            vflip: false,
        }
    }
}

pub fn apply_crop(img: &Image, p: &CropParams) -> Image {
    let mut v = img.slice(s![.., p.top..p.top + p.size, p.left..p.left + p.size]);
    if p.hflip {
        v.invert_axis(Axis(2));
    }
    if p.vflip {
        v.invert_axis(Axis(1));
    }
    v.to_owned()
}

/// A decoded sample ready for patch extraction.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub image_path: PathBuf,
    pub image: Arc<Image>,
    pub reference_path: Option<PathBuf>,
    pub reference: Option<Arc<Image>>,
    pub mos: f64,
}

#[derive(Debug, Clone)]
pub struct Patch {
    pub distorted: Image,
    pub reference: Option<Image>,
    pub distorted_crop: CropParams,
    pub reference_crop: Option<CropParams>,
}

fn check_size(path: &Path, img: &Image, crop: usize) -> Result<()> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if h < crop || w < crop {
        return Err(DataError::Undersized {
            path: path.display().to_string(),
            width: w,
            height: h,
            crop,
        });
    }
    Ok(())
}

/// Crops (and in training, flips) one sample. FR pairs get the very same
/// window and flips on both images.
pub fn augment_patch<R: Rng>(sample: &LoadedSample, rng: &mut R, crop: usize, train: bool) -> Result<Patch> {
    check_size(&sample.image_path, &sample.image, crop)?;
    if let (Some(r), Some(rp)) = (&sample.reference, &sample.reference_path) {
        check_size(rp, r, crop)?;
        if r.shape() != sample.image.shape() {
            return Err(DataError::Validation(format!(
                "`{}`: distorted {:?} and reference {:?} differ in size",
                sample.id,
                sample.image.shape(),
                r.shape()
            )));
        }
    }
    let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
    let params = sample_crop(h, w, crop, rng, train);
    Ok(Patch {
        distorted: apply_crop(&sample.image, &params),
        reference: sample.reference.as_ref().map(|r| apply_crop(r, &params)),
        distorted_crop: params,
        reference_crop: sample.reference.as_ref().map(|_| params),
    })
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Per-sample augmentation stream derived from `(seed, sample id, epoch)`,
/// independent of loading order.
pub fn sample_rng(seed: u64, id: &str, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(id));
    rng.set_stream(epoch);
    rng
}

/// Decodes every image referenced by `indices` once, sharing references
/// between entries.
pub fn load_samples(manifest: &SampleManifest, indices: &[usize]) -> Result<Vec<LoadedSample>> {
    let mut cache: HashMap<PathBuf, Arc<Image>> = HashMap::new();
    let mut get = |p: &Path| -> Result<Arc<Image>> {
        let full = manifest.resolve(p);
        if let Some(img) = cache.get(&full) {
            return Ok(img.clone());
        }
        let img = Arc::new(load_image(&full)?);
        cache.insert(full, img.clone());
        Ok(img)
    };
    indices
        .iter()
        .map(|&i| {
            let e = &manifest.entries[i];
            Ok(LoadedSample {
                id: e.id.clone(),
                image_path: manifest.resolve(&e.image_path),
                image: get(&e.image_path)?,
                reference_path: e.reference_path.as_ref().map(|p| manifest.resolve(p)),
                reference: e.reference_path.as_ref().map(|p| get(p)).transpose()?,
                mos: e.mos,
            })
        })
        .collect()
}
