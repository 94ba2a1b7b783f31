//! Run configuration files (TOML or JSON) and `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{ManifestOptions, Polarity};
use crate::error::{config, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::Mode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub text_bank: Option<PathBuf>,
    /// Overrides `$BPCLIP_DATA_ROOT` and the manifest directory.
    pub root: Option<PathBuf>,
    pub polarity: Polarity,
    pub mos_range: Option<[f64; 2]>,
    pub check_files: bool,
}

impl DataConfig {
    pub fn manifest_options(&self, mode: Mode) -> ManifestOptions {
        ManifestOptions {
            mode: Some(mode),
            polarity: self.polarity,
            mos_range: self.mos_range.map(|[a, b]| (a, b)),
            check_files: self.check_files,
            root: self.root.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Parses TOML, or JSON when the extension is `.json`. Relative data
    /// paths are resolved against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).map_err(|e| config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| config(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.manifest, &mut cfg.data.text_bank, &mut cfg.data.root]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies `a.b.c=value` overrides. Keys must already exist; values are
    /// read as JSON literals, falling back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| config(format!("override `{o}` is not key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut doc;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| config(format!("unknown config key `{key}`")))?;
                let child = obj
                    .get_mut(*part)
                    .ok_or_else(|| config(format!("unknown config key `{key}`")))?;
                if i + 1 == parts.len() {
                    *child = value.clone();
                    break;
                }
                node = child;
            }
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| config(format!("invalid override: {e}")))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(self.model.mode)
    }

    pub fn to_toml(&self) -> Result<String> {
        // TOML has no null; go through JSON to drop unset options.
        let mut v = serde_json::to_value(self)?;
        strip_nulls(&mut v);
        toml::to_string_pretty(&v).map_err(|e| config(e.to_string()))
    }
}

fn strip_nulls(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.retain(|_, x| !x.is_null());
            m.values_mut().for_each(strip_nulls);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_nulls),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_overrides() {
        let cfg = RunConfig {
            model: ModelConfig::tiny(Mode::Nr, 64),
            ..Default::default()
        };
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);

        let o = cfg
            .with_overrides(&["train.epochs=3", "train.lr=0.001", "model.attention.direction=top-down"])
            .unwrap();
        assert_eq!(o.train.epochs, 3);
        assert_eq!(o.train.lr, Some(0.001));
        assert_eq!(o.model.attention.direction, crate::attention::MscaDirection::TopDown);
        assert!(cfg.with_overrides(&["train.nope=1"]).is_err());
        assert!(cfg.with_overrides(&["train.epochs"]).is_err());
        assert!(cfg.with_overrides(&["train.epochs=\"many\""]).is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nepoch = 3\n").is_err());
        let c: RunConfig = toml::from_str("[model]\nmode = \"NR\"\n").unwrap();
        assert_eq!(c.model.mode, Mode::Nr);
    }
}
