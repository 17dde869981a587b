//! Flat `key = value` config files with `model.`, `train.`, `degrade.` and
//! `eval.` sections.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dropsr::evaluate::EVAL_SEED;
use dropsr::model::{DropoutPosition, ModelConfig};
use dropsr::nn::{DropoutDim, DropoutSpec};
use dropsr::train::{DegradationMode, TrainConfig};
use dropsr::degrade::TestKind;
use dropsr::{Error, Result};

const KEYS: &[&str] = &[
    "model.n_blocks",
    "model.n_feats",
    "model.sr_scale",
    "model.position",
    "model.dropout_dim",
    "model.dropout_p",
    "model.init_seed",
    "train.corpus",
    "train.batch",
    "train.lr_patch",
    "train.iters",
    "train.lr0",
    "train.seed",
    "train.mode",
    "train.val_every",
    "train.val_dir",
    "train.val_kinds",
    "degrade.kind",
    "degrade.scale",
    "degrade.seed",
    "eval.seed",
];

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed key/value pairs, remembering the line each came from.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    entries: HashMap<String, Entry>,
    base: PathBuf,
}

impl ConfigFile {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries: HashMap<String, Entry> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`, got '{content}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {line}: unknown key '{key}'")));
            }
            if let Some(prev) = entries.get(key) {
                return Err(Error::Config(format!(
                    "line {line}: duplicate key '{key}' (first set on line {})",
                    prev.line
                )));
            }
            entries.insert(
                key.to_string(),
                Entry {
                    value: value.to_string(),
                    line,
                },
            );
        }
        Ok(ConfigFile {
            entries,
            base: base.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        let Some(e) = self.entries.get(key) else {
            return Ok(None);
        };
        e.value
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("line {}: invalid value '{}' for {key}", e.line, e.value)))
    }

    fn wrap<T>(&self, key: &str, r: Result<T>) -> Result<T> {
        r.map_err(|err| match self.entries.get(key) {
            Some(e) => Error::Config(format!("line {}: {key}: {err}", e.line)),
            None => err,
        })
    }

    /// Relative paths resolve against the config file's directory.
    fn path(&self, key: &str) -> Option<PathBuf> {
        self.entries.get(key).map(|e| self.base.join(&e.value))
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let dim = match self.entries.get("model.dropout_dim") {
            Some(_) => self.wrap("model.dropout_dim", DropoutDim::parse(&self.entries["model.dropout_dim"].value))?,
            None => DropoutDim::Channel,
        };
        let p = self.get("model.dropout_p")?.unwrap_or(0.0);
        let spec = self.wrap("model.dropout_p", DropoutSpec::new(dim, p))?;
        let position: DropoutPosition = match self.entries.get("model.position") {
            Some(e) => self.wrap("model.position", e.value.parse())?,
            None => DropoutPosition::None,
        };
        let cfg = ModelConfig {
            n_blocks: self.get("model.n_blocks")?.unwrap_or(d.n_blocks),
            n_feats: self.get("model.n_feats")?.unwrap_or(d.n_feats),
            sr_scale: self.get("model.sr_scale")?.unwrap_or(d.sr_scale),
            dropout: spec,
            position,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn init_seed(&self) -> Result<u64> {
        Ok(self.get("model.init_seed")?.unwrap_or(0))
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let mode = match self.entries.get("train.mode") {
            Some(e) => self.wrap("train.mode", DegradationMode::from_str(&e.value))?,
            None => d.mode,
        };
        let cfg = TrainConfig {
            batch: self.get("train.batch")?.unwrap_or(d.batch),
            lr_patch: self.get("train.lr_patch")?.unwrap_or(d.lr_patch),
            iters: self.get("train.iters")?.unwrap_or(d.iters),
            lr0: self.get("train.lr0")?.unwrap_or(d.lr0),
            seed: self.get("train.seed")?.unwrap_or(d.seed),
            mode,
            val_every: self.get("train.val_every")?.unwrap_or(d.val_every),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn corpus(&self) -> Result<PathBuf> {
        self.path("train.corpus")
            .ok_or_else(|| Error::Config("missing required key train.corpus".into()))
    }

    pub fn val_dir(&self) -> Option<PathBuf> {
        self.path("train.val_dir")
    }

    pub fn val_kinds(&self) -> Result<Vec<TestKind>> {
        match self.entries.get("train.val_kinds") {
            Some(e) => self.wrap("train.val_kinds", parse_kinds(&e.value)),
            None => Ok(vec![TestKind::Clean]),
        }
    }

    pub fn degrade_kind(&self) -> Result<Option<TestKind>> {
        match self.entries.get("degrade.kind") {
            Some(e) => self.wrap("degrade.kind", e.value.parse().map(Some)),
            None => Ok(None),
        }
    }

    pub fn degrade_scale(&self) -> Result<Option<usize>> {
        self.get("degrade.scale")
    }

    pub fn degrade_seed(&self) -> Result<Option<u64>> {
        self.get("degrade.seed")
    }

    pub fn eval_seed(&self) -> Result<u64> {
        Ok(self.get("eval.seed")?.unwrap_or(EVAL_SEED))
    }
}

/// Comma-separated test kinds.
pub fn parse_kinds(list: &str) -> Result<Vec<TestKind>> {
    let kinds = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(TestKind::from_str)
        .collect::<Result<Vec<_>>>()?;
    if kinds.is_empty() {
        return Err(Error::Config(format!(
            "no degradation kinds given (valid: {})",
            TestKind::valid_tokens()
        )));
    }
    Ok(kinds)
}
