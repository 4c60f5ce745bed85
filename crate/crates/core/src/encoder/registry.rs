//! Backbone identifiers and where their weights live.
//!
//! Pretrained backbones are read from `$TAGFORGE_MODEL_CACHE/<identifier>/`
//! (default `~/.cache/tagforge/models`), which must hold `config.json`,
//! `tokenizer.json` and `model.safetensors`. A `registry.toml` in the cache
//! directory may add identifiers or point existing ones elsewhere:
//!
//! ```toml
//! [backbones.my-bert]
//! family = "bert"
//! hidden_size = 768
//! path = "/models/my-bert"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::stub::STUB_HIDDEN;
use crate::error::{Error, Result};

pub const MODEL_CACHE_ENV: &str = "TAGFORGE_MODEL_CACHE";
pub const REGISTRY_FILE: &str = "registry.toml";
pub const MAX_POSITIONS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneFamily {
    Stub,
    Bert,
    Roberta,
    Albert,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub identifier: String,
    pub family: BackboneFamily,
    pub hidden_size: usize,
    pub max_positions: usize,
    /// Directory holding the pretrained files. Unused for the stub.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<PathBuf>,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "{}: hidden size must be positive",
                self.identifier
            )));
        }
        if self.max_positions < 3 {
            return Err(Error::InvalidConfig(format!(
                "{}: max_positions must leave room for two specials and a token",
                self.identifier
            )));
        }
        Ok(())
    }

    /// Raw subtokens kept after head-only truncation.
    pub fn content_limit(&self) -> usize {
        self.max_positions - 2
    }
}

const BUILTINS: &[(&str, BackboneFamily, usize)] = &[
    ("bert-base", BackboneFamily::Bert, 768),
    ("roberta-base", BackboneFamily::Roberta, 768),
    ("albert-base", BackboneFamily::Albert, 768),
    ("codebert-base", BackboneFamily::Roberta, 768),
    ("bertoverflow", BackboneFamily::Bert, 768),
    ("stub", BackboneFamily::Stub, STUB_HIDDEN),
];

#[derive(Debug, Deserialize)]
struct RegistryFile {
    #[serde(default)]
    backbones: BTreeMap<String, RegistryEntry>,
}

#[derive(Debug, Deserialize)]
struct RegistryEntry {
    family: Option<BackboneFamily>,
    hidden_size: Option<usize>,
    max_positions: Option<usize>,
    path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Registry {
    entries: BTreeMap<String, BackboneSpec>,
}

impl Registry {
    /// The built-in identifiers with weights expected under `cache_dir`.
    pub fn builtin(cache_dir: &Path) -> Self {
        let entries = BUILTINS
            .iter()
            .map(|&(id, family, hidden_size)| {
                let location = (family != BackboneFamily::Stub).then(|| cache_dir.join(id));
                let spec = BackboneSpec {
                    identifier: id.to_string(),
                    family,
                    hidden_size,
                    max_positions: MAX_POSITIONS,
                    location,
                };
                (id.to_string(), spec)
            })
            .collect();
        Self { entries }
    }

    /// Built-ins plus the cache directory's `registry.toml`, if present.
    pub fn from_cache_dir(cache_dir: &Path) -> Result<Self> {
        let mut registry = Self::builtin(cache_dir);
        let file = cache_dir.join(REGISTRY_FILE);
        if file.exists() {
            let text = std::fs::read_to_string(&file)?;
            registry.merge_toml(&text, cache_dir)?;
        }
        Ok(registry)
    }

    /// Uses `TAGFORGE_MODEL_CACHE`, falling back to `~/.cache/tagforge/models`.
    pub fn from_env() -> Result<Self> {
        Self::from_cache_dir(&default_cache_dir())
    }

    pub fn merge_toml(&mut self, text: &str, cache_dir: &Path) -> Result<()> {
        let file: RegistryFile =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("{REGISTRY_FILE}: {e}")))?;
        for (id, entry) in file.backbones {
            let base = self.entries.get(&id).cloned();
            let family = entry
                .family
                .or(base.as_ref().map(|b| b.family))
                .ok_or_else(|| Error::InvalidConfig(format!("{REGISTRY_FILE}: {id} needs a family")))?;
            let hidden_size = entry
                .hidden_size
                .or(base.as_ref().map(|b| b.hidden_size))
                .ok_or_else(|| Error::InvalidConfig(format!("{REGISTRY_FILE}: {id} needs hidden_size")))?;
            let location = match entry.path {
                Some(p) if p.is_relative() => Some(cache_dir.join(p)),
                Some(p) => Some(p),
                None => base
                    .as_ref()
                    .and_then(|b| b.location.clone())
                    .or_else(|| (family != BackboneFamily::Stub).then(|| cache_dir.join(&id))),
            };
            let spec = BackboneSpec {
                identifier: id.clone(),
                family,
                hidden_size,
                max_positions: entry.max_positions.unwrap_or(MAX_POSITIONS),
                location,
            };
            spec.validate()?;
            self.entries.insert(id, spec);
        }
        Ok(())
    }

    pub fn resolve(&self, identifier: &str) -> Result<BackboneSpec> {
        self.entries
            .get(identifier)
            .cloned()
            .ok_or_else(|| Error::UnknownBackbone(identifier.to_string()))
    }

    pub fn identifiers(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

pub fn default_cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(MODEL_CACHE_ENV) {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    home.join(".cache").join("tagforge").join("models")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_resolve() {
        let reg = Registry::builtin(Path::new("/cache"));
        let cb = reg.resolve("codebert-base").unwrap();
        assert_eq!(cb.hidden_size, 768);
        assert_eq!(cb.family, BackboneFamily::Roberta);
        assert_eq!(cb.location.as_deref(), Some(Path::new("/cache/codebert-base")));
        let stub = reg.resolve("stub").unwrap();
        assert_eq!((stub.hidden_size, stub.max_positions), (16, 512));
        assert!(matches!(reg.resolve("unknown-x"), Err(Error::UnknownBackbone(_))));
        assert_eq!(reg.identifiers().count(), 6);
    }

    #[test]
    fn toml_overrides_and_adds() {
        let mut reg = Registry::builtin(Path::new("/cache"));
        reg.merge_toml(
            "[backbones.bert-base]\npath = \"/elsewhere\"\n[backbones.tiny]\nfamily = \"albert\"\nhidden_size = 32\npath = \"tiny\"\n",
            Path::new("/cache"),
        )
        .unwrap();
        assert_eq!(
            reg.resolve("bert-base").unwrap().location.unwrap(),
            PathBuf::from("/elsewhere")
        );
        let tiny = reg.resolve("tiny").unwrap();
        assert_eq!(tiny.family, BackboneFamily::Albert);
        assert_eq!(tiny.location.unwrap(), PathBuf::from("/cache/tiny"));
        assert!(reg
            .merge_toml("[backbones.x]\nhidden_size = 2\n", Path::new("/c"))
            .is_err());
    }
}
