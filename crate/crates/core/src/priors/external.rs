//! Configuration surface for pretrained backends.
//!
//! Pretrained networks are not linked into this crate. An external backend
//! implements the provider traits in its own crate and is handed to the
//! trainer directly; this module only resolves where such a backend would
//! look for weights so configs naming one fail with a clear message.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::PriorError;

/// Environment variable pointing at the adapter weight cache.
pub const CACHE_ENV: &str = "SPLATSTYLE_CACHE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Toy,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    Embedding,
    Features,
    Descriptor,
    Score,
    Stylizer,
}

impl PriorKind {
    pub fn name(self) -> &'static str {
        match self {
            PriorKind::Embedding => "embedding",
            PriorKind::Features => "features",
            PriorKind::Descriptor => "descriptor",
            PriorKind::Score => "score",
            PriorKind::Stylizer => "stylizer",
        }
    }
}

/// Cache directory from [`CACHE_ENV`], falling back to `~/.cache/splatstyle`.
pub fn cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(CACHE_ENV) {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_default();
    home.join(".cache").join("splatstyle")
}

/// Error returned when a config asks for an external backend that was not
/// injected programmatically.
pub fn unavailable(kind: PriorKind, model: Option<&str>) -> PriorError {
    PriorError::BackendUnavailable(format!(
        "{} prior `{}` requires an external adapter (weights under {}); \
         this build only ships the toy backend",
        kind.name(),
        model.unwrap_or("<unspecified>"),
        cache_dir().display()
    ))
}
