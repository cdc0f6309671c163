//! Versioned JSON checkpoints: network kind, config and parameter tensors.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::Scalar;

pub const FORMAT: &str = "refsep-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize)]
struct EnvelopeRef<'a, C, T> {
    format: &'a str,
    version: u32,
    kind: &'a str,
    config: &'a C,
    params: Vec<Vec<T>>,
}

#[derive(Deserialize)]
#[serde(bound = "T: Scalar, C: DeserializeOwned")]
struct Envelope<C, T> {
    format: String,
    version: u32,
    kind: String,
    config: C,
    params: Vec<Vec<T>>,
}

/// Serializes `net` with its config.
pub fn save<C: Serialize, T: Scalar>(
    path: &Path,
    kind: &str,
    config: &C,
    net: &dyn ParamSet<T>,
) -> Result<()> {
    let env = EnvelopeRef {
        format: FORMAT,
        version: VERSION,
        kind,
        config,
        params: net.snapshot(),
    };
    let text = serde_json::to_string(&env).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint of the given kind, returning its config and parameters.
pub fn load<C: DeserializeOwned, T: Scalar>(
    path: &Path,
    kind: &str,
) -> Result<(C, Vec<Vec<T>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let env: Envelope<C, T> =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if env.format != FORMAT {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint", path.display())));
    }
    if env.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {}",
            path.display(),
            env.version
        )));
    }
    if env.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{}: expected a `{kind}` checkpoint, found `{}`",
            path.display(),
            env.kind
        )));
    }
    Ok((env.config, env.params))
}
