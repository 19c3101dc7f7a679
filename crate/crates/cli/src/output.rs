use std::fs;
use std::io::Write;
use std::path::Path;

use lossatlas_core::atlas::{parse_manifest, Manifest};

use crate::error::{CliError, Result};

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
    parse_manifest(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Refuse to replace an existing output unless forced.
pub fn check_target(path: Option<&Path>, force: bool) -> Result<()> {
    match path {
        Some(p) if p.exists() && !force => Err(CliError::Usage(format!(
            "{} exists; pass --force to overwrite",
            p.display()
        ))),
        _ => Ok(()),
    }
}

/// Write to `path` through a temporary sibling, or to stdout.
pub fn write_bytes(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    let Some(path) = path else {
        let mut out = std::io::stdout().lock();
        return out
            .write_all(bytes)
            .and_then(|_| out.flush())
            .map_err(|e| CliError::Domain(format!("cannot write to stdout: {e}")));
    };
    let fail = |e: std::io::Error| CliError::Domain(format!("cannot write {}: {e}", path.display()));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(fail)?;
    }
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(fail)?;
    fs::rename(&tmp, path).map_err(fail)
}

pub fn write_json(path: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON value serializes");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}
