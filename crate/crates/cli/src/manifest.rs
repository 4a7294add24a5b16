//! Run manifest: config hash, seed, package versions, and the files the
//! run produced. Written next to the primary output; on a module error the
//! manifest still appears, carrying the error payload. No timestamps, so
//! identical runs produce identical manifests.

use crate::CliError;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    pub outputs: Vec<PathBuf>,
    pub error: Option<String>,
}

pub fn config_hash(config_text: &str) -> String {
    let mut h = Sha256::new();
    h.update(config_text.as_bytes());
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.toml")
}

impl Manifest {
    pub fn write(&self, out: &Path) -> Result<PathBuf, CliError> {
        let path = manifest_path(out);
        let mut text = String::new();
        text.push_str(&format!("config_sha256 = \"{}\"\n", self.config_sha256));
        text.push_str(&format!("seed = {}\n", self.seed));
        text.push_str("outputs = [");
        for (i, f) in self.outputs.iter().enumerate() {
            if i > 0 {
                text.push_str(", ");
            }
            text.push_str(&format!("\"{}\"", f.display()));
        }
        text.push_str("]\n");
        if let Some(err) = &self.error {
            text.push_str(&format!("error = {:?}\n", err));
        }
        text.push_str("\n[versions]\n");
        text.push_str(&format!(
            "fluxstat-cli = \"{}\"\n",
            env!("CARGO_PKG_VERSION")
        ));
        text.push_str(&format!(
            "fluxstat-core = \"{}\"\n",
            fluxstat_core::VERSION
        ));
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)
                    .map_err(|e| CliError::Module(format!("creating {}: {e}", parent.display())))?;
            }
        }
        fs::write(&path, text)
            .map_err(|e| CliError::Module(format!("writing {}: {e}", path.display())))?;
        Ok(path)
    }
}
