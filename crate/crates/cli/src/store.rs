//! Output files: atomic writes and the model directory with its manifest.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use adtarget::BinaryModel;
use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

/// Writes to a temporary file in the target directory, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// File stem for a campaign id: characters outside `[A-Za-z0-9._-]` become `_`.
pub fn file_stem(campaign: &str) -> String {
    let stem: String = campaign
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect();
    if stem.is_empty() || stem.starts_with('.') || stem != campaign {
        // keep stems unique when sanitizing merges two ids
        format!("{stem}-{}", &sha256_hex(campaign.as_bytes())[..8])
    } else {
        stem
    }
}

/// Stems for all campaigns, with any remaining collisions (case-insensitive
/// file systems) resolved by hash suffix.
pub fn file_stems<'a>(campaigns: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    campaigns
        .into_iter()
        .map(|c| {
            let mut stem = file_stem(c);
            if !seen.insert(stem.to_ascii_lowercase()) {
                stem = format!("{stem}-{}", &sha256_hex(c.as_bytes())[..8]);
                seen.insert(stem.to_ascii_lowercase());
            }
            stem
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub campaign: String,
    pub file: String,
    pub sha256: String,
    pub feature_set: String,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailedCampaign {
    pub campaign: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub models: Vec<ManifestEntry>,
    pub failed: Vec<FailedCampaign>,
}

/// Loads the models of a directory, checking hashes when a manifest is present.
/// Without one, every `*.json` file is read.
pub fn load_models(dir: &Path) -> anyhow::Result<Vec<BinaryModel>> {
    let manifest_path = dir.join(MANIFEST);
    let files: Vec<(PathBuf, Option<String>)> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path)?;
        let manifest: Manifest =
            serde_json::from_str(&text).with_context(|| format!("reading {}", manifest_path.display()))?;
        manifest.models.into_iter().map(|e| (dir.join(e.file), Some(e.sha256))).collect()
    } else {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading model directory {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        files.sort();
        files.into_iter().map(|p| (p, None)).collect()
    };
    let mut models = Vec::with_capacity(files.len());
    for (path, expected) in files {
        let bytes = fs::read(&path).with_context(|| format!("reading model {}", path.display()))?;
        if let Some(expected) = expected {
            let got = sha256_hex(&bytes);
            if got != expected {
                bail!("model {} does not match its manifest hash", path.display());
            }
        }
        let text = String::from_utf8(bytes).with_context(|| format!("model {} is not UTF-8", path.display()))?;
        let model = BinaryModel::from_json(&text).with_context(|| format!("parsing model {}", path.display()))?;
        models.push(model);
    }
    if models.is_empty() {
        bail!("no models found in {}", dir.display());
    }
    Ok(models)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems_are_safe_and_unique() {
        assert_eq!(file_stem("c001"), "c001");
        let odd = file_stem("acme/spring sale");
        assert!(odd.starts_with("acme_spring_sale-"));
        assert_ne!(file_stem("a/b"), file_stem("a_b"));
        assert!(file_stem("..").starts_with("..-"));
        let stems = file_stems(["Camp", "camp"]);
        assert_ne!(stems[0].to_ascii_lowercase(), stems[1].to_ascii_lowercase());
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("x.json");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }
}
