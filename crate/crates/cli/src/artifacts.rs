//! `digests.json`: the producing config digest and a SHA-256 per file,
//! written next to every command's output and checked by `--verify`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use granule_rating::digest::{relative_files, sha256_hex, write_atomic};
use serde::{Deserialize, Serialize};

pub const DIGESTS_FILE: &str = "digests.json";

/// Files that legitimately differ between identical runs.
pub const VOLATILE_FILES: [&str; 1] = ["timing.jsonl"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactDigests {
    pub command: String,
    pub config_digest: String,
    /// Digest over the sorted `files` entries.
    pub tree_digest: String,
    pub files: BTreeMap<String, String>,
}

fn is_tracked(rel: &Path) -> bool {
    let name = rel.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    name != DIGESTS_FILE && !VOLATILE_FILES.contains(&name) && !name.ends_with(".tmp")
}

fn file_digests(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = BTreeMap::new();
    for rel in relative_files(root)?.into_iter().filter(|r| is_tracked(r)) {
        let bytes = fs::read(root.join(&rel))?;
        files.insert(rel.to_string_lossy().replace('\\', "/"), sha256_hex(&bytes));
    }
    Ok(files)
}

fn combine(files: &BTreeMap<String, String>) -> String {
    let joined: String = files.iter().map(|(k, v)| format!("{k}\t{v}\n")).collect();
    sha256_hex(joined.as_bytes())
}

pub fn write_digests(root: &Path, command: &str, config_digest: &str) -> Result<ArtifactDigests> {
    let files = file_digests(root)?;
    let d = ArtifactDigests {
        command: command.to_string(),
        config_digest: config_digest.to_string(),
        tree_digest: combine(&files),
        files,
    };
    let mut text = serde_json::to_string_pretty(&d)?;
    text.push('\n');
    write_atomic(&root.join(DIGESTS_FILE), text.as_bytes())?;
    Ok(d)
}

pub fn read_digests(root: &Path) -> Result<ArtifactDigests> {
    let path = root.join(DIGESTS_FILE);
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Problems found when re-hashing `root` against its `digests.json`; empty
/// when everything matches.
pub fn verify_digests(root: &Path, config_digest: Option<&str>) -> Result<Vec<String>> {
    let recorded = read_digests(root)?;
    let actual = file_digests(root)?;
    let mut problems = Vec::new();
    if let Some(c) = config_digest {
        if c != recorded.config_digest {
            problems.push(format!(
                "config digest {} differs from the recorded {}",
                c, recorded.config_digest
            ));
        }
    }
    for (name, digest) in &recorded.files {
        match actual.get(name) {
            None => problems.push(format!("{name}: missing")),
            Some(d) if d != digest => problems.push(format!("{name}: content changed")),
            _ => {}
        }
    }
    for name in actual.keys().filter(|k| !recorded.files.contains_key(*k)) {
        problems.push(format!("{name}: not in {DIGESTS_FILE}"));
    }
    if combine(&recorded.files) != recorded.tree_digest {
        problems.push("tree digest does not match the file list".into());
    }
    Ok(problems)
}
