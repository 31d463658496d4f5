//! SHA-256 digests for configs, parameters and artifact trees.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of the compact JSON serialization.
pub fn json_digest<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("serializable value"))
}

/// Digest of the exact bit patterns of a sequence of f32 buffers.
pub fn params_digest<'a, I: IntoIterator<Item = &'a [f32]>>(buffers: I) -> String {
    let mut h = Sha256::new();
    for buf in buffers {
        h.update((buf.len() as u64).to_le_bytes());
        for v in buf {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// Every file below `root`, as sorted relative paths.
pub fn relative_files(root: &Path) -> io::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    Ok(files)
}

/// Digest over every file below `root` (relative path and contents), in
/// sorted path order. Files whose name matches `skip` are ignored.
pub fn tree_digest(root: &Path, skip: impl Fn(&Path) -> bool) -> io::Result<String> {
    let files = relative_files(root)?;
    let mut h = Sha256::new();
    for rel in files.into_iter().filter(|p| !skip(p)) {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0u8]);
        let bytes = fs::read(root.join(&rel))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
