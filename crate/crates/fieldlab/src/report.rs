//! Artifact output: a single-writer sink for CSV/JSON files plus a
//! plain-text manifest that lists every written file with its content hash.
//!
//! Experiment runs must be auditable after the fact: the manifest records
//! which files a run produced, how large they were, and a 64-bit FNV-1a
//! digest of their exact bytes, alongside caller-supplied header lines
//! (config digest, seed, versions).  Nothing here depends on wall-clock
//! time, so a repeated run with the same inputs produces byte-identical
//! artifacts *and* a byte-identical manifest.

use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::Serialize;

use crate::error::{Error, Result};

/// Manifest file name written by [`ArtifactWriter::write_manifest`].
pub const MANIFEST_NAME: &str = "MANIFEST.txt";

/// 64-bit FNV-1a digest of a byte string.
pub fn content_hash(bytes: &[u8]) -> u64 {
    let mut hasher = FnvHasher::default();
    hasher.write(bytes);
    hasher.finish()
}

/// One file recorded by the writer.
#[derive(Debug, Clone, Serialize)]
pub struct ArtifactEntry {
    /// File name relative to the output directory.
    pub name: String,
    /// Size in bytes as written.
    pub bytes: u64,
    /// `content_hash` of the bytes, as 16 lowercase hex digits.
    pub hash: String,
}

/// Single-writer artifact sink for one output directory.
///
/// All files of a run go through one writer so the manifest is complete by
/// construction; file names are flat (no path separators) and unique.
#[derive(Debug)]
pub struct ArtifactWriter {
    dir: PathBuf,
    entries: Vec<ArtifactEntry>,
}

impl ArtifactWriter {
    /// Open a writer on `dir`, creating the directory if needed.
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(ArtifactWriter {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
        })
    }

    /// The output directory.
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Files written so far, in write order.
    pub fn entries(&self) -> &[ArtifactEntry] {
        &self.entries
    }

    fn check_name(&self, name: &str) -> Result<()> {
        if name.is_empty()
            || name.contains('/')
            || name.contains('\\')
            || name == "."
            || name == ".."
        {
            return Err(Error::domain(
                "artifact_writer",
                format!("artifact name {name:?} must be a plain file name"),
            ));
        }
        if name == MANIFEST_NAME {
            return Err(Error::domain(
                "artifact_writer",
                "the manifest name is reserved",
            ));
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::domain(
                "artifact_writer",
                format!("artifact {name:?} written twice"),
            ));
        }
        Ok(())
    }

    /// Write a UTF-8 text artifact (CSV, plain text) and record it.
    pub fn write_text(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        self.check_name(name)?;
        let path = self.dir.join(name);
        fs::write(&path, contents.as_bytes())?;
        self.entries.push(ArtifactEntry {
            name: name.to_string(),
            bytes: contents.len() as u64,
            hash: format!("{:016x}", content_hash(contents.as_bytes())),
        });
        Ok(path)
    }

    /// Serialize `value` as pretty-printed JSON (with a trailing newline)
    /// and record it.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    /// Write the manifest: caller-supplied `key: value` header lines, then
    /// one line per artifact with byte count and content hash.  Returns the
    /// manifest path; the manifest itself is not an entry.
    pub fn write_manifest(&self, headers: &[(String, String)]) -> Result<PathBuf> {
        let mut text = String::new();
        for (key, value) in headers {
            text.push_str(&format!("{key}: {value}\n"));
        }
        text.push_str("artifacts:\n");
        for e in &self.entries {
            text.push_str(&format!("  {}  {} bytes  fnv1a64:{}\n", e.name, e.bytes, e.hash));
        }
        let path = self.dir.join(MANIFEST_NAME);
        fs::write(&path, text.as_bytes())?;
        Ok(path)
    }
}
