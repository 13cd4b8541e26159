//! The per-directory artifact manifest.
//!
//! `artifacts.sha256` lists every file a run produced as
//! `<sha256>  <path relative to the output dir>`, sorted by path, in the
//! format `sha256sum -c` reads. Later runs into the same directory update
//! their own lines and keep the rest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "artifacts.sha256";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct Artifacts {
    root: PathBuf,
    entries: BTreeMap<String, String>,
}

impl Artifacts {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf(), entries: BTreeMap::new() }
    }

    /// Writes `bytes` under the output directory and records it.
    pub fn write(&mut self, relative: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
        let path = self.root.join(relative);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.entries.insert(relative.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    /// Records a file some other code already wrote.
    pub fn record(&mut self, relative: &str) -> anyhow::Result<String> {
        let path = self.root.join(relative);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        let digest = sha256_hex(&bytes);
        self.entries.insert(relative.to_string(), digest.clone());
        Ok(digest)
    }

    /// Digest over this run's `(path, digest)` lines.
    pub fn combined_digest(&self) -> String {
        sha256_hex(render(&self.entries).as_bytes())
    }

    /// Merges this run's entries into the directory manifest.
    pub fn finish(self) -> anyhow::Result<()> {
        let path = self.root.join(MANIFEST_NAME);
        let mut all = match fs::read_to_string(&path) {
            Ok(text) => parse(&text),
            Err(_) => BTreeMap::new(),
        };
        all.extend(self.entries);
        fs::write(&path, render(&all)).with_context(|| format!("writing {}", path.display()))
    }
}

fn render(entries: &BTreeMap<String, String>) -> String {
    entries.iter().map(|(p, d)| format!("{d}  {p}\n")).collect()
}

fn parse(text: &str) -> BTreeMap<String, String> {
    text.lines().filter_map(|l| l.split_once("  ")).map(|(d, p)| (p.to_string(), d.to_string())).collect()
}
