//! Run manifests: what was run, on which inputs, and what it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    /// Arguments after merging the config file; replay runs these.
    pub effective_args: Vec<String>,
    pub seed: u64,
    /// Every setting of the run, defaults included.
    pub config: BTreeMap<String, String>,
    /// SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every output file relative to the output directory, taken
    /// with the columns in `volatile_columns` removed.
    pub outputs: BTreeMap<String, String>,
    /// CSV columns that legitimately differ between runs, such as timings.
    pub volatile_columns: BTreeMap<String, Vec<String>>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Files under `path` (or `path` itself) in sorted order.
pub fn files_under(path: &Path) -> std::io::Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    let mut out = Vec::new();
    for e in entries {
        out.extend(files_under(&e)?);
    }
    Ok(out)
}

/// `text` with the named CSV columns removed from every row.
pub fn drop_columns(text: &str, columns: &[String]) -> String {
    let mut lines = text.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let keep: Vec<bool> = header.split(',').map(|h| !columns.iter().any(|c| c == h)).collect();
    let mut out = String::new();
    for line in std::iter::once(header).chain(lines) {
        let row: Vec<&str> = line.split(',').zip(&keep).filter(|(_, k)| **k).map(|(v, _)| v).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Hash of a file's content, ignoring volatile columns if any.
pub fn stable_hash(path: &Path, volatile: Option<&Vec<String>>) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    Ok(match volatile {
        Some(cols) => sha256_hex(drop_columns(&String::from_utf8_lossy(&bytes), cols).as_bytes()),
        None => sha256_hex(&bytes),
    })
}

/// Output bookkeeping for one command.
pub struct Run {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    volatile: BTreeMap<String, Vec<String>>,
}

impl Run {
    pub fn new(out_dir: PathBuf, seed: u64) -> Result<Self, CliError> {
        fs::create_dir_all(&out_dir).map_err(|e| CliError::Failed(format!("{}: {e}", out_dir.display())))?;
        Ok(Self {
            out_dir,
            seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            volatile: BTreeMap::new(),
        })
    }

    /// Records checksums of an input file or of every file under a directory.
    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let files = files_under(path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
        for f in files {
            let bytes = fs::read(&f).map_err(|e| CliError::Failed(format!("{}: {e}", f.display())))?;
            self.inputs.insert(f.to_string_lossy().into_owned(), sha256_hex(&bytes));
        }
        Ok(())
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::Failed(format!("{}: {e}", parent.display())))?;
        }
        fs::write(&p, bytes).map_err(|e| CliError::Failed(format!("{}: {e}", p.display())))?;
        self.outputs.push(rel.to_string());
        Ok(p)
    }

    /// Writes a CSV whose `columns` are excluded from replay comparison.
    pub fn write_volatile(&mut self, rel: &str, text: &str, columns: &[&str]) -> Result<PathBuf, CliError> {
        self.volatile.insert(rel.to_string(), columns.iter().map(|c| c.to_string()).collect());
        self.write(rel, text.as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(e.to_string()))?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Registers files that library code wrote under `rel`.
    pub fn record_dir(&mut self, rel: &str) -> Result<(), CliError> {
        let root = self.path(rel);
        for f in files_under(&root).map_err(|e| CliError::Failed(format!("{}: {e}", root.display())))? {
            let r = f.strip_prefix(&self.out_dir).expect("under out dir");
            self.outputs.push(r.to_string_lossy().into_owned());
        }
        Ok(())
    }

    pub fn finish(
        self,
        command: &str,
        argv: Vec<String>,
        effective_args: Vec<String>,
        config: BTreeMap<String, String>,
    ) -> Result<Manifest, CliError> {
        let mut outputs = BTreeMap::new();
        for rel in &self.outputs {
            outputs.insert(rel.clone(), stable_hash(&self.path(rel), self.volatile.get(rel))?);
        }
        let m = Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv,
            effective_args,
            seed: self.seed,
            config,
            inputs: self.inputs,
            outputs,
            volatile_columns: self.volatile,
        };
        let mut text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Failed(e.to_string()))?;
        text.push('\n');
        let p = self.out_dir.join(MANIFEST_FILE);
        fs::write(&p, text).map_err(|e| CliError::Failed(format!("{}: {e}", p.display())))?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropping_a_column() {
        let csv = "epoch,loss,wall_seconds\n1,0.5,3.2\n2,0.25,6.9\n";
        assert_eq!(drop_columns(csv, &["wall_seconds".into()]), "epoch,loss\n1,0.5\n2,0.25\n");
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
