//! Provenance headers and versioned JSON documents.

use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const TOOL: &str = "metareg";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    /// SHA-256 of the command, its options and the contents of its inputs.
    pub config_sha256: String,
}

impl Provenance {
    pub fn new(command: &str, seed: u64, options: &serde_json::Value, inputs: &[&Path]) -> Result<Self, CliError> {
        let mut hasher = Sha256::new();
        hasher.update(command.as_bytes());
        hasher.update([0]);
        hasher.update(serde_json::to_vec(options).map_err(|e| CliError::Usage(e.to_string()))?);
        for path in inputs {
            let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
            hasher.update([0]);
            hasher.update(Sha256::digest(&bytes));
        }
        Ok(Provenance {
            tool: TOOL.to_string(),
            version: VERSION.to_string(),
            seed,
            config_sha256: format!("{:x}", hasher.finalize()),
        })
    }

    pub fn line(&self) -> String {
        format!("{} {} seed={} config_sha256={}", self.tool, self.version, self.seed, self.config_sha256)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Document<T> {
    schema_version: u32,
    kind: String,
    provenance: Provenance,
    data: T,
}

/// Read the payload of a versioned document, checking its kind and schema version.
pub fn read_document<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<(T, Provenance), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    let version = raw.get("schema_version").and_then(serde_json::Value::as_u64);
    if version != Some(SCHEMA_VERSION as u64) {
        return Err(CliError::Format(format!(
            "{}: schema-version mismatch (found {}, expected {SCHEMA_VERSION})",
            path.display(),
            version.map_or("none".to_string(), |v| v.to_string())
        )));
    }
    let found = raw.get("kind").and_then(serde_json::Value::as_str).unwrap_or("");
    if found != kind {
        return Err(CliError::Format(format!("{}: expected a {kind} document, found '{found}'", path.display())));
    }
    let doc: Document<T> =
        serde_json::from_value(raw).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    Ok((doc.data, doc.provenance))
}

/// The output directory. Files are only ever created directly inside it.
pub struct OutDir {
    root: PathBuf,
    provenance: Provenance,
    written: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(root: &Path, provenance: Provenance) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(OutDir { root: root.to_path_buf(), provenance, written: Vec::new() })
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    fn path(&self, name: &str) -> Result<PathBuf, CliError> {
        let mut parts = Path::new(name).components();
        match (parts.next(), parts.next()) {
            (Some(Component::Normal(_)), None) => Ok(self.root.join(name)),
            _ => Err(CliError::Usage(format!("refusing to write '{name}' outside the output directory"))),
        }
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(name)?;
        let mut f = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        f.write_all(bytes).map_err(|e| CliError::io(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    /// CSV body preceded by a `#` provenance comment.
    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(|e| CliError::Format(e.to_string()))?;
        for row in rows {
            w.write_record(row).map_err(|e| CliError::Format(e.to_string()))?;
        }
        let body = w.into_inner().map_err(|e| CliError::Format(e.to_string()))?;
        self.write_with_comment(name, &body)
    }

    pub fn write_with_comment(&mut self, name: &str, body: &[u8]) -> Result<(), CliError> {
        let mut bytes = format!("# {}\n", self.provenance.line()).into_bytes();
        bytes.extend_from_slice(body);
        self.write_bytes(name, &bytes)
    }

    pub fn write_document<T: Serialize>(&mut self, name: &str, kind: &str, data: &T) -> Result<(), CliError> {
        let doc = Document {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            provenance: self.provenance.clone(),
            data,
        };
        let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Format(e.to_string()))?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_markdown(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let text = format!("<!-- {} -->\n{body}", self.provenance.line());
        self.write_bytes(name, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_must_stay_inside() {
        let dir = tempfile::tempdir().unwrap();
        let prov = Provenance::new("x", 1, &serde_json::json!({}), &[]).unwrap();
        let mut out = OutDir::create(dir.path(), prov).unwrap();
        assert!(out.write_markdown("../escape.md", "x").is_err());
        assert!(out.write_markdown("/tmp/abs.md", "x").is_err());
        assert!(out.write_markdown("sub/inner.md", "x").is_err());
        out.write_markdown("ok.md", "x").unwrap();
        assert_eq!(out.written().len(), 1);
    }

    #[test]
    fn hash_depends_on_options_and_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        fs::write(&input, "a").unwrap();
        let a = Provenance::new("fit", 0, &serde_json::json!({"k": 1}), &[&input]).unwrap();
        let b = Provenance::new("fit", 0, &serde_json::json!({"k": 2}), &[&input]).unwrap();
        fs::write(&input, "b").unwrap();
        let c = Provenance::new("fit", 0, &serde_json::json!({"k": 1}), &[&input]).unwrap();
        assert_ne!(a.config_sha256, b.config_sha256);
        assert_ne!(a.config_sha256, c.config_sha256);
        assert_eq!(a.config_sha256.len(), 64);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        fs::write(&path, r#"{"schema_version": 99, "kind": "model", "provenance": {}, "data": {}}"#).unwrap();
        let err = read_document::<serde_json::Value>(&path, "model").unwrap_err();
        assert!(err.to_string().contains("schema-version mismatch"));
    }
}
