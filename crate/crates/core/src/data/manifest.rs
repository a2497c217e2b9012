use super::{read_features, Utterance};
use crate::error::{Error, Result};
use crate::lexicon::TokenVocab;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Feature file path; relative paths resolve against the manifest's directory.
    pub feats: String,
    pub text: String,
    pub domain: String,
}

/// Ordered utterance list stored as JSON lines.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Directory used to resolve relative feature paths.
    pub base: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let m = Self {
            records,
            base: PathBuf::new(),
        };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::arg(format!("duplicate utterance id {}", r.id)));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })?;
            records.push(rec);
        }
        let m = Self {
            records,
            base: base.to_path_buf(),
        };
        m.check_unique()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, &base)
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serialises") + "\n")
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn resolve(&self, rec: &ManifestRecord) -> PathBuf {
        let p = Path::new(&rec.feats);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Loads every utterance of a manifest; a missing feature file is an I/O error.
pub fn load_utterances(manifest: &Manifest, vocab: &TokenVocab) -> Result<Vec<Utterance>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let path = manifest.resolve(r);
            if !path.exists() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("feature file {} not found", path.display()),
                )));
            }
            Ok(Utterance {
                id: r.id.clone(),
                features: read_features(&path)?,
                tokens: vocab.encode(&r.text),
                domain: r.domain.clone(),
            })
        })
        .collect()
}
