use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Result;

/// One CSV produced for a (test, cross-section, dictionary) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub test: String,
    pub cross_section: String,
    pub dictionary: String,
    pub file: String,
    pub rows: usize,
}

/// Collects CSV tables in a directory and indexes them in `manifest.json`.
#[derive(Debug)]
pub struct ReportWriter {
    dir: PathBuf,
    files: Vec<ReportFile>,
    summary: serde_json::Map<String, serde_json::Value>,
}

impl ReportWriter {
    pub fn new(dir: impl AsRef<Path>) -> Result<Self> {
        std::fs::create_dir_all(dir.as_ref())?;
        Ok(Self {
            dir: dir.as_ref().to_path_buf(),
            files: Vec::new(),
            summary: serde_json::Map::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes `rows` (serde records) to `<test>__<cross_section>__<dictionary>.csv`.
    pub fn table<T: Serialize>(&mut self, test: &str, cross_section: &str, dictionary: &str, rows: &[T]) -> Result<PathBuf> {
        let file = format!("{test}__{cross_section}__{dictionary}.csv").replace(['/', ' '], "_");
        let path = self.dir.join(&file);
        let mut w = csv::Writer::from_path(&path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        self.files.push(ReportFile {
            test: test.into(),
            cross_section: cross_section.into(),
            dictionary: dictionary.into(),
            file,
            rows: rows.len(),
        });
        Ok(path)
    }

    /// Adds a headline value to the manifest's `summary` object.
    pub fn summary(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.summary.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn finish(self) -> Result<PathBuf> {
        let path = self.dir.join("manifest.json");
        let manifest = serde_json::json!({
            "files": self.files,
            "summary": self.summary,
        });
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(path)
    }
}
