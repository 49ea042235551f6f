//! Atomic file emission and report envelopes.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use tempfile::NamedTempFile;

pub const SCHEMA_VERSION: u32 = 1;

/// Every emitted report carries these fields next to its payload.
#[derive(Debug, Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub schema_version: u32,
    pub command: &'a str,
    pub library_version: &'a str,
    pub config_sha256: &'a str,
    #[serde(flatten)]
    pub payload: T,
}

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("cannot create {}", root.display()))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes through a temp file in the same directory, then renames.
    pub fn write_with<F>(&self, name: &str, fill: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut dyn Write) -> Result<()>,
    {
        let target = self.path(name);
        let mut tmp = NamedTempFile::new_in(&self.root)?;
        {
            let mut w = BufWriter::new(tmp.as_file_mut());
            fill(&mut w)?;
            w.flush()?;
        }
        tmp.as_file().sync_all()?;
        tmp.persist(&target)
            .with_context(|| format!("cannot write {}", target.display()))?;
        Ok(target)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }

    pub fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<PathBuf> {
        let text: Vec<Vec<String>> = rows.iter().map(|r| r.iter().map(|v| format_float(*v)).collect()).collect();
        self.write_records(name, header, &text)
    }

    pub fn write_records(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        self.write_with(name, |w| {
            let mut csv = csv::Writer::from_writer(w);
            csv.write_record(header)?;
            for row in rows {
                csv.write_record(row)?;
            }
            csv.flush()?;
            Ok(())
        })
    }
}

/// Shortest round-trip decimal form.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}
