use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::portfolio::{load_csv, LoadOptions, Portfolio};

use super::{Format, GlobalArgs};

/// Writes files under one directory, creating it on first use.
pub(crate) struct Out {
    pub dir: PathBuf,
    pub format: Format,
}

impl Out {
    pub fn new(global: &GlobalArgs) -> Self {
        Self { dir: global.out_dir.clone(), format: global.format }
    }

    pub fn sub(&self, name: &str) -> Self {
        Self { dir: self.dir.join(name), format: self.format }
    }

    pub fn path(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.dir)?;
        Ok(self.dir.join(name))
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name)?;
        fs::write(&p, bytes)?;
        Ok(p)
    }

    /// Writes `f(writer)` into `name`.
    pub fn with_file(&self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<PathBuf> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, buf)
    }

    /// A table of flat rows as `stem.csv` or `stem.json` per `--format`.
    pub fn table<T: Serialize>(&self, stem: &str, rows: &[T]) -> Result<PathBuf> {
        match self.format {
            Format::Csv => self.with_file(&format!("{stem}.csv"), |buf| {
                let mut w = csv::Writer::from_writer(buf);
                for r in rows {
                    w.serialize(r)?;
                }
                w.flush()?;
                Ok(())
            }),
            Format::Json => self.json(&format!("{stem}.json"), rows),
        }
    }

    pub fn json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s)
    }
}

pub(crate) fn load(path: &Path, lenient: bool) -> Result<Portfolio> {
    let report = load_csv(path, LoadOptions { lenient })?;
    for w in &report.warnings {
        eprintln!("warning: {}: {w}", path.display());
    }
    for r in &report.rejected {
        eprintln!("warning: {}: skipped line {}: {}", path.display(), r.line, r.message);
    }
    Ok(report.portfolio)
}

/// Label for a smoothing level in file names, e.g. `0.25`.
pub(crate) fn a_label(a: f64) -> String {
    format!("{a}")
}
