//! Append-only metrics log: one JSON object per line.
//!
//! The first line is a header embedding the full flat configuration and its
//! digest; every following line is `{"step": N, "name": "...", "value": V}`.
//! Identical runs must produce byte-identical files, so the writer does no
//! timestamps, no environment lookups, and no non-deterministic formatting.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use super::config::RunConfig;

pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

#[derive(Serialize)]
struct Header<'a> {
    config: &'a BTreeMap<String, Value>,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct Line<'a> {
    step: u64,
    name: &'a str,
    value: Value,
}

impl MetricsWriter {
    /// Creates the file and writes the header line.
    pub fn create(path: impl Into<PathBuf>, cfg: &RunConfig) -> io::Result<Self> {
        let path = path.into();
        let mut out = BufWriter::new(File::create(&path)?);
        let header =
            Header { config: &cfg.to_flat(), config_hash: &cfg.hash_hex() };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        Ok(Self { out, path })
    }

    /// Continues an existing log (resume) or creates a fresh one with a
    /// header when the file is absent or empty.
    pub fn open_or_create(path: impl Into<PathBuf>, cfg: &RunConfig) -> io::Result<Self> {
        let path = path.into();
        match std::fs::metadata(&path) {
            Ok(meta) if meta.len() > 0 => {
                let out = BufWriter::new(OpenOptions::new().append(true).open(&path)?);
                Ok(Self { out, path })
            }
            _ => Self::create(path, cfg),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one entry. Non-finite values serialise as `null`, since JSON
    /// has no spelling for them; the trainer aborts on non-finite losses
    /// before they would normally reach the log.
    pub fn log(&mut self, step: u64, name: &str, value: f64) -> io::Result<()> {
        let value = serde_json::Number::from_f64(value).map_or(Value::Null, Value::Number);
        serde_json::to_writer(&mut self.out, &Line { step, name, value })?;
        self.out.write_all(b"\n")
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(path: &Path) -> Vec<String> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(str::to_owned)
            .collect()
    }

    #[test]
    fn header_precedes_entries_and_carries_the_config_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let cfg = RunConfig::default();
        let mut w = MetricsWriter::create(&path, &cfg).unwrap();
        w.log(0, "episode/return", -12.5).unwrap();
        w.log(100, "wm/total", 3.25).unwrap();
        w.flush().unwrap();

        let all = lines(&path);
        assert_eq!(all.len(), 3);
        let header: Value = serde_json::from_str(&all[0]).unwrap();
        assert_eq!(header["config_hash"], Value::from(cfg.hash_hex()));
        assert_eq!(header["config"]["train.batch"], Value::from(8));
        assert_eq!(
            all[1],
            r#"{"step":0,"name":"episode/return","value":-12.5}"#
        );
        assert_eq!(all[2], r#"{"step":100,"name":"wm/total","value":3.25}"#);
    }

    #[test]
    fn reopening_appends_without_a_second_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let cfg = RunConfig::default();
        {
            let mut w = MetricsWriter::create(&path, &cfg).unwrap();
            w.log(1, "a", 1.0).unwrap();
            w.flush().unwrap();
        }
        {
            let mut w = MetricsWriter::open_or_create(&path, &cfg).unwrap();
            w.log(2, "b", 2.0).unwrap();
            w.flush().unwrap();
        }
        let all = lines(&path);
        assert_eq!(all.len(), 3);
        assert!(all[0].contains("config_hash"));
        assert!(!all[1].contains("config_hash"));
        assert!(all[2].ends_with(r#""value":2.0}"#));
    }

    #[test]
    fn non_finite_values_become_null() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut w = MetricsWriter::create(&path, &RunConfig::default()).unwrap();
        w.log(5, "bad", f64::NAN).unwrap();
        w.flush().unwrap();
        assert_eq!(lines(&path)[1], r#"{"step":5,"name":"bad","value":null}"#);
    }
}
