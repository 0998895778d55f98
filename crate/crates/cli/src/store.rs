//! Artifact files inside the working directory.
//!
//! JSON Lines files start with a `{"meta": ...}` line, CSV files with a
//! `# cfgx ...` comment line, and JSON documents carry a top-level `meta`
//! object. All three record the producing command, config hash and seed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const GRAPHS: &str = "graphs.jsonl";
pub const TRUTH: &str = "truth.json";
pub const ENCODED: &str = "encoded.jsonl";
pub const AE: &str = "ae.json";
pub const AE_LOSS: &str = "ae_loss.csv";
pub const FEATURES: &str = "features.jsonl";
pub const SPLIT: &str = "split.json";
pub const GNN: &str = "gnn.json";
pub const METRICS: &str = "metrics.csv";
pub const PGEXPLAINER: &str = "pgexplainer.json";
pub const PG_LOSS: &str = "pg_loss.csv";
pub const FUSION: &str = "fusion.json";
pub const SWEEP: &str = "sweep.csv";
pub const FIDELITY: &str = "fidelity.csv";
pub const CONSISTENCY: &str = "consistency.csv";

pub fn explanations(method: &str) -> String {
    format!("explanations/{method}.jsonl")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Meta {
    pub fn new(command: &str, config_hash: String, seed: u64) -> Self {
        Meta {
            command: command.into(),
            config_hash,
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, serde_json::Value> {
        match serde_json::to_value(self).expect("meta serializes") {
            serde_json::Value::Object(m) => m.into_iter().collect(),
            _ => unreachable!(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: Meta,
}

/// A JSON Lines body: `(line number, text)` pairs after the meta line.
pub struct Lines {
    pub file: String,
    pub meta: Option<Meta>,
    pub lines: Vec<(usize, String)>,
}

impl Lines {
    /// Parse every line with `f`, attaching the line number to errors.
    pub fn parse<T>(&self, f: impl Fn(&[u8]) -> cfgx::Result<T> + Sync) -> Result<Vec<T>>
    where
        T: Send,
    {
        use rayon::prelude::*;
        self.lines
            .par_iter()
            .map(|(n, text)| {
                f(text.as_bytes()).map_err(|source| CliError::Artifact {
                    file: format!("{} line {n}", self.file),
                    source,
                })
            })
            .collect()
    }

    pub fn parse_json<T: DeserializeOwned + Send>(&self) -> Result<Vec<T>> {
        self.parse(|bytes| {
            let de = &mut serde_json::Deserializer::from_slice(bytes);
            serde_path_to_error::deserialize(de).map_err(|e| cfgx::Error::Parse {
                field: e.path().to_string(),
                msg: e.inner().to_string(),
            })
        })
    }
}

pub struct Store {
    dir: PathBuf,
    meta: Meta,
}

impl Store {
    pub fn new(dir: impl Into<PathBuf>, meta: Meta) -> Self {
        Store {
            dir: dir.into(),
            meta,
        }
    }

    pub fn meta(&self) -> &Meta {
        &self.meta
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).is_file()
    }

    fn io(path: &Path, source: std::io::Error) -> CliError {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn read(&self, name: &str, producer: &'static str) -> Result<Vec<u8>> {
        let path = self.path(name);
        if !path.is_file() {
            return Err(CliError::Missing {
                file: path.display().to_string(),
                producer,
            });
        }
        std::fs::read(&path).map_err(|e| Self::io(&path, e))
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Self::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Self::io(&path, e))?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    pub fn write_lines(&self, name: &str, lines: impl IntoIterator<Item = String>) -> Result<PathBuf> {
        let mut out = serde_json::to_string(&MetaLine {
            meta: self.meta.clone(),
        })
        .expect("meta serializes");
        out.push('\n');
        for line in lines {
            out.push_str(&line);
            out.push('\n');
        }
        self.write(name, out.as_bytes())
    }

    /// Read a JSON Lines file. The meta line is optional so that hand-made
    /// graph files can be fed in directly.
    pub fn read_lines(&self, name: &str, producer: &'static str) -> Result<Lines> {
        let bytes = self.read(name, producer)?;
        let text = String::from_utf8(bytes).map_err(|e| CliError::format(name, e))?;
        let mut meta = None;
        let mut lines = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if i == 0 && line.starts_with("{\"meta\"") {
                let m: MetaLine = serde_json::from_str(line)
                    .map_err(|e| CliError::format(format!("{name} line 1"), e))?;
                meta = Some(m.meta);
                continue;
            }
            lines.push((i + 1, line.to_string()));
        }
        Ok(Lines {
            file: self.path(name).display().to_string(),
            meta,
            lines,
        })
    }

    /// Write `{"meta": .., <fields of value>}` as pretty JSON.
    pub fn write_json(&self, name: &str, value: impl Serialize) -> Result<PathBuf> {
        let mut obj = serde_json::Map::new();
        obj.insert("meta".into(), serde_json::to_value(&self.meta).expect("meta serializes"));
        match serde_json::to_value(value).expect("artifact serializes") {
            serde_json::Value::Object(fields) => obj.extend(fields),
            other => {
                obj.insert("value".into(), other);
            }
        }
        let mut bytes = serde_json::to_vec_pretty(&obj).expect("artifact serializes");
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Read a JSON document, ignoring its `meta` field.
    pub fn read_json<T: DeserializeOwned>(&self, name: &str, producer: &'static str) -> Result<T> {
        let bytes = self.read(name, producer)?;
        let mut value: serde_json::Value =
            serde_json::from_slice(&bytes).map_err(|e| CliError::format(name, e))?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("meta");
        }
        serde_path_to_error::deserialize(value)
            .map_err(|e| CliError::format(name, format!("at `{}`: {}", e.path(), e.inner())))
    }

    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let mut buf = Vec::new();
        writeln!(
            buf,
            "# cfgx {} config_hash={} seed={} version={}",
            self.meta.command, self.meta.config_hash, self.meta.seed, self.meta.version
        )
        .expect("write to vec");
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            for row in rows {
                w.serialize(row).map_err(|e| CliError::format(name, e))?;
            }
            w.flush().map_err(|e| Self::io(&self.path(name), e))?;
        }
        self.write(name, &buf)
    }

    pub fn read_csv<T: DeserializeOwned>(&self, name: &str, producer: &'static str) -> Result<Vec<T>> {
        let bytes = self.read(name, producer)?;
        csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(bytes.as_slice())
            .deserialize()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| CliError::format(format!("{name} row {}", i + 1), e)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::new(dir.path(), Meta::new("test", "abc".into(), 7));
        (dir, s)
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        name: String,
        value: f64,
        opt: Option<f64>,
    }

    #[test]
    fn csv_roundtrip_with_header() {
        let (_d, s) = store();
        let rows = vec![
            Row { name: "a".into(), value: 0.1, opt: None },
            Row { name: "b".into(), value: 1e-17, opt: Some(2.5) },
        ];
        s.write_csv("x.csv", &rows).unwrap();
        let text = std::fs::read_to_string(s.path("x.csv")).unwrap();
        assert!(text.starts_with("# cfgx test config_hash=abc seed=7"));
        assert_eq!(s.read_csv::<Row>("x.csv", "test").unwrap(), rows);
    }

    #[test]
    fn lines_keep_meta_and_numbers() {
        let (_d, s) = store();
        s.write_lines("sub/x.jsonl", ["1".to_string(), "2".to_string()]).unwrap();
        let l = s.read_lines("sub/x.jsonl", "test").unwrap();
        assert_eq!(l.meta.as_ref().unwrap().seed, 7);
        assert_eq!(l.lines, vec![(2, "1".to_string()), (3, "2".to_string())]);
        assert_eq!(l.parse_json::<u32>().unwrap(), vec![1, 2]);
    }

    #[test]
    fn missing_file_names_producer() {
        let (_d, s) = store();
        let err = s.read("gnn.json", "train-gnn").unwrap_err();
        assert!(err.to_string().contains("run `cfgx train-gnn` first"), "{err}");
        assert_eq!(err.exit_code(), crate::error::EXIT_VALIDATION);
    }

    #[test]
    fn json_document_carries_meta() {
        let (_d, s) = store();
        s.write_json("d.json", serde_json::json!({"x": [1, 2]})).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(s.path("d.json")).unwrap()).unwrap();
        assert_eq!(v["meta"]["config_hash"], "abc");
        #[derive(Deserialize)]
        struct D {
            x: Vec<u32>,
        }
        assert_eq!(s.read_json::<D>("d.json", "test").unwrap().x, vec![1, 2]);
    }
}
