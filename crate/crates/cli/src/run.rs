//! Output directory handling, run manifests and provenance-stamped CSV files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

/// Environment variable naming the default output directory.
pub const OUT_DIR_VAR: &str = "WAVEKIN_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "wavekin-out";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
    Statistical(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Statistical(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) | CliError::Statistical(m) => m,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn io_error(path: &Path, e: impl ToString) -> CliError {
    CliError::Numerical(format!("{}: {}", path.display(), e.to_string()))
}

pub fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub params: serde_json::Value,
    pub seed: Option<u64>,
    pub code_version: String,
    /// sha256 over command, params, seed and code version.
    pub manifest_hash: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub status: String,
    pub outputs: Vec<String>,
}

pub fn manifest_hash(command: &str, params: &serde_json::Value, seed: Option<u64>, version: &str) -> String {
    // serde_json maps are ordered, so this serialisation is canonical
    let body = json!({ "command": command, "params": params, "seed": seed, "code_version": version });
    let digest = Sha256::digest(body.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn manifest_path(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("manifest-{command}.json"))
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

pub struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    pub fn start(dir: PathBuf, command: &str, params: &impl Serialize, seed: Option<u64>) -> CliResult<Self> {
        fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        let params = serde_json::to_value(params).map_err(usage)?;
        let version = env!("CARGO_PKG_VERSION").to_owned();
        let hash = manifest_hash(command, &params, seed, &version);
        Ok(Self {
            dir,
            manifest: RunManifest {
                command: command.to_owned(),
                params,
                seed,
                code_version: version,
                manifest_hash: hash,
                started_unix: now(),
                finished_unix: 0.0,
                status: "running".into(),
                outputs: Vec::new(),
            },
        })
    }

    #[cfg(test)]
    pub fn hash(&self) -> &str {
        &self.manifest.manifest_hash
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn create(&mut self, name: &str) -> CliResult<BufWriter<File>> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| io_error(&path, e))?;
        if !self.manifest.outputs.iter().any(|o| o == name) {
            self.manifest.outputs.push(name.to_owned());
        }
        Ok(BufWriter::new(file))
    }

    /// A CSV writer whose first line is `# manifest_hash=<hash>`.
    pub fn csv(&mut self, name: &str) -> CliResult<csv::Writer<BufWriter<File>>> {
        let mut out = self.create(name)?;
        writeln!(out, "# manifest_hash={}", self.manifest.manifest_hash).map_err(|e| io_error(Path::new(name), e))?;
        Ok(csv::Writer::from_writer(out))
    }

    /// Writes `value` as pretty JSON with the manifest hash added at the top level.
    pub fn json(&mut self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let mut v = serde_json::to_value(value).map_err(usage)?;
        if let serde_json::Value::Object(map) = &mut v {
            map.insert("manifest_hash".into(), self.manifest.manifest_hash.clone().into());
        }
        let mut out = self.create(name)?;
        serde_json::to_writer_pretty(&mut out, &v).map_err(|e| io_error(Path::new(name), e))?;
        writeln!(out).map_err(|e| io_error(Path::new(name), e))
    }

    /// Writes the manifest with `status` and returns `result` unchanged.
    pub fn finish<T>(mut self, result: CliResult<T>) -> CliResult<T> {
        self.manifest.finished_unix = now();
        self.manifest.status = match &result {
            Ok(_) => "ok".into(),
            Err(e) => format!("failed (exit {}): {}", e.code(), e.message()),
        };
        let path = manifest_path(&self.dir, &self.manifest.command);
        let written = File::create(&path)
            .map_err(|e| io_error(&path, e))
            .and_then(|f| {
                let mut w = BufWriter::new(f);
                serde_json::to_writer_pretty(&mut w, &self.manifest).map_err(|e| io_error(&path, e))?;
                writeln!(w).and_then(|_| w.flush()).map_err(|e| io_error(&path, e))
            });
        log::info!(
            "{} outputs in {} (manifest hash {})",
            self.manifest.outputs.len(),
            self.dir.display(),
            self.manifest.manifest_hash
        );
        match (result, written) {
            (Err(e), _) => Err(e),
            (Ok(_), Err(e)) => Err(e),
            (Ok(v), Ok(())) => Ok(v),
        }
    }
}

pub fn read_manifest(dir: &Path, command: &str) -> CliResult<RunManifest> {
    let path = manifest_path(dir, command);
    let text = fs::read_to_string(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Reads the hash from a CSV's first line.
pub fn csv_hash(path: &Path) -> CliResult<String> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    text.lines()
        .next()
        .and_then(|l| l.strip_prefix("# manifest_hash="))
        .map(str::to_owned)
        .ok_or_else(|| usage(format!("{} has no manifest hash header", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order_and_tracks_content() {
        let a = json!({ "x": 1, "y": [1, 2] });
        let b: serde_json::Value = serde_json::from_str(r#"{"y":[1,2],"x":1}"#).unwrap();
        assert_eq!(manifest_hash("c", &a, Some(1), "0"), manifest_hash("c", &b, Some(1), "0"));
        assert_ne!(manifest_hash("c", &a, Some(1), "0"), manifest_hash("c", &a, Some(2), "0"));
        assert_eq!(manifest_hash("c", &a, None, "0").len(), 64);
    }

    #[test]
    fn run_records_outputs_and_headers() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::start(dir.path().to_owned(), "demo", &json!({"a": 1}), Some(3)).unwrap();
        let hash = run.hash().to_owned();
        let mut w = run.csv("t.csv").unwrap();
        w.write_record(["a", "b"]).unwrap();
        drop(w);
        run.json("r.json", &json!({"ok": true})).unwrap();
        run.finish(Ok(())).unwrap();
        assert_eq!(csv_hash(&dir.path().join("t.csv")).unwrap(), hash);
        let m = read_manifest(dir.path(), "demo").unwrap();
        assert_eq!(m.outputs, ["t.csv", "r.json"]);
        assert_eq!(m.status, "ok");
        assert_eq!(m.manifest_hash, hash);
    }
}
