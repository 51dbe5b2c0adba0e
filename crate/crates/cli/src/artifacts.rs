//! Output directory handling: artifact files, sample-cloud CSVs, the manifest,
//! and machine-readable progress lines.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use pfm_core::prefdata::fmt_f64;
use pfm_core::{Error, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// JSON-lines progress on stdout.
pub struct Progress {
    enabled: bool,
    start: Instant,
}

impl Progress {
    pub fn stdout() -> Self {
        Self {
            enabled: true,
            start: Instant::now(),
        }
    }

    pub fn silent() -> Self {
        Self {
            enabled: false,
            start: Instant::now(),
        }
    }

    pub fn emit(&self, event: &str, mut fields: Value) {
        if !self.enabled {
            return;
        }
        if let Value::Object(map) = &mut fields {
            map.insert("event".into(), event.into());
            map.insert("elapsed_ms".into(), (self.start.elapsed().as_millis() as u64).into());
        }
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{fields}");
        let _ = out.flush();
    }

    pub fn stage(&self, stage: &str, status: &str) {
        self.emit("stage", json!({ "stage": stage, "status": status }));
    }
}

/// A directory that collects run artifacts.
pub struct ArtifactDir {
    root: PathBuf,
}

impl ArtifactDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write_bytes(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<PathBuf> {
        self.write_bytes(rel, text.as_bytes())
    }

    pub fn write_json(&self, rel: &str, value: &impl serde::Serialize) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value).expect("artifact serializes") + "\n";
        self.write_text(rel, &text)
    }

    pub fn write_cloud(&self, rel: &str, samples: &Array2<f64>) -> Result<PathBuf> {
        self.write_text(rel, &cloud_to_csv(samples))
    }

    /// Hash every file under the directory (except the manifest itself) and
    /// write `manifest.json`, sorted by relative path.
    pub fn write_manifest(&self) -> Result<Vec<ManifestEntry>> {
        let mut files = Vec::new();
        collect_files(&self.root, &self.root, &mut files)?;
        files.sort();
        let mut entries = Vec::with_capacity(files.len());
        for rel in files {
            if rel == MANIFEST {
                continue;
            }
            let path = self.root.join(&rel);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            entries.push(ManifestEntry {
                sha256: hex::encode(Sha256::digest(&bytes)),
                bytes: bytes.len() as u64,
                path: rel,
            });
        }
        self.write_json(MANIFEST, &json!({ "files": entries }))?;
        Ok(entries)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    #[derive(serde::Deserialize)]
    struct Manifest {
        files: Vec<ManifestEntry>,
    }
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    Ok(m.files)
}

/// Header `y0,y1,...` then one row per sample, 17 significant digits.
pub fn cloud_to_csv(samples: &Array2<f64>) -> String {
    let d = samples.ncols();
    let header: Vec<String> = (0..d).map(|k| format!("y{k}")).collect();
    let mut out = header.join(",") + "\n";
    for row in samples.rows() {
        let fields: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        writeln!(out, "{}", fields.join(",")).unwrap();
    }
    out
}

pub fn read_cloud(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        msg: format!("{}: empty sample file", path.display()),
    })?;
    let d = header.split(',').count();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let vals = line
            .split(',')
            .map(|t| {
                t.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: i + 2,
                    msg: format!("{}: bad float {t:?}: {e}", path.display()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != d {
            return Err(Error::Parse {
                line: i + 2,
                msg: format!("{}: expected {d} columns, found {}", path.display(), vals.len()),
            });
        }
        data.extend(vals);
        rows += 1;
    }
    Array2::from_shape_vec((rows, d), data).map_err(|e| Error::Shape(e.to_string()))
}
