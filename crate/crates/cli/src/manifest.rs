//! Run manifests: enough to replay a command and check its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use weldloop_core::config::KeyValues;
use weldloop_core::{Error, Result};

pub const FILE_NAME: &str = "manifest.txt";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// What a command records about itself.
#[derive(Clone, Debug, Default)]
pub struct RunRecord {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
}

/// Write `manifest.txt` into `out`, hashing the inputs and the listed
/// output files (relative to `out`).
pub fn write(out: &Path, record: &RunRecord, outputs: &[String]) -> Result<()> {
    let mut kv = KeyValues::new();
    kv.set("command", &record.command);
    kv.set("version", env!("CARGO_PKG_VERSION"));
    if let Some(seed) = record.seed {
        kv.set("seed", seed);
    }
    kv.set("out", out.display());
    kv.set("cwd", std::env::current_dir()?.display());
    for (i, a) in record.argv.iter().enumerate() {
        if !representable(a) {
            return Err(Error::InvalidParameter {
                name: "argv".into(),
                reason: format!("argument `{a}` cannot be recorded in a manifest"),
            });
        }
        kv.set(&format!("arg.{i}"), a);
    }
    for (i, p) in record.inputs.iter().enumerate() {
        kv.set(&format!("input.{i}"), p.display());
        kv.set(&format!("input.{i}.sha256"), sha256_file(p)?);
    }
    for (i, name) in outputs.iter().enumerate() {
        kv.set(&format!("output.{i}"), name);
        kv.set(&format!("output.{i}.sha256"), sha256_file(&out.join(name))?);
    }
    fs::write(out.join(FILE_NAME), kv.to_text())?;
    Ok(())
}

fn representable(a: &str) -> bool {
    !a.is_empty() && a.trim() == a && !a.contains(['#', '\n', '\r'])
}

/// A parsed manifest.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    pub inputs: Vec<(PathBuf, String)>,
    pub outputs: Vec<(String, String)>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let kv = KeyValues::parse(&fs::read_to_string(path)?)?;
        let get = |key: &str| -> Result<String> {
            kv.get(key)
                .map(str::to_string)
                .ok_or_else(|| Error::MissingKey(key.into()))
        };
        let mut argv = Vec::new();
        while let Some(a) = kv.get(&format!("arg.{}", argv.len())) {
            argv.push(a.to_string());
        }
        if argv.is_empty() {
            return Err(Error::MissingKey("arg.0".into()));
        }
        let mut inputs = Vec::new();
        while let Some(p) = kv.get(&format!("input.{}", inputs.len())) {
            let hash = get(&format!("input.{}.sha256", inputs.len()))?;
            inputs.push((PathBuf::from(p), hash));
        }
        let mut outputs = Vec::new();
        while let Some(name) = kv.get(&format!("output.{}", outputs.len())) {
            let hash = get(&format!("output.{}.sha256", outputs.len()))?;
            outputs.push((name.to_string(), hash));
        }
        Ok(Self {
            argv,
            cwd: PathBuf::from(get("cwd")?),
            inputs,
            outputs,
        })
    }

    /// The recorded arguments with the `--out` value replaced.
    pub fn argv_with_out(&self, out: &Path) -> Result<Vec<String>> {
        let mut argv = self.argv.clone();
        let out = out.display().to_string();
        if let Some(i) = argv.iter().position(|a| a == "--out") {
            match argv.get_mut(i + 1) {
                Some(v) => *v = out,
                None => return Err(Error::MissingKey("--out value".into())),
            }
        } else if let Some(a) = argv.iter_mut().find(|a| a.starts_with("--out=")) {
            *a = format!("--out={out}");
        } else {
            return Err(Error::MissingKey("--out".into()));
        }
        Ok(argv)
    }
}
