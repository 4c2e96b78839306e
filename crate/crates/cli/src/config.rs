//! Layered run configuration and manifests.
//!
//! Values resolve as defaults < `--config` file < command-line flags. Every
//! run writes a manifest holding the resolved values plus `checksum.*` and
//! `result.*` entries; feeding a manifest back through `--config` reproduces
//! the run, since those two prefixes are ignored on read.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ctts_core::kv::KvMap;
use sha2::{Digest, Sha256};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "CTTS_OUT_DIR";

const IGNORED_PREFIXES: [&str; 2] = ["checksum.", "result."];

pub fn out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn default_path(file: &str) -> String {
    out_dir().join(file).display().to_string()
}

/// Sibling file `<path><suffix>`.
pub fn sibling(path: &str, suffix: &str) -> String {
    format!("{path}{suffix}")
}

/// Flag values collected by a subcommand, overlaid on the config file.
#[derive(Default)]
pub struct Flags(KvMap);

impl Flags {
    pub fn put<T: Display>(&mut self, key: &str, value: &Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0.set(key, v);
        }
        self
    }
}

/// Reads `--config` (if any), checks its keys and overlays the flags.
pub fn resolve(command: &str, config: Option<&Path>, flags: Flags, allowed: &[&str]) -> Result<KvMap> {
    let mut kv = match config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let mut kv = KvMap::parse(&text).with_context(|| format!("config {}", path.display()))?;
            match kv.get_str("command") {
                Some(c) if c != command => bail!("config {} is for `{c}`, not `{command}`", path.display()),
                _ => {}
            }
            let keep: Vec<(String, String)> = kv
                .iter()
                .filter(|(k, _)| *k != "command" && !IGNORED_PREFIXES.iter().any(|p| k.starts_with(p)))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect();
            kv = KvMap::new();
            for (k, v) in keep {
                kv.set(&k, v);
            }
            kv
        }
        None => KvMap::new(),
    };
    kv.merge(&flags.0);
    kv.check_keys(allowed, &[]).map_err(|e| anyhow::anyhow!("{e} for `{command}`"))?;
    Ok(kv)
}

pub fn get<T>(kv: &KvMap, key: &str, default: T) -> Result<T>
where
    T: std::str::FromStr,
    T::Err: Display,
{
    Ok(kv.get_or(key, default)?)
}

pub fn require(kv: &KvMap, key: &str, flag: &str) -> Result<String> {
    kv.get_str(key)
        .map(str::to_string)
        .with_context(|| format!("missing --{flag}"))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Resolved settings of one run plus checksums of everything it wrote.
pub struct Manifest {
    kv: KvMap,
}

impl Manifest {
    pub fn new(command: &str, settings: &KvMap) -> Self {
        let mut kv = settings.clone();
        kv.set("command", command);
        Self { kv }
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.kv.set(key, value);
    }

    pub fn result(&mut self, key: &str, value: impl Display) {
        self.kv.set(&format!("result.{key}"), value);
    }

    pub fn checksum(&mut self, name: &str, path: &Path) -> Result<String> {
        let sum = sha256_file(path)?;
        self.kv.set(&format!("checksum.{name}"), &sum);
        Ok(sum)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.kv.render().as_bytes())
    }
}
