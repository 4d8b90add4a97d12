//! Run directories: one per invocation, named by the hash of the resolved
//! configuration, with a frozen copy of that configuration and a record of
//! every artifact once the run completes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cfaudit_core::hashing::sha256_hex;
use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const CONFIG_FILE: &str = "run_config.json";
pub const COMPLETE_FILE: &str = "run_complete.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct FrozenConfig {
    pub command: String,
    pub tool_version: String,
    pub config: Value,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CompleteRecord {
    pub config_sha256: String,
    pub artifacts: Vec<Artifact>,
}

/// A run about to execute, or `None` from [`prepare`] when it already did.
#[derive(Debug)]
pub struct Run {
    pub dir: PathBuf,
    config_sha256: String,
}

fn frozen_text(command: &str, config: &Value) -> String {
    let frozen = FrozenConfig {
        command: command.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
    };
    serde_json::to_string_pretty(&frozen).expect("json values serialize")
}

/// `out` if given, else `<runs_root>/<command>-<hash prefix>`.
pub fn run_dir_for(runs_root: &Path, out: Option<&Path>, command: &str, config: &Value) -> PathBuf {
    match out {
        Some(o) => o.to_path_buf(),
        None => {
            let h = sha256_hex(frozen_text(command, config).as_bytes());
            runs_root.join(format!("{command}-{}", &h[..12]))
        }
    }
}

/// Creates (or, with `force`, recreates) the run directory and freezes the
/// configuration into it. Returns `None` when an identical complete run is
/// already there.
pub fn prepare(dir: &Path, command: &str, config: &Value, force: bool) -> Result<Option<Run>> {
    let text = frozen_text(command, config);
    let config_sha256 = sha256_hex(text.as_bytes());
    if dir.exists() {
        let frozen = dir.join(CONFIG_FILE);
        let same = fs::read_to_string(&frozen).map(|t| t == text).unwrap_or(false);
        let complete = dir.join(COMPLETE_FILE).exists();
        let empty = fs::read_dir(dir)?.next().is_none();
        if same && complete && !force {
            return Ok(None);
        }
        if !empty {
            if !frozen.exists() && !force {
                bail!("{} exists and is not a run directory; pass --force to replace it", dir.display());
            }
            if frozen.exists() && !same && !force {
                bail!(
                    "{} holds a run with a different configuration; pass --force to replace it",
                    dir.display()
                );
            }
            // an interrupted run of the same config, or --force
            fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), &text)?;
    Ok(Some(Run {
        dir: dir.to_path_buf(),
        config_sha256,
    }))
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<Artifact>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            walk(root, &path, out)?;
            continue;
        }
        let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
        if rel == COMPLETE_FILE {
            continue;
        }
        let bytes = fs::read(&path)?;
        out.push(Artifact {
            path: rel,
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    Ok(())
}

impl Run {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records every artifact with its hash; marks the run complete.
    pub fn finish(self) -> Result<PathBuf> {
        let mut artifacts = vec![];
        walk(&self.dir, &self.dir, &mut artifacts)?;
        let rec = CompleteRecord {
            config_sha256: self.config_sha256,
            artifacts,
        };
        fs::write(self.dir.join(COMPLETE_FILE), serde_json::to_string_pretty(&rec)?)?;
        Ok(self.dir)
    }
}

/// Overlays keys from a TOML config file onto parsed arguments. Flags given
/// on the command line win over the file; the file wins over defaults.
pub fn merge_config<T>(args: &T, matches: &ArgMatches, file: Option<&Path>) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let mut value = serde_json::to_value(args)?;
    let Some(file) = file else {
        return Ok(serde_json::from_value(value)?);
    };
    let text = fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", file.display()))?;
    let obj = value.as_object_mut().expect("argument structs serialize to objects");
    for (key, v) in table {
        let id = key.replace('-', "_");
        // flattened option groups serialize as nested objects
        let slot = if obj.contains_key(&id) {
            Some(&mut *obj)
        } else {
            obj.values_mut()
                .filter_map(Value::as_object_mut)
                .find(|o| o.contains_key(&id))
        };
        let Some(slot) = slot else {
            bail!("{}: unknown key {key:?}", file.display());
        };
        let explicit = matches!(matches.value_source(&id), Some(ValueSource::CommandLine));
        if !explicit {
            slot.insert(id, serde_json::to_value(v)?);
        }
    }
    serde_json::from_value(value).with_context(|| format!("applying {}", file.display()))
}

/// Relative paths resolve against the data root.
pub fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}
