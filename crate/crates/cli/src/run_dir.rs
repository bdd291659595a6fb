//! Run directories: a config snapshot written before any work, then
//! artifacts that each carry the snapshot's hash.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

pub const SNAPSHOT: &str = "config.json";
const MANIFEST: &str = "manifest.json";

pub struct RunDir {
    pub path: PathBuf,
    pub config_hash: String,
}

pub struct Planned {
    pub dir: RunDir,
    snapshot: String,
}

impl Planned {
    /// Creates the directory and writes the config snapshot.
    pub fn init(self) -> Result<RunDir> {
        let path = &self.dir.path;
        fs::create_dir_all(path).with_context(|| format!("creating run directory {}", path.display()))?;
        write_atomic(&path.join(SNAPSHOT), self.snapshot.as_bytes())?;
        self.dir.write_manifest()?;
        Ok(self.dir)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Replaces `path` in one rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

impl RunDir {
    /// Directory for `command`: `explicit` if given, otherwise a folder
    /// under `root` named after the config hash, so reruns of the same
    /// config land in the same place. Nothing is written until [`Self::init`].
    pub fn plan<C: Serialize>(command: &str, config: &C, explicit: Option<&Path>, root: &Path) -> Result<Planned> {
        let snapshot = serde_json::to_string_pretty(&serde_json::json!({ "command": command, "config": config }))?;
        let config_hash = sha256_hex(snapshot.as_bytes());
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => root.join(format!("{command}-{}", &config_hash[..12])),
        };
        Ok(Planned { dir: Self { path, config_hash }, snapshot })
    }

    pub fn create<C: Serialize>(command: &str, config: &C, explicit: Option<&Path>, root: &Path) -> Result<Self> {
        Self::plan(command, config, explicit, root)?.init()
    }

    /// The command and config stored in an existing directory.
    pub fn load_snapshot<C: DeserializeOwned>(path: &Path, command: &str) -> Result<C> {
        let file = path.join(SNAPSHOT);
        let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
        let mut v: serde_json::Value = serde_json::from_str(&text)?;
        if v["command"] != command {
            bail!("{} holds a {} run, not {command}", path.display(), v["command"]);
        }
        Ok(serde_json::from_value(v["config"].take())?)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes `value` as JSON with the config hash attached.
    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut v = serde_json::to_value(value)?;
        match v.as_object_mut() {
            Some(obj) => {
                obj.insert("config_hash".into(), self.config_hash.clone().into());
            }
            None => v = serde_json::json!({ "config_hash": self.config_hash, "value": v }),
        }
        write_atomic(&self.file(name), serde_json::to_string_pretty(&v)?.as_bytes())?;
        self.write_manifest()
    }

    /// Writes a non-JSON artifact; the manifest records its hash.
    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        if let Some(parent) = self.file(name).parent() {
            fs::create_dir_all(parent)?;
        }
        write_atomic(&self.file(name), text.as_bytes())?;
        self.write_manifest()
    }

    /// `manifest.json`: the config hash and a digest of every artifact.
    fn write_manifest(&self) -> Result<()> {
        let mut files = Vec::new();
        collect(&self.path, &self.path, &mut files)?;
        files.sort();
        let entries: Vec<_> = files
            .iter()
            .map(|rel| {
                let bytes = fs::read(self.path.join(rel)).unwrap_or_default();
                serde_json::json!({ "file": rel, "sha256": sha256_hex(&bytes) })
            })
            .collect();
        let manifest = serde_json::json!({ "config_hash": self.config_hash, "artifacts": entries });
        write_atomic(&self.file(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect(root, &p, out)?;
            continue;
        }
        let rel = p.strip_prefix(root)?.to_string_lossy().replace('\\', "/");
        if rel != MANIFEST && !rel.ends_with(".partial") && !rel.ends_with(".tmp") {
            out.push(rel);
        }
    }
    Ok(())
}
