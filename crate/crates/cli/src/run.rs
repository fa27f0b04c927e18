//! Run directory layout and provenance.
//!
//! ```text
//! <run>/manifest.json     what each command wrote, with config hashes
//! <run>/checkpoints/      model and adapter checkpoints
//! <run>/records/          training records
//! <run>/reports/          evaluation and analysis outputs
//! <run>/data/             generated datasets
//! ```
//!
//! Every JSON file is an envelope `{tool, config_hash, config, <payload>}`.
//! CSV files start with `#` lines carrying the same provenance.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const TOOL: &str = concat!("mola ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST: &str = "manifest.json";
pub const RUN_ROOT_ENV: &str = "MOLA_RUN_ROOT";

/// Fixed artifact names, relative to the run directory.
pub mod names {
    pub const FOUNDATION: &str = "checkpoints/foundation.json";
    pub const ADAPTER: &str = "checkpoints/adapter.json";
    pub const ARF: &str = "checkpoints/ar-f.json";
    pub const MTF: &str = "checkpoints/mt-f.json";
    pub const SYNTH_CSV: &str = "data/synth.csv";
}

/// Where a command's checkpoint for `paradigm` lives.
pub fn baseline_checkpoint(paradigm: &str) -> &'static str {
    match paradigm {
        "ar-f" => names::ARF,
        _ => names::MTF,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    /// Command name to what its latest invocation wrote.
    pub commands: BTreeMap<String, ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub config_hash: String,
    pub outputs: Vec<String>,
}

pub struct RunDir {
    root: PathBuf,
    fail_if_exists: bool,
    tool_line: String,
    config_hash: String,
    config: Value,
    written: Vec<String>,
}

impl RunDir {
    /// Resolution order: `--run-dir`, `output.run_dir`, then
    /// `$MOLA_RUN_ROOT/<config stem>`, then `runs/<config stem>`.
    pub fn resolve(flag: Option<&Path>, cfg: &RunConfig, config_path: Option<&Path>) -> PathBuf {
        if let Some(p) = flag.or(cfg.output.run_dir.as_deref()) {
            return p.to_path_buf();
        }
        let stem = config_path
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "default".into());
        let root = std::env::var_os(RUN_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(stem)
    }

    pub fn open(root: PathBuf, cfg: &RunConfig, fail_if_exists: bool) -> CliResult<Self> {
        fs::create_dir_all(&root).map_err(|e| {
            CliError::user(format!(
                "cannot create run directory {}: {e}",
                root.display()
            ))
        })?;
        Ok(RunDir {
            root,
            fail_if_exists,
            tool_line: TOOL.to_string(),
            config_hash: cfg.hash(),
            config: serde_json::to_value(cfg)?,
            written: Vec::new(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Provenance lines for CSV headers.
    pub fn comment(&self) -> String {
        format!("{}\nconfig_hash {}", self.tool_line, self.config_hash)
    }

    /// Checks the overwrite policy and creates parent directories.
    fn prepare(&mut self, rel: &str) -> CliResult<PathBuf> {
        let path = self.path(rel);
        if path.exists() {
            if self.fail_if_exists {
                return Err(CliError::user(format!(
                    "{} exists and --fail-if-exists is set",
                    path.display()
                )));
            }
            log::warn!("overwriting {}", path.display());
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.written.push(rel.to_string());
        Ok(path)
    }

    /// Writes `payload` under key `field` inside a provenance envelope.
    pub fn write_json<T: Serialize>(
        &mut self,
        rel: &str,
        field: &str,
        payload: &T,
    ) -> CliResult<PathBuf> {
        let mut doc = serde_json::Map::new();
        doc.insert("tool".into(), Value::String(self.tool_line.clone()));
        doc.insert(
            "config_hash".into(),
            Value::String(self.config_hash.clone()),
        );
        doc.insert("config".into(), self.config.clone());
        doc.insert(field.into(), serde_json::to_value(payload)?);
        let text = serde_json::to_string_pretty(&Value::Object(doc))? + "\n";
        let path = self.prepare(rel)?;
        fs::write(&path, text)?;
        Ok(path)
    }

    /// Writes a checkpoint whose body is the library's own JSON format.
    pub fn write_checkpoint(&mut self, rel: &str, checkpoint_json: &str) -> CliResult<PathBuf> {
        let body: Value = serde_json::from_str(checkpoint_json)?;
        self.write_json(rel, "checkpoint", &body)
    }

    /// Creates `rel` and hands a writer to `fill`.
    pub fn write_with(
        &mut self,
        rel: &str,
        fill: impl FnOnce(&mut fs::File) -> CliResult<()>,
    ) -> CliResult<PathBuf> {
        let path = self.prepare(rel)?;
        let mut f = fs::File::create(&path)?;
        fill(&mut f)?;
        Ok(path)
    }

    /// Records this command's outputs in the manifest.
    pub fn finish(self, command: &str) -> CliResult<()> {
        let path = self.path(MANIFEST);
        let mut manifest = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| CliError::user(format!("corrupt manifest {}: {e}", path.display())))?,
            Err(_) => Manifest::default(),
        };
        manifest.tool = self.tool_line;
        manifest.commands.insert(
            command.to_string(),
            ManifestEntry {
                config_hash: self.config_hash,
                outputs: self.written,
            },
        );
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

/// Reads the `field` payload of an envelope written by [`RunDir`].
pub fn read_payload(path: &Path, field: &str) -> CliResult<Value> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::user(format!("cannot read {}: {e}", path.display())))?;
    let mut doc: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::user(format!("{} is not valid JSON: {e}", path.display())))?;
    doc.get_mut(field)
        .map(Value::take)
        .ok_or_else(|| CliError::user(format!("{} has no '{field}' section", path.display())))
}

/// Reads a checkpoint body as the library's JSON text.
pub fn read_checkpoint(path: &Path) -> CliResult<String> {
    let body = read_payload(path, "checkpoint").map_err(|e| match e {
        CliError::User(m) => CliError::user(format!(
            "{m}; run the training command that produces it first"
        )),
        other => other,
    })?;
    Ok(serde_json::to_string(&body)?)
}
