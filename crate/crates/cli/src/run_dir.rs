use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;

/// A fresh `<root>/<timestamp>_<command>` directory for one invocation.
pub struct RunDir {
    path: PathBuf,
    command: String,
    seed: u64,
    argv: Vec<String>,
    started: String,
}

impl RunDir {
    pub fn create(root: &Path, command: &str, seed: u64, argv: &[String]) -> Result<Self> {
        let now = chrono::Local::now();
        let stamp = now.format("%Y%m%dT%H%M%S%.3f").to_string();
        let mut path = root.join(format!("{stamp}_{command}"));
        let mut n = 1;
        while path.exists() {
            path = root.join(format!("{stamp}_{command}-{n}"));
            n += 1;
        }
        fs::create_dir_all(&path).with_context(|| format!("creating run directory {}", path.display()))?;
        Ok(Self {
            path,
            command: command.to_string(),
            seed,
            argv: argv.to_vec(),
            started: now.to_rfc3339(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.path.join(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    /// Writes `resolved_config.json`: command line, seed, version and the fully resolved configuration.
    pub fn record(&self, config: &impl Serialize) -> Result<()> {
        let rec = json!({
            "command": self.command,
            "argv": self.argv,
            "seed": self.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "started": self.started,
            "config": config,
        });
        self.write("resolved_config.json", &serde_json::to_string_pretty(&rec)?)
    }
}
