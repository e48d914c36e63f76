use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use gencycle::config::Config;

pub const MANIFEST_FILE: &str = "manifest.txt";

/// One record per run, written next to its outputs.
pub struct RunManifest {
    command: String,
    config_hash: String,
    seed: u64,
    started_unix: u64,
    clock: Instant,
    entries: Vec<(String, String)>,
}

pub fn version_string() -> String {
    match option_env!("GENCYCLE_GIT_DESCRIBE") {
        Some(d) => d.to_string(),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

impl RunManifest {
    pub fn start(command: &str, cfg: &Config, seed: u64) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self {
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed,
            started_unix,
            clock: Instant::now(),
            entries: Vec::new(),
        }
    }

    pub fn record(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn path(&mut self, key: &str, path: &Path) {
        self.record(key, path.display());
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let mut s = format!(
            "command={}\nversion={}\nconfig_hash={}\nseed={}\nstarted_unix={}\nwall_clock_s={:.3}\n",
            self.command,
            version_string(),
            self.config_hash,
            self.seed,
            self.started_unix,
            self.clock.elapsed().as_secs_f64()
        );
        for (k, v) in &self.entries {
            s += &format!("{k}={v}\n");
        }
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MANIFEST_FILE), s)
    }
}
