//! Plain-text record of what a command read, wrote and with which settings.

use std::fmt::Write;
use std::path::Path;

use posegraph_slam::lie::EULER_CONVENTION;

/// Version tags of the pieces that determine output bytes.
pub fn version_tags() -> Vec<(&'static str, String)> {
    vec![
        ("pgslam", env!("CARGO_PKG_VERSION").to_string()),
        ("float_format", "{:.16e}".to_string()),
        ("edge_euler", EULER_CONVENTION.to_string()),
    ]
}

/// Everything needed to repeat a command. Contains no timestamps, so identical runs write
/// identical manifests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub seed: Option<u64>,
    pub flags: Vec<(String, String)>,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
    /// Full `key = value` config text.
    pub config: String,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self { command: command.to_string(), ..Self::default() }
    }

    pub fn flag(mut self, key: &str, value: impl ToString) -> Self {
        self.flags.push((key.to_string(), value.to_string()));
        self
    }

    pub fn input(mut self, role: &str, path: &Path) -> Self {
        self.inputs.push((role.to_string(), path.display().to_string()));
        self
    }

    pub fn output(mut self, role: &str, path: &Path) -> Self {
        self.outputs.push((role.to_string(), path.display().to_string()));
        self
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[run]");
        let _ = writeln!(out, "command = {}", self.command);
        if let Some(seed) = self.seed {
            let _ = writeln!(out, "seed = {seed}");
        }
        let _ = writeln!(out, "\n[versions]");
        for (k, v) in version_tags() {
            let _ = writeln!(out, "{k} = {v}");
        }
        for (title, entries) in [("flags", &self.flags), ("inputs", &self.inputs), ("outputs", &self.outputs)] {
            let _ = writeln!(out, "\n[{title}]");
            for (k, v) in entries {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        let _ = writeln!(out, "\n[config]");
        out.push_str(&self.config);
        out
    }
}
