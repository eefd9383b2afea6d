//! Self-describing run manifests embedded in every report.

use std::path::Path;

use serde::Serialize;

/// Content digest of an input file (FNV-1a, 64-bit, hex).
#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub fnv1a64: String,
    pub bytes: u64,
}

/// Wall-clock fields live in their own struct so consumers can strip them
/// when diffing reports; everything else in a report is a pure function of
/// the inputs.
#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub started_unix_ms: u128,
    pub duration_ms: u128,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub inputs: Vec<InputDigest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed_override: Option<u64>,
    pub timing: Timing,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

pub struct ManifestBuilder {
    command: String,
    inputs: Vec<InputDigest>,
    seed_override: Option<u64>,
    started: std::time::Instant,
    started_unix_ms: u128,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            inputs: Vec::new(),
            seed_override: None,
            started: std::time::Instant::now(),
            started_unix_ms: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
        }
    }

    /// Record an input file and return its contents.
    pub fn read_input(&mut self, path: &Path) -> std::io::Result<String> {
        let contents = std::fs::read_to_string(path)?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            fnv1a64: format!("{:016x}", fnv1a64(contents.as_bytes())),
            bytes: contents.len() as u64,
        });
        Ok(contents)
    }

    pub fn seed_override(&mut self, seed: Option<u64>) {
        self.seed_override = seed;
    }

    pub fn finish(self) -> RunManifest {
        RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: self.inputs,
            seed_override: self.seed_override,
            timing: Timing {
                started_unix_ms: self.started_unix_ms,
                duration_ms: self.started.elapsed().as_millis(),
            },
        }
    }
}
