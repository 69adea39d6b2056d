use std::path::{Path, PathBuf};

use agvsim::adpu::{load_waypoints, AdpuBehavior};
use agvsim::scenario::SimConfig;
use serde::{Deserialize, Serialize};

/// Service configuration. Top-level keys select the behavior and seed; the
/// remaining tables (`[bus]`, `[supervisor]`, `[engagement]`, `[plant]`,
/// `[adpu]`, `[ids]`) mirror the simulation defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub behavior: String,
    pub seed: u64,
    /// JSON waypoint file, relative to the config file.
    pub waypoints_file: Option<PathBuf>,
    #[serde(flatten)]
    pub sim: SimConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            behavior: "session1".into(),
            seed: 42,
            waypoints_file: None,
            sim: SimConfig::default(),
        }
    }
}

/// Top-level keys. Tables below them reject unknown keys on their own, but
/// the flattened level has to be checked by hand.
const KEYS: &[&str] = &[
    "behavior",
    "seed",
    "waypoints_file",
    "bus",
    "ids",
    "supervisor",
    "engagement",
    "plant",
    "adpu",
    "telemetry_period",
];

impl ServiceConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let table: toml::Table = toml::from_str(&text)?;
        if let Some(key) = table.keys().find(|k| !KEYS.contains(&k.as_str())) {
            anyhow::bail!(
                "{}: unknown key `{key}`, expected one of {}",
                path.display(),
                KEYS.join(", ")
            );
        }
        let mut cfg: ServiceConfig = table.try_into()?;
        if let Some(wp) = cfg.waypoints_file.take() {
            let wp = path.parent().unwrap_or(Path::new(".")).join(wp);
            cfg.sim.adpu.waypoints = Some(load_waypoints(&wp)?);
        }
        let issues = cfg.sim.validate();
        anyhow::ensure!(issues.is_empty(), "{}: {}", path.display(), issues.join("; "));
        cfg.behavior()?;
        Ok(cfg)
    }

    pub fn behavior(&self) -> anyhow::Result<AdpuBehavior> {
        let mut b = AdpuBehavior::stock(&self.behavior)?;
        self.sim.adpu.apply(&mut b);
        b.validate()?;
        Ok(b)
    }
}
