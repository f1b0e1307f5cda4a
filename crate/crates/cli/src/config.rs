//! TOML pipeline configuration.
//!
//! Relative paths resolve against the directory holding the config file.

use roadsim_core::depth::FitRegion;
use roadsim_core::extrinsics::OptimizerConfig;
use roadsim_core::placement::{PlacementGrid, SamplerConfig};
use roadsim_core::postproc::StageConfig;
use roadsim_core::render::RenderSettings;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub scene_root: PathBuf,
    pub output_root: PathBuf,
    /// Asset catalog root; defaults to `scene_root`.
    #[serde(default)]
    pub assets_root: Option<PathBuf>,
    /// Optional path for wall-clock stage timings. Kept out of the output
    /// tree so reruns stay byte-identical.
    #[serde(default)]
    pub timings_path: Option<PathBuf>,
    #[serde(default)]
    pub stages: StageToggles,
    pub grid: GridConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub placements: PlacementCount,
    #[serde(default)]
    pub depth: DepthSettings,
    #[serde(default)]
    pub render: RenderSettings,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub post: Vec<StageConfig>,
}

fn default_workers() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    /// Refine extrinsics from each frame's `keypoints.json` when present.
    pub calibrate: bool,
    pub sample: bool,
    pub depth: bool,
    pub composite: bool,
    pub postproc: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self { calibrate: true, sample: true, depth: true, composite: true, postproc: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub origin: [f64; 2],
    pub cell_size: f64,
    pub nx: usize,
    pub ny: usize,
    #[serde(default)]
    pub ground_z: f64,
    #[serde(default)]
    pub seed_points: Vec<[f64; 2]>,
}

impl GridConfig {
    pub fn build(&self) -> Result<PlacementGrid, ConfigError> {
        PlacementGrid::new(self.origin, self.cell_size, self.nx, self.ny, self.ground_z)
            .and_then(|g| g.with_seed_points(self.seed_points.clone()))
            .map_err(|e| ConfigError::Invalid(format!("grid: {e}")))
    }
}

/// Number of simulated placements requested per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlacementCount {
    Fixed { count: usize },
    /// Uniform integer in `[min, max]`.
    Uniform { min: usize, max: usize },
    /// Poisson with the given mean, capped at `max`.
    Poisson { mean: f64, max: usize },
}

impl Default for PlacementCount {
    fn default() -> Self {
        Self::Uniform { min: 2, max: 6 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthSettings {
    pub fit_region: FitRegion,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut cfg: Config = toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.scene_root);
        fix(&mut self.output_root);
        if let Some(p) = self.assets_root.as_mut() {
            fix(p);
        }
        if let Some(p) = self.timings_path.as_mut() {
            fix(p);
        }
    }

    pub fn assets_root(&self) -> &Path {
        self.assets_root.as_deref().unwrap_or(&self.scene_root)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        self.grid.build()?;
        match &self.placements {
            PlacementCount::Uniform { min, max } if min > max => {
                return Err(ConfigError::Invalid(format!("placements: min {min} exceeds max {max}")))
            }
            PlacementCount::Poisson { mean, .. } if !(mean.is_finite() && *mean >= 0.0) => {
                return Err(ConfigError::Invalid("placements: poisson mean must be finite and >= 0".into()))
            }
            _ => {}
        }
        if self.sampler.top_k == 0 || self.sampler.max_retries == 0 {
            return Err(ConfigError::Invalid("sampler: top_k and max_retries must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
scene_root = "scene"
output_root = "out"

[grid]
origin = [-10.0, -10.0]
cell_size = 2.5
nx = 8
ny = 8
"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let mut cfg: Config = toml::from_str(MINIMAL).unwrap();
        cfg.resolve_paths(Path::new("/tmp/x"));
        assert_eq!(cfg.scene_root, Path::new("/tmp/x/scene"));
        assert_eq!(cfg.placements, PlacementCount::Uniform { min: 2, max: 6 });
        assert_eq!(cfg.workers, 4);
        assert!(cfg.stages.postproc);
        assert_eq!(cfg.render.visible_threshold, 50);
        cfg.validate().unwrap();
    }

    #[test]
    fn full_sections_parse() {
        let text = format!(
            "{MINIMAL}\n[placements]\nmode = \"poisson\"\nmean = 3.5\nmax = 8\n\n[stages]\npostproc = false\n\n[[post]]\nname = \"gamma\"\nparams = {{ gamma = 1.8 }}\n\n[sampler]\ntop_k = 3\n[sampler.yaw]\nmode = \"lane_aligned\"\nheadings = [0.0, 1.5707963]\njitter = 0.1\n"
        );
        let cfg: Config = toml::from_str(&text).unwrap();
        assert_eq!(cfg.placements, PlacementCount::Poisson { mean: 3.5, max: 8 });
        assert!(!cfg.stages.postproc && cfg.stages.sample);
        assert_eq!(cfg.post[0].name, "gamma");
        assert_eq!(cfg.post[0].params["gamma"], 1.8);
        assert_eq!(cfg.sampler.top_k, 3);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg: Config = toml::from_str(MINIMAL).unwrap();
        cfg.placements = PlacementCount::Uniform { min: 5, max: 2 };
        assert!(cfg.validate().is_err());
        let mut cfg: Config = toml::from_str(MINIMAL).unwrap();
        cfg.grid.cell_size = 0.0;
        assert!(cfg.validate().is_err());
        assert!(toml::from_str::<Config>(&format!("{MINIMAL}\nbogus = 1\n")).is_err());
    }
}
