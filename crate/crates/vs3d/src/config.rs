//! JSON configuration: one key per config type, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VsError};
use crate::flow::{GuidanceConfig, Schedule};
use crate::pmg::PmgConfig;
use crate::rasi::RasiConfig;
use crate::tar::TarConfig;
use crate::toyworld::ShapeParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_count: usize,
    pub n_max: usize,
    pub n_min: usize,
    pub cfg_interval: (f64, f64),
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_count: 25,
            n_max: 12,
            n_min: 0,
            cfg_interval: (0.6, 1.0),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        Schedule::uniform(self.t_count, self.n_max, self.n_min, self.cfg_interval)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Monte-Carlo noise budget S per edit step.
    pub noise_samples: usize,
    /// CFG weight of the sparse stage samplers.
    pub sparse_omega: f64,
    /// CFG weight used for plain generation.
    pub generation_omega: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            noise_samples: 5,
            sparse_omega: 1.5,
            generation_omega: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSwitches {
    pub rasi: bool,
    pub pmg: bool,
    pub tar: bool,
}

impl Default for ModuleSwitches {
    fn default() -> Self {
        ModuleSwitches {
            rasi: true,
            pmg: true,
            tar: true,
        }
    }
}

impl ModuleSwitches {
    pub fn none() -> Self {
        ModuleSwitches {
            rasi: false,
            pmg: false,
            tar: false,
        }
    }

    /// Parse a comma-separated subset, e.g. "rasi,pmg". Empty string means
    /// the plain baseline.
    pub fn from_list(list: &str) -> Result<Self> {
        let mut m = ModuleSwitches::none();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "rasi" => m.rasi = true,
                "pmg" => m.pmg = true,
                "tar" => m.tar = true,
                other => {
                    return Err(VsError::Config(format!(
                        "unknown module '{other}' (expected rasi, pmg, tar)"
                    )))
                }
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditPairConfig {
    pub source: ShapeParams,
    pub target: ShapeParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointPaths {
    pub dense: PathBuf,
    pub geometry: PathBuf,
    pub material: PathBuf,
}

/// Top-level config file. Every section is optional and defaults to the
/// stock values; unknown keys anywhere are an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub rasi: RasiConfig,
    #[serde(default)]
    pub pmg: PmgConfig,
    #[serde(default)]
    pub tar: TarConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub modules: ModuleSwitches,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub edit: Option<EditPairConfig>,
    #[serde(default)]
    pub checkpoints: Option<CheckpointPaths>,
}

impl FileConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.guidance.validate()?;
        self.rasi.validate()?;
        self.pmg.validate(self.sampling.noise_samples)?;
        self.tar.validate()?;
        if let Some(edit) = &self.edit {
            edit.source.validate()?;
            edit.target.validate()?;
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| VsError::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<FileConfig> {
    let cfg: FileConfig =
        serde_json::from_str(text).map_err(|e| VsError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg.schedule.t_count, 25);
        assert_eq!(cfg.guidance.omega_tgt, 9.0);
        assert_eq!(cfg.rasi.inner_steps, 3);
        assert_eq!(cfg.pmg.weight, 1.2);
        assert_eq!(cfg.tar.lambda, 0.5);
        assert_eq!(cfg.sampling.noise_samples, 5);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        assert!(matches!(parse_config("{\"bogus\": 1}"), Err(VsError::Config(_))));
        assert!(parse_config("{\"pmg\": {\"weight\": 1.2, \"partial\": 2, \"x\": 0}}").is_err());
        assert!(parse_config("{\"schedule\": {\"t_count\": 25, \"n_max\": 12, \"n_min\": 0, \"cfg_interval\": [0.6, 1.0], \"y\": 3}}").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        // L >= S
        assert!(parse_config("{\"pmg\": {\"weight\": 1.2, \"partial\": 5}}").is_err());
        // n_max > T
        assert!(parse_config(
            "{\"schedule\": {\"t_count\": 10, \"n_max\": 11, \"n_min\": 0, \"cfg_interval\": [0.6, 1.0]}}"
        )
        .is_err());
        // shape params out of range
        assert!(parse_config(
            "{\"edit\": {\"source\": {\"body_radius\": 0.9, \"hat_size\": 0.0, \"hat_hue\": 0.0, \"body_hue\": 0.0},
                          \"target\": {\"body_radius\": 0.3, \"hat_size\": 0.0, \"hat_hue\": 0.0, \"body_hue\": 0.0}}}"
        )
        .is_err());
    }

    #[test]
    fn module_list_parsing() {
        let all = ModuleSwitches::from_list("rasi,pmg,tar").unwrap();
        assert_eq!(all, ModuleSwitches::default());
        let none = ModuleSwitches::from_list("").unwrap();
        assert_eq!(none, ModuleSwitches::none());
        let partial = ModuleSwitches::from_list("rasi, pmg").unwrap();
        assert!(partial.rasi && partial.pmg && !partial.tar);
        assert!(ModuleSwitches::from_list("rasi,xyz").is_err());
    }

    #[test]
    fn roundtrip_through_json() {
        let mut cfg = FileConfig::default();
        cfg.seed = 41;
        cfg.edit = Some(EditPairConfig {
            source: ShapeParams {
                body_radius: 0.35,
                hat_size: 0.0,
                hat_hue: 0.1,
                body_hue: 0.6,
            },
            target: ShapeParams {
                body_radius: 0.35,
                hat_size: 0.2,
                hat_hue: 0.1,
                body_hue: 0.6,
            },
        });
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = parse_config(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
