//! One JSON config file shared by the assemble and refine commands.
//!
//! Every field is optional; omitted fields take the built-in defaults. Unknown
//! keys are rejected so typos fail loudly instead of silently using a default.
//!
//! ```json
//! {
//!   "assembly": { "base_resolution": 56, "coeff_resolution": 14, "num_bases": 4 },
//!   "refine":   { "beta": 3.0, "alpha": 0.75, "num_points": 784,
//!                 "steps": 3, "num_layers": 3, "hidden": 256 }
//! }
//! ```

use std::path::Path;

use masklab_core::assembly::AssemblyConfig;
use masklab_core::refine::RefineConfig;
use serde::Deserialize;

use crate::error::{CliError, Result};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolConfig {
    #[serde(default)]
    pub assembly: AssemblySection,
    #[serde(default)]
    pub refine: RefineSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssemblySection {
    pub base_resolution: usize,
    pub coeff_resolution: usize,
    pub num_bases: usize,
}

impl Default for AssemblySection {
    fn default() -> Self {
        let d = AssemblyConfig::default();
        AssemblySection {
            base_resolution: d.base_resolution,
            coeff_resolution: d.coeff_resolution,
            num_bases: d.num_bases,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineSection {
    pub beta: f64,
    pub alpha: f64,
    pub num_points: usize,
    pub steps: usize,
    pub num_layers: usize,
    pub hidden: usize,
}

impl Default for RefineSection {
    fn default() -> Self {
        let d = RefineConfig::default();
        RefineSection {
            beta: d.beta,
            alpha: d.alpha,
            num_points: d.num_points,
            steps: d.steps,
            num_layers: d.num_layers,
            hidden: d.hidden,
        }
    }
}

impl ToolConfig {
    /// Loads the file when given, otherwise all defaults.
    pub fn load(path: Option<&Path>) -> Result<ToolConfig> {
        let Some(path) = path else {
            return Ok(ToolConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
    }

    pub fn assembly(&self) -> Result<AssemblyConfig> {
        let cfg = AssemblyConfig {
            base_resolution: self.assembly.base_resolution,
            coeff_resolution: self.assembly.coeff_resolution,
            num_bases: self.assembly.num_bases,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn refine(&self) -> Result<RefineConfig> {
        let cfg = RefineConfig {
            beta: self.refine.beta,
            alpha: self.refine.alpha,
            num_points: self.refine.num_points,
            steps: self.refine.steps,
            num_layers: self.refine.num_layers,
            hidden: self.refine.hidden,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absent_file_gives_defaults() {
        let cfg = ToolConfig::load(None).unwrap();
        let a = cfg.assembly().unwrap();
        assert_eq!(
            (a.base_resolution, a.coeff_resolution, a.num_bases),
            (56, 14, 4)
        );
        let r = cfg.refine().unwrap();
        assert_eq!(r.num_points, 784);
        assert_eq!(r.steps, 3);
    }

    #[test]
    fn partial_sections_keep_unmentioned_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"assembly": {"num_bases": 2}, "refine": {"steps": 1}}"#,
        )
        .unwrap();
        let cfg = ToolConfig::load(Some(&path)).unwrap();
        let a = cfg.assembly().unwrap();
        assert_eq!(a.num_bases, 2);
        assert_eq!(a.base_resolution, 56);
        let r = cfg.refine().unwrap();
        assert_eq!(r.steps, 1);
        assert_eq!(r.hidden, 256);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("typo.json");
        std::fs::write(&path, r#"{"assembly": {"basis_resolution": 56}}"#).unwrap();
        let err = ToolConfig::load(Some(&path)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.json");
        std::fs::write(&path, r#"{"assembly": {"num_bases": 0}}"#).unwrap();
        let cfg = ToolConfig::load(Some(&path)).unwrap();
        assert!(cfg.assembly().is_err());
    }
}
