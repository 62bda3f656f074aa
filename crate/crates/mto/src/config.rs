//! Run configuration: JSON-backed, fail-fast on unknown keys, with the
//! standard benchmark defaults filled in for anything omitted.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptivity::AdaptivityConfig;
use crate::error::{Error, Result};
use crate::mesh::background_cells_per_axis;
use crate::optimizer::{QSchedule, StoppingRule};
use crate::problem::ProblemKind;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    /// Domain height L; the width is fixed at 2L.
    #[serde(default = "default_length")]
    pub length: f64,
    pub volume_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Adaptive,
    UniformBaseline,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub problem: ProblemConfig,
    #[serde(default = "default_nx")]
    pub nx: usize,
    #[serde(default = "default_ny")]
    pub ny: usize,
    #[serde(default = "default_initial_order")]
    pub initial_order: usize,
    #[serde(default = "default_initial_points")]
    pub initial_design_points: usize,
    /// Density filter radius as a multiple of the element size.
    #[serde(default = "default_filter_factor")]
    pub filter_radius_factor: f64,
    /// First-cycle objective-change stopping threshold.
    #[serde(default = "default_delta_j1")]
    pub delta_j1: f64,
    /// Per-cycle tightening factor of the stopping threshold.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Measure the stopping change relative to the previous objective
    /// instead of absolutely.
    #[serde(default)]
    pub relative_stopping: bool,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_cycles")]
    pub n_cycles: usize,
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default = "default_baseline_order")]
    pub baseline_order: usize,
    #[serde(default = "default_baseline_points")]
    pub baseline_design_points: usize,
    /// Reference mesh resolution as a multiple of the base mesh.
    #[serde(default = "default_reference_scale")]
    pub reference_scale: usize,
    #[serde(default = "default_reference_order")]
    pub reference_order: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub q_schedule: QSchedule,
    #[serde(default)]
    pub adaptivity: AdaptivityConfig,
}

fn default_length() -> f64 {
    1.0
}
fn default_nx() -> usize {
    40
}
fn default_ny() -> usize {
    20
}
fn default_initial_order() -> usize {
    2
}
fn default_initial_points() -> usize {
    16
}
fn default_filter_factor() -> f64 {
    0.3
}
fn default_delta_j1() -> f64 {
    0.04
}
fn default_gamma() -> f64 {
    0.6
}
fn default_max_iterations() -> usize {
    300
}
fn default_cycles() -> usize {
    4
}
fn default_baseline_order() -> usize {
    5
}
fn default_baseline_points() -> usize {
    64
}
fn default_reference_scale() -> usize {
    8
}
fn default_reference_order() -> usize {
    3
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let config: Config = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Config> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let v0 = self.problem.volume_fraction;
        if !(v0 > 0.0 && v0 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "volume fraction must lie in (0, 1), got {v0}"
            )));
        }
        if self.problem.length <= 0.0 {
            return Err(Error::InvalidConfig("domain height must be positive".into()));
        }
        if self.nx < 1 || self.ny < 1 {
            return Err(Error::InvalidConfig(format!(
                "mesh needs at least one element per axis, got {} x {}",
                self.nx, self.ny
            )));
        }
        for (name, p) in [
            ("initial_order", self.initial_order),
            ("baseline_order", self.baseline_order),
            ("reference_order", self.reference_order),
        ] {
            if p < 1 || p > self.adaptivity.p_max {
                return Err(Error::InvalidConfig(format!(
                    "{name} = {p} outside 1..={}",
                    self.adaptivity.p_max
                )));
            }
        }
        for (name, d) in [
            ("initial_design_points", self.initial_design_points),
            ("baseline_design_points", self.baseline_design_points),
        ] {
            if d < 1 || d > self.adaptivity.d_max {
                return Err(Error::InvalidConfig(format!(
                    "{name} = {d} outside 1..={}",
                    self.adaptivity.d_max
                )));
            }
        }
        if self.n_cycles < 1 {
            return Err(Error::InvalidConfig("need at least one cycle".into()));
        }
        if self.reference_scale < 1 {
            return Err(Error::InvalidConfig(
                "reference scale must be a positive integer".into(),
            ));
        }
        if self.gamma <= 0.0 || self.gamma > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "threshold decay must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        // Filter coverage: every integration point must see at least one
        // background cell center, whose farthest distance is the cell
        // half-diagonal. Checked for the coarsest grid either mode starts
        // from; later cycles only refine the grid.
        for d in [self.initial_design_points, self.baseline_design_points] {
            let m = background_cells_per_axis(d);
            let half_diag = std::f64::consts::SQRT_2 / (2.0 * m as f64);
            if self.filter_radius_factor <= half_diag {
                return Err(Error::InvalidConfig(format!(
                    "filter radius factor {} does not cover background cells \
                     at {m} per axis (needs > {half_diag:.4})",
                    self.filter_radius_factor
                )));
            }
        }
        Ok(())
    }

    /// Element size of the base mesh: the 2L-wide domain split into nx.
    pub fn element_size(&self) -> f64 {
        2.0 * self.problem.length / self.nx as f64
    }

    pub fn domain_width(&self) -> f64 {
        2.0 * self.problem.length
    }

    pub fn stopping_rule(&self) -> StoppingRule {
        StoppingRule {
            delta_j1: self.delta_j1,
            gamma: self.gamma,
            relative: self.relative_stopping,
            max_iterations: self.max_iterations,
        }
    }

    /// Scale the mesh resolution, keeping the physical domain. The reference
    /// resolution scales implicitly through its multiplier.
    pub fn scaled(mut self, factor: f64) -> Result<Config> {
        if factor <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "scale factor must be positive, got {factor}"
            )));
        }
        self.nx = ((self.nx as f64 * factor).round() as usize).max(1);
        self.ny = ((self.ny as f64 * factor).round() as usize).max(1);
        self.validate()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"problem": {"kind": "cantilever_point", "volume_fraction": 0.45}}"#
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let config = Config::parse(minimal()).unwrap();
        assert_eq!(config.nx, 40);
        assert_eq!(config.ny, 20);
        assert_eq!(config.initial_order, 2);
        assert_eq!(config.initial_design_points, 16);
        assert_eq!(config.baseline_order, 5);
        assert_eq!(config.baseline_design_points, 64);
        assert_eq!(config.n_cycles, 4);
        assert_eq!(config.reference_scale, 8);
        assert_eq!(config.reference_order, 3);
        assert_eq!(config.mode, RunMode::Adaptive);
        assert_eq!(config.q_schedule, QSchedule::Off);
        assert!(!config.relative_stopping);
        assert!((config.element_size() - 0.05).abs() < 1e-15);
        assert!((config.delta_j1 - 0.04).abs() < 1e-15);
        assert!((config.gamma - 0.6).abs() < 1e-15);
        assert_eq!(config.adaptivity.p_max, 5);
        assert_eq!(config.adaptivity.d_max, 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"problem": {"kind": "cantilever_point", "volume_fraction": 0.45},
                       "mystery": 1}"#;
        assert!(matches!(Config::parse(text), Err(Error::Parse(_))));
        let nested = r#"{"problem": {"kind": "cantilever_point", "volume_fraction": 0.45,
                        "mystery": 1}}"#;
        assert!(matches!(Config::parse(nested), Err(Error::Parse(_))));
        let adapt = r#"{"problem": {"kind": "cantilever_point", "volume_fraction": 0.45},
                        "adaptivity": {"mystery": 1}}"#;
        assert!(matches!(Config::parse(adapt), Err(Error::Parse(_))));
    }

    #[test]
    fn q_schedule_names() {
        for (name, expect) in [
            ("off", QSchedule::Off),
            ("+1", QSchedule::PlusOne),
            ("+2", QSchedule::PlusTwo),
        ] {
            let text = format!(
                r#"{{"problem": {{"kind": "force_inverter", "volume_fraction": 0.2}},
                    "q_schedule": "{name}"}}"#
            );
            assert_eq!(Config::parse(&text).unwrap().q_schedule, expect);
        }
    }

    #[test]
    fn volume_fraction_bounds_are_enforced() {
        for v in ["0.0", "1.0", "-0.3", "1.7"] {
            let text = format!(
                r#"{{"problem": {{"kind": "cantilever_point", "volume_fraction": {v}}}}}"#
            );
            assert!(
                matches!(Config::parse(&text), Err(Error::InvalidConfig(_))),
                "volume fraction {v} should be rejected"
            );
        }
    }

    #[test]
    fn filter_coverage_is_validated() {
        let text = r#"{"problem": {"kind": "cantilever_point", "volume_fraction": 0.45},
                       "filter_radius_factor": 0.1}"#;
        // At 16 initial points the background is 4 per axis; half-diagonal
        // 0.177 exceeds a 0.1 radius.
        assert!(matches!(Config::parse(text), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn scaling_halves_the_mesh() {
        let config = Config::parse(minimal()).unwrap().scaled(0.5).unwrap();
        assert_eq!((config.nx, config.ny), (20, 10));
        assert!((config.element_size() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn roundtrip_preserves_every_field() {
        let config = Config::parse(minimal()).unwrap();
        let json = serde_json::to_string(&config).unwrap();
        let back = Config::parse(&json).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }

    #[test]
    fn stopping_rule_reflects_config() {
        let text = r#"{"problem": {"kind": "cantilever_point", "volume_fraction": 0.45},
                       "delta_j1": 0.02, "gamma": 0.5, "relative_stopping": true,
                       "max_iterations": 50}"#;
        let rule = Config::parse(text).unwrap().stopping_rule();
        assert_eq!(rule.delta_j1, 0.02);
        assert_eq!(rule.gamma, 0.5);
        assert!(rule.relative);
        assert_eq!(rule.max_iterations, 50);
    }
}
