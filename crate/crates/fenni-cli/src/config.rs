//! Run configuration: JSON schema, defaults, and combination validation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use fenni::optim::{AdamConfig, LbfgsConfig};
use fenni::train::{AdaptivityConfig, StopRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    Bar1d,
    Plate2d,
}

/// Where the mesh comes from: the built-in generators or an MSH file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshSource {
    Generate(GenerateMesh),
    MshPath(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateMesh {
    /// Node count (1D problems).
    pub np: Option<usize>,
    /// Refinement level of the built-in plate layout (2D problems).
    pub refine_level: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    PotentialEnergy,
    Weak,
    Residual(ResidualConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualConfig {
    pub points_per_element: usize,
    /// Equilibrium-term weight; defaults to the bar length.
    pub lambda1: Option<f64>,
    pub lambda2: f64,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        ResidualConfig {
            points_per_element: 25,
            lambda1: None,
            lambda2: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    Gauss(usize),
    Trapezoid(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Lbfgs(LbfgsConfig),
    Adam(AdamConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeChoice {
    Fixed,
    RAdaptive,
    RhAdaptive(AdaptivityConfig),
    Multigrid(MultigridConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMode {
    Fixed,
    RAdaptive,
    RhAdaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultigridConfig {
    /// Per-level sizes: node counts (1D) or plate refine levels (2D),
    /// strictly increasing in resolution.
    pub levels: Vec<usize>,
    pub inner: InnerMode,
    #[serde(default)]
    pub adaptivity: Option<AdaptivityConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BarConfig {
    pub length: f64,
    pub area: f64,
    pub youngs: f64,
    pub u_left: f64,
    pub u_right: f64,
    pub x1: f64,
    pub x2: f64,
}

impl Default for BarConfig {
    fn default() -> Self {
        BarConfig {
            length: 10.0,
            area: 1.0,
            youngs: 175.0,
            u_left: 0.0,
            u_right: 5e-4,
            x1: 2.5,
            x2: 7.5,
        }
    }
}

impl BarConfig {
    pub fn problem(&self) -> fenni::oracle::Bar1d {
        fenni::oracle::Bar1d {
            length: self.length,
            area: self.area,
            youngs: self.youngs,
            u_left: self.u_left,
            u_right: self.u_right,
            x1: self.x1,
            x2: self.x2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateConfig {
    pub width: f64,
    pub height: f64,
    pub hole_center: [f64; 2],
    pub hole_radius: f64,
    pub lambda: f64,
    pub mu: f64,
    pub u_d: [f64; 2],
    /// Refinement level of the direct reference solution the error
    /// metrics compare against.
    pub reference_level: usize,
}

impl Default for PlateConfig {
    fn default() -> Self {
        PlateConfig {
            width: 10.0,
            height: 5.0,
            hole_center: [5.0, 2.5],
            hole_radius: 1.0,
            lambda: 1.25,
            mu: 1.0,
            u_d: [1.0, 0.0],
            reference_level: 4,
        }
    }
}

impl PlateConfig {
    pub fn problem(&self) -> fenni::oracle::PlateProblem {
        fenni::oracle::PlateProblem {
            geometry: fenni::mesh::PlateGeometry {
                width: self.width,
                height: self.height,
                hole_center: self.hole_center,
                hole_radius: self.hole_radius,
            },
            lambda: self.lambda,
            mu: self.mu,
            u_d: self.u_d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Uniform initialization of the free nodal values; the problem
    /// default (0.1 bar, 0.5 plate) when absent.
    pub value: Option<f64>,
    /// Amplitude of the seeded uniform jitter added on top (off by
    /// default).
    pub jitter: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            value: None,
            jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: Problem,
    pub mesh: MeshSource,
    pub order: usize,
    pub loss: LossKind,
    pub integration: Integration,
    pub optimizer: OptimizerChoice,
    pub mode: ModeChoice,
    /// Stop rule; the optimizer-specific default when absent.
    pub stop: Option<StopRule>,
    pub bar: BarConfig,
    pub plate: PlateConfig,
    pub init: InitConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            problem: Problem::Bar1d,
            mesh: MeshSource::Generate(GenerateMesh {
                np: Some(41),
                refine_level: None,
            }),
            order: 1,
            loss: LossKind::PotentialEnergy,
            integration: Integration::Gauss(3),
            optimizer: OptimizerChoice::Lbfgs(LbfgsConfig::default()),
            mode: ModeChoice::Fixed,
            stop: None,
            bar: BarConfig::default(),
            plate: PlateConfig::default(),
            init: InitConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub runs: Vec<RunConfig>,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn resolved_stop(&self) -> StopRule {
        self.stop.unwrap_or(match self.optimizer {
            OptimizerChoice::Lbfgs(_) => StopRule::lbfgs_default(),
            OptimizerChoice::Adam(_) => StopRule::adam_default(),
        })
    }

    pub fn optimizer_kind(&self) -> fenni::train::OptimizerKind {
        match self.optimizer {
            OptimizerChoice::Lbfgs(cfg) => fenni::train::OptimizerKind::Lbfgs(cfg),
            OptimizerChoice::Adam(cfg) => fenni::train::OptimizerKind::Adam(cfg),
        }
    }

    /// Combination validity; every rejection names the violated
    /// constraint.
    pub fn validate(&self) -> Result<(), String> {
        if !matches!(self.order, 1 | 2) {
            return Err(format!("order must be 1 or 2, got {}", self.order));
        }
        match self.problem {
            Problem::Bar1d => {
                if let MeshSource::Generate(g) = &self.mesh {
                    match g.np {
                        Some(np) if np >= 2 => {}
                        Some(np) => return Err(format!("bar1d needs np >= 2, got {np}")),
                        None => return Err("bar1d mesh.generate needs np".to_string()),
                    }
                }
            }
            Problem::Plate2d => {
                if self.order != 1 {
                    return Err("plate2d supports order 1 only".to_string());
                }
                if let MeshSource::Generate(g) = &self.mesh {
                    if g.refine_level.is_none() {
                        return Err("plate2d mesh.generate needs refine_level".to_string());
                    }
                }
                if !matches!(self.loss, LossKind::PotentialEnergy) {
                    return Err(
                        "plate2d supports the potential_energy loss only (residual and weak \
                         losses are 1D)"
                            .to_string(),
                    );
                }
            }
        }
        match self.integration {
            Integration::Gauss(n) => match self.problem {
                Problem::Bar1d => {
                    if !(1..=5).contains(&n) {
                        return Err(format!("gauss order must be 1..=5 in 1D, got {n}"));
                    }
                }
                Problem::Plate2d => {
                    if !matches!(n, 1 | 3) {
                        return Err(format!("gauss order must be 1 or 3 on triangles, got {n}"));
                    }
                }
            },
            Integration::Trapezoid(n) => {
                if self.problem != Problem::Bar1d {
                    return Err(
                        "trapezoid integration is 1D only: plate2d requires gauss".to_string()
                    );
                }
                if n < 2 {
                    return Err(format!("trapezoid needs >= 2 samples per element, got {n}"));
                }
                if !matches!(self.loss, LossKind::PotentialEnergy) {
                    return Err("trapezoid integration applies to the potential_energy loss"
                        .to_string());
                }
                if matches!(
                    self.mode,
                    ModeChoice::RhAdaptive(_) | ModeChoice::Multigrid(_)
                ) {
                    return Err(
                        "trapezoid sampling is anchored to one initial mesh: rh-adaptive and \
                         multigrid modes require gauss"
                            .to_string(),
                    );
                }
            }
        }
        match &self.loss {
            LossKind::Residual(r) => {
                if self.order != 2 {
                    return Err(
                        "the residual loss predicts displacement with quadratic shapes: set \
                         order = 2"
                            .to_string(),
                    );
                }
                if !matches!(self.mode, ModeChoice::Fixed) {
                    return Err("the residual loss runs on a fixed mesh".to_string());
                }
                if r.points_per_element < 2 {
                    return Err("residual sampling needs >= 2 points per element".to_string());
                }
            }
            LossKind::Weak => {
                if !matches!(self.mode, ModeChoice::Fixed) {
                    return Err("the weak loss runs on a fixed mesh".to_string());
                }
            }
            LossKind::PotentialEnergy => {}
        }
        if self.order == 2 && !matches!(self.loss, LossKind::Residual(_)) {
            if self.problem != Problem::Bar1d {
                return Err("order 2 is available for bar1d only".to_string());
            }
        }
        match &self.mode {
            ModeChoice::RhAdaptive(cfg) => {
                if !matches!(self.integration, Integration::Gauss(_)) {
                    return Err("rh-adaptive mode requires gauss integration".to_string());
                }
                if !(cfg.t_delta_j > 0.0) {
                    return Err("adaptivity.t_delta_j must be positive".to_string());
                }
            }
            ModeChoice::Multigrid(mg) => {
                if mg.levels.is_empty() {
                    return Err("multigrid.levels must not be empty".to_string());
                }
                if !mg.levels.windows(2).all(|w| w[1] > w[0]) {
                    return Err("multigrid.levels must be strictly increasing".to_string());
                }
                if !matches!(self.mesh, MeshSource::Generate(_)) {
                    return Err("multigrid mode uses generated meshes".to_string());
                }
                if mg.inner == InnerMode::RhAdaptive && mg.adaptivity.is_none() {
                    return Err(
                        "multigrid with rh-adaptive levels needs an adaptivity config".to_string()
                    );
                }
                if self.problem == Problem::Bar1d && mg.levels.iter().any(|&np| np < 2) {
                    return Err("bar1d multigrid levels are node counts >= 2".to_string());
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn invalid_combo_names_constraint() {
        let cfg = RunConfig {
            problem: Problem::Plate2d,
            mesh: MeshSource::Generate(GenerateMesh {
                np: None,
                refine_level: Some(0),
            }),
            integration: Integration::Trapezoid(10),
            ..RunConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.contains("trapezoid"), "message was: {err}");
    }

    #[test]
    fn multigrid_levels_checked() {
        let cfg = RunConfig {
            mode: ModeChoice::Multigrid(MultigridConfig {
                levels: vec![21, 21],
                inner: InnerMode::Fixed,
                adaptivity: None,
            }),
            ..RunConfig::default()
        };
        assert!(cfg.validate().unwrap_err().contains("strictly increasing"));
    }

    #[test]
    fn residual_requires_quadratic_order() {
        let cfg = RunConfig {
            loss: LossKind::Residual(ResidualConfig::default()),
            order: 1,
            ..RunConfig::default()
        };
        assert!(cfg.validate().unwrap_err().contains("order = 2"));
    }
}
