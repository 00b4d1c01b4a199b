//! Execution of one run configuration: model construction, training,
//! error metrics, and file outputs.

use std::path::{Path, PathBuf};

use rand::prelude::*;
use serde::Serialize;

use fenni::loss::{
    potential_energy_1d, potential_energy_1d_trapezoid, potential_energy_2d,
    von_mises_plane_strain, weak_loss_1d,
};
use fenni::mesh::{read_gmsh, write_vtk, VtkData};
use fenni::model::{AdaptMode, FenniModel};
use fenni::oracle::{
    error_norms_1d, error_norms_2d, plate_reference_solution, Norms1d, Norms2d, OracleError,
};
use fenni::quadrature::{gauss_1d, gauss_tri, trapezoid_grid};
use fenni::train::{
    train_fixed, train_multigrid, train_r_adaptive, train_residual_fixed, train_rh_adaptive,
    LossFn, TrainError, TrainReport,
};

use crate::config::*;

/// Inversion floor for r-adaptive runs without an adaptivity block.
const DEFAULT_INVERSION_FLOOR: f64 = 0.05;

#[derive(Debug)]
pub enum RunError {
    Config(String),
    Divergence(Box<TrainReport>),
    Io(std::io::Error),
    Failed(String),
}


impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(m) => write!(f, "configuration error: {m}"),
            RunError::Divergence(r) => {
                write!(f, "training diverged after {} iterations", r.iterations)
            }
            RunError::Io(e) => write!(f, "i/o error: {e}"),
            RunError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Divergence(_) => 3,
            RunError::Io(_) => 4,
            RunError::Failed(_) => 1,
        }
    }
}

impl From<TrainError> for RunError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence(report) => RunError::Divergence(report),
            other => RunError::Failed(other.to_string()),
        }
    }
}

impl From<OracleError> for RunError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Io(io) => RunError::Io(io),
            other => RunError::Failed(other.to_string()),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e)
    }
}

pub struct RunArtifacts {
    pub report: TrainReport,
    pub model: FenniModel,
    pub norms_1d: Option<Norms1d>,
    pub norms_2d: Option<Norms2d>,
    pub n_nodes_initial: usize,
}

/// Everything report.json carries. Wall-time fields are the only
/// run-to-run variance for a fixed config and seed.
#[derive(Serialize)]
pub struct RunReport<'a> {
    pub config: &'a RunConfig,
    pub n_nodes_initial: usize,
    pub n_nodes_final: usize,
    pub iterations: u64,
    pub outcome: fenni::train::TrainOutcome,
    pub final_loss: f64,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_u: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_grad: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_ux: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_uy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_vm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vm_max_ratio: Option<f64>,
    pub levels: &'a [fenni::train::LevelStats],
    pub wall_time_s: f64,
}

fn adapt_mode(mode: &ModeChoice, inner: Option<InnerMode>) -> AdaptMode {
    match (mode, inner) {
        (_, Some(InnerMode::Fixed)) => AdaptMode::Fixed,
        (_, Some(InnerMode::RAdaptive)) => AdaptMode::RAdaptive,
        (_, Some(InnerMode::RhAdaptive)) => AdaptMode::RhAdaptive,
        (ModeChoice::Fixed, None) => AdaptMode::Fixed,
        (ModeChoice::RAdaptive, None) => AdaptMode::RAdaptive,
        (ModeChoice::RhAdaptive(_), None) => AdaptMode::RhAdaptive,
        (ModeChoice::Multigrid(mg), None) => match mg.inner {
            InnerMode::Fixed => AdaptMode::Fixed,
            InnerMode::RAdaptive => AdaptMode::RAdaptive,
            InnerMode::RhAdaptive => AdaptMode::RhAdaptive,
        },
    }
}

fn build_bar_model(
    cfg: &RunConfig,
    np_override: Option<usize>,
    order_override: Option<usize>,
    mode: AdaptMode,
) -> Result<FenniModel, RunError> {
    let bar = cfg.bar.problem();
    let order = order_override.unwrap_or(cfg.order);
    match (&cfg.mesh, np_override) {
        (MeshSource::Generate(g), _) => {
            let np = np_override.or(g.np).unwrap();
            bar.build_model(np, order, mode).map_err(RunError::from)
        }
        (MeshSource::MshPath(path), None) => {
            if order != 1 {
                return Err(RunError::Config(
                    "order 2 needs a generated mesh (mid nodes)".to_string(),
                ));
            }
            let read = read_gmsh(path).map_err(|e| RunError::Failed(e.to_string()))?;
            if read.mesh.dim != 1 {
                return Err(RunError::Config(
                    "bar1d requires a 1D mesh file".to_string(),
                ));
            }
            let mut model = FenniModel::new(read.mesh, mode);
            model.set_uniform_u(0.1);
            model
                .set_dirichlet("left", &[bar.u_left])
                .and_then(|_| model.set_dirichlet("right", &[bar.u_right]))
                .map_err(|e| RunError::Config(format!("mesh file lacks Dirichlet tags: {e}")))?;
            Ok(model)
        }
        (MeshSource::MshPath(_), Some(_)) => Err(RunError::Config(
            "multigrid mode uses generated meshes".to_string(),
        )),
    }
}

fn build_plate_model(
    cfg: &RunConfig,
    level_override: Option<usize>,
    mode: AdaptMode,
) -> Result<FenniModel, RunError> {
    let problem = cfg.plate.problem();
    match (&cfg.mesh, level_override) {
        (MeshSource::Generate(g), _) => {
            let level = level_override.or(g.refine_level).unwrap();
            problem.build_model(level, mode).map_err(RunError::from)
        }
        (MeshSource::MshPath(path), None) => {
            let read = read_gmsh(path).map_err(|e| RunError::Failed(e.to_string()))?;
            if read.mesh.dim != 2 {
                return Err(RunError::Config(
                    "plate2d requires a triangle mesh file".to_string(),
                ));
            }
            let mut model = FenniModel::new(read.mesh, mode);
            model.set_uniform_u(0.5);
            model
                .set_dirichlet("left", &[0.0, 0.0])
                .and_then(|_| model.set_dirichlet("right", &[problem.u_d[0], problem.u_d[1]]))
                .map_err(|e| RunError::Config(format!("mesh file lacks Dirichlet tags: {e}")))?;
            Ok(model)
        }
        (MeshSource::MshPath(_), Some(_)) => Err(RunError::Config(
            "multigrid mode uses generated meshes".to_string(),
        )),
    }
}

fn apply_init(model: &mut FenniModel, cfg: &RunConfig) {
    let default = match cfg.problem {
        Problem::Bar1d => 0.1,
        Problem::Plate2d => 0.5,
    };
    model.set_uniform_u(cfg.init.value.unwrap_or(default));
    if cfg.init.jitter != 0.0 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        for i in 0..model.params.u.len() {
            if !model.params.frozen_u[i] {
                model.params.u[i] += cfg.init.jitter * (2.0 * rng.gen::<f64>() - 1.0);
            }
        }
    }
}

fn build_loss(cfg: &RunConfig, initial_mesh: &fenni::Mesh) -> Result<LossFn, RunError> {
    match (&cfg.loss, cfg.integration, cfg.problem) {
        (LossKind::PotentialEnergy, Integration::Gauss(n), Problem::Bar1d) => {
            let bar = cfg.bar.problem();
            let mat = bar.material();
            let body = bar.body_force();
            let rule = gauss_1d(n).map_err(|e| RunError::Config(e.to_string()))?;
            Ok(Box::new(move |tape, model, binding| {
                potential_energy_1d(tape, model, binding, &mat, &body, &rule)
            }))
        }
        (LossKind::PotentialEnergy, Integration::Trapezoid(n), Problem::Bar1d) => {
            let bar = cfg.bar.problem();
            let mat = bar.material();
            let body = bar.body_force();
            let grid =
                trapezoid_grid(initial_mesh, n).map_err(|e| RunError::Config(e.to_string()))?;
            Ok(Box::new(move |tape, model, binding| {
                potential_energy_1d_trapezoid(tape, model, binding, &mat, &body, &grid)
            }))
        }
        (LossKind::PotentialEnergy, Integration::Gauss(n), Problem::Plate2d) => {
            let problem = cfg.plate.problem();
            let mat = problem.material();
            let rule = gauss_tri(n).map_err(|e| RunError::Config(e.to_string()))?;
            Ok(Box::new(move |tape, model, binding| {
                potential_energy_2d(tape, model, binding, &mat, &rule)
            }))
        }
        (LossKind::Weak, Integration::Gauss(n), Problem::Bar1d) => {
            let bar = cfg.bar.problem();
            let mat = bar.material();
            let body = bar.body_force();
            let rule = gauss_1d(n).map_err(|e| RunError::Config(e.to_string()))?;
            Ok(Box::new(move |tape, model, binding| {
                weak_loss_1d(tape, model, binding, &mat, &body, &rule)
            }))
        }
        (kind, integration, problem) => Err(RunError::Config(format!(
            "unsupported combination: {kind:?} + {integration:?} on {problem:?}"
        ))),
    }
}

/// Run one configuration. `cache_dir` holds the 2D reference solutions.
pub fn execute(cfg: &RunConfig, cache_dir: &Path) -> Result<RunArtifacts, RunError> {
    cfg.validate().map_err(RunError::Config)?;

    // The mixed residual loss trains two models; everything else drives
    // the shared single-model engine.
    if let LossKind::Residual(res) = &cfg.loss {
        let bar = cfg.bar.problem();
        let mat = bar.material();
        let body = bar.body_force();
        let mut model_u = build_bar_model(cfg, None, Some(2), AdaptMode::Fixed)?;
        let mut model_s = build_bar_model(cfg, None, Some(1), AdaptMode::Fixed)?;
        apply_init(&mut model_u, cfg);
        // The strain model is unconstrained: its nodal values are free.
        for f in model_s.params.frozen_u.iter_mut() {
            *f = false;
        }
        model_s.dirichlet.clear();
        apply_init(&mut model_s, cfg);
        let lambda1 = res.lambda1.unwrap_or(cfg.bar.length);
        let n0 = model_u.mesh.n_nodes();
        let report = train_residual_fixed(
            &mut model_u,
            &mut model_s,
            &mat,
            &body,
            res.points_per_element,
            lambda1,
            res.lambda2,
            &cfg.optimizer_kind(),
            &cfg.resolved_stop(),
        )?;
        let norms = norms_for(cfg, &model_u, cache_dir)?;
        return Ok(RunArtifacts {
            report,
            model: model_u,
            norms_1d: norms.0,
            norms_2d: norms.1,
            n_nodes_initial: n0,
        });
    }

    let optimizer = cfg.optimizer_kind();
    let stop = cfg.resolved_stop();

    let (model, report, n0) = match &cfg.mode {
        ModeChoice::Fixed | ModeChoice::RAdaptive | ModeChoice::RhAdaptive(_) => {
            let mode = adapt_mode(&cfg.mode, None);
            let mut model = match cfg.problem {
                Problem::Bar1d => build_bar_model(cfg, None, None, mode)?,
                Problem::Plate2d => build_plate_model(cfg, None, mode)?,
            };
            apply_init(&mut model, cfg);
            let loss = build_loss(cfg, &model.mesh)?;
            let n0 = model.mesh.n_nodes();
            let report = match &cfg.mode {
                ModeChoice::Fixed => train_fixed(&mut model, &loss, &optimizer, &stop)?,
                ModeChoice::RAdaptive => train_r_adaptive(
                    &mut model,
                    &loss,
                    &optimizer,
                    &stop,
                    DEFAULT_INVERSION_FLOOR,
                )?,
                ModeChoice::RhAdaptive(acfg) => {
                    train_rh_adaptive(&mut model, &loss, &optimizer, acfg, &stop)?
                }
                ModeChoice::Multigrid(_) => unreachable!(),
            };
            (model, report, n0)
        }
        ModeChoice::Multigrid(mg) => {
            let mode = adapt_mode(&cfg.mode, Some(mg.inner));
            let mut levels = Vec::new();
            for &size in &mg.levels {
                let mut model = match cfg.problem {
                    Problem::Bar1d => build_bar_model(cfg, Some(size), None, mode)?,
                    Problem::Plate2d => build_plate_model(cfg, Some(size), mode)?,
                };
                apply_init(&mut model, cfg);
                levels.push(model);
            }
            let n0 = levels[0].mesh.n_nodes();
            let loss = build_loss(cfg, &levels[0].mesh)?;
            let (model, report) = train_multigrid(
                levels,
                &loss,
                &optimizer,
                &stop,
                mg.adaptivity.as_ref(),
                mg.adaptivity
                    .map(|a| a.inversion_floor)
                    .unwrap_or(DEFAULT_INVERSION_FLOOR),
            )?;
            (model, report, n0)
        }
    };

    let norms = norms_for(cfg, &model, cache_dir)?;
    Ok(RunArtifacts {
        report,
        model,
        norms_1d: norms.0,
        norms_2d: norms.1,
        n_nodes_initial: n0,
    })
}

fn norms_for(
    cfg: &RunConfig,
    model: &FenniModel,
    cache_dir: &Path,
) -> Result<(Option<Norms1d>, Option<Norms2d>), RunError> {
    match cfg.problem {
        Problem::Bar1d => {
            let bar = cfg.bar.problem();
            let norms = error_norms_1d(
                |x| model.eval_point(&[x, 0.0])[0],
                |x| model.eval_dudx_point(x),
                |x| bar.analytic_u(x),
                |x| bar.analytic_du(x),
                bar.length,
                1000,
            )?;
            Ok((Some(norms), None))
        }
        Problem::Plate2d => {
            let problem = cfg.plate.problem();
            let reference =
                plate_reference_solution(cache_dir, &problem, cfg.plate.reference_level)?;
            let norms = error_norms_2d(model, &reference, &problem.material())?;
            Ok((None, Some(norms)))
        }
    }
}

/// Write report.json, loss_history.csv, the solution file, and mesh
/// snapshots into the output directory.
pub fn write_outputs(
    cfg: &RunConfig,
    artifacts: &RunArtifacts,
    out_dir: &Path,
) -> Result<(), RunError> {
    std::fs::create_dir_all(out_dir)?;
    let report = RunReport {
        config: cfg,
        n_nodes_initial: artifacts.n_nodes_initial,
        n_nodes_final: artifacts.model.mesh.n_nodes(),
        iterations: artifacts.report.iterations,
        outcome: artifacts.report.outcome,
        final_loss: artifacts.report.final_loss,
        converged: matches!(
            artifacts.report.outcome,
            fenni::train::TrainOutcome::Converged | fenni::train::TrainOutcome::Stalled
        ),
        e_u: artifacts.norms_1d.map(|n| n.e_u),
        e_grad: artifacts.norms_1d.map(|n| n.e_du),
        e_ux: artifacts.norms_2d.map(|n| n.e_ux),
        e_uy: artifacts.norms_2d.map(|n| n.e_uy),
        e_vm: artifacts.norms_2d.map(|n| n.e_vm),
        vm_max_ratio: artifacts.norms_2d.map(|n| n.vm_max_ratio),
        levels: &artifacts.report.levels,
        wall_time_s: artifacts.report.wall_time_s,
    };
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report).map_err(|e| RunError::Failed(e.to_string()))?,
    )?;

    let mut history = String::from("iteration,loss\n");
    for (i, l) in artifacts.report.loss_history.iter().enumerate() {
        history.push_str(&format!("{},{:.17e}\n", i + 1, l));
    }
    std::fs::write(out_dir.join("loss_history.csv"), history)?;

    match cfg.problem {
        Problem::Bar1d => {
            let bar = cfg.bar.problem();
            let mut csv = String::from("x,u,dudx,u_a,du_a\n");
            let n = 1000;
            for i in 0..n {
                let x = bar.length * i as f64 / (n - 1) as f64;
                csv.push_str(&format!(
                    "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                    x,
                    artifacts.model.eval_point(&[x, 0.0])[0],
                    artifacts.model.eval_dudx_point(x),
                    bar.analytic_u(x),
                    bar.analytic_du(x),
                ));
            }
            std::fs::write(out_dir.join("solution.csv"), csv)?;
        }
        Problem::Plate2d => {
            let model = &artifacts.model;
            let mat = cfg.plate.problem().material();
            let vm: Vec<f64> = (0..model.mesh.n_elements())
                .map(|e| {
                    model
                        .strain_in(e)
                        .map(|s| von_mises_plane_strain(&s, &mat))
                        .unwrap_or(f64::NAN)
                })
                .collect();
            let data = VtkData {
                point_vectors: vec![(
                    "displacement".to_string(),
                    (0..model.mesh.n_nodes())
                        .map(|n| [model.params.u[2 * n], model.params.u[2 * n + 1], 0.0])
                        .collect(),
                )],
                point_scalars: vec![],
                cell_scalars: vec![("von_mises".to_string(), vm)],
            };
            write_vtk(
                &model.mesh,
                &data,
                "trained solution",
                &out_dir.join("solution.vtk"),
            )
            .map_err(|e| RunError::Failed(e.to_string()))?;
        }
    }

    for (k, snap) in artifacts.report.snapshots.iter().enumerate() {
        write_vtk(
            &snap.mesh,
            &VtkData::default(),
            &format!("mesh at iteration {}", snap.iteration),
            &out_dir.join(format!("snapshot_{k:03}.vtk")),
        )
        .map_err(|e| RunError::Failed(e.to_string()))?;
    }
    Ok(())
}

/// One row of study.csv.
#[derive(Serialize)]
pub struct StudyRow {
    pub case: usize,
    pub size: usize,
    pub loss: String,
    pub integration: String,
    pub optimizer: String,
    pub mode: String,
    pub e_u: Option<f64>,
    pub e_grad_or_vm: Option<f64>,
    pub vm_max_ratio: Option<f64>,
    pub iterations: u64,
    pub wall_time_s: f64,
    pub status: String,
}

pub fn study_row(case: usize, cfg: &RunConfig, outcome: &Result<RunArtifacts, RunError>) -> StudyRow {
    let size = match (&cfg.mesh, &cfg.mode) {
        (_, ModeChoice::Multigrid(mg)) => *mg.levels.last().unwrap_or(&0),
        (MeshSource::Generate(g), _) => g.np.or(g.refine_level).unwrap_or(0),
        _ => 0,
    };
    let loss = match &cfg.loss {
        LossKind::PotentialEnergy => "potential_energy".to_string(),
        LossKind::Weak => "weak".to_string(),
        LossKind::Residual(r) => format!("residual({})", r.points_per_element),
    };
    let integration = match cfg.integration {
        Integration::Gauss(n) => format!("gauss({n})"),
        Integration::Trapezoid(n) => format!("trapezoid({n})"),
    };
    let optimizer = match cfg.optimizer {
        OptimizerChoice::Lbfgs(_) => "lbfgs".to_string(),
        OptimizerChoice::Adam(_) => "adam".to_string(),
    };
    let mode = match &cfg.mode {
        ModeChoice::Fixed => "fixed".to_string(),
        ModeChoice::RAdaptive => "r".to_string(),
        ModeChoice::RhAdaptive(_) => "rh".to_string(),
        ModeChoice::Multigrid(mg) => format!("multigrid({:?})", mg.inner),
    };
    match outcome {
        Ok(a) => StudyRow {
            case,
            size,
            loss,
            integration,
            optimizer,
            mode,
            e_u: a.norms_1d.map(|n| n.e_u).or(a.norms_2d.map(|n| n.e_ux)),
            e_grad_or_vm: a.norms_1d.map(|n| n.e_du).or(a.norms_2d.map(|n| n.e_vm)),
            vm_max_ratio: a.norms_2d.map(|n| n.vm_max_ratio),
            iterations: a.report.iterations,
            wall_time_s: a.report.wall_time_s,
            status: "ok".to_string(),
        },
        Err(e) => StudyRow {
            case,
            size,
            loss,
            integration,
            optimizer,
            mode,
            e_u: None,
            e_grad_or_vm: None,
            vm_max_ratio: None,
            iterations: 0,
            wall_time_s: 0.0,
            status: format!("error: {e}"),
        },
    }
}

pub fn write_study_csv(rows: &[StudyRow], path: &PathBuf) -> Result<(), RunError> {
    let mut csv = String::from(
        "case,size,loss,integration,optimizer,mode,e_u,e_grad_or_vm,vm_max_ratio,iterations,wall_time_s,status\n",
    );
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.12e}")).unwrap_or_default();
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{:.3},{}\n",
            r.case,
            r.size,
            r.loss,
            r.integration,
            r.optimizer,
            r.mode,
            fmt(r.e_u),
            fmt(r.e_grad_or_vm),
            fmt(r.vm_max_ratio),
            r.iterations,
            r.wall_time_s,
            r.status,
        ));
    }
    std::fs::write(path, csv)?;
    Ok(())
}
