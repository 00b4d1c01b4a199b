//! Training drivers: fixed-mesh, node-relocating (r), relocate-and-split
//! (rh) with the Jacobian shrink criterion, and coarse-to-fine multigrid
//! schedules.
//!
//! One engine runs all modes; the flavor comes from which parameters are
//! frozen and whether a splitting config is present. Divergence, element
//! inversion, and line-search stagnation are all surfaced explicitly.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::loss::LossError;
use crate::mesh::{red_green_refine, Mesh, MeshError};
use crate::model::{Binding, FenniModel, FreeLayout, ModelError};
use crate::optim::{
    loss_converged, Adam, AdamConfig, Lbfgs, LbfgsConfig, LineSearchStalled,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged (loss blew up past 1e6 x initial)")]
    Divergence(Box<TrainReport>),
    #[error("element {element} could not be kept valid within {halvings} step halvings")]
    ElementInversion { element: usize, halvings: u32 },
    #[error("previous Jacobian is zero for element {element}")]
    ZeroPreviousJacobian { element: usize },
    #[error("model has no free parameters to train")]
    NoFreeParameters,
    #[error("invalid setup: {0}")]
    InvalidSetup(String),
    #[error("multigrid level sequence must strictly increase in node count")]
    NonIncreasingLevels,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Loss evaluator: records the loss of `model` under `binding` on the
/// tape. One boxed closure serves every mesh of a run (materials and
/// rules are captured).
pub type LossFn =
    Box<dyn for<'t> Fn(&'t Tape, &FenniModel, &Binding<'t>) -> Result<Var<'t>, LossError>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam(AdamConfig),
    Lbfgs(LbfgsConfig),
}

/// Stop when the relative loss decrease falls below `tol` (absolute
/// fallback `tol_abs` when the relative denominator vanishes) or at the
/// iteration cap. The decrease is sampled every `check_every`
/// iterations: consecutive single iterations can dip below any
/// threshold transiently while the run is still far from converged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StopRule {
    pub tol: f64,
    pub tol_abs: f64,
    pub max_iterations: u64,
    pub check_every: u64,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule::lbfgs_default()
    }
}

impl StopRule {
    pub fn lbfgs_default() -> StopRule {
        StopRule {
            tol: 1e-9,
            tol_abs: 1e-20,
            max_iterations: 1000,
            check_every: 1,
        }
    }

    pub fn adam_default() -> StopRule {
        StopRule {
            tol: 1e-7,
            tol_abs: 1e-20,
            max_iterations: 20_000,
            check_every: 1,
        }
    }
}

/// Splitting criterion parameters for the rh mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptivityConfig {
    /// Relative area-shrink threshold: elements with
    /// (|J_prev| - |J|) / |J_prev| above it are marked.
    pub t_delta_j: f64,
    /// Iterations between criterion evaluations.
    pub check_interval: u64,
    pub max_splits: u32,
    /// Minimum |J| per element as a fraction of its value when the level
    /// started; trial steps below it are rejected.
    pub inversion_floor: f64,
}

impl Default for AdaptivityConfig {
    fn default() -> Self {
        AdaptivityConfig {
            t_delta_j: 0.1,
            check_interval: 10,
            max_splits: 1,
            inversion_floor: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainOutcome {
    Converged,
    IterationCap,
    /// The line search could not reduce the loss further; stationary to
    /// evaluation precision.
    Stalled,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub n_nodes_initial: usize,
    pub n_nodes_final: usize,
    pub iterations: u64,
    pub final_loss: f64,
    pub outcome: TrainOutcome,
    pub denominator_guard_hits: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeshSnapshot {
    pub iteration: u64,
    pub mesh: Mesh,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_history: Vec<f64>,
    pub iterations: u64,
    pub outcome: TrainOutcome,
    pub final_loss: f64,
    pub wall_time_s: f64,
    pub levels: Vec<LevelStats>,
    /// Mesh state captured at every refinement event.
    pub snapshots: Vec<MeshSnapshot>,
}

/// Relative element shrink between two Jacobian snapshots; positive when
/// the element got smaller.
pub fn delta_jacobian(j_prev: f64, j_curr: f64) -> Result<f64, TrainError> {
    if j_prev == 0.0 {
        return Err(TrainError::ZeroPreviousJacobian { element: usize::MAX });
    }
    Ok((j_prev.abs() - j_curr.abs()) / j_prev.abs())
}

// ---------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------

struct Settings<'a> {
    optimizer: &'a OptimizerKind,
    stop: &'a StopRule,
    adaptivity: Option<&'a AdaptivityConfig>,
    inversion_floor: f64,
}

const MAX_GUARD_HALVINGS: u32 = 30;

/// |J| floor per element from the level-start mesh.
fn jacobian_floors(mesh: &Mesh, fraction: f64) -> Vec<f64> {
    (0..mesh.n_elements())
        .map(|e| fraction * mesh.signed_jacobian(e).abs())
        .collect()
}

fn mesh_admissible(mesh: &Mesh, floors: &[f64]) -> bool {
    (0..mesh.n_elements()).all(|e| mesh.signed_jacobian(e) > floors[e])
}

/// Largest step fraction (halving up to `MAX_GUARD_HALVINGS` times) that
/// keeps every element Jacobian above its floor. The model is left at
/// theta + scale * delta.
fn guarded_apply(
    model: &mut FenniModel,
    layout: &FreeLayout,
    theta: &[f64],
    delta: &[f64],
    floors: &[f64],
) -> Result<(Vec<f64>, f64), TrainError> {
    let mut scale = 1.0;
    for _ in 0..=MAX_GUARD_HALVINGS {
        let trial: Vec<f64> = theta
            .iter()
            .zip(delta)
            .map(|(t, d)| t + scale * d)
            .collect();
        layout.apply(model, &trial);
        if mesh_admissible(&model.mesh, floors) {
            return Ok((trial, scale));
        }
        scale *= 0.5;
    }
    let bad = (0..model.mesh.n_elements())
        .find(|&e| model.mesh.signed_jacobian(e) <= floors[e])
        .unwrap_or(0);
    // Restore the last accepted parameters.
    layout.apply(model, theta);
    Err(TrainError::ElementInversion {
        element: bad,
        halvings: MAX_GUARD_HALVINGS,
    })
}

struct LevelRun {
    history: Vec<f64>,
    outcome: TrainOutcome,
    final_loss: f64,
    snapshots: Vec<MeshSnapshot>,
    guard_hits: u64,
}

fn evaluate(
    tape: &Tape,
    model: &mut FenniModel,
    layout: &FreeLayout,
    loss: &LossFn,
    floors: &[f64],
    theta: &[f64],
) -> Result<(f64, Vec<f64>), TrainError> {
    layout.apply(model, theta);
    if !mesh_admissible(&model.mesh, floors) {
        return Ok((f64::INFINITY, vec![0.0; theta.len()]));
    }
    tape.clear();
    let binding = model.bind(tape);
    let value = loss(tape, model, &binding)?;
    let grads = tape.backward(value)?;
    Ok((value.value(), layout.collect_grads(&binding, &grads)))
}

/// Extend the parameter set over a refined mesh: new node values are the
/// model's own interpolation at the new positions (edge midpoints of
/// linear elements average the endpoints), new boundary nodes freeze
/// their coordinates, and Dirichlet values are re-applied.
fn apply_refinement(
    model: &mut FenniModel,
    outcome: crate::mesh::RefineOutcome,
) -> Result<(), TrainError> {
    let ncomp = model.params.ncomp;
    let dim = model.mesh.dim;
    for (id, (a, b)) in &outcome.new_nodes {
        debug_assert_eq!(*id, model.params.u.len() / ncomp);
        for c in 0..ncomp {
            let val = 0.5 * (model.params.u[a * ncomp + c] + model.params.u[b * ncomp + c]);
            model.params.u.push(val);
            model.params.frozen_u.push(false);
        }
        let on_boundary = outcome.mesh.nodes[*id].on_boundary;
        for _ in 0..dim {
            model.params.frozen_x.push(on_boundary);
        }
    }
    model.mesh = outcome.mesh;
    model.reapply_dirichlet()?;
    Ok(())
}

fn snapshot_jacobians(model: &mut FenniModel) {
    for e in 0..model.mesh.n_elements() {
        let j = model.mesh.signed_jacobian(e).abs();
        model.mesh.elements[e].jacobian_prev = Some(j);
    }
}

/// Evaluate the shrink criterion, returning the marked element set.
fn shrink_marks(model: &FenniModel, cfg: &AdaptivityConfig) -> Result<BTreeSet<usize>, TrainError> {
    let mut marks = BTreeSet::new();
    for e in 0..model.mesh.n_elements() {
        let Some(prev) = model.mesh.elements[e].jacobian_prev else {
            continue;
        };
        if prev == 0.0 {
            return Err(TrainError::ZeroPreviousJacobian { element: e });
        }
        let dj = delta_jacobian(prev, model.mesh.signed_jacobian(e))?;
        if dj > cfg.t_delta_j && model.mesh.elements[e].split_count < cfg.max_splits {
            marks.insert(e);
        }
    }
    Ok(marks)
}

fn run_level(
    model: &mut FenniModel,
    loss: &LossFn,
    s: &Settings<'_>,
    global_iter_offset: u64,
) -> Result<LevelRun, TrainError> {
    if let Some(cfg) = s.adaptivity {
        if !(cfg.t_delta_j > 0.0) {
            return Err(TrainError::InvalidSetup(
                "adaptivity threshold must be positive".to_string(),
            ));
        }
        if cfg.check_interval == 0 {
            return Err(TrainError::InvalidSetup(
                "adaptivity check interval must be at least 1".to_string(),
            ));
        }
    }

    let mut layout = FreeLayout::build(model);
    if layout.is_empty() {
        return Err(TrainError::NoFreeParameters);
    }
    let mut theta = layout.gather(model);
    let mut floors = jacobian_floors(&model.mesh, s.inversion_floor);
    if s.adaptivity.is_some() {
        snapshot_jacobians(model);
    }

    let tape = Tape::new();
    let mut adam = match s.optimizer {
        OptimizerKind::Adam(cfg) => Some(Adam::new(theta.len(), *cfg)),
        OptimizerKind::Lbfgs(_) => None,
    };
    let mut lbfgs = match s.optimizer {
        OptimizerKind::Lbfgs(cfg) => Some(Lbfgs::new(*cfg)),
        OptimizerKind::Adam(_) => None,
    };

    let (mut f, mut g) = evaluate(&tape, model, &layout, loss, &floors, &theta)?;
    let initial_scale = f.abs().max(1.0);
    let mut history: Vec<f64> = Vec::new();
    let mut snapshots = Vec::new();
    let mut outcome = TrainOutcome::IterationCap;
    let mut guard_hits = 0u64;
    let check_every = s.stop.check_every.max(1);
    let mut last_checked = f;

    let mut iter: u64 = 0;
    while iter < s.stop.max_iterations {
        iter += 1;

        match s.optimizer {
            OptimizerKind::Adam(_) => {
                let delta = adam.as_mut().unwrap().delta(&g);
                let (new_theta, _scale) =
                    guarded_apply(model, &layout, &theta, &delta, &floors)?;
                theta = new_theta;
                let (f_new, g_new) = evaluate(&tape, model, &layout, loss, &floors, &theta)?;
                f = f_new;
                g = g_new;
            }
            OptimizerKind::Lbfgs(_) => {
                let mut eval = |t: &[f64]| evaluate(&tape, model, &layout, loss, &floors, t);
                match lbfgs.as_mut().unwrap().step(&mut theta, f, &g, &mut eval)? {
                    Ok(step) => {
                        f = step.f_new;
                        g = step.g_new;
                    }
                    Err(LineSearchStalled) => {
                        history.push(f);
                        outcome = TrainOutcome::Stalled;
                        break;
                    }
                }
            }
        }
        history.push(f);

        if !f.is_finite() || f > 1e6 * initial_scale {
            layout.apply(model, &theta);
            let report = TrainReport {
                loss_history: history,
                iterations: iter,
                outcome: TrainOutcome::IterationCap,
                final_loss: f,
                wall_time_s: 0.0,
                levels: Vec::new(),
                snapshots,
            };
            return Err(TrainError::Divergence(Box::new(report)));
        }

        if iter % check_every == 0 {
            let check = loss_converged(f, last_checked, s.stop.tol, s.stop.tol_abs);
            last_checked = f;
            if check.denominator_guarded {
                guard_hits += 1;
            }
            if check.converged {
                outcome = TrainOutcome::Converged;
                break;
            }
        }

        if let Some(cfg) = s.adaptivity {
            if iter % cfg.check_interval == 0 {
                layout.apply(model, &theta);
                let marks = shrink_marks(model, cfg)?;
                if marks.is_empty() {
                    snapshot_jacobians(model);
                } else {
                    match red_green_refine(&model.mesh, &marks, cfg.max_splits) {
                        Ok(refined) => {
                            apply_refinement(model, refined)?;
                            layout = FreeLayout::build(model);
                            theta = layout.gather(model);
                            floors = jacobian_floors(&model.mesh, s.inversion_floor);
                            snapshot_jacobians(model);
                            snapshots.push(MeshSnapshot {
                                iteration: global_iter_offset + iter,
                                mesh: model.mesh.clone(),
                            });
                            if let Some(a) = adam.as_mut() {
                                *a = Adam::new(theta.len(), a.cfg);
                            }
                            if let Some(l) = lbfgs.as_mut() {
                                l.reset();
                            }
                            let (f_new, g_new) =
                                evaluate(&tape, model, &layout, loss, &floors, &theta)?;
                            f = f_new;
                            g = g_new;
                        }
                        Err(MeshError::NonConforming(_)) => {
                            // A drifted green midpoint made the split
                            // geometrically unsafe; postpone to the next
                            // check.
                            snapshot_jacobians(model);
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
            }
        }
    }

    layout.apply(model, &theta);
    Ok(LevelRun {
        history,
        outcome,
        final_loss: f,
        snapshots,
        guard_hits,
    })
}

fn finish_report(levels: Vec<LevelStats>, runs: Vec<LevelRun>, started: Instant) -> TrainReport {
    let mut history = Vec::new();
    let mut snapshots = Vec::new();
    for run in runs {
        history.extend(run.history);
        snapshots.extend(run.snapshots);
    }
    let outcome = levels
        .last()
        .map(|l| l.outcome)
        .unwrap_or(TrainOutcome::IterationCap);
    let final_loss = levels.last().map(|l| l.final_loss).unwrap_or(f64::NAN);
    TrainReport {
        iterations: history.len() as u64,
        loss_history: history,
        outcome,
        final_loss,
        wall_time_s: started.elapsed().as_secs_f64(),
        levels,
        snapshots,
    }
}

fn run_single(
    model: &mut FenniModel,
    loss: &LossFn,
    s: &Settings<'_>,
) -> Result<TrainReport, TrainError> {
    let started = Instant::now();
    let n0 = model.mesh.n_nodes();
    let run = run_level(model, loss, s, 0)?;
    let stats = LevelStats {
        level: 0,
        n_nodes_initial: n0,
        n_nodes_final: model.mesh.n_nodes(),
        iterations: run.history.len() as u64,
        final_loss: run.final_loss,
        outcome: run.outcome,
        denominator_guard_hits: run.guard_hits,
    };
    Ok(finish_report(vec![stats], vec![run], started))
}

/// Train nodal values on a fixed mesh. Every coordinate entry must be
/// frozen.
pub fn train_fixed(
    model: &mut FenniModel,
    loss: &LossFn,
    optimizer: &OptimizerKind,
    stop: &StopRule,
) -> Result<TrainReport, TrainError> {
    if model.params.frozen_x.iter().any(|f| !f) {
        return Err(TrainError::InvalidSetup(
            "fixed-mesh training requires all coordinates frozen".to_string(),
        ));
    }
    run_single(
        model,
        loss,
        &Settings {
            optimizer,
            stop,
            adaptivity: None,
            inversion_floor: 0.0,
        },
    )
}

/// Train nodal values and interior nodal coordinates.
pub fn train_r_adaptive(
    model: &mut FenniModel,
    loss: &LossFn,
    optimizer: &OptimizerKind,
    stop: &StopRule,
    inversion_floor: f64,
) -> Result<TrainReport, TrainError> {
    run_single(
        model,
        loss,
        &Settings {
            optimizer,
            stop,
            adaptivity: None,
            inversion_floor,
        },
    )
}

/// As r-adaptive, plus element splitting where the shrink criterion
/// fires.
pub fn train_rh_adaptive(
    model: &mut FenniModel,
    loss: &LossFn,
    optimizer: &OptimizerKind,
    cfg: &AdaptivityConfig,
    stop: &StopRule,
) -> Result<TrainReport, TrainError> {
    run_single(
        model,
        loss,
        &Settings {
            optimizer,
            stop,
            adaptivity: Some(cfg),
            inversion_floor: cfg.inversion_floor,
        },
    )
}

/// Train the mixed residual formulation: a quadratic displacement model
/// and a linear strain model share the optimizer on a fixed mesh.
#[allow(clippy::too_many_arguments)]
pub fn train_residual_fixed(
    model_u: &mut FenniModel,
    model_strain: &mut FenniModel,
    mat: &crate::loss::BarMaterial,
    body: &dyn crate::oracle::ScalarField1d,
    points_per_element: usize,
    lambda1: f64,
    lambda2: f64,
    optimizer: &OptimizerKind,
    stop: &StopRule,
) -> Result<TrainReport, TrainError> {
    let started = Instant::now();
    let layout_u = FreeLayout::build(model_u);
    let layout_s = FreeLayout::build(model_strain);
    let n_u = layout_u.len();
    let n = n_u + layout_s.len();
    if n == 0 {
        return Err(TrainError::NoFreeParameters);
    }
    let mut theta = layout_u.gather(model_u);
    theta.extend(layout_s.gather(model_strain));

    let tape = Tape::new();
    let evaluate = |theta: &[f64],
                        model_u: &mut FenniModel,
                        model_strain: &mut FenniModel|
     -> Result<(f64, Vec<f64>), TrainError> {
        layout_u.apply(model_u, &theta[..n_u]);
        layout_s.apply(model_strain, &theta[n_u..]);
        tape.clear();
        let bu = model_u.bind(&tape);
        let bs = model_strain.bind(&tape);
        let value = crate::loss::residual_loss_1d(
            &tape,
            model_u,
            &bu,
            model_strain,
            &bs,
            mat,
            body,
            points_per_element,
            lambda1,
            lambda2,
        )?;
        let grads = tape.backward(value)?;
        let mut g = layout_u.collect_grads(&bu, &grads);
        g.extend(layout_s.collect_grads(&bs, &grads));
        Ok((value.value(), g))
    };

    let mut adam = match optimizer {
        OptimizerKind::Adam(cfg) => Some(Adam::new(n, *cfg)),
        _ => None,
    };
    let mut lbfgs = match optimizer {
        OptimizerKind::Lbfgs(cfg) => Some(Lbfgs::new(*cfg)),
        _ => None,
    };
    let (mut f, mut g) = evaluate(&theta, model_u, model_strain)?;
    let initial_scale = f.abs().max(1.0);
    let mut history = Vec::new();
    let mut outcome = TrainOutcome::IterationCap;
    let mut guard_hits = 0;
    let check_every = stop.check_every.max(1);
    let mut last_checked = f;
    let mut iter = 0u64;
    while iter < stop.max_iterations {
        iter += 1;
        match optimizer {
            OptimizerKind::Adam(_) => {
                let delta = adam.as_mut().unwrap().delta(&g);
                for (t, d) in theta.iter_mut().zip(&delta) {
                    *t += d;
                }
                let (fv, gv) = evaluate(&theta, model_u, model_strain)?;
                f = fv;
                g = gv;
            }
            OptimizerKind::Lbfgs(_) => {
                let mut eval = |t: &[f64]| evaluate(t, model_u, model_strain);
                match lbfgs.as_mut().unwrap().step(&mut theta, f, &g, &mut eval)? {
                    Ok(step) => {
                        f = step.f_new;
                        g = step.g_new;
                    }
                    Err(LineSearchStalled) => {
                        history.push(f);
                        outcome = TrainOutcome::Stalled;
                        break;
                    }
                }
            }
        }
        history.push(f);
        if !f.is_finite() || f > 1e6 * initial_scale {
            let report = TrainReport {
                loss_history: history,
                iterations: iter,
                outcome: TrainOutcome::IterationCap,
                final_loss: f,
                wall_time_s: started.elapsed().as_secs_f64(),
                levels: Vec::new(),
                snapshots: Vec::new(),
            };
            return Err(TrainError::Divergence(Box::new(report)));
        }
        if iter % check_every == 0 {
            let check = loss_converged(f, last_checked, stop.tol, stop.tol_abs);
            last_checked = f;
            if check.denominator_guarded {
                guard_hits += 1;
            }
            if check.converged {
                outcome = TrainOutcome::Converged;
                break;
            }
        }
    }
    layout_u.apply(model_u, &theta[..n_u]);
    layout_s.apply(model_strain, &theta[n_u..]);
    let stats = LevelStats {
        level: 0,
        n_nodes_initial: model_u.mesh.n_nodes(),
        n_nodes_final: model_u.mesh.n_nodes(),
        iterations: history.len() as u64,
        final_loss: f,
        outcome,
        denominator_guard_hits: guard_hits,
    };
    Ok(TrainReport {
        iterations: history.len() as u64,
        loss_history: history,
        outcome,
        final_loss: f,
        wall_time_s: started.elapsed().as_secs_f64(),
        levels: vec![stats],
        snapshots: Vec::new(),
    })
}

/// Initialize a finer model by evaluating the trained coarse model at
/// every fine node (nearest nodal value outside the coarse mesh, which
/// happens for boundary nodes); Dirichlet entries are re-frozen to their
/// prescribed values afterwards.
pub fn multigrid_transfer(coarse: &FenniModel, fine: &mut FenniModel) -> Result<(), TrainError> {
    let ncomp = fine.params.ncomp;
    for n in 0..fine.mesh.n_nodes() {
        let x = fine.mesh.nodes[n].coords;
        let values = coarse.eval_point(&x);
        for c in 0..ncomp {
            if !fine.params.frozen_u[n * ncomp + c] {
                fine.params.u[n * ncomp + c] = values[c];
            }
        }
    }
    fine.reapply_dirichlet()?;
    Ok(())
}

/// Train a strictly coarsening-to-finer model sequence, transferring the
/// solution as the initialization of each next level. Returns the final
/// model and the combined report (per-level iteration counts included).
pub fn train_multigrid(
    mut levels: Vec<FenniModel>,
    loss: &LossFn,
    optimizer: &OptimizerKind,
    stop: &StopRule,
    adaptivity: Option<&AdaptivityConfig>,
    inversion_floor: f64,
) -> Result<(FenniModel, TrainReport), TrainError> {
    if levels.is_empty() {
        return Err(TrainError::InvalidSetup("empty level sequence".to_string()));
    }
    for w in levels.windows(2) {
        if w[1].mesh.n_nodes() <= w[0].mesh.n_nodes() {
            return Err(TrainError::NonIncreasingLevels);
        }
    }
    let started = Instant::now();
    let settings = Settings {
        optimizer,
        stop,
        adaptivity,
        inversion_floor,
    };
    let mut stats = Vec::new();
    let mut runs: Vec<LevelRun> = Vec::new();
    let mut trained: Option<FenniModel> = None;
    let mut iter_offset = 0u64;
    for (lvl, mut model) in levels.drain(..).enumerate() {
        if let Some(prev) = &trained {
            multigrid_transfer(prev, &mut model)?;
        }
        let n0 = model.mesh.n_nodes();
        let run = run_level(&mut model, loss, &settings, iter_offset)?;
        iter_offset += run.history.len() as u64;
        stats.push(LevelStats {
            level: lvl,
            n_nodes_initial: n0,
            n_nodes_final: model.mesh.n_nodes(),
            iterations: run.history.len() as u64,
            final_loss: run.final_loss,
            outcome: run.outcome,
            denominator_guard_hits: run.guard_hits,
        });
        runs.push(run);
        trained = Some(model);
    }
    Ok((trained.unwrap(), finish_report(stats, runs, started)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{potential_energy_1d, potential_energy_2d};
    use crate::model::AdaptMode;
    use crate::oracle::{self, Bar1d, PlateProblem};
    use crate::quadrature::{gauss_1d, gauss_tri};
    use approx::assert_relative_eq;

    fn pe_1d_loss(bar: &Bar1d, n_gauss: usize) -> LossFn {
        let mat = bar.material();
        let body = bar.body_force();
        let rule = gauss_1d(n_gauss).unwrap();
        Box::new(move |tape, model, binding| {
            potential_energy_1d(tape, model, binding, &mat, &body, &rule)
        })
    }

    fn pe_2d_loss(problem: &PlateProblem) -> LossFn {
        let mat = problem.material();
        let rule = gauss_tri(1).unwrap();
        Box::new(move |tape, model, binding| {
            potential_energy_2d(tape, model, binding, &mat, &rule)
        })
    }

    #[test]
    fn delta_jacobian_cases() {
        assert_relative_eq!(delta_jacobian(2.0, 1.0).unwrap(), 0.5);
        assert_eq!(delta_jacobian(3.0, 3.0).unwrap(), 0.0);
        assert_relative_eq!(delta_jacobian(1.0, 2.0).unwrap(), -1.0);
        assert!(matches!(
            delta_jacobian(0.0, 1.0),
            Err(TrainError::ZeroPreviousJacobian { .. })
        ));
    }

    #[test]
    fn fixed_mesh_matches_direct_solver() {
        let bar = Bar1d::default();
        let mut model = bar.build_model(41, 1, AdaptMode::Fixed).unwrap();
        let loss = pe_1d_loss(&bar, 3);
        // tol = 0 disables the stagnation stop: run to the line-search
        // stall, i.e. gradient exhaustion.
        let stop = StopRule {
            tol: 0.0,
            tol_abs: 0.0,
            max_iterations: 2000,
            check_every: 20,
        };
        let report = train_fixed(
            &mut model,
            &loss,
            &OptimizerKind::Lbfgs(LbfgsConfig::default()),
            &stop,
        )
        .unwrap();
        let rule = gauss_1d(3).unwrap();
        let exact = oracle::fem_solve_1d(
            &model.mesh,
            &bar.material(),
            &bar.body_force(),
            &bar.bcs(&model.mesh),
            &rule,
        )
        .unwrap();
        let num: f64 = model
            .params
            .u
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let den: f64 = exact.iter().map(|v| v * v).sum();
        let rel = (num / den).sqrt();
        assert!(
            rel <= 1e-8,
            "relative nodal mismatch {rel:e} after {} iterations",
            report.iterations
        );
        assert_eq!(report.loss_history.len() as u64, report.iterations);
    }

    #[test]
    fn already_converged_stops_quickly() {
        let bar = Bar1d::default();
        let rule = gauss_1d(3).unwrap();
        let mut model = bar.build_model(11, 1, AdaptMode::Fixed).unwrap();
        let exact = oracle::fem_solve_1d(
            &model.mesh,
            &bar.material(),
            &bar.body_force(),
            &bar.bcs(&model.mesh),
            &rule,
        )
        .unwrap();
        model.params.u.copy_from_slice(&exact);
        let loss = pe_1d_loss(&bar, 3);
        let report = train_fixed(
            &mut model,
            &loss,
            &OptimizerKind::Lbfgs(LbfgsConfig::default()),
            &StopRule::lbfgs_default(),
        )
        .unwrap();
        assert!(
            report.iterations <= 2,
            "took {} iterations from the optimum",
            report.iterations
        );
    }

    #[test]
    fn dirichlet_entries_never_move() {
        let bar = Bar1d::default();
        let mut model = bar.build_model(15, 1, AdaptMode::Fixed).unwrap();
        let loss = pe_1d_loss(&bar, 2);
        let stop = StopRule {
            max_iterations: 40,
            ..StopRule::lbfgs_default()
        };
        train_fixed(
            &mut model,
            &loss,
            &OptimizerKind::Lbfgs(LbfgsConfig::default()),
            &stop,
        )
        .unwrap();
        assert_eq!(model.params.u[0].to_bits(), 0.0f64.to_bits());
        let last = model.mesh.n_nodes() - 1;
        assert_eq!(model.params.u[last].to_bits(), 5e-4f64.to_bits());
    }

    #[test]
    fn frozen_x_reduces_r_to_fixed_bitwise() {
        let bar = Bar1d::default();
        let stop = StopRule {
            max_iterations: 30,
            ..StopRule::lbfgs_default()
        };
        let loss = pe_1d_loss(&bar, 3);

        let mut fixed_model = bar.build_model(12, 1, AdaptMode::Fixed).unwrap();
        let fixed_report = train_fixed(
            &mut fixed_model,
            &loss,
            &OptimizerKind::Lbfgs(LbfgsConfig::default()),
            &stop,
        )
        .unwrap();

        let mut r_model = bar.build_model(12, 1, AdaptMode::RAdaptive).unwrap();
        for f in r_model.params.frozen_x.iter_mut() {
            *f = true;
        }
        let r_report = train_r_adaptive(
            &mut r_model,
            &loss,
            &OptimizerKind::Lbfgs(LbfgsConfig::default()),
            &stop,
            0.05,
        )
        .unwrap();

        assert_eq!(fixed_report.loss_history.len(), r_report.loss_history.len());
        for (a, b) in fixed_report
            .loss_history
            .iter()
            .zip(&r_report.loss_history)
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in fixed_model.params.u.iter().zip(&r_model.params.u) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn infinite_threshold_reduces_rh_to_r_bitwise() {
        let problem = PlateProblem::default();
        let loss = pe_2d_loss(&problem);
        let stop = StopRule {
            max_iterations: 25,
            ..StopRule::lbfgs_default()
        };

        let mut r_model = problem.build_model(0, AdaptMode::RAdaptive).unwrap();
        let r_report = train_r_adaptive(
            &mut r_model,
            &loss,
            &OptimizerKind::Lbfgs(LbfgsConfig::default()),
            &stop,
            0.05,
        )
        .unwrap();

        let mut rh_model = problem.build_model(0, AdaptMode::RhAdaptive).unwrap();
        let cfg = AdaptivityConfig {
            t_delta_j: f64::INFINITY,
            ..AdaptivityConfig::default()
        };
        let rh_report = train_rh_adaptive(
            &mut rh_model,
            &loss,
            &OptimizerKind::Lbfgs(LbfgsConfig::default()),
            &cfg,
            &stop,
        )
        .unwrap();

        assert_eq!(r_report.loss_history.len(), rh_report.loss_history.len());
        for (a, b) in r_report.loss_history.iter().zip(&rh_report.loss_history) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(rh_report.snapshots.is_empty());
    }

    #[test]
    fn max_splits_zero_reduces_rh_to_r() {
        let problem = PlateProblem::default();
        let loss = pe_2d_loss(&problem);
        let stop = StopRule {
            max_iterations: 25,
            ..StopRule::lbfgs_default()
        };
        let mut r_model = problem.build_model(0, AdaptMode::RAdaptive).unwrap();
        let r_report = train_r_adaptive(
            &mut r_model,
            &loss,
            &OptimizerKind::Lbfgs(LbfgsConfig::default()),
            &stop,
            0.05,
        )
        .unwrap();
        let mut rh_model = problem.build_model(0, AdaptMode::RhAdaptive).unwrap();
        let cfg = AdaptivityConfig {
            max_splits: 0,
            ..AdaptivityConfig::default()
        };
        let rh_report = train_rh_adaptive(
            &mut rh_model,
            &loss,
            &OptimizerKind::Lbfgs(LbfgsConfig::default()),
            &cfg,
            &stop,
        )
        .unwrap();
        for (a, b) in r_report.loss_history.iter().zip(&rh_report.loss_history) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(rh_model.mesh.n_nodes() == r_model.mesh.n_nodes());
    }

    #[test]
    fn inversion_guard_halves_invalid_steps() {
        // Two triangles sharing an edge; a step pushing the shared free
        // node across the edge must be halved until the mesh is valid.
        use crate::mesh::{Element, Node};
        let nodes: Vec<Node> = [
            ([0.0, 0.0], true),
            ([1.0, 0.0], true),
            ([0.5, 0.5], false),
            ([0.5, 1.0], true),
        ]
        .iter()
        .enumerate()
        .map(|(i, (c, b))| Node {
            id: i,
            coords: *c,
            on_boundary: *b,
            boundary_tag: None,
        })
        .collect();
        let elements = vec![
            Element::new(0, vec![0, 1, 2]),
            Element::new(1, vec![0, 2, 3]),
        ];
        let mesh = crate::mesh::Mesh::from_raw(2, 1, nodes, elements).unwrap();
        let mut model = FenniModel::new(mesh, AdaptMode::RAdaptive);
        let layout = FreeLayout::build(&model);
        let theta = layout.gather(&model);
        let floors = jacobian_floors(&model.mesh, 0.05);
        // Free parameters: u at node 2 (2 comps) + x at node 2 (2 comps).
        // A large downward move of node 2 inverts element 0.
        let mut delta = vec![0.0; theta.len()];
        delta[theta.len() - 1] = -5.0;
        let (applied, scale) =
            guarded_apply(&mut model, &layout, &theta, &delta, &floors).unwrap();
        assert!(scale < 1.0, "step should have been halved, scale={scale}");
        assert!(mesh_admissible(&model.mesh, &floors));
        assert!(applied[theta.len() - 1] > -5.0);

        // A hopeless direction (no admissible scale) raises the error:
        // with the floor at the current |J| itself, any shrink fails.
        layout.apply(&mut model, &theta);
        let floors_tight = jacobian_floors(&model.mesh, 1.0);
        let err = guarded_apply(&mut model, &layout, &theta, &delta, &floors_tight);
        assert!(matches!(err, Err(TrainError::ElementInversion { .. })));
    }

    #[test]
    fn divergence_detected() {
        let bar = Bar1d::default();
        let mut model = bar.build_model(9, 1, AdaptMode::Fixed).unwrap();
        let loss = pe_1d_loss(&bar, 2);
        let stop = StopRule {
            max_iterations: 4000,
            tol: 0.0,
            tol_abs: 0.0,
            ..StopRule::adam_default()
        };
        let out = train_fixed(
            &mut model,
            &loss,
            &OptimizerKind::Adam(AdamConfig {
                lr: 1e3,
                ..AdamConfig::default()
            }),
            &stop,
        );
        assert!(matches!(out, Err(TrainError::Divergence(_))));
    }

    #[test]
    fn transfer_interpolates_and_respects_dirichlet() {
        let bar = Bar1d::default();
        let mut coarse = bar.build_model(5, 1, AdaptMode::Fixed).unwrap();
        for n in 0..coarse.mesh.n_nodes() {
            coarse.params.u[n] = (n as f64) * 0.25;
        }
        coarse.params.u[0] = 0.0;
        let mut fine = bar.build_model(9, 1, AdaptMode::Fixed).unwrap();
        multigrid_transfer(&coarse, &mut fine).unwrap();
        // Coincident node: exact coarse value.
        assert_relative_eq!(fine.params.u[2], coarse.params.u[1], epsilon = 1e-15);
        // Midpoint between coarse nodes 1 and 2: their average.
        assert_relative_eq!(
            fine.params.u[3],
            0.5 * (coarse.params.u[1] + coarse.params.u[2]),
            epsilon = 1e-13
        );
        // Dirichlet entries re-frozen to the prescribed values.
        assert_eq!(fine.params.u[0], 0.0);
        assert_eq!(fine.params.u[8], 5e-4);

        // 2D: a fine node at a coarse-element centroid receives the
        // barycentric average of the three coarse nodal values.
        let problem = PlateProblem::default();
        let coarse2 = {
            let mut m = problem.build_model(0, AdaptMode::Fixed).unwrap();
            for n in 0..m.mesh.n_nodes() {
                let [x, y] = m.mesh.nodes[n].coords;
                m.params.u[2 * n] = 0.1 * x - 0.2 * y;
                m.params.u[2 * n + 1] = 0.3 * y;
            }
            m
        };
        let tri = coarse2.mesh.tri_coords(0);
        let centroid = [
            (tri[0][0] + tri[1][0] + tri[2][0]) / 3.0,
            (tri[0][1] + tri[1][1] + tri[2][1]) / 3.0,
        ];
        let v = coarse2.eval_point(&centroid);
        let ids = &coarse2.mesh.elements[0].node_ids;
        let avg_x: f64 = ids.iter().map(|&n| coarse2.params.u[2 * n]).sum::<f64>() / 3.0;
        assert_relative_eq!(v[0], avg_x, epsilon = 1e-12);
    }

    #[test]
    fn multigrid_single_level_equals_fixed() {
        let bar = Bar1d::default();
        let stop = StopRule {
            max_iterations: 30,
            ..StopRule::lbfgs_default()
        };
        let loss = pe_1d_loss(&bar, 3);
        let mut direct = bar.build_model(11, 1, AdaptMode::Fixed).unwrap();
        let direct_report = train_fixed(
            &mut direct,
            &loss,
            &OptimizerKind::Lbfgs(LbfgsConfig::default()),
            &stop,
        )
        .unwrap();
        let level = bar.build_model(11, 1, AdaptMode::Fixed).unwrap();
        let (mg_model, mg_report) = train_multigrid(
            vec![level],
            &loss,
            &OptimizerKind::Lbfgs(LbfgsConfig::default()),
            &stop,
            None,
            0.0,
        )
        .unwrap();
        assert_eq!(direct_report.loss_history.len(), mg_report.loss_history.len());
        for (a, b) in direct_report
            .loss_history
            .iter()
            .zip(&mg_report.loss_history)
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in direct.params.u.iter().zip(&mg_model.params.u) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(mg_report.levels.len(), 1);
    }

    #[test]
    fn multigrid_rejects_non_increasing_levels() {
        let bar = Bar1d::default();
        let loss = pe_1d_loss(&bar, 2);
        let levels = vec![
            bar.build_model(11, 1, AdaptMode::Fixed).unwrap(),
            bar.build_model(7, 1, AdaptMode::Fixed).unwrap(),
        ];
        let out = train_multigrid(
            levels,
            &loss,
            &OptimizerKind::Lbfgs(LbfgsConfig::default()),
            &StopRule::lbfgs_default(),
            None,
            0.0,
        );
        assert!(matches!(out, Err(TrainError::NonIncreasingLevels)));
    }

    #[test]
    fn refinement_preserves_loss_value() {
        // Splitting with interpolated nodal values leaves the 2D energy
        // unchanged (constant strain per element, centroid rule exact).
        let problem = PlateProblem::default();
        let mat = problem.material();
        let rule = gauss_tri(1).unwrap();
        let mut model = problem.build_model(0, AdaptMode::RhAdaptive).unwrap();
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for i in 0..model.params.u.len() {
            if !model.params.frozen_u[i] {
                model.params.u[i] = rng.gen::<f64>();
            }
        }
        let eval = |m: &FenniModel| {
            let tape = Tape::new();
            let b = m.bind(&tape);
            potential_energy_2d(&tape, m, &b, &mat, &rule).unwrap().value()
        };
        let before = eval(&model);
        let marks: BTreeSet<usize> = [0usize, 7, 13].into_iter().collect();
        let refined = red_green_refine(&model.mesh, &marks, 1).unwrap();
        apply_refinement(&mut model, refined).unwrap();
        let after = eval(&model);
        assert_relative_eq!(before, after, max_relative = 1e-12);
    }

    #[test]
    fn rh_refines_under_aggressive_threshold() {
        let problem = PlateProblem::default();
        let loss = pe_2d_loss(&problem);
        let mut model = problem.build_model(0, AdaptMode::RhAdaptive).unwrap();
        let n0 = model.mesh.n_nodes();
        let cfg = AdaptivityConfig {
            t_delta_j: 1e-4,
            check_interval: 5,
            max_splits: 1,
            inversion_floor: 0.05,
        };
        let stop = StopRule {
            max_iterations: 60,
            ..StopRule::lbfgs_default()
        };
        let report = train_rh_adaptive(
            &mut model,
            &loss,
            &OptimizerKind::Lbfgs(LbfgsConfig::default()),
            &cfg,
            &stop,
        )
        .unwrap();
        assert!(model.mesh.n_nodes() > n0, "no refinement happened");
        assert!(!report.snapshots.is_empty());
        model.mesh.audit_conformity().unwrap();
        assert!(model
            .mesh
            .elements
            .iter()
            .all(|e| e.split_count <= cfg.max_splits));
        // Refinement only adds nodes.
        let counts: Vec<usize> = report.snapshots.iter().map(|s| s.mesh.n_nodes()).collect();
        assert!(counts.windows(2).all(|w| w[1] >= w[0]));
    }
}
