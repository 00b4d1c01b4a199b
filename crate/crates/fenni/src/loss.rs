//! Physics loss functionals and the constitutive computations backing
//! them.
//!
//! Three families: potential energy (minimized by the Galerkin
//! solution), a mixed strong-residual loss over an independent strain
//! field, and a weak-formulation loss tested against the interior shape
//! functions. The energy losses also drive the adaptive modes, where
//! gradients flow into the nodal coordinates through the quadrature
//! weights and point placement.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::mesh::PointLocation;
use crate::model::{Binding, FenniModel};
use crate::oracle::ScalarField1d;
use crate::quadrature::{integrate_loss, trapezoid_loss, QuadratureError, QuadratureRule};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid material: {0}")]
    InvalidMaterial(String),
    #[error("residual loss needs a quadratic displacement model and a linear strain model")]
    ResidualOrderMismatch,
    #[error("sampling needs at least 2 points per element, got {0}")]
    InvalidSampleCount(usize),
    #[error("loss is only defined on a 1D mesh")]
    UnsupportedDimension,
    #[error(transparent)]
    NonFinite(#[from] AutodiffError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// Bar material: cross-section area and Young's modulus.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BarMaterial {
    pub area: f64,
    pub youngs: f64,
}

impl BarMaterial {
    pub fn new(area: f64, youngs: f64) -> Result<Self, LossError> {
        if !(area > 0.0) || !(youngs > 0.0) {
            return Err(LossError::InvalidMaterial(format!(
                "need area > 0 and modulus > 0, got A={area}, E={youngs}"
            )));
        }
        Ok(BarMaterial { area, youngs })
    }

    pub fn ae(&self) -> f64 {
        self.area * self.youngs
    }
}

/// Plane-strain material in Lamé form.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlaneMaterial {
    pub lambda: f64,
    pub mu: f64,
}

impl PlaneMaterial {
    pub fn new(lambda: f64, mu: f64) -> Result<Self, LossError> {
        if !(mu > 0.0) || !(lambda + 2.0 * mu / 3.0 > 0.0) {
            return Err(LossError::InvalidMaterial(format!(
                "need mu > 0 and bulk modulus > 0, got lambda={lambda}, mu={mu}"
            )));
        }
        Ok(PlaneMaterial { lambda, mu })
    }
}

/// Strain, stress, and von Mises intensity at a point (plane strain;
/// sigma_zz = lambda * tr(eps)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StressState {
    /// (eps_xx, eps_yy, eps_xy) — tensor shear component.
    pub eps: [f64; 3],
    /// (sigma_xx, sigma_yy, sigma_xy).
    pub sigma: [f64; 3],
    pub sigma_zz: f64,
    pub vm: f64,
}

/// Von Mises intensity of a plane-strain stress state embedded in 3D:
/// sqrt(3/2 * dev(sigma) : dev(sigma)).
pub fn von_mises_3d(sxx: f64, syy: f64, szz: f64, sxy: f64) -> f64 {
    let p = (sxx + syy + szz) / 3.0;
    let (dx, dy, dz) = (sxx - p, syy - p, szz - p);
    (1.5 * (dx * dx + dy * dy + dz * dz + 2.0 * sxy * sxy)).sqrt()
}

/// Stress and von Mises from a plane strain state.
pub fn stress_from_strain(eps: &[f64; 3], mat: &PlaneMaterial) -> StressState {
    let tr = eps[0] + eps[1];
    let sxx = mat.lambda * tr + 2.0 * mat.mu * eps[0];
    let syy = mat.lambda * tr + 2.0 * mat.mu * eps[1];
    let sxy = 2.0 * mat.mu * eps[2];
    let szz = mat.lambda * tr;
    StressState {
        eps: *eps,
        sigma: [sxx, syy, sxy],
        sigma_zz: szz,
        vm: von_mises_3d(sxx, syy, szz, sxy),
    }
}

/// Shorthand used by the error metrics.
pub fn von_mises_plane_strain(eps: &[f64; 3], mat: &PlaneMaterial) -> f64 {
    stress_from_strain(eps, mat).vm
}

/// Full stress state of the (constant-strain) element containing `x`.
pub fn stress_strain_2d(
    model: &FenniModel,
    x: &[f64; 2],
    mat: &PlaneMaterial,
) -> Result<StressState, LossError> {
    let elem = match model.mesh.locate_point(x) {
        PointLocation::InElement { element, .. } => element,
        PointLocation::NearestNode { node } => model
            .mesh
            .elements
            .iter()
            .position(|e| e.node_ids.contains(&node))
            .unwrap_or(0),
    };
    let eps = model
        .strain_in(elem)
        .map_err(|_| LossError::UnsupportedDimension)?;
    Ok(stress_from_strain(&eps, mat))
}

// ---------------------------------------------------------------------
// Potential energy
// ---------------------------------------------------------------------

/// 1D potential energy with Gauss quadrature:
/// 1/2 int AE (du/dx)^2 dx - int u b dx.
pub fn potential_energy_1d<'t>(
    tape: &'t Tape,
    model: &FenniModel,
    binding: &Binding<'t>,
    mat: &BarMaterial,
    body: &dyn ScalarField1d,
    rule: &QuadratureRule,
) -> Result<Var<'t>, LossError> {
    if model.mesh.dim != 1 {
        return Err(LossError::UnsupportedDimension);
    }
    let ae = mat.ae();
    let loss = integrate_loss(tape, model, binding, rule, |e, xi| {
        let du = model.dudx_at_ref(tape, binding, e, xi[0]);
        let u = model.u_at_ref(binding, e, xi, 0);
        let x = model.x_at_ref(binding, e, xi, 0);
        let b = body.eval_var(tape, x);
        du * du * (0.5 * ae) - u * b
    })?;
    tape.ensure_finite()?;
    Ok(loss)
}

/// 1D potential energy over a fixed trapezoid sampling grid. Sample
/// points are anchored to the initial mesh and never move; each
/// evaluation relocates them in the current mesh so the interpolant
/// stays valid while the sampling stays put.
pub fn potential_energy_1d_trapezoid<'t>(
    tape: &'t Tape,
    model: &FenniModel,
    binding: &Binding<'t>,
    mat: &BarMaterial,
    body: &dyn ScalarField1d,
    grid: &[f64],
) -> Result<Var<'t>, LossError> {
    if model.mesh.dim != 1 {
        return Err(LossError::UnsupportedDimension);
    }
    let ae = mat.ae();
    let loss = trapezoid_loss(tape, grid, |x| {
        let elem = locate_1d(model, x);
        let (u, du) = model.u_and_dudx_at_x(tape, binding, elem, x);
        let b = body.eval_var(tape, tape.constant(x));
        du * du * (0.5 * ae) - u * b
    })?;
    tape.ensure_finite()?;
    Ok(loss)
}

fn locate_1d(model: &FenniModel, x: f64) -> usize {
    match model.mesh.locate_point(&[x, 0.0]) {
        PointLocation::InElement { element, .. } => element,
        PointLocation::NearestNode { node } => model
            .mesh
            .elements
            .iter()
            .position(|e| e.node_ids.contains(&node))
            .unwrap_or(0),
    }
}

/// 2D potential energy 1/2 int sigma : eps dx (no body force, no
/// traction): per element, sigma:eps = lambda tr(eps)^2 + 2 mu
/// (eps_xx^2 + eps_yy^2 + 2 eps_xy^2).
pub fn potential_energy_2d<'t>(
    tape: &'t Tape,
    model: &FenniModel,
    binding: &Binding<'t>,
    mat: &PlaneMaterial,
    rule: &QuadratureRule,
) -> Result<Var<'t>, LossError> {
    if model.mesh.dim != 2 {
        return Err(LossError::UnsupportedDimension);
    }
    // Strain is constant per element; hoist it out of the point loop.
    let mut cache: Vec<Option<Var<'t>>> = vec![None; model.mesh.n_elements()];
    let loss = integrate_loss(tape, model, binding, rule, |e, _xi| {
        if let Some(v) = cache[e] {
            return v;
        }
        let (grads, _j) = model.tri_grads_var(binding, e);
        let ids = &model.mesh.elements[e].node_ids;
        let mut exx = tape.constant(0.0);
        let mut eyy = tape.constant(0.0);
        let mut gxy = tape.constant(0.0);
        for a in 0..3 {
            let ux = model.u_var(binding, ids[a], 0);
            let uy = model.u_var(binding, ids[a], 1);
            exx = exx + grads[a][0] * ux;
            eyy = eyy + grads[a][1] * uy;
            gxy = gxy + grads[a][1] * ux + grads[a][0] * uy;
        }
        let exy = gxy * 0.5;
        let tr = exx + eyy;
        let density =
            (tr * tr * mat.lambda + (exx * exx + eyy * eyy + exy * exy * 2.0) * (2.0 * mat.mu))
                * 0.5;
        cache[e] = Some(density);
        density
    })?;
    tape.ensure_finite()?;
    Ok(loss)
}

// ---------------------------------------------------------------------
// Mixed residual loss
// ---------------------------------------------------------------------

/// Uniform sample points per element, endpoints included (duplicates at
/// shared nodes kept; every element contributes the same count).
fn element_samples(model: &FenniModel, n: usize) -> Result<Vec<(usize, f64)>, LossError> {
    if n < 2 {
        return Err(LossError::InvalidSampleCount(n));
    }
    let mut out = Vec::with_capacity(model.mesh.n_elements() * n);
    for e in 0..model.mesh.n_elements() {
        let ids = &model.mesh.elements[e].node_ids;
        let xa = model.mesh.nodes[ids[0]].coords[0];
        let xb = model.mesh.nodes[ids[1]].coords[0];
        for k in 0..n {
            let t = k as f64 / (n - 1) as f64;
            out.push((e, xa + t * (xb - xa)));
        }
    }
    Ok(out)
}

/// Mixed-form residual loss: the displacement model (quadratic) and an
/// independent strain model (linear) are trained together;
/// J = l1 * MSE(AE * du_x/dx + b) + l2 * MSE(du/dx - u_x) over uniform
/// sample points, with l1 = L and l2 = 1.
pub fn residual_loss_1d<'t>(
    tape: &'t Tape,
    model_u: &FenniModel,
    binding_u: &Binding<'t>,
    model_strain: &FenniModel,
    binding_strain: &Binding<'t>,
    mat: &BarMaterial,
    body: &dyn ScalarField1d,
    points_per_element: usize,
    lambda1: f64,
    lambda2: f64,
) -> Result<Var<'t>, LossError> {
    if model_u.mesh.dim != 1 || model_strain.mesh.dim != 1 {
        return Err(LossError::UnsupportedDimension);
    }
    if model_u.mesh.order != 2 || model_strain.mesh.order != 1 {
        return Err(LossError::ResidualOrderMismatch);
    }
    let ae = mat.ae();
    let samples = element_samples(model_u, points_per_element)?;
    let inv_n = 1.0 / samples.len() as f64;
    let mut equil = tape.constant(0.0);
    let mut compat = tape.constant(0.0);
    for &(e_u, x) in &samples {
        let (_, du) = model_u.u_and_dudx_at_x(tape, binding_u, e_u, x);
        let e_s = locate_1d(model_strain, x);
        let (ux, dux) = model_strain.u_and_dudx_at_x(tape, binding_strain, e_s, x);
        let r = dux * ae + body.eval_var(tape, tape.constant(x));
        equil = equil + r * r;
        let c = du - ux;
        compat = compat + c * c;
    }
    tape.ensure_finite()?;
    Ok(equil * (lambda1 * inv_n) + compat * (lambda2 * inv_n))
}

// ---------------------------------------------------------------------
// Weak-formulation loss
// ---------------------------------------------------------------------

/// Weak-form loss: squared weak residuals tested against every shape
/// function whose node is unconstrained (those vanish on the Dirichlet
/// boundary). Uses the same quadrature as the oracle assembly, so it is
/// zero at the Galerkin solution up to solver precision.
pub fn weak_loss_1d<'t>(
    tape: &'t Tape,
    model: &FenniModel,
    binding: &Binding<'t>,
    mat: &BarMaterial,
    body: &dyn ScalarField1d,
    rule: &QuadratureRule,
) -> Result<Var<'t>, LossError> {
    if model.mesh.dim != 1 {
        return Err(LossError::UnsupportedDimension);
    }
    let ae = mat.ae();
    let nn = model.mesh.n_nodes();
    // One weak residual accumulator per test function.
    let mut w: Vec<Option<Var<'t>>> = vec![None; nn];
    for e in 0..model.mesh.n_elements() {
        let ids = &model.mesh.elements[e].node_ids;
        let (xa, xb) = (binding.x[ids[0]], binding.x[ids[1]]);
        let jac = (xb - xa) * 0.5;
        let inv_h2 = (xb - xa).recip() * 2.0;
        for (p, wgt) in rule.points.iter().zip(&rule.weights) {
            let shapes = if model.mesh.order == 1 {
                crate::refelem::shapes_linear_1d(p[0])
            } else {
                crate::refelem::shapes_quadratic_1d(p[0])
            };
            let du = model.dudx_at_ref(tape, binding, e, p[0]);
            let x = model.x_at_ref(binding, e, [p[0], 0.0], 0);
            let b = body.eval_var(tape, x);
            for a in 0..shapes.n {
                let node = ids[a];
                if model.params.frozen_u[node] {
                    continue;
                }
                let dphi = inv_h2 * shapes.grads_ref[a][0];
                let contrib = (du * dphi * ae - b * shapes.values[a]) * jac * *wgt;
                w[node] = Some(match w[node] {
                    Some(acc) => acc + contrib,
                    None => contrib,
                });
            }
        }
    }
    let mut loss = tape.constant(0.0);
    for acc in w.into_iter().flatten() {
        loss = loss + acc * acc;
    }
    tape.ensure_finite()?;
    Ok(loss)
}
