//! Integration rules on reference elements and the loss integrators.
//!
//! Gauss-Legendre nodes and weights are tabulated to 17 significant
//! digits (roots of the Legendre polynomials on [-1, 1]); the triangle
//! rules are the standard degree-1 (centroid) and degree-2 (three-point)
//! rules on the unit right triangle.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::model::{Binding, FenniModel};

#[derive(Debug, Error)]
pub enum QuadratureError {
    #[error("unsupported quadrature order {0}")]
    UnsupportedOrder(usize),
    #[error("trapezoid sampling needs at least 2 points per element, got {0}")]
    InvalidSampleCount(usize),
    #[error("trapezoid sampling is defined for 1D meshes only")]
    UnsupportedDimension,
    #[error(transparent)]
    NonFinite(#[from] AutodiffError),
}

/// Reference-element integration points and weights. 1D rules store the
/// point in `points[i][0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

/// Gauss-Legendre rule with n points on [-1, 1]; exact for polynomials
/// of degree <= 2n - 1. Weights sum to 2.
pub fn gauss_1d(n: usize) -> Result<QuadratureRule, QuadratureError> {
    let (pts, wts): (&[f64], &[f64]) = match n {
        1 => (&[0.0], &[2.0]),
        2 => (
            &[-0.57735026918962576, 0.57735026918962576],
            &[1.0, 1.0],
        ),
        3 => (
            &[-0.77459666924148338, 0.0, 0.77459666924148338],
            &[
                0.55555555555555556,
                0.88888888888888889,
                0.55555555555555556,
            ],
        ),
        4 => (
            &[
                -0.86113631159405258,
                -0.33998104358485626,
                0.33998104358485626,
                0.86113631159405258,
            ],
            &[
                0.34785484513745386,
                0.65214515486254614,
                0.65214515486254614,
                0.34785484513745386,
            ],
        ),
        5 => (
            &[
                -0.90617984593866399,
                -0.53846931010568309,
                0.0,
                0.53846931010568309,
                0.90617984593866399,
            ],
            &[
                0.23692688505618909,
                0.47862867049936647,
                0.56888888888888889,
                0.47862867049936647,
                0.23692688505618909,
            ],
        ),
        other => return Err(QuadratureError::UnsupportedOrder(other)),
    };
    Ok(QuadratureRule {
        points: pts.iter().map(|&x| [x, 0.0]).collect(),
        weights: wts.to_vec(),
    })
}

/// Triangle rule with n in {1, 3}; weights sum to 1/2 (the reference
/// area). n = 1 is the centroid rule (degree 1), n = 3 the interior
/// three-point rule (degree 2).
pub fn gauss_tri(n: usize) -> Result<QuadratureRule, QuadratureError> {
    match n {
        1 => Ok(QuadratureRule {
            points: vec![[1.0 / 3.0, 1.0 / 3.0]],
            weights: vec![0.5],
        }),
        3 => Ok(QuadratureRule {
            points: vec![
                [1.0 / 6.0, 1.0 / 6.0],
                [2.0 / 3.0, 1.0 / 6.0],
                [1.0 / 6.0, 2.0 / 3.0],
            ],
            weights: vec![1.0 / 6.0; 3],
        }),
        other => Err(QuadratureError::UnsupportedOrder(other)),
    }
}

/// Quadrature-based loss: sum over elements and points of
/// w_i * l(x(xi_i, e_j)) * |J_j|, with the 1D measure (xb - xa)/2.
/// The Jacobian factors are tape expressions, so coordinate gradients
/// flow through both the measure and the integrand's point placement.
pub fn integrate_loss<'t, F>(
    tape: &'t Tape,
    model: &FenniModel,
    binding: &Binding<'t>,
    rule: &QuadratureRule,
    mut integrand: F,
) -> Result<Var<'t>, QuadratureError>
where
    F: FnMut(usize, [f64; 2]) -> Var<'t>,
{
    let mut total = tape.constant(0.0);
    for e in 0..model.mesh.n_elements() {
        let j = model.jacobian_var(binding, e);
        let measure = if model.mesh.dim == 1 { j * 0.5 } else { j.abs() };
        let mut elem_sum: Option<Var<'t>> = None;
        for (p, w) in rule.points.iter().zip(&rule.weights) {
            let contrib = integrand(e, *p) * *w;
            elem_sum = Some(match elem_sum {
                Some(acc) => acc + contrib,
                None => contrib,
            });
        }
        if let Some(s) = elem_sum {
            total = total + s * measure;
        }
    }
    tape.ensure_finite()?;
    Ok(total)
}

/// Uniform sample points per element of a 1D mesh, element endpoints
/// included, shared points deduplicated. Built once from the initial
/// mesh: the points never move afterwards even if the nodes do.
pub fn trapezoid_grid(
    mesh: &crate::mesh::Mesh,
    samples_per_element: usize,
) -> Result<Vec<f64>, QuadratureError> {
    if mesh.dim != 1 {
        return Err(QuadratureError::UnsupportedDimension);
    }
    if samples_per_element < 2 {
        return Err(QuadratureError::InvalidSampleCount(samples_per_element));
    }
    let mut xs = Vec::with_capacity(mesh.n_elements() * samples_per_element);
    for e in &mesh.elements {
        let xa = mesh.nodes[e.node_ids[0]].coords[0];
        let xb = mesh.nodes[e.node_ids[1]].coords[0];
        for k in 0..samples_per_element {
            let t = k as f64 / (samples_per_element - 1) as f64;
            xs.push(xa + t * (xb - xa));
        }
    }
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    Ok(xs)
}

/// Composite trapezoid over fixed sample points; exact for integrands
/// linear between samples.
pub fn trapezoid_loss<'t, F>(
    tape: &'t Tape,
    grid: &[f64],
    mut integrand: F,
) -> Result<Var<'t>, QuadratureError>
where
    F: FnMut(f64) -> Var<'t>,
{
    if grid.len() < 2 {
        return Err(QuadratureError::InvalidSampleCount(grid.len()));
    }
    let mut total = tape.constant(0.0);
    let mut prev = integrand(grid[0]);
    for k in 1..grid.len() {
        let cur = integrand(grid[k]);
        total = total + (prev + cur) * (0.5 * (grid[k] - grid[k - 1]));
        prev = cur;
    }
    tape.ensure_finite()?;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_bar_1d, generate_plate_with_hole, PlateGeometry};
    use crate::model::{AdaptMode, FenniModel, FreeLayout};
    use approx::assert_relative_eq;

    #[test]
    fn gauss_1d_tables() {
        let r = gauss_1d(1).unwrap();
        assert_eq!(r.points[0][0], 0.0);
        assert_eq!(r.weights[0], 2.0);
        let r = gauss_1d(2).unwrap();
        assert_relative_eq!(r.points[1][0], 0.5773502691896257, epsilon = 1e-16);
        assert_eq!(r.weights, vec![1.0, 1.0]);
        assert!(matches!(
            gauss_1d(6),
            Err(QuadratureError::UnsupportedOrder(6))
        ));
    }

    #[test]
    fn gauss_1d_degree_exactness() {
        // Exact against the closed-form monomial integrals
        // int_{-1}^{1} xi^k dxi = 2/(k+1) for even k, 0 for odd k.
        for n in 1..=5 {
            let rule = gauss_1d(n).unwrap();
            for k in 0..=(2 * n - 1) {
                let quad: f64 = rule
                    .points
                    .iter()
                    .zip(&rule.weights)
                    .map(|(p, w)| w * p[0].powi(k as i32))
                    .sum();
                let exact = if k % 2 == 0 { 2.0 / (k as f64 + 1.0) } else { 0.0 };
                assert_relative_eq!(quad, exact, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn gauss_tri_rules() {
        for n in [1, 3] {
            let r = gauss_tri(n).unwrap();
            let sw: f64 = r.weights.iter().sum();
            assert_relative_eq!(sw, 0.5, epsilon = 1e-15);
            assert!(r.weights.iter().all(|&w| w > 0.0));
        }
        // Centroid rule integrates affine functions exactly:
        // int (2 + 3x - y) over the reference triangle = 2*(1/2) + 3*(1/6)
        // - 1/6 = 4/3.
        let r = gauss_tri(1).unwrap();
        let q: f64 = r
            .points
            .iter()
            .zip(&r.weights)
            .map(|(p, w)| w * (2.0 + 3.0 * p[0] - p[1]))
            .sum();
        assert_relative_eq!(q, 4.0 / 3.0, epsilon = 1e-15);
        // Three-point rule integrates x*y exactly: value 1/24.
        let r = gauss_tri(3).unwrap();
        let q: f64 = r
            .points
            .iter()
            .zip(&r.weights)
            .map(|(p, w)| w * p[0] * p[1])
            .sum();
        assert_relative_eq!(q, 1.0 / 24.0, epsilon = 1e-15);
        // Full degree-2 exactness set.
        for (f, exact) in [
            (
                Box::new(|p: [f64; 2]| p[0] * p[0]) as Box<dyn Fn([f64; 2]) -> f64>,
                1.0 / 12.0,
            ),
            (Box::new(|p: [f64; 2]| p[1] * p[1]), 1.0 / 12.0),
            (Box::new(|p: [f64; 2]| p[0]), 1.0 / 6.0),
        ] {
            let q: f64 = r
                .points
                .iter()
                .zip(&r.weights)
                .map(|(p, w)| w * f(*p))
                .sum();
            assert_relative_eq!(q, exact, epsilon = 1e-15);
        }
        assert!(matches!(
            gauss_tri(4),
            Err(QuadratureError::UnsupportedOrder(4))
        ));
    }

    #[test]
    fn unit_integrand_gives_domain_measure() {
        let mesh = generate_plate_with_hole(&PlateGeometry::default(), 1).unwrap();
        let area = mesh.domain_measure();
        let model = FenniModel::new(mesh, AdaptMode::Fixed);
        let tape = Tape::new();
        let b = model.bind(&tape);
        let rule = gauss_tri(1).unwrap();
        let one = integrate_loss(&tape, &model, &b, &rule, |_, _| tape.constant(1.0)).unwrap();
        assert_relative_eq!(one.value(), area, max_relative = 1e-12);

        let mesh = generate_bar_1d(10.0, 7, 1).unwrap();
        let model = FenniModel::new(mesh, AdaptMode::Fixed);
        let tape = Tape::new();
        let b = model.bind(&tape);
        let rule = gauss_1d(3).unwrap();
        let one = integrate_loss(&tape, &model, &b, &rule, |_, _| tape.constant(1.0)).unwrap();
        assert_relative_eq!(one.value(), 10.0, max_relative = 1e-13);
    }

    #[test]
    fn smooth_integrand_matches_simpson_oracle() {
        // 10^4-panel composite Simpson as the independent reference.
        let f = |x: f64| (x * 0.8).sin() * (-0.1 * x).exp() + 0.3 * x;
        let simpson = |a: f64, b: f64, panels: usize| -> f64 {
            let h = (b - a) / panels as f64;
            let mut s = f(a) + f(b);
            for k in 1..panels {
                let x = a + k as f64 * h;
                s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(x);
            }
            s * h / 3.0
        };
        let reference = simpson(0.0, 10.0, 10_000);

        let mesh = generate_bar_1d(10.0, 41, 1).unwrap();
        let model = FenniModel::new(mesh, AdaptMode::Fixed);
        let tape = Tape::new();
        let b = model.bind(&tape);
        let rule = gauss_1d(5).unwrap();
        let q = integrate_loss(&tape, &model, &b, &rule, |e, xi| {
            let x = model.x_at_ref(&b, e, xi, 0);
            tape.constant(f(x.value()))
        })
        .unwrap();
        assert_relative_eq!(q.value(), reference, max_relative = 1e-8);
    }

    #[test]
    fn coordinate_gradient_matches_finite_differences() {
        // d/dX of int x^2 dx where one interior node coordinate moves.
        let mesh = generate_bar_1d(10.0, 5, 1).unwrap();
        let mut model = FenniModel::new(mesh, AdaptMode::RAdaptive);
        let layout = FreeLayout::build(&model);
        let rule = gauss_1d(3).unwrap();
        let eval = |model: &FenniModel| -> (f64, Vec<f64>) {
            let tape = Tape::new();
            let b = model.bind(&tape);
            let loss = integrate_loss(&tape, model, &b, &rule, |e, xi| {
                let x = model.x_at_ref(&b, e, xi, 0);
                x * x
            })
            .unwrap();
            let grads = tape.backward(loss).unwrap();
            (loss.value(), layout.collect_grads(&b, &grads))
        };
        let theta0 = layout.gather(&model);
        let (_, g) = eval(&model);
        for i in 0..theta0.len() {
            let h = 1e-6 * theta0[i].abs().max(1.0);
            let mut tp = theta0.clone();
            tp[i] += h;
            layout.apply(&mut model, &tp);
            let (fp, _) = eval(&model);
            tp[i] -= 2.0 * h;
            layout.apply(&mut model, &tp);
            let (fm, _) = eval(&model);
            layout.apply(&mut model, &theta0);
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (g[i] - fd).abs() / fd.abs().max(1.0) < 1e-6,
                "grad {i}: ad={} fd={fd}",
                g[i]
            );
        }
    }

    #[test]
    fn trapezoid_exact_for_linear_and_known_for_quadratic() {
        let mesh = generate_bar_1d(1.0, 2, 1).unwrap();
        let grid = trapezoid_grid(&mesh, 2).unwrap();
        assert_eq!(grid, vec![0.0, 1.0]);
        let tape = Tape::new();
        // Linear integrand: exact.
        let lin = trapezoid_loss(&tape, &grid, |x| tape.constant(2.0 * x + 1.0)).unwrap();
        assert_relative_eq!(lin.value(), 2.0, epsilon = 1e-15);
        // x^2 with two points on one element: trapezoid gives 0.5, not 1/3.
        let quad = trapezoid_loss(&tape, &grid, |x| tape.constant(x * x)).unwrap();
        assert_relative_eq!(quad.value(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn trapezoid_grid_errors() {
        let mesh = generate_bar_1d(1.0, 3, 1).unwrap();
        assert!(matches!(
            trapezoid_grid(&mesh, 1),
            Err(QuadratureError::InvalidSampleCount(1))
        ));
        let plate = generate_plate_with_hole(&PlateGeometry::default(), 0).unwrap();
        assert!(matches!(
            trapezoid_grid(&plate, 10),
            Err(QuadratureError::UnsupportedDimension)
        ));
    }

    #[test]
    fn trapezoid_grid_dedups_shared_nodes() {
        let mesh = generate_bar_1d(10.0, 5, 1).unwrap();
        let grid = trapezoid_grid(&mesh, 10).unwrap();
        assert_eq!(grid.len(), 4 * 10 - 3);
        assert!(grid.windows(2).all(|w| w[1] > w[0]));
    }
}
