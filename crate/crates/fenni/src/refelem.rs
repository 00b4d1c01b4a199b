//! Reference-element maps and shape-function evaluation.
//!
//! All interpolation is defined once on a canonical element — the
//! interval [-1, 1] in 1D, the unit right triangle in 2D — and mapped
//! affinely onto each mesh element. Shape functions are evaluated here as
//! plain `f64`; the differentiable counterparts used during training are
//! assembled from the same formulas in the model layer.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RefElemError {
    #[error("degenerate element (zero or negative measure)")]
    DegenerateElement,
}

/// Shape-function values and gradients at one reference point.
///
/// `n` is the number of local functions (2 for 1D linear, 3 otherwise).
/// Gradient entries use column 0 only in 1D. `grads_phys` is populated by
/// the `physical_gradients_*` functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeEval {
    pub n: usize,
    pub values: [f64; 3],
    pub grads_ref: [[f64; 2]; 3],
    pub grads_phys: [[f64; 2]; 3],
}

impl ShapeEval {
    fn new(n: usize) -> Self {
        ShapeEval {
            n,
            values: [0.0; 3],
            grads_ref: [[0.0; 2]; 3],
            grads_phys: [[0.0; 2]; 3],
        }
    }
}

/// Map a physical 1D point into [-1, 1]: xa -> -1, xb -> +1.
pub fn to_reference_1d(x: f64, xa: f64, xb: f64) -> Result<f64, RefElemError> {
    if xb <= xa {
        return Err(RefElemError::DegenerateElement);
    }
    Ok(2.0 * (x - xa) / (xb - xa) - 1.0)
}

/// Inverse of [`to_reference_1d`].
pub fn from_reference_1d(xi: f64, xa: f64, xb: f64) -> f64 {
    0.5 * (xb - xa) * xi + 0.5 * (xa + xb)
}

/// Linear 1D shapes, local order [left end, right end].
pub fn shapes_linear_1d(xi: f64) -> ShapeEval {
    let mut s = ShapeEval::new(2);
    s.values[0] = -0.5 * xi + 0.5;
    s.values[1] = 0.5 * xi + 0.5;
    s.grads_ref[0][0] = -0.5;
    s.grads_ref[1][0] = 0.5;
    s
}

/// Quadratic 1D Lagrange shapes, local order [left end, right end, mid].
pub fn shapes_quadratic_1d(xi: f64) -> ShapeEval {
    let mut s = ShapeEval::new(3);
    s.values[0] = 0.5 * xi * (xi - 1.0);
    s.values[1] = 0.5 * xi * (xi + 1.0);
    s.values[2] = 1.0 - xi * xi;
    s.grads_ref[0][0] = xi - 0.5;
    s.grads_ref[1][0] = xi + 0.5;
    s.grads_ref[2][0] = -2.0 * xi;
    s
}

/// Linear triangle shapes at reference point (x_ref, y_ref):
/// N0 = x_ref (vertex a), N1 = y_ref (vertex b), N2 = 1 - x_ref - y_ref
/// (vertex c).
pub fn shapes_linear_tri(xi: [f64; 2]) -> ShapeEval {
    let mut s = ShapeEval::new(3);
    s.values[0] = xi[0];
    s.values[1] = xi[1];
    s.values[2] = 1.0 - xi[0] - xi[1];
    s.grads_ref[0] = [1.0, 0.0];
    s.grads_ref[1] = [0.0, 1.0];
    s.grads_ref[2] = [-1.0, -1.0];
    s
}

/// Signed determinant of the reference-to-physical map of a triangle;
/// equals twice the signed area.
pub fn tri_signed_jacobian(tri: &[[f64; 2]; 3]) -> f64 {
    let [a, b, c] = tri;
    (a[0] - c[0]) * (b[1] - c[1]) - (b[0] - c[0]) * (a[1] - c[1])
}

/// Map a physical point into the reference triangle of `tri` = [a, b, c];
/// returns (x_ref, y_ref) = barycentric coordinates of vertices a and b.
pub fn to_reference_tri(x: [f64; 2], tri: &[[f64; 2]; 3]) -> Result<[f64; 2], RefElemError> {
    let j = tri_signed_jacobian(tri);
    if j == 0.0 {
        return Err(RefElemError::DegenerateElement);
    }
    let c = tri[2];
    let b = tri[1];
    let a = tri[0];
    let xr = ((x[0] - c[0]) * (b[1] - c[1]) - (b[0] - c[0]) * (x[1] - c[1])) / j;
    let yr = ((a[0] - c[0]) * (x[1] - c[1]) - (x[0] - c[0]) * (a[1] - c[1])) / j;
    Ok([xr, yr])
}

/// Inverse of [`to_reference_tri`].
pub fn from_reference_tri(xi: [f64; 2], tri: &[[f64; 2]; 3]) -> [f64; 2] {
    let [a, b, c] = tri;
    let lc = 1.0 - xi[0] - xi[1];
    [
        xi[0] * a[0] + xi[1] * b[0] + lc * c[0],
        xi[0] * a[1] + xi[1] * b[1] + lc * c[1],
    ]
}

/// Fill `grads_phys` for a 1D element [xa, xb]: d/dx = d/dxi * 2/(xb-xa).
pub fn physical_gradients_1d(xa: f64, xb: f64, s: &mut ShapeEval) -> Result<(), RefElemError> {
    if xb <= xa {
        return Err(RefElemError::DegenerateElement);
    }
    let scale = 2.0 / (xb - xa);
    for i in 0..s.n {
        s.grads_phys[i][0] = s.grads_ref[i][0] * scale;
        s.grads_phys[i][1] = 0.0;
    }
    Ok(())
}

/// Fill `grads_phys` for a linear triangle by the chain rule through the
/// affine map. Gradients are constant over the element.
pub fn physical_gradients_tri(tri: &[[f64; 2]; 3], s: &mut ShapeEval) -> Result<(), RefElemError> {
    let j = tri_signed_jacobian(tri);
    if j == 0.0 {
        return Err(RefElemError::DegenerateElement);
    }
    let [a, b, c] = tri;
    // d(x_ref)/d(x,y) and d(y_ref)/d(x,y) rows of the inverse map.
    let dxr = [(b[1] - c[1]) / j, -(b[0] - c[0]) / j];
    let dyr = [-(a[1] - c[1]) / j, (a[0] - c[0]) / j];
    for i in 0..s.n {
        let gr = s.grads_ref[i];
        s.grads_phys[i] = [
            gr[0] * dxr[0] + gr[1] * dyr[0],
            gr[0] * dxr[1] + gr[1] * dyr[1],
        ];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn reference_map_1d_endpoints_and_interior() {
        assert_eq!(to_reference_1d(0.0, 0.0, 10.0).unwrap(), -1.0);
        assert_eq!(to_reference_1d(5.0, 0.0, 10.0).unwrap(), 0.0);
        assert_eq!(to_reference_1d(7.5, 5.0, 10.0).unwrap(), 0.0);
        assert_eq!(
            to_reference_1d(1.0, 2.0, 2.0),
            Err(RefElemError::DegenerateElement)
        );
    }

    #[test]
    fn linear_1d_nodal_property() {
        let s = shapes_linear_1d(-1.0);
        assert_eq!((s.values[0], s.values[1]), (1.0, 0.0));
        let s = shapes_linear_1d(1.0);
        assert_eq!((s.values[0], s.values[1]), (0.0, 1.0));
    }

    #[test]
    fn quadratic_1d_matches_vandermonde_solve() {
        // Independent derivation: coefficients of each Lagrange function
        // from the 3x3 Vandermonde system on nodes {-1, 1, 0}.
        let nodes = [-1.0f64, 1.0, 0.0];
        let solve_basis = |k: usize| -> [f64; 3] {
            // Solve V c = e_k with V[i][j] = nodes[i]^j by Cramer's rule.
            let v = |i: usize, j: usize| nodes[i].powi(j as i32);
            let det3 = |m: [[f64; 3]; 3]| {
                m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
            };
            let base = [
                [v(0, 0), v(0, 1), v(0, 2)],
                [v(1, 0), v(1, 1), v(1, 2)],
                [v(2, 0), v(2, 1), v(2, 2)],
            ];
            let d = det3(base);
            let mut out = [0.0; 3];
            for col in 0..3 {
                let mut m = base;
                for row in 0..3 {
                    m[row][col] = if row == k { 1.0 } else { 0.0 };
                }
                out[col] = det3(m) / d;
            }
            out
        };
        for (k, xi) in [(0usize, -0.35f64), (1, 0.6), (2, 0.0)] {
            let c = solve_basis(k);
            let expected = c[0] + c[1] * xi + c[2] * xi * xi;
            let s = shapes_quadratic_1d(xi);
            assert_relative_eq!(s.values[k], expected, max_relative = 1e-14);
        }
        // Mid-node evaluation: (0, 0, 1).
        let s = shapes_quadratic_1d(0.0);
        assert_eq!(s.values[0], 0.0);
        assert_eq!(s.values[1], 0.0);
        assert_eq!(s.values[2], 1.0);
    }

    #[test]
    fn nodal_interpolation_delta_property() {
        let nodes_1d = [-1.0, 1.0];
        for (a, &xa) in nodes_1d.iter().enumerate() {
            let s = shapes_linear_1d(xa);
            for b in 0..2 {
                assert_eq!(s.values[b], if a == b { 1.0 } else { 0.0 });
            }
        }
        let nodes_q = [-1.0, 1.0, 0.0];
        for (a, &xa) in nodes_q.iter().enumerate() {
            let s = shapes_quadratic_1d(xa);
            for b in 0..3 {
                assert_eq!(s.values[b], if a == b { 1.0 } else { 0.0 });
            }
        }
        let verts = [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        for (a, &xv) in verts.iter().enumerate() {
            let s = shapes_linear_tri(xv);
            for b in 0..3 {
                assert_eq!(s.values[b], if a == b { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn tri_centroid_symmetry() {
        let s = shapes_linear_tri([1.0 / 3.0, 1.0 / 3.0]);
        for i in 0..3 {
            assert_relative_eq!(s.values[i], 1.0 / 3.0, max_relative = 1e-15);
        }
    }

    #[test]
    fn to_reference_tri_cases() {
        let tri = [[2.0, 1.0], [5.0, 2.0], [3.0, 4.0]];
        // Vertex a maps to (1, 0).
        let r = to_reference_tri(tri[0], &tri).unwrap();
        assert_relative_eq!(r[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(r[1], 0.0, epsilon = 1e-14);
        // Centroid maps to (1/3, 1/3).
        let cen = [
            (tri[0][0] + tri[1][0] + tri[2][0]) / 3.0,
            (tri[0][1] + tri[1][1] + tri[2][1]) / 3.0,
        ];
        let r = to_reference_tri(cen, &tri).unwrap();
        assert_relative_eq!(r[0], 1.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(r[1], 1.0 / 3.0, epsilon = 1e-14);
        // Hand solve of the 3x3 system for (0.5, 0.5) in the right triangle
        // [(0,0),(2,0),(0,2)]: x = 2*y_ref -> y_ref = 0.25, y = 2*(1 - x_ref
        // - y_ref) -> x_ref = 0.5. Round trip confirms.
        let tri2 = [[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]];
        let r = to_reference_tri([0.5, 0.5], &tri2).unwrap();
        assert_relative_eq!(r[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(r[1], 0.25, epsilon = 1e-14);
        let back = from_reference_tri(r, &tri2);
        assert_relative_eq!(back[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(back[1], 0.5, epsilon = 1e-14);

        let degenerate = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        assert_eq!(
            to_reference_tri([0.3, 0.3], &degenerate),
            Err(RefElemError::DegenerateElement)
        );
    }

    #[test]
    fn physical_gradients_identity_triangle() {
        let tri = [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        let mut s = shapes_linear_tri([0.2, 0.3]);
        physical_gradients_tri(&tri, &mut s).unwrap();
        // On the identity element the map is trivial: grad N2 = (-1, -1).
        assert_relative_eq!(s.grads_phys[2][0], -1.0, epsilon = 1e-14);
        assert_relative_eq!(s.grads_phys[2][1], -1.0, epsilon = 1e-14);
    }

    #[test]
    fn physical_gradient_1d_scale() {
        let mut s = shapes_linear_1d(0.3);
        physical_gradients_1d(0.0, 2.0, &mut s).unwrap();
        // dN1/dx = 0.5 * 2/(xb - xa) = 0.5
        assert_relative_eq!(s.grads_phys[1][0], 0.5, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn partition_of_unity_and_grad_sum(xr in 0.0..1.0f64, yr in 0.0..1.0f64,
                                           ax in -5.0..5.0f64, ay in -5.0..5.0f64,
                                           bx in -5.0..5.0f64, by in -5.0..5.0f64,
                                           cx in -5.0..5.0f64, cy in -5.0..5.0f64) {
            let xi = if xr + yr > 1.0 { [1.0 - xr, 1.0 - yr] } else { [xr, yr] };
            let tri = [[ax, ay], [bx, by], [cx, cy]];
            prop_assume!(tri_signed_jacobian(&tri).abs() > 1e-3);
            let mut s = shapes_linear_tri(xi);
            prop_assert!((s.values.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            physical_gradients_tri(&tri, &mut s).unwrap();
            let gx: f64 = (0..3).map(|i| s.grads_phys[i][0]).sum();
            let gy: f64 = (0..3).map(|i| s.grads_phys[i][1]).sum();
            prop_assert!(gx.abs() < 1e-12 && gy.abs() < 1e-12);
        }

        #[test]
        fn roundtrip_tri(px in -3.0..3.0f64, py in -3.0..3.0f64) {
            let tri = [[-1.0, -2.0], [4.0, 0.5], [0.0, 3.0]];
            let xi = to_reference_tri([px, py], &tri).unwrap();
            let back = from_reference_tri(xi, &tri);
            prop_assert!((back[0] - px).abs() < 1e-12);
            prop_assert!((back[1] - py).abs() < 1e-12);
        }

        #[test]
        fn affine_reproduction_1d(xi in -1.0..1.0f64) {
            // Interpolating nodal samples of g(x) = 3x - 2 reproduces g.
            let (xa, xb) = (1.5, 4.0);
            let g = |x: f64| 3.0 * x - 2.0;
            let s = shapes_quadratic_1d(xi);
            let nodes = [xa, xb, 0.5 * (xa + xb)];
            let interp: f64 = (0..3).map(|i| s.values[i] * g(nodes[i])).sum();
            let x = from_reference_1d(xi, xa, xb);
            prop_assert!((interp - g(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_reproduction_tri_random_points() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let tri = [[0.5, -1.0], [3.0, 0.25], [1.0, 2.0]];
        let g = |p: [f64; 2]| 0.7 * p[0] - 1.3 * p[1] + 0.45;
        for _ in 0..100 {
            let mut a = rng.gen::<f64>();
            let mut b = rng.gen::<f64>();
            if a + b > 1.0 {
                a = 1.0 - a;
                b = 1.0 - b;
            }
            let s = shapes_linear_tri([a, b]);
            let interp: f64 = (0..3).map(|i| s.values[i] * g(tri[i])).sum();
            let p = from_reference_tri([a, b], &tri);
            assert_relative_eq!(interp, g(p), epsilon = 1e-12);
        }
    }
}
