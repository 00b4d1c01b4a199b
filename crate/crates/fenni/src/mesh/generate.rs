//! Built-in mesh generators: uniform 1D bar and the plate-with-hole
//! benchmark domain.

use super::{Element, Mesh, MeshError, Node};

/// Uniform 1D mesh on [0, L] with `np` end nodes. The first and last
/// nodes are tagged "left"/"right" for Dirichlet conditions. With
/// `order == 2` a mid node is appended per element (node order within an
/// element: [left end, right end, mid]).
pub fn generate_bar_1d(length: f64, np: usize, order: usize) -> Result<Mesh, MeshError> {
    if np < 2 {
        return Err(MeshError::InvalidDiscretization(format!(
            "need at least 2 nodes, got {np}"
        )));
    }
    if !(length > 0.0) {
        return Err(MeshError::InvalidDiscretization(format!(
            "bar length must be positive, got {length}"
        )));
    }
    if order != 1 && order != 2 {
        return Err(MeshError::InvalidDiscretization(format!(
            "unsupported order {order}"
        )));
    }
    let h = length / (np - 1) as f64;
    let mut nodes: Vec<Node> = (0..np)
        .map(|i| {
            let x = if i + 1 == np { length } else { i as f64 * h };
            let tag = if i == 0 {
                Some("left".to_string())
            } else if i + 1 == np {
                Some("right".to_string())
            } else {
                None
            };
            Node {
                id: i,
                coords: [x, 0.0],
                on_boundary: tag.is_some(),
                boundary_tag: tag,
            }
        })
        .collect();
    let mut elements = Vec::with_capacity(np - 1);
    for e in 0..np - 1 {
        let mut ids = vec![e, e + 1];
        if order == 2 {
            let mid_id = nodes.len();
            let xm = 0.5 * (nodes[e].coords[0] + nodes[e + 1].coords[0]);
            nodes.push(Node {
                id: mid_id,
                coords: [xm, 0.0],
                on_boundary: false,
                boundary_tag: None,
            });
            ids.push(mid_id);
        }
        elements.push(Element::new(e, ids));
    }
    Mesh::from_raw(1, order, nodes, elements)
}

/// Rectangle-with-circular-hole geometry, lengths in the same units as
/// the mesh coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateGeometry {
    pub width: f64,
    pub height: f64,
    pub hole_center: [f64; 2],
    pub hole_radius: f64,
}

impl Default for PlateGeometry {
    fn default() -> Self {
        PlateGeometry {
            width: 10.0,
            height: 5.0,
            hole_center: [5.0, 2.5],
            hole_radius: 1.0,
        }
    }
}

/// Angular and radial resolution per refinement level. The hole polygon
/// gets `rays` segments; total node count is rays * layers.
fn plate_resolution(refine_level: usize) -> (usize, usize) {
    match refine_level {
        0 => (16, 3),
        1 => (36, 4),
        2 => (64, 8),
        3 => (128, 14),
        4 => (256, 28),
        l => (256 << (l - 4), 28 << (l - 4)),
    }
}

/// Conforming triangle mesh of a rectangle with a circular hole.
///
/// The domain is laid out as a radial blend between the hole polygon and
/// the outer rectangle: rays from the hole center sweep the full angle
/// range (with the four rays nearest the rectangle corners snapped onto
/// them), and each ray carries a uniform chain of nodes from the hole rim
/// to the outer boundary. Quads between adjacent rays are split into two
/// positively oriented triangles.
///
/// Boundary tags: "hole" on the rim, "left"/"right"/"bottom"/"top" on the
/// outer boundary, corners claimed by left/right.
pub fn generate_plate_with_hole(
    geometry: &PlateGeometry,
    refine_level: usize,
) -> Result<Mesh, MeshError> {
    let PlateGeometry {
        width: w,
        height: h,
        hole_center: [cx, cy],
        hole_radius: r,
    } = *geometry;
    if !(r > 0.0) {
        return Err(MeshError::InvalidGeometry(format!(
            "hole radius must be positive, got {r}"
        )));
    }
    if !(w > 0.0 && h > 0.0) {
        return Err(MeshError::InvalidGeometry(
            "rectangle sides must be positive".to_string(),
        ));
    }
    // Hole strictly inside the rectangle.
    if cx - r <= 0.0 || cx + r >= w || cy - r <= 0.0 || cy + r >= h {
        return Err(MeshError::InvalidGeometry(
            "hole touches or crosses the rectangle boundary".to_string(),
        ));
    }

    let (rays, layers) = plate_resolution(refine_level);
    let tau = std::f64::consts::TAU;
    let mut angles: Vec<f64> = (0..rays).map(|k| k as f64 * tau / rays as f64).collect();
    // Snap the nearest ray onto each rectangle corner so the outer ring
    // reproduces the rectangle exactly.
    let corner_angles = [
        f64::atan2(-cy, -cx).rem_euclid(tau),
        f64::atan2(-cy, w - cx).rem_euclid(tau),
        f64::atan2(h - cy, w - cx).rem_euclid(tau),
        f64::atan2(h - cy, -cx).rem_euclid(tau),
    ];
    for ca in corner_angles {
        let mut best = (0usize, f64::INFINITY);
        for (k, a) in angles.iter().enumerate() {
            let mut d = (a - ca).abs();
            d = d.min(tau - d);
            if d < best.1 {
                best = (k, d);
            }
        }
        angles[best.0] = ca;
    }

    for k in 1..rays {
        if angles[k] <= angles[k - 1] {
            return Err(MeshError::InvalidGeometry(
                "corner snapping collapsed adjacent rays; hole too close to a corner".to_string(),
            ));
        }
    }

    // Ray-rectangle intersection from the hole center, snapped exactly
    // onto the touched side(s).
    let snap_tol = 1e-9 * w.max(h);
    let outer_point = |theta: f64| -> [f64; 2] {
        let (s, c) = theta.sin_cos();
        let mut t = f64::INFINITY;
        if c > 1e-15 {
            t = t.min((w - cx) / c);
        }
        if c < -1e-15 {
            t = t.min(-cx / c);
        }
        if s > 1e-15 {
            t = t.min((h - cy) / s);
        }
        if s < -1e-15 {
            t = t.min(-cy / s);
        }
        let mut p = [cx + t * c, cy + t * s];
        if p[0].abs() < snap_tol {
            p[0] = 0.0;
        }
        if (p[0] - w).abs() < snap_tol {
            p[0] = w;
        }
        if p[1].abs() < snap_tol {
            p[1] = 0.0;
        }
        if (p[1] - h).abs() < snap_tol {
            p[1] = h;
        }
        p
    };

    let side_tol = 1e-9 * w.max(h);
    let outer_tag = |p: [f64; 2]| -> &'static str {
        if p[0] < side_tol {
            "left"
        } else if p[0] > w - side_tol {
            "right"
        } else if p[1] < side_tol {
            "bottom"
        } else {
            "top"
        }
    };

    let mut nodes = Vec::with_capacity(rays * layers);
    for (k, &theta) in angles.iter().enumerate() {
        let (s, c) = theta.sin_cos();
        let inner = [cx + r * c, cy + r * s];
        let outer = outer_point(theta);
        for j in 0..layers {
            let t = j as f64 / (layers - 1) as f64;
            let p = [
                inner[0] + t * (outer[0] - inner[0]),
                inner[1] + t * (outer[1] - inner[1]),
            ];
            let (on_boundary, tag) = if j == 0 {
                (true, Some("hole".to_string()))
            } else if j + 1 == layers {
                (true, Some(outer_tag(p).to_string()))
            } else {
                (false, None)
            };
            nodes.push(Node {
                id: k * layers + j,
                coords: p,
                on_boundary,
                boundary_tag: tag,
            });
        }
    }

    let idx = |k: usize, j: usize| (k % rays) * layers + j;
    let mut elements = Vec::with_capacity(2 * rays * (layers - 1));
    let mut eid = 0;
    for k in 0..rays {
        for j in 0..layers - 1 {
            let p00 = idx(k, j);
            let p10 = idx(k + 1, j);
            let p11 = idx(k + 1, j + 1);
            let p01 = idx(k, j + 1);
            elements.push(Element::new(eid, vec![p00, p10, p11]));
            eid += 1;
            elements.push(Element::new(eid, vec![p00, p11, p01]));
            eid += 1;
        }
    }
    let mesh = Mesh::from_raw(2, 1, nodes, elements)?;
    mesh.audit_conformity()?;
    Ok(mesh)
}
