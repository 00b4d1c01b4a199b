//! Discretizations of the computational domain: nodes, connectivity,
//! boundary classification, generators, file I/O, and red-green
//! refinement.
//!
//! A `Mesh` is immutable once finalized; refinement produces a new value.
//! Connectivity ordering is deterministic for identical inputs.

mod generate;
mod gmsh;
mod refine;
mod vtk;

pub use generate::{generate_bar_1d, generate_plate_with_hole, PlateGeometry};
pub use gmsh::{read_gmsh, read_gmsh_str, write_gmsh, GmshRead};
pub use refine::{red_green_refine, RefineOutcome};
pub use vtk::{read_vtk, write_vtk, VtkData, VtkGrid};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::refelem::{self, to_reference_1d, to_reference_tri};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported MSH version {0} (expected 2.2)")]
    UnsupportedVersion(String),
    #[error("element {elem} references unknown node {node}")]
    DanglingNodeReference { elem: usize, node: usize },
    #[error("invalid discretization: {0}")]
    InvalidDiscretization(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("mesh is not conforming: {0}")]
    NonConforming(String),
    #[error("unsupported refinement: {0}")]
    UnsupportedRefinement(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Node {
    pub id: usize,
    /// Physical coordinates; 1D meshes use `coords[0]` and keep `coords[1]`
    /// at zero.
    pub coords: [f64; 2],
    pub on_boundary: bool,
    /// Label used to select node groups when prescribing boundary values.
    pub boundary_tag: Option<String>,
}

/// Bookkeeping for a conformity-restoring bisection: the two children of
/// a green split remember their parent triangle so a later refinement of
/// the region restores the parent before splitting it red.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct GreenParent {
    /// Parent triangle nodes in orientation order.
    pub nodes: [usize; 3],
    /// Midpoint node of the bisected parent edge.
    pub mid: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Element {
    pub id: usize,
    /// Node indices: 2 for 1D linear, 3 for 1D quadratic ([end, end, mid])
    /// and 2D triangles.
    pub node_ids: Vec<usize>,
    /// Number of red splits in this element's ancestry. Green children do
    /// not count as split.
    pub split_count: u32,
    /// |J| snapshot taken at the last adaptivity check.
    pub jacobian_prev: Option<f64>,
    /// Present iff this element is a green child.
    pub green_parent: Option<GreenParent>,
}

impl Element {
    pub fn new(id: usize, node_ids: Vec<usize>) -> Self {
        Element {
            id,
            node_ids,
            split_count: 0,
            jacobian_prev: None,
            green_parent: None,
        }
    }
}

/// Where a query point sits relative to a mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PointLocation {
    /// Inside (or within tolerance of) an element, with reference
    /// coordinates; 1D stores xi in `xi[0]`.
    InElement { element: usize, xi: [f64; 2] },
    /// Outside every element; nearest mesh node by Euclidean distance.
    NearestNode { node: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Mesh {
    pub dim: usize,
    /// Interpolation order (1 or 2); order 2 is 1D only.
    pub order: usize,
    pub nodes: Vec<Node>,
    pub elements: Vec<Element>,
    /// Adjacent elements per element: edge-sharing in 2D, node-sharing in
    /// 1D. Rebuilt by `finalize`.
    #[serde(skip)]
    pub neighbor_map: Vec<Vec<usize>>,
}

const BARY_TOL: f64 = -1e-9;

impl Mesh {
    /// Build a mesh from raw parts, fixing triangle orientation and
    /// computing the neighbor map. 2D element node order may be flipped to
    /// make every signed Jacobian positive.
    pub fn from_raw(
        dim: usize,
        order: usize,
        nodes: Vec<Node>,
        elements: Vec<Element>,
    ) -> Result<Mesh, MeshError> {
        let mut mesh = Mesh {
            dim,
            order,
            nodes,
            elements,
            neighbor_map: Vec::new(),
        };
        mesh.finalize(true)?;
        Ok(mesh)
    }

    /// Like [`Mesh::from_raw`] but keeps element node order as given, so
    /// a caller can detect inverted elements instead of having them
    /// silently reoriented.
    pub fn from_raw_unoriented(
        dim: usize,
        order: usize,
        nodes: Vec<Node>,
        elements: Vec<Element>,
    ) -> Result<Mesh, MeshError> {
        let mut mesh = Mesh {
            dim,
            order,
            nodes,
            elements,
            neighbor_map: Vec::new(),
        };
        mesh.finalize(false)?;
        Ok(mesh)
    }

    /// Validate node references, orient triangles positively, renumber
    /// element ids, and rebuild the neighbor map.
    fn finalize(&mut self, fix_orientation: bool) -> Result<(), MeshError> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.coords.iter().all(|c| c.is_finite()) {
                return Err(MeshError::InvalidGeometry(format!(
                    "node {i} has non-finite coordinates"
                )));
            }
        }
        let nn = self.nodes.len();
        for (e, elem) in self.elements.iter_mut().enumerate() {
            elem.id = e;
            for &nid in &elem.node_ids {
                if nid >= nn {
                    return Err(MeshError::DanglingNodeReference { elem: e, node: nid });
                }
            }
        }
        if self.dim == 2 && fix_orientation {
            for e in 0..self.elements.len() {
                if self.signed_jacobian(e) < 0.0 {
                    self.elements[e].node_ids.swap(1, 2);
                }
            }
        }
        self.rebuild_neighbors();
        Ok(())
    }

    fn rebuild_neighbors(&mut self) {
        let ne = self.elements.len();
        let mut map = vec![Vec::new(); ne];
        if self.dim == 1 {
            let mut by_node: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
            for (e, elem) in self.elements.iter().enumerate() {
                for &n in elem.node_ids.iter().take(2) {
                    by_node[n].push(e);
                }
            }
            for shared in &by_node {
                for &a in shared {
                    for &b in shared {
                        if a != b && !map[a].contains(&b) {
                            map[a].push(b);
                        }
                    }
                }
            }
        } else {
            let mut by_edge: std::collections::BTreeMap<(usize, usize), Vec<usize>> =
                std::collections::BTreeMap::new();
            for (e, elem) in self.elements.iter().enumerate() {
                for k in 0..3 {
                    let a = elem.node_ids[k];
                    let b = elem.node_ids[(k + 1) % 3];
                    by_edge.entry((a.min(b), a.max(b))).or_default().push(e);
                }
            }
            for shared in by_edge.values() {
                for &a in shared {
                    for &b in shared {
                        if a != b && !map[a].contains(&b) {
                            map[a].push(b);
                        }
                    }
                }
            }
        }
        for v in &mut map {
            v.sort_unstable();
        }
        self.neighbor_map = map;
    }

    /// Recompute the neighbor map, e.g. after deserialization (it is not
    /// stored on disk).
    pub fn rebuild_topology(&mut self) {
        self.rebuild_neighbors();
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    /// Coordinates of the corner (geometry-defining) nodes of an element.
    /// For 1D quadratic elements the mid node is excluded: the geometry
    /// map stays affine.
    pub fn corner_coords(&self, e: usize) -> Vec<[f64; 2]> {
        let elem = &self.elements[e];
        let n_corners = if self.dim == 1 { 2 } else { 3 };
        elem.node_ids
            .iter()
            .take(n_corners)
            .map(|&n| self.nodes[n].coords)
            .collect()
    }

    /// Signed Jacobian determinant of the reference-to-physical map.
    /// In 2D this is twice the signed element area; the 1D analogue is the
    /// element length.
    pub fn signed_jacobian(&self, e: usize) -> f64 {
        let elem = &self.elements[e];
        if self.dim == 1 {
            let xa = self.nodes[elem.node_ids[0]].coords[0];
            let xb = self.nodes[elem.node_ids[1]].coords[0];
            xb - xa
        } else {
            let tri = self.tri_coords(e);
            refelem::tri_signed_jacobian(&tri)
        }
    }

    pub fn tri_coords(&self, e: usize) -> [[f64; 2]; 3] {
        let ids = &self.elements[e].node_ids;
        [
            self.nodes[ids[0]].coords,
            self.nodes[ids[1]].coords,
            self.nodes[ids[2]].coords,
        ]
    }

    /// Total measure: length in 1D, area in 2D (sum of |J|/2).
    pub fn domain_measure(&self) -> f64 {
        (0..self.n_elements())
            .map(|e| {
                let j = self.signed_jacobian(e).abs();
                if self.dim == 1 {
                    j
                } else {
                    0.5 * j
                }
            })
            .sum()
    }

    /// Brute-force point location with barycentric tolerance; ties broken
    /// by lowest element id. Falls back to the nearest node when the point
    /// is outside every element.
    pub fn locate_point(&self, x: &[f64; 2]) -> PointLocation {
        if self.dim == 1 {
            for (e, elem) in self.elements.iter().enumerate() {
                let xa = self.nodes[elem.node_ids[0]].coords[0];
                let xb = self.nodes[elem.node_ids[1]].coords[0];
                if xb <= xa {
                    continue;
                }
                let xi = match to_reference_1d(x[0], xa, xb) {
                    Ok(v) => v,
                    Err(_) => continue,
                };
                // |xi| <= 1 up to the same tolerance as the barycentric test
                let lam_a = 0.5 * (1.0 - xi);
                let lam_b = 0.5 * (1.0 + xi);
                if lam_a >= BARY_TOL && lam_b >= BARY_TOL {
                    return PointLocation::InElement {
                        element: e,
                        xi: [xi, 0.0],
                    };
                }
            }
        } else {
            for e in 0..self.elements.len() {
                let tri = self.tri_coords(e);
                let xi = match to_reference_tri(*x, &tri) {
                    Ok(v) => v,
                    Err(_) => continue,
                };
                let lc = 1.0 - xi[0] - xi[1];
                if xi[0] >= BARY_TOL && xi[1] >= BARY_TOL && lc >= BARY_TOL {
                    return PointLocation::InElement { element: e, xi };
                }
            }
        }
        let mut best = (0usize, f64::INFINITY);
        for (i, n) in self.nodes.iter().enumerate() {
            let d = (n.coords[0] - x[0]).powi(2) + (n.coords[1] - x[1]).powi(2);
            if d < best.1 {
                best = (i, d);
            }
        }
        PointLocation::NearestNode { node: best.0 }
    }

    /// Interior/boundary edge census: (edge -> incident element count).
    pub fn edge_census(&self) -> std::collections::BTreeMap<(usize, usize), usize> {
        let mut census = std::collections::BTreeMap::new();
        if self.dim != 2 {
            return census;
        }
        for elem in &self.elements {
            for k in 0..3 {
                let a = elem.node_ids[k];
                let b = elem.node_ids[(k + 1) % 3];
                *census.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        census
    }

    /// Conformity audit by edge hashing: every edge must bound one or two
    /// elements, count-1 edges must lie on the boundary, and every 2D
    /// element must have positive orientation.
    pub fn audit_conformity(&self) -> Result<(), MeshError> {
        if self.dim == 1 {
            for (e, elem) in self.elements.iter().enumerate() {
                let xa = self.nodes[elem.node_ids[0]].coords[0];
                let xb = self.nodes[elem.node_ids[1]].coords[0];
                if xb <= xa {
                    return Err(MeshError::NonConforming(format!(
                        "1D element {e} has non-positive length"
                    )));
                }
            }
            return Ok(());
        }
        for e in 0..self.n_elements() {
            if self.signed_jacobian(e) <= 0.0 {
                return Err(MeshError::NonConforming(format!(
                    "element {e} has non-positive Jacobian"
                )));
            }
        }
        for ((a, b), count) in self.edge_census() {
            match count {
                1 => {
                    if !(self.nodes[a].on_boundary && self.nodes[b].on_boundary) {
                        return Err(MeshError::NonConforming(format!(
                            "edge ({a},{b}) bounds one element but is not on the boundary"
                        )));
                    }
                }
                2 => {}
                n => {
                    return Err(MeshError::NonConforming(format!(
                        "edge ({a},{b}) bounds {n} elements"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Node indices carrying the given boundary tag.
    pub fn nodes_with_tag(&self, tag: &str) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.boundary_tag.as_deref() == Some(tag))
            .map(|n| n.id)
            .collect()
    }
}
