//! The trainable interpolation model: nodal values and nodal coordinates
//! with per-entry freeze flags, bound onto an autodiff tape each
//! iteration.
//!
//! Coordinates are stored in the mesh (single source of truth); the
//! parameter set carries the nodal values and the freeze masks for both
//! value and coordinate entries. Dirichlet values are frozen exactly and
//! never move during training; in the adaptive modes boundary
//! coordinates stay frozen to preserve the domain shape.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Gradients, Tape, Var};
use crate::mesh::{Mesh, MeshError, PointLocation};
use crate::refelem::{shapes_linear_1d, shapes_linear_tri, shapes_quadratic_1d};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("no node carries boundary tag \"{0}\"")]
    UnknownTag(String),
    #[error("dirichlet value for tag \"{tag}\" needs {expected} components, got {got}")]
    ComponentMismatch {
        tag: String,
        expected: usize,
        got: usize,
    },
    #[error("degenerate element {0}")]
    DegenerateElement(usize),
    #[error("checkpoint version {0} is not supported")]
    UnsupportedCheckpoint(u32),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Json(#[from] serde_json::Error),
}

/// What the optimizer is allowed to move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    /// Only nodal values train; the mesh is fixed.
    Fixed,
    /// Nodal values and interior nodal coordinates train.
    RAdaptive,
    /// As r-adaptive, plus element splitting driven by the training loop.
    RhAdaptive,
}

/// Trainable nodal values plus freeze masks. Coordinate values live in
/// the mesh; `frozen_x` is indexed node*dim + component like the mesh
/// coordinates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamSet {
    pub ncomp: usize,
    pub u: Vec<f64>,
    pub frozen_u: Vec<bool>,
    pub frozen_x: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DirichletSpec {
    pub tag: String,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FenniModel {
    pub mesh: Mesh,
    pub params: ParamSet,
    pub mode: AdaptMode,
    /// Prescribed boundary values, kept so they can be re-applied after
    /// refinement and grid transfer.
    pub dirichlet: Vec<DirichletSpec>,
}

/// Tape handles for every parameter entry of one iteration. Frozen
/// entries are recorded as constants so the arithmetic is identical in
/// every mode.
pub struct Binding<'t> {
    pub u: Vec<Var<'t>>,
    /// Flattened node coordinates (node*dim + component). Slaved 1D mid
    /// nodes hold derived expressions, not leaves.
    pub x: Vec<Var<'t>>,
}

impl FenniModel {
    /// Wrap a mesh; one value component per spatial dimension.
    pub fn new(mesh: Mesh, mode: AdaptMode) -> FenniModel {
        let ncomp = mesh.dim;
        let nn = mesh.n_nodes();
        let mut frozen_x = vec![false; nn * mesh.dim];
        match mode {
            AdaptMode::Fixed => frozen_x.iter_mut().for_each(|f| *f = true),
            _ => {
                for n in &mesh.nodes {
                    if n.on_boundary {
                        for c in 0..mesh.dim {
                            frozen_x[n.id * mesh.dim + c] = true;
                        }
                    }
                }
            }
        }
        // 1D quadratic mid nodes are slaved to their endpoints' midpoint,
        // never independently trainable.
        if mesh.dim == 1 && mesh.order == 2 {
            for e in &mesh.elements {
                frozen_x[e.node_ids[2]] = true;
            }
        }
        FenniModel {
            params: ParamSet {
                ncomp,
                u: vec![0.0; nn * ncomp],
                frozen_u: vec![false; nn * ncomp],
                frozen_x,
            },
            mesh,
            mode,
            dirichlet: Vec::new(),
        }
    }

    pub fn ncomp(&self) -> usize {
        self.params.ncomp
    }

    /// Set every unfrozen nodal value to `v`.
    pub fn set_uniform_u(&mut self, v: f64) {
        for (i, val) in self.params.u.iter_mut().enumerate() {
            if !self.params.frozen_u[i] {
                *val = v;
            }
        }
    }

    /// Prescribe and freeze the nodal values of every node carrying
    /// `tag`. Idempotent; re-freezing an already frozen node only
    /// rewrites the same value.
    pub fn set_dirichlet(&mut self, tag: &str, value: &[f64]) -> Result<(), ModelError> {
        if value.len() != self.params.ncomp {
            return Err(ModelError::ComponentMismatch {
                tag: tag.to_string(),
                expected: self.params.ncomp,
                got: value.len(),
            });
        }
        let nodes = self.mesh.nodes_with_tag(tag);
        if nodes.is_empty() {
            return Err(ModelError::UnknownTag(tag.to_string()));
        }
        for n in nodes {
            for (c, v) in value.iter().enumerate() {
                self.params.u[n * self.params.ncomp + c] = *v;
                self.params.frozen_u[n * self.params.ncomp + c] = true;
            }
        }
        if let Some(existing) = self.dirichlet.iter_mut().find(|d| d.tag == tag) {
            existing.value = value.to_vec();
        } else {
            self.dirichlet.push(DirichletSpec {
                tag: tag.to_string(),
                value: value.to_vec(),
            });
        }
        Ok(())
    }

    /// Re-apply all recorded Dirichlet values (used after refinement and
    /// multigrid transfer).
    pub fn reapply_dirichlet(&mut self) -> Result<(), ModelError> {
        let specs = self.dirichlet.clone();
        for d in &specs {
            self.set_dirichlet(&d.tag, &d.value)?;
        }
        Ok(())
    }

    /// Recompute slaved 1D mid-node coordinates from their endpoints.
    pub fn sync_slaved_mids(&mut self) {
        if self.mesh.dim == 1 && self.mesh.order == 2 {
            for e in 0..self.mesh.n_elements() {
                let ids = self.mesh.elements[e].node_ids.clone();
                let xm = 0.5 * (self.mesh.nodes[ids[0]].coords[0] + self.mesh.nodes[ids[1]].coords[0]);
                self.mesh.nodes[ids[2]].coords[0] = xm;
            }
        }
    }

    /// Record all parameters on the tape. Order is deterministic: all
    /// value entries, then all coordinate entries; slaved mid nodes are
    /// overwritten with their defining expression afterwards.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Binding<'t> {
        let u = self
            .params
            .u
            .iter()
            .zip(&self.params.frozen_u)
            .map(|(&v, &frozen)| if frozen { tape.constant(v) } else { tape.var(v) })
            .collect();
        let dim = self.mesh.dim;
        let mut x: Vec<Var<'t>> = Vec::with_capacity(self.mesh.n_nodes() * dim);
        for n in &self.mesh.nodes {
            for c in 0..dim {
                let frozen = self.params.frozen_x[n.id * dim + c];
                let v = n.coords[c];
                x.push(if frozen { tape.constant(v) } else { tape.var(v) });
            }
        }
        if dim == 1 && self.mesh.order == 2 {
            for e in &self.mesh.elements {
                let (a, b, m) = (e.node_ids[0], e.node_ids[1], e.node_ids[2]);
                x[m] = (x[a] + x[b]) * 0.5;
            }
        }
        Binding { u, x }
    }

    // ----- differentiable evaluation -------------------------------------

    /// Nodal-value handle for (node, component).
    pub fn u_var<'t>(&self, b: &Binding<'t>, node: usize, comp: usize) -> Var<'t> {
        b.u[node * self.params.ncomp + comp]
    }

    /// Interpolated value component at a fixed reference point of an
    /// element. Shape values are constants there; only the nodal values
    /// enter the tape.
    pub fn u_at_ref<'t>(&self, b: &Binding<'t>, elem: usize, xi: [f64; 2], comp: usize) -> Var<'t> {
        let ids = &self.mesh.elements[elem].node_ids;
        let shapes = self.ref_shapes(xi);
        let mut acc = self.u_var(b, ids[0], comp) * shapes.values[0];
        for a in 1..shapes.n {
            acc = acc + self.u_var(b, ids[a], comp) * shapes.values[a];
        }
        acc
    }

    /// 1D spatial derivative du/dx at a fixed reference point; the chain
    /// rule factor 2/(xb - xa) keeps it differentiable in the
    /// coordinates.
    pub fn dudx_at_ref<'t>(&self, tape: &'t Tape, b: &Binding<'t>, elem: usize, xi: f64) -> Var<'t> {
        debug_assert_eq!(self.mesh.dim, 1);
        let ids = &self.mesh.elements[elem].node_ids;
        let shapes = self.ref_shapes([xi, 0.0]);
        let mut acc = self.u_var(b, ids[0], 0) * shapes.grads_ref[0][0];
        for a in 1..shapes.n {
            acc = acc + self.u_var(b, ids[a], 0) * shapes.grads_ref[a][0];
        }
        let _ = tape;
        let (xa, xb) = (b.x[ids[0]], b.x[ids[1]]);
        acc * 2.0 / (xb - xa)
    }

    /// Physical position of a reference point (the quadrature-point
    /// placement); differentiable in the coordinates.
    pub fn x_at_ref<'t>(&self, b: &Binding<'t>, elem: usize, xi: [f64; 2], comp: usize) -> Var<'t> {
        let ids = &self.mesh.elements[elem].node_ids;
        let dim = self.mesh.dim;
        if dim == 1 {
            let (xa, xb) = (b.x[ids[0]], b.x[ids[1]]);
            (xa + xb) * 0.5 + (xb - xa) * (0.5 * xi[0])
        } else {
            let lc = 1.0 - xi[0] - xi[1];
            b.x[ids[0] * dim + comp] * xi[0]
                + b.x[ids[1] * dim + comp] * xi[1]
                + b.x[ids[2] * dim + comp] * lc
        }
    }

    /// Signed Jacobian of the element map as a tape expression:
    /// element length in 1D, twice the signed area in 2D.
    pub fn jacobian_var<'t>(&self, b: &Binding<'t>, elem: usize) -> Var<'t> {
        let ids = &self.mesh.elements[elem].node_ids;
        if self.mesh.dim == 1 {
            b.x[ids[1]] - b.x[ids[0]]
        } else {
            let d = 2;
            let (xa, ya) = (b.x[ids[0] * d], b.x[ids[0] * d + 1]);
            let (xb, yb) = (b.x[ids[1] * d], b.x[ids[1] * d + 1]);
            let (xc, yc) = (b.x[ids[2] * d], b.x[ids[2] * d + 1]);
            (xa - xc) * (yb - yc) - (xb - xc) * (ya - yc)
        }
    }

    /// Physical shape-function gradients of a linear triangle as tape
    /// expressions, together with the signed Jacobian.
    pub fn tri_grads_var<'t>(&self, b: &Binding<'t>, elem: usize) -> ([[Var<'t>; 2]; 3], Var<'t>) {
        debug_assert_eq!(self.mesh.dim, 2);
        let ids = &self.mesh.elements[elem].node_ids;
        let d = 2;
        let (xa, ya) = (b.x[ids[0] * d], b.x[ids[0] * d + 1]);
        let (xb, yb) = (b.x[ids[1] * d], b.x[ids[1] * d + 1]);
        let (xc, yc) = (b.x[ids[2] * d], b.x[ids[2] * d + 1]);
        let j = (xa - xc) * (yb - yc) - (xb - xc) * (ya - yc);
        let inv = j.recip();
        let ga = [(yb - yc) * inv, -(xb - xc) * inv];
        let gb = [-(ya - yc) * inv, (xa - xc) * inv];
        let gc = [-(ga[0] + gb[0]), -(ga[1] + gb[1])];
        ([ga, gb, gc], j)
    }

    /// 1D value and derivative at a fixed *physical* point, fully
    /// differentiable through the reference map (used by sampling-based
    /// losses whose points do not move with the mesh).
    pub fn u_and_dudx_at_x<'t>(
        &self,
        tape: &'t Tape,
        b: &Binding<'t>,
        elem: usize,
        x: f64,
    ) -> (Var<'t>, Var<'t>) {
        debug_assert_eq!(self.mesh.dim, 1);
        let ids = &self.mesh.elements[elem].node_ids;
        let (xa, xb) = (b.x[ids[0]], b.x[ids[1]]);
        let inv_h = (xb - xa).recip();
        let xi = (tape.constant(x) - xa) * 2.0 * inv_h - 1.0;
        let dxi_dx = inv_h * 2.0;
        match self.mesh.order {
            1 => {
                let n0 = xi * -0.5 + 0.5;
                let n1 = xi * 0.5 + 0.5;
                let (u0, u1) = (self.u_var(b, ids[0], 0), self.u_var(b, ids[1], 0));
                let u = n0 * u0 + n1 * u1;
                let du_dxi = (u1 - u0) * 0.5;
                (u, du_dxi * dxi_dx)
            }
            _ => {
                let n0 = xi * (xi - 1.0) * 0.5;
                let n1 = xi * (xi + 1.0) * 0.5;
                let nm = 1.0 - xi * xi;
                let (u0, u1, um) = (
                    self.u_var(b, ids[0], 0),
                    self.u_var(b, ids[1], 0),
                    self.u_var(b, ids[2], 0),
                );
                let u = n0 * u0 + n1 * u1 + nm * um;
                let du_dxi = (xi - 0.5) * u0 + (xi + 0.5) * u1 + xi * -2.0 * um;
                (u, du_dxi * dxi_dx)
            }
        }
    }

    fn ref_shapes(&self, xi: [f64; 2]) -> crate::refelem::ShapeEval {
        match (self.mesh.dim, self.mesh.order) {
            (1, 1) => shapes_linear_1d(xi[0]),
            (1, _) => shapes_quadratic_1d(xi[0]),
            _ => shapes_linear_tri(xi),
        }
    }

    // ----- plain evaluation ----------------------------------------------

    /// Interpolated value at a reference point of an element.
    pub fn eval_at_ref(&self, elem: usize, xi: [f64; 2]) -> Vec<f64> {
        let ids = &self.mesh.elements[elem].node_ids;
        let shapes = self.ref_shapes(xi);
        let nc = self.params.ncomp;
        (0..nc)
            .map(|c| {
                (0..shapes.n)
                    .map(|a| shapes.values[a] * self.params.u[ids[a] * nc + c])
                    .sum()
            })
            .collect()
    }

    /// Interpolated value at a physical point; falls back to the nearest
    /// nodal value outside the mesh.
    pub fn eval_point(&self, x: &[f64; 2]) -> Vec<f64> {
        match self.mesh.locate_point(x) {
            PointLocation::InElement { element, xi } => self.eval_at_ref(element, xi),
            PointLocation::NearestNode { node } => {
                let nc = self.params.ncomp;
                (0..nc).map(|c| self.params.u[node * nc + c]).collect()
            }
        }
    }

    /// 1D derivative at a reference point.
    pub fn eval_dudx_at_ref(&self, elem: usize, xi: f64) -> f64 {
        debug_assert_eq!(self.mesh.dim, 1);
        let ids = &self.mesh.elements[elem].node_ids;
        let shapes = self.ref_shapes([xi, 0.0]);
        let (xa, xb) = (
            self.mesh.nodes[ids[0]].coords[0],
            self.mesh.nodes[ids[1]].coords[0],
        );
        let du_dxi: f64 = (0..shapes.n)
            .map(|a| shapes.grads_ref[a][0] * self.params.u[ids[a]])
            .sum();
        du_dxi * 2.0 / (xb - xa)
    }

    /// 1D derivative at a physical point (nearest-element extrapolation
    /// outside the mesh).
    pub fn eval_dudx_point(&self, x: f64) -> f64 {
        match self.mesh.locate_point(&[x, 0.0]) {
            PointLocation::InElement { element, xi } => self.eval_dudx_at_ref(element, xi[0]),
            PointLocation::NearestNode { node } => {
                // Evaluate in an element adjacent to the node.
                let elem = self
                    .mesh
                    .elements
                    .iter()
                    .position(|e| e.node_ids.contains(&node))
                    .unwrap_or(0);
                let xi = if self.mesh.nodes[node].coords[0] <= x { 1.0 } else { -1.0 };
                self.eval_dudx_at_ref(elem, xi)
            }
        }
    }

    /// Constant strain of a linear triangle: (eps_xx, eps_yy, eps_xy).
    pub fn strain_in(&self, elem: usize) -> Result<[f64; 3], ModelError> {
        debug_assert_eq!(self.mesh.dim, 2);
        let tri = self.mesh.tri_coords(elem);
        let mut shapes = shapes_linear_tri([1.0 / 3.0, 1.0 / 3.0]);
        crate::refelem::physical_gradients_tri(&tri, &mut shapes)
            .map_err(|_| ModelError::DegenerateElement(elem))?;
        let ids = &self.mesh.elements[elem].node_ids;
        let nc = self.params.ncomp;
        let mut gux = [0.0; 2];
        let mut guy = [0.0; 2];
        for a in 0..3 {
            let ux = self.params.u[ids[a] * nc];
            let uy = self.params.u[ids[a] * nc + 1];
            gux[0] += shapes.grads_phys[a][0] * ux;
            gux[1] += shapes.grads_phys[a][1] * ux;
            guy[0] += shapes.grads_phys[a][0] * uy;
            guy[1] += shapes.grads_phys[a][1] * uy;
        }
        Ok([gux[0], guy[1], 0.5 * (gux[1] + guy[0])])
    }

    // ----- checkpointing ---------------------------------------------------

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<(), ModelError> {
        let file = Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<FenniModel, ModelError> {
        let text = std::fs::read_to_string(path)?;
        let file: Checkpoint = serde_json::from_str(&text)?;
        if file.version != CHECKPOINT_VERSION {
            return Err(ModelError::UnsupportedCheckpoint(file.version));
        }
        let mut model = file.model;
        model.mesh.rebuild_topology();
        Ok(model)
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: FenniModel,
}

/// Mapping between the optimizer's flat parameter vector and the free
/// entries of a model. Entry order is values first, then coordinates,
/// both in storage order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FlatEntry {
    U(usize),
    X(usize),
}

#[derive(Debug, Clone, Default)]
pub struct FreeLayout {
    pub entries: Vec<FlatEntry>,
}

impl FreeLayout {
    pub fn build(model: &FenniModel) -> FreeLayout {
        let mut entries = Vec::new();
        for (i, frozen) in model.params.frozen_u.iter().enumerate() {
            if !frozen {
                entries.push(FlatEntry::U(i));
            }
        }
        for (i, frozen) in model.params.frozen_x.iter().enumerate() {
            if !frozen {
                entries.push(FlatEntry::X(i));
            }
        }
        FreeLayout { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn gather(&self, model: &FenniModel) -> Vec<f64> {
        let dim = model.mesh.dim;
        self.entries
            .iter()
            .map(|e| match e {
                FlatEntry::U(i) => model.params.u[*i],
                FlatEntry::X(i) => model.mesh.nodes[i / dim].coords[i % dim],
            })
            .collect()
    }

    pub fn apply(&self, model: &mut FenniModel, theta: &[f64]) {
        debug_assert_eq!(theta.len(), self.entries.len());
        let dim = model.mesh.dim;
        for (e, v) in self.entries.iter().zip(theta) {
            match e {
                FlatEntry::U(i) => model.params.u[*i] = *v,
                FlatEntry::X(i) => model.mesh.nodes[i / dim].coords[i % dim] = *v,
            }
        }
        model.sync_slaved_mids();
    }

    /// Pull the gradient entries for the free parameters out of a
    /// backward result.
    pub fn collect_grads(&self, binding: &Binding<'_>, grads: &Gradients) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| match e {
                FlatEntry::U(i) => grads.wrt(binding.u[*i]),
                FlatEntry::X(i) => grads.wrt(binding.x[*i]),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_bar_1d, generate_plate_with_hole, PlateGeometry};
    use approx::assert_relative_eq;

    fn bar_model(np: usize, order: usize, mode: AdaptMode) -> FenniModel {
        let mesh = generate_bar_1d(10.0, np, order).unwrap();
        let mut m = FenniModel::new(mesh, mode);
        m.set_dirichlet("left", &[0.0]).unwrap();
        m.set_dirichlet("right", &[5e-4]).unwrap();
        m
    }

    #[test]
    fn forward_reproduces_nodal_values() {
        let mut m = bar_model(5, 1, AdaptMode::Fixed);
        for i in 0..m.mesh.n_nodes() {
            if !m.params.frozen_u[i] {
                m.params.u[i] = (i as f64).sin();
            }
        }
        for e in 0..m.mesh.n_elements() {
            let ids = m.mesh.elements[e].node_ids.clone();
            let left = m.eval_at_ref(e, [-1.0, 0.0])[0];
            assert_relative_eq!(left, m.params.u[ids[0]], epsilon = 1e-15);
            let right = m.eval_at_ref(e, [1.0, 0.0])[0];
            assert_relative_eq!(right, m.params.u[ids[1]], epsilon = 1e-15);
        }
    }

    #[test]
    fn affine_field_reproduced_2d() {
        let mesh = generate_plate_with_hole(&PlateGeometry::default(), 0).unwrap();
        let mut m = FenniModel::new(mesh, AdaptMode::Fixed);
        let g = |p: [f64; 2]| [0.3 * p[0] - 0.7 * p[1] + 0.1, 1.1 * p[0] + 0.2 * p[1]];
        for n in 0..m.mesh.n_nodes() {
            let v = g(m.mesh.nodes[n].coords);
            m.params.u[2 * n] = v[0];
            m.params.u[2 * n + 1] = v[1];
        }
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 50 {
            let p = [rng.gen::<f64>() * 10.0, rng.gen::<f64>() * 5.0];
            if let PointLocation::InElement { .. } = m.mesh.locate_point(&p) {
                let v = m.eval_point(&p);
                let expect = g(p);
                assert_relative_eq!(v[0], expect[0], epsilon = 1e-12);
                assert_relative_eq!(v[1], expect[1], epsilon = 1e-12);
                checked += 1;
            }
        }
    }

    #[test]
    fn dirichlet_set_and_idempotent() {
        let mut m = bar_model(5, 1, AdaptMode::Fixed);
        assert_eq!(m.params.u[0], 0.0);
        assert!(m.params.frozen_u[0]);
        let last = m.mesh.n_nodes() - 1;
        assert_eq!(m.params.u[last], 5e-4);
        // Re-freezing is idempotent.
        m.set_dirichlet("right", &[5e-4]).unwrap();
        assert_eq!(m.params.u[last], 5e-4);
        assert_eq!(m.dirichlet.len(), 2);
        assert!(matches!(
            m.set_dirichlet("nope", &[1.0]),
            Err(ModelError::UnknownTag(_))
        ));
    }

    #[test]
    fn free_layout_excludes_frozen_and_slaved() {
        let m = bar_model(5, 2, AdaptMode::RAdaptive);
        let layout = FreeLayout::build(&m);
        // Values: 5 end nodes + 4 mids, minus 2 Dirichlet = 7 free.
        let n_u = layout
            .entries
            .iter()
            .filter(|e| matches!(e, FlatEntry::U(_)))
            .count();
        assert_eq!(n_u, 7);
        // Coordinates: end nodes 1..=3 free; boundary ends and all mids
        // frozen/slaved.
        let n_x = layout
            .entries
            .iter()
            .filter(|e| matches!(e, FlatEntry::X(_)))
            .count();
        assert_eq!(n_x, 3);
    }

    #[test]
    fn binding_slaves_quadratic_mids() {
        let mut m = bar_model(3, 2, AdaptMode::RAdaptive);
        // Move the interior end node; the mid coordinates must follow.
        let layout = FreeLayout::build(&m);
        let mut theta = layout.gather(&m);
        for (e, t) in layout.entries.iter().zip(theta.iter_mut()) {
            if matches!(e, FlatEntry::X(1)) {
                *t = 6.0;
            }
        }
        layout.apply(&mut m, &theta);
        let mid0 = m.mesh.elements[0].node_ids[2];
        assert_relative_eq!(m.mesh.nodes[mid0].coords[0], 3.0, epsilon = 1e-15);
        let tape = Tape::new();
        let b = m.bind(&tape);
        assert_relative_eq!(b.x[mid0].value(), 3.0, epsilon = 1e-15);
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut m = bar_model(7, 2, AdaptMode::Fixed);
        for i in 0..m.params.u.len() {
            if !m.params.frozen_u[i] {
                m.params.u[i] = 0.1 + 0.01 * i as f64;
            }
        }
        let tape = Tape::new();
        let b = m.bind(&tape);
        for e in 0..m.mesh.n_elements() {
            for xi in [-0.83, 0.0, 0.4, 1.0] {
                let v_tape = m.u_at_ref(&b, e, [xi, 0.0], 0).value();
                let v_plain = m.eval_at_ref(e, [xi, 0.0])[0];
                assert_relative_eq!(v_tape, v_plain, epsilon = 1e-15);
                let x = crate::refelem::from_reference_1d(
                    xi,
                    m.mesh.nodes[m.mesh.elements[e].node_ids[0]].coords[0],
                    m.mesh.nodes[m.mesh.elements[e].node_ids[1]].coords[0],
                );
                let (u_x, du_x) = m.u_and_dudx_at_x(&tape, &b, e, x);
                assert_relative_eq!(u_x.value(), v_plain, epsilon = 1e-13);
                assert_relative_eq!(du_x.value(), m.eval_dudx_at_ref(e, xi), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_lossless() {
        let mut m = bar_model(6, 1, AdaptMode::RAdaptive);
        m.set_uniform_u(0.1);
        m.params.u[2] = 0.123456789012345678;
        m.mesh.nodes[2].coords[0] = 3.000000000000000444;
        let dir = std::env::temp_dir().join("fenni-model-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.json");
        m.save_checkpoint(&path).unwrap();
        let loaded = FenniModel::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params, m.params);
        assert_eq!(loaded.mode, m.mode);
        assert_eq!(loaded.dirichlet, m.dirichlet);
        for (a, b) in m.mesh.nodes.iter().zip(&loaded.mesh.nodes) {
            assert_eq!(a.coords[0].to_bits(), b.coords[0].to_bits());
        }
        assert_eq!(loaded.mesh.neighbor_map.len(), m.mesh.neighbor_map.len());
    }
}
