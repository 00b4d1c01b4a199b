//! Classical FEM direct solvers, benchmark problem definitions, analytic
//! solutions, and error metrics — the verification backbone every
//! trained model is checked against.
//!
//! Assembly uses the same quadrature rules as the training losses, so
//! the energy minimizer and the linear-system solution agree to solver
//! tolerance rather than to quadrature error.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::{Real, Tape, Var};
use crate::loss::{von_mises_plane_strain, BarMaterial, PlaneMaterial};
use crate::mesh::{
    generate_bar_1d, generate_plate_with_hole, Mesh, MeshError, PlateGeometry, VtkData,
};
use crate::model::{AdaptMode, FenniModel, ModelError};
use crate::quadrature::QuadratureRule;
use crate::refelem::{physical_gradients_tri, shapes_linear_tri, shapes_quadratic_1d, ShapeEval};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("singular or indefinite system (insufficient constraints?)")]
    SingularSystem,
    #[error("iterative solver stalled at relative residual {0:.3e}")]
    SolverStalled(f64),
    #[error("reference field has zero norm")]
    ZeroReferenceNorm,
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quadrature(#[from] crate::quadrature::QuadratureError),
    #[error("cache i/o: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------
// Benchmark problems
// ---------------------------------------------------------------------

/// Scalar field over the 1D domain, evaluable both plainly and as a tape
/// expression (loss integrands differentiate through the evaluation
/// point under node movement).
pub trait ScalarField1d {
    fn eval(&self, x: f64) -> f64;
    fn eval_var<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t>;
}

/// Two superposed Gaussian bumps; the formula is shared between the f64
/// and tape paths through the generic scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleGaussianLoad {
    pub x1: f64,
    pub x2: f64,
}

fn double_gaussian<T: Real>(x: T, x1: f64, x2: f64) -> T {
    use std::f64::consts::PI;
    let t1 = (x - x1) * (x - x1);
    let e1 = (t1 * (-PI)).exp();
    let t2 = (x - x2) * (x - x2);
    let e2 = (t2 * (-PI)).exp();
    -((t1 * (4.0 * PI * PI) - 2.0 * PI) * e1) - (t2 * (8.0 * PI * PI) - 4.0 * PI) * e2
}

impl ScalarField1d for DoubleGaussianLoad {
    fn eval(&self, x: f64) -> f64 {
        double_gaussian(x, self.x1, self.x2)
    }
    fn eval_var<'t>(&self, _tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        double_gaussian(x, self.x1, self.x2)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroLoad;

impl ScalarField1d for ZeroLoad {
    fn eval(&self, _x: f64) -> f64 {
        0.0
    }
    fn eval_var<'t>(&self, tape: &'t Tape, _x: Var<'t>) -> Var<'t> {
        tape.constant(0.0)
    }
}

/// a + b*x, handy for manufactured solutions.
#[derive(Debug, Clone, Copy)]
pub struct LinearLoad {
    pub a: f64,
    pub b: f64,
}

impl ScalarField1d for LinearLoad {
    fn eval(&self, x: f64) -> f64 {
        self.a + self.b * x
    }
    fn eval_var<'t>(&self, _tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        x * self.b + self.a
    }
}

/// Clamped bar under the double-Gaussian body force, with a closed-form
/// solution of AE u'' + b = 0, u(0) = u_left, u(L) = u_right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bar1d {
    pub length: f64,
    pub area: f64,
    pub youngs: f64,
    pub u_left: f64,
    pub u_right: f64,
    pub x1: f64,
    pub x2: f64,
}

impl Default for Bar1d {
    fn default() -> Self {
        Bar1d {
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

impl Bar1d {
    pub fn material(&self) -> BarMaterial {
        BarMaterial::new(self.area, self.youngs).expect("valid bar material")
    }

    pub fn body_force(&self) -> DoubleGaussianLoad {
        DoubleGaussianLoad {
            x1: self.x1,
            x2: self.x2,
        }
    }

    // The particular part: b = -(P_1'' + 2 P_2'') with P_i = exp(-pi (x -
    // x_i)^2), so u = (P_1 + 2 P_2)/(AE) + alpha x + beta, the linear part
    // fixed by the end conditions.
    fn particular(&self, x: f64) -> f64 {
        use std::f64::consts::PI;
        ((-PI * (x - self.x1).powi(2)).exp() + 2.0 * (-PI * (x - self.x2).powi(2)).exp())
            / (self.area * self.youngs)
    }

    fn particular_d(&self, x: f64) -> f64 {
        use std::f64::consts::PI;
        (-2.0 * PI * (x - self.x1) * (-PI * (x - self.x1).powi(2)).exp()
            - 4.0 * PI * (x - self.x2) * (-PI * (x - self.x2).powi(2)).exp())
            / (self.area * self.youngs)
    }

    fn linear_coefficients(&self) -> (f64, f64) {
        let beta = self.u_left - self.particular(0.0);
        let alpha = (self.u_right - self.particular(self.length) - beta) / self.length;
        (alpha, beta)
    }

    pub fn analytic_u(&self, x: f64) -> f64 {
        let (alpha, beta) = self.linear_coefficients();
        self.particular(x) + alpha * x + beta
    }

    pub fn analytic_du(&self, x: f64) -> f64 {
        let (alpha, _) = self.linear_coefficients();
        self.particular_d(x) + alpha
    }

    /// Uniform-mesh model with the end conditions applied and the value
    /// entries at the uniform initialization 0.1.
    pub fn build_model(&self, np: usize, order: usize, mode: AdaptMode) -> Result<FenniModel, OracleError> {
        let mesh = generate_bar_1d(self.length, np, order)?;
        let mut model = FenniModel::new(mesh, mode);
        model.set_uniform_u(0.1);
        model.set_dirichlet("left", &[self.u_left])?;
        model.set_dirichlet("right", &[self.u_right])?;
        Ok(model)
    }

    /// Dirichlet pairs for the direct solver.
    pub fn bcs(&self, mesh: &Mesh) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for n in mesh.nodes_with_tag("left") {
            out.push((n, self.u_left));
        }
        for n in mesh.nodes_with_tag("right") {
            out.push((n, self.u_right));
        }
        out
    }
}

/// Plate with a hole, stretched by a prescribed displacement of the
/// right edge while the left edge is clamped; hole rim and the remaining
/// outer boundary are traction free.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateProblem {
    pub geometry: PlateGeometry,
    pub lambda: f64,
    pub mu: f64,
    pub u_d: [f64; 2],
}

impl Default for PlateProblem {
    fn default() -> Self {
        PlateProblem {
            geometry: PlateGeometry::default(),
            lambda: 1.25,
            mu: 1.0,
            u_d: [1.0, 0.0],
        }
    }
}

impl PlateProblem {
    pub fn material(&self) -> PlaneMaterial {
        PlaneMaterial::new(self.lambda, self.mu).expect("valid plane material")
    }

    pub fn build_model(
        &self,
        refine_level: usize,
        mode: AdaptMode,
    ) -> Result<FenniModel, OracleError> {
        let mesh = generate_plate_with_hole(&self.geometry, refine_level)?;
        let mut model = FenniModel::new(mesh, mode);
        model.set_uniform_u(0.5);
        model.set_dirichlet("left", &[0.0, 0.0])?;
        model.set_dirichlet("right", &[self.u_d[0], self.u_d[1]])?;
        Ok(model)
    }

    pub fn bcs(&self, mesh: &Mesh) -> Vec<(usize, [f64; 2])> {
        let mut out = Vec::new();
        for n in mesh.nodes_with_tag("left") {
            out.push((n, [0.0, 0.0]));
        }
        for n in mesh.nodes_with_tag("right") {
            out.push((n, self.u_d));
        }
        out
    }

    /// Direct solution wrapped as a model (for evaluation and metrics).
    pub fn fem_solution(&self, refine_level: usize) -> Result<FenniModel, OracleError> {
        let mut model = self.build_model(refine_level, AdaptMode::Fixed)?;
        let bcs = self.bcs(&model.mesh);
        let u = fem_solve_2d(&model.mesh, &self.material(), &bcs)?;
        for (n, v) in u.iter().enumerate() {
            model.params.u[2 * n] = v[0];
            model.params.u[2 * n + 1] = v[1];
        }
        Ok(model)
    }
}

// ---------------------------------------------------------------------
// 1D assembly and solve
// ---------------------------------------------------------------------

fn shapes_1d(order: usize, xi: f64) -> ShapeEval {
    if order == 1 {
        crate::refelem::shapes_linear_1d(xi)
    } else {
        shapes_quadratic_1d(xi)
    }
}

/// Element stiffness and load with the given rule:
/// K_ab = int AE N_a' N_b', F_a = int N_a b.
fn element_system_1d(
    mesh: &Mesh,
    mat: &BarMaterial,
    body: &dyn ScalarField1d,
    rule: &QuadratureRule,
    e: usize,
) -> ([[f64; 3]; 3], [f64; 3]) {
    let ids = &mesh.elements[e].node_ids;
    let n = ids.len();
    let xa = mesh.nodes[ids[0]].coords[0];
    let xb = mesh.nodes[ids[1]].coords[0];
    let h = xb - xa;
    let ae = mat.area * mat.youngs;
    let mut k = [[0.0; 3]; 3];
    let mut f = [0.0; 3];
    for (p, w) in rule.points.iter().zip(&rule.weights) {
        let shapes = shapes_1d(mesh.order, p[0]);
        let x = crate::refelem::from_reference_1d(p[0], xa, xb);
        let bval = body.eval(x);
        let jac = 0.5 * h;
        for a in 0..n {
            let da = shapes.grads_ref[a][0] * 2.0 / h;
            f[a] += w * shapes.values[a] * bval * jac;
            for b in 0..n {
                let db = shapes.grads_ref[b][0] * 2.0 / h;
                k[a][b] += w * ae * da * db * jac;
            }
        }
    }
    (k, f)
}

/// Galerkin residual K u - F at the given nodal values, assembled with
/// the same quadrature as the training losses.
pub fn galerkin_residual_1d(
    mesh: &Mesh,
    mat: &BarMaterial,
    body: &dyn ScalarField1d,
    rule: &QuadratureRule,
    u: &[f64],
) -> Vec<f64> {
    let mut r = vec![0.0; mesh.n_nodes()];
    for e in 0..mesh.n_elements() {
        let (k, f) = element_system_1d(mesh, mat, body, rule, e);
        let ids = &mesh.elements[e].node_ids;
        for a in 0..ids.len() {
            let mut acc = -f[a];
            for b in 0..ids.len() {
                acc += k[a][b] * u[ids[b]];
            }
            r[ids[a]] += acc;
        }
    }
    r
}

/// Direct Galerkin solve of the bar problem on an arbitrary 1D mesh.
/// Free unknowns are ordered by coordinate, which keeps the factorized
/// band narrow for chain meshes of any order.
pub fn fem_solve_1d(
    mesh: &Mesh,
    mat: &BarMaterial,
    body: &dyn ScalarField1d,
    bcs: &[(usize, f64)],
    rule: &QuadratureRule,
) -> Result<Vec<f64>, OracleError> {
    let nn = mesh.n_nodes();
    let mut prescribed: Vec<Option<f64>> = vec![None; nn];
    for (n, v) in bcs {
        prescribed[*n] = Some(*v);
    }
    let mut free: Vec<usize> = (0..nn).filter(|&n| prescribed[n].is_none()).collect();
    free.sort_by(|&a, &b| mesh.nodes[a].coords[0].total_cmp(&mesh.nodes[b].coords[0]));
    let mut index_of: Vec<Option<usize>> = vec![None; nn];
    for (k, &n) in free.iter().enumerate() {
        index_of[n] = Some(k);
    }

    let nf = free.len();
    if nf == 0 {
        return Ok(prescribed.iter().map(|p| p.unwrap_or(0.0)).collect());
    }
    // Assemble into triplets on the free-free block, carrying the
    // prescribed couplings to the right side.
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut rhs = vec![0.0; nf];
    for e in 0..mesh.n_elements() {
        let (k, f) = element_system_1d(mesh, mat, body, rule, e);
        let ids = &mesh.elements[e].node_ids;
        for a in 0..ids.len() {
            let Some(ia) = index_of[ids[a]] else { continue };
            rhs[ia] += f[a];
            for b in 0..ids.len() {
                match index_of[ids[b]] {
                    Some(ib) => triplets.push((ia, ib, k[a][b])),
                    None => rhs[ia] -= k[a][b] * prescribed[ids[b]].unwrap(),
                }
            }
        }
    }
    let x = banded_cholesky_solve(nf, &triplets, &rhs)?;
    let mut out = vec![0.0; nn];
    for (n, p) in prescribed.iter().enumerate() {
        if let Some(v) = p {
            out[n] = *v;
        }
    }
    for (k, &n) in free.iter().enumerate() {
        out[n] = x[k];
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// 2D assembly and solve (P1 plane strain)
// ---------------------------------------------------------------------

/// Element stiffness of a linear triangle: K_e = area * B^T D B with the
/// Voigt plane-strain matrix D = [[l+2m, l, 0], [l, l+2m, 0], [0, 0, m]].
fn element_stiffness_2d(mesh: &Mesh, mat: &PlaneMaterial, e: usize) -> Result<[[f64; 6]; 6], OracleError> {
    let tri = mesh.tri_coords(e);
    let mut shapes = shapes_linear_tri([1.0 / 3.0, 1.0 / 3.0]);
    physical_gradients_tri(&tri, &mut shapes).map_err(|_| OracleError::SingularSystem)?;
    let area = 0.5 * crate::refelem::tri_signed_jacobian(&tri).abs();
    let (l, m) = (mat.lambda, mat.mu);
    let d = [[l + 2.0 * m, l, 0.0], [l, l + 2.0 * m, 0.0], [0.0, 0.0, m]];
    // B is 3x6: rows (eps_xx, eps_yy, gamma_xy).
    let mut bmat = [[0.0; 6]; 3];
    for a in 0..3 {
        let [gx, gy] = shapes.grads_phys[a];
        bmat[0][2 * a] = gx;
        bmat[1][2 * a + 1] = gy;
        bmat[2][2 * a] = gy;
        bmat[2][2 * a + 1] = gx;
    }
    let mut k = [[0.0; 6]; 6];
    for i in 0..6 {
        for j in 0..6 {
            let mut acc = 0.0;
            for r in 0..3 {
                for s in 0..3 {
                    acc += bmat[r][i] * d[r][s] * bmat[s][j];
                }
            }
            k[i][j] = acc * area;
        }
    }
    Ok(k)
}

/// Galerkin residual K u (zero body force / traction) at the given nodal
/// displacements.
pub fn galerkin_residual_2d(
    mesh: &Mesh,
    mat: &PlaneMaterial,
    u: &[f64],
) -> Result<Vec<f64>, OracleError> {
    let mut r = vec![0.0; 2 * mesh.n_nodes()];
    for e in 0..mesh.n_elements() {
        let k = element_stiffness_2d(mesh, mat, e)?;
        let ids = &mesh.elements[e].node_ids;
        for a in 0..3 {
            for ca in 0..2 {
                let mut acc = 0.0;
                for b in 0..3 {
                    for cb in 0..2 {
                        acc += k[2 * a + ca][2 * b + cb] * u[2 * ids[b] + cb];
                    }
                }
                r[2 * ids[a] + ca] += acc;
            }
        }
    }
    Ok(r)
}

/// Threshold between the direct dense factorization and the Jacobi-PCG
/// path.
const DENSE_DOF_LIMIT: usize = 5000;

/// Plane-strain P1 solve with prescribed nodal displacements.
pub fn fem_solve_2d(
    mesh: &Mesh,
    mat: &PlaneMaterial,
    bcs: &[(usize, [f64; 2])],
) -> Result<Vec<[f64; 2]>, OracleError> {
    let nn = mesh.n_nodes();
    let ndof = 2 * nn;
    let mut prescribed: Vec<Option<f64>> = vec![None; ndof];
    for (n, v) in bcs {
        prescribed[2 * n] = Some(v[0]);
        prescribed[2 * n + 1] = Some(v[1]);
    }
    let free: Vec<usize> = (0..ndof).filter(|&d| prescribed[d].is_none()).collect();
    let mut index_of: Vec<Option<usize>> = vec![None; ndof];
    for (k, &d) in free.iter().enumerate() {
        index_of[d] = Some(k);
    }
    let nf = free.len();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut rhs = vec![0.0; nf];
    for e in 0..mesh.n_elements() {
        let k = element_stiffness_2d(mesh, mat, e)?;
        let ids = &mesh.elements[e].node_ids;
        for a in 0..3 {
            for ca in 0..2 {
                let gd_a = 2 * ids[a] + ca;
                let Some(ia) = index_of[gd_a] else { continue };
                for b in 0..3 {
                    for cb in 0..2 {
                        let gd_b = 2 * ids[b] + cb;
                        let kv = k[2 * a + ca][2 * b + cb];
                        match index_of[gd_b] {
                            Some(ib) => triplets.push((ia, ib, kv)),
                            None => rhs[ia] -= kv * prescribed[gd_b].unwrap(),
                        }
                    }
                }
            }
        }
    }

    let x = if nf <= DENSE_DOF_LIMIT {
        dense_cholesky_solve(nf, &triplets, &rhs)?
    } else {
        let csr = Csr::from_triplets(nf, triplets);
        pcg_jacobi(&csr, &rhs, 1e-12, 200_000)?
    };

    let mut out = vec![[0.0; 2]; nn];
    for n in 0..nn {
        for c in 0..2 {
            let d = 2 * n + c;
            out[n][c] = match prescribed[d] {
                Some(v) => v,
                None => x[index_of[d].unwrap()],
            };
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Linear solvers
// ---------------------------------------------------------------------

fn dense_cholesky_solve(
    n: usize,
    triplets: &[(usize, usize, f64)],
    rhs: &[f64],
) -> Result<Vec<f64>, OracleError> {
    let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
    for &(i, j, v) in triplets {
        a[(i, j)] += v;
    }
    let chol = a.cholesky().ok_or(OracleError::SingularSystem)?;
    let b = nalgebra::DVector::from_column_slice(rhs);
    Ok(chol.solve(&b).iter().copied().collect())
}

/// Banded Cholesky for SPD systems with small bandwidth (1D chains).
fn banded_cholesky_solve(
    n: usize,
    triplets: &[(usize, usize, f64)],
    rhs: &[f64],
) -> Result<Vec<f64>, OracleError> {
    let bw = triplets
        .iter()
        .map(|&(i, j, _)| i.abs_diff(j))
        .max()
        .unwrap_or(0);
    let w = bw + 1;
    // Lower band storage: band[i*w + d] = A[i][i-d].
    let mut band = vec![0.0; n * w];
    for &(i, j, v) in triplets {
        if i >= j {
            band[i * w + (i - j)] += v;
        }
    }
    // In-place factorization A = L L^T.
    for i in 0..n {
        let lo = i.saturating_sub(bw);
        for j in lo..=i {
            let klo = lo.max(j.saturating_sub(bw));
            let mut sum = band[i * w + (i - j)];
            for k in klo..j {
                sum -= band[i * w + (i - k)] * band[j * w + (j - k)];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(OracleError::SingularSystem);
                }
                band[i * w + 0] = sum.sqrt();
            } else {
                band[i * w + (i - j)] = sum / band[j * w + 0];
            }
        }
    }
    // Forward then backward substitution.
    let mut y = rhs.to_vec();
    for i in 0..n {
        let lo = i.saturating_sub(bw);
        let mut sum = y[i];
        for j in lo..i {
            sum -= band[i * w + (i - j)] * y[j];
        }
        y[i] = sum / band[i * w + 0];
    }
    let mut x = y;
    for i in (0..n).rev() {
        let hi = (i + bw).min(n - 1);
        let mut sum = x[i];
        for j in i + 1..=hi {
            sum -= band[j * w + (j - i)] * x[j];
        }
        x[i] = sum / band[i * w + 0];
    }
    Ok(x)
}

struct Csr {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl Csr {
    fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Csr {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; n + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut data: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in triplets {
            if last == Some((i, j)) {
                *data.last_mut().unwrap() += v;
            } else {
                indices.push(j);
                data.push(v);
                indptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n {
            indptr[i + 1] += indptr[i];
        }
        Csr {
            n,
            indptr,
            indices,
            data,
        }
    }

    fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.indptr[i]..self.indptr[i + 1] {
                acc += self.data[k] * x[self.indices[k]];
            }
            out[i] = acc;
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for i in 0..self.n {
            for k in self.indptr[i]..self.indptr[i + 1] {
                if self.indices[k] == i {
                    d[i] += self.data[k];
                }
            }
        }
        d
    }
}

fn pcg_jacobi(a: &Csr, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>, OracleError> {
    let n = a.n;
    let diag = a.diagonal();
    if diag.iter().any(|&d| d <= 0.0) {
        return Err(OracleError::SingularSystem);
    }
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    for _ in 0..max_iter {
        a.matvec(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return Err(OracleError::SingularSystem);
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm <= tol * bnorm {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    Err(OracleError::SolverStalled(rnorm / bnorm))
}

// ---------------------------------------------------------------------
// Error metrics
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms1d {
    pub e_u: f64,
    pub e_du: f64,
}

/// Normalized L2 norms over `n_points` uniform evaluation points.
pub fn error_norms_1d(
    predicted_u: impl Fn(f64) -> f64,
    predicted_du: impl Fn(f64) -> f64,
    exact_u: impl Fn(f64) -> f64,
    exact_du: impl Fn(f64) -> f64,
    length: f64,
    n_points: usize,
) -> Result<Norms1d, OracleError> {
    let mut num_u = 0.0;
    let mut den_u = 0.0;
    let mut num_d = 0.0;
    let mut den_d = 0.0;
    for i in 0..n_points {
        let x = length * i as f64 / (n_points - 1) as f64;
        let eu = predicted_u(x) - exact_u(x);
        num_u += eu * eu;
        den_u += exact_u(x) * exact_u(x);
        let ed = predicted_du(x) - exact_du(x);
        num_d += ed * ed;
        den_d += exact_du(x) * exact_du(x);
    }
    if den_u == 0.0 || den_d == 0.0 {
        return Err(OracleError::ZeroReferenceNorm);
    }
    Ok(Norms1d {
        e_u: (num_u / den_u).sqrt(),
        e_du: (num_d / den_d).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms2d {
    pub e_ux: f64,
    pub e_uy: f64,
    pub e_vm: f64,
    pub vm_max_ratio: f64,
}

/// Normalized displacement/von-Mises norms evaluated at the reference
/// mesh's element centroids, plus the max-von-Mises ratio.
pub fn error_norms_2d(
    predicted: &FenniModel,
    reference: &FenniModel,
    mat: &PlaneMaterial,
) -> Result<Norms2d, OracleError> {
    let mut num = [0.0f64; 2];
    let mut den = [0.0f64; 2];
    let mut num_vm = 0.0;
    let mut den_vm = 0.0;
    let mut max_vm_p: f64 = 0.0;
    let mut max_vm_r: f64 = 0.0;
    for e in 0..reference.mesh.n_elements() {
        let tri = reference.mesh.tri_coords(e);
        let centroid = [
            (tri[0][0] + tri[1][0] + tri[2][0]) / 3.0,
            (tri[0][1] + tri[1][1] + tri[2][1]) / 3.0,
        ];
        let up = predicted.eval_point(&centroid);
        let ur = reference.eval_at_ref(e, [1.0 / 3.0, 1.0 / 3.0]);
        for c in 0..2 {
            let d = up[c] - ur[c];
            num[c] += d * d;
            den[c] += ur[c] * ur[c];
        }
        let vm_r = von_mises_plane_strain(&reference.strain_in(e)?, mat);
        let vm_p = match predicted.mesh.locate_point(&centroid) {
            crate::mesh::PointLocation::InElement { element, .. } => {
                von_mises_plane_strain(&predicted.strain_in(element)?, mat)
            }
            crate::mesh::PointLocation::NearestNode { node } => {
                // Stress of an element adjacent to the nearest node.
                let elem = predicted
                    .mesh
                    .elements
                    .iter()
                    .position(|el| el.node_ids.contains(&node))
                    .unwrap_or(0);
                von_mises_plane_strain(&predicted.strain_in(elem)?, mat)
            }
        };
        let dvm = vm_p - vm_r;
        num_vm += dvm * dvm;
        den_vm += vm_r * vm_r;
        max_vm_p = max_vm_p.max(vm_p);
        max_vm_r = max_vm_r.max(vm_r);
    }
    if den[0] == 0.0 || den[1] == 0.0 || den_vm == 0.0 || max_vm_r == 0.0 {
        return Err(OracleError::ZeroReferenceNorm);
    }
    Ok(Norms2d {
        e_ux: (num[0] / den[0]).sqrt(),
        e_uy: (num[1] / den[1]).sqrt(),
        e_vm: (num_vm / den_vm).sqrt(),
        vm_max_ratio: max_vm_p / max_vm_r,
    })
}

/// Least-squares slope of log(y) against log(x); the observed
/// convergence order of an error sequence against element size.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let sx: f64 = lx.iter().sum();
    let sy: f64 = ly.iter().sum();
    let sxx: f64 = lx.iter().map(|v| v * v).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| a * b).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Validation gate for the closed-form bar solution: relative L2
/// mismatch between the analytic values and a fine direct solve at the
/// solver's nodes.
pub fn validate_analytic_1d(bar: &Bar1d, n_elements: usize) -> Result<f64, OracleError> {
    let mesh = generate_bar_1d(bar.length, n_elements + 1, 1)?;
    let rule = crate::quadrature::gauss_1d(5)?;
    let u = fem_solve_1d(&mesh, &bar.material(), &bar.body_force(), &bar.bcs(&mesh), &rule)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (n, &uf) in u.iter().enumerate() {
        let ua = bar.analytic_u(mesh.nodes[n].coords[0]);
        num += (uf - ua) * (uf - ua);
        den += ua * ua;
    }
    if den == 0.0 {
        return Err(OracleError::ZeroReferenceNorm);
    }
    Ok((num / den).sqrt())
}

// ---------------------------------------------------------------------
// Reference-solution cache
// ---------------------------------------------------------------------

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

const CACHE_MAGIC: &[u8; 8] = b"FENNREF1";

/// Load or compute the plate reference solution for a refinement level,
/// caching the nodal values in a small binary file (the mesh regenerates
/// deterministically) and writing a VTK copy alongside.
pub fn plate_reference_solution(
    cache_dir: &Path,
    problem: &PlateProblem,
    refine_level: usize,
) -> Result<FenniModel, OracleError> {
    std::fs::create_dir_all(cache_dir)?;
    let key = fnv1a(
        format!(
            "{:?}|{}|{}|{:?}|{}",
            problem.geometry, problem.lambda, problem.mu, problem.u_d, refine_level
        )
        .as_bytes(),
    );
    let path = cache_path(cache_dir, key);
    if let Some(model) = try_load_cached(&path, problem, refine_level)? {
        return Ok(model);
    }
    let model = problem.fem_solution(refine_level)?;
    store_cached(&path, &model)?;
    let vm: Vec<f64> = (0..model.mesh.n_elements())
        .map(|e| {
            model
                .strain_in(e)
                .map(|s| von_mises_plane_strain(&s, &problem.material()))
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
    let _ = crate::mesh::write_vtk(
        &model.mesh,
        &data,
        "reference solution",
        &path.with_extension("vtk"),
    );
    Ok(model)
}

fn cache_path(dir: &Path, key: u64) -> PathBuf {
    dir.join(format!("ref_{key:016x}.bin"))
}

fn try_load_cached(
    path: &Path,
    problem: &PlateProblem,
    refine_level: usize,
) -> Result<Option<FenniModel>, OracleError> {
    let Ok(bytes) = std::fs::read(path) else {
        return Ok(None);
    };
    if bytes.len() < 16 || &bytes[..8] != CACHE_MAGIC {
        return Ok(None);
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 8 * n {
        return Ok(None);
    }
    let mut model = problem.build_model(refine_level, AdaptMode::Fixed)?;
    if model.params.u.len() != n {
        return Ok(None);
    }
    for (i, chunk) in bytes[16..].chunks_exact(8).enumerate() {
        model.params.u[i] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(Some(model))
}

fn store_cached(path: &Path, model: &FenniModel) -> Result<(), OracleError> {
    let mut bytes = Vec::with_capacity(16 + 8 * model.params.u.len());
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&(model.params.u.len() as u64).to_le_bytes());
    for v in &model.params.u {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Energy of a nodal field under the assembled system: u^T K u / 2 -
/// u^T F (1D) or u^T K u / 2 (2D, no external work).
pub fn assembled_energy_1d(
    mesh: &Mesh,
    mat: &BarMaterial,
    body: &dyn ScalarField1d,
    rule: &QuadratureRule,
    u: &[f64],
) -> f64 {
    let mut energy = 0.0;
    for e in 0..mesh.n_elements() {
        let (k, f) = element_system_1d(mesh, mat, body, rule, e);
        let ids = &mesh.elements[e].node_ids;
        for a in 0..ids.len() {
            energy -= f[a] * u[ids[a]];
            for b in 0..ids.len() {
                energy += 0.5 * k[a][b] * u[ids[a]] * u[ids[b]];
            }
        }
    }
    energy
}

pub fn assembled_energy_2d(mesh: &Mesh, mat: &PlaneMaterial, u: &[f64]) -> Result<f64, OracleError> {
    let r = galerkin_residual_2d(mesh, mat, u)?;
    Ok(0.5 * r.iter().zip(u).map(|(a, b)| a * b).sum::<f64>())
}

/// Smallest-eigenvalue check for desk-scale systems: the free-free block
/// of the assembled stiffness must be SPD, which the Cholesky
/// factorization certifies.
pub fn spd_check_2d(
    mesh: &Mesh,
    mat: &PlaneMaterial,
    bcs: &[(usize, [f64; 2])],
) -> Result<(), OracleError> {
    fem_solve_2d(mesh, mat, bcs).map(|_| ())
}
