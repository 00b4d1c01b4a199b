//! 1D interpolation-layer architecture: global shape functions assembled
//! from ReLU building blocks, evaluated for every input point.
//!
//! This is the older formulation the reference-element model replaces.
//! It is kept as an independent evaluation path: both architectures must
//! interpolate identically on shared parameters, which the tests assert.
//! The assembly step is the affine map N = A*aux + b over the
//! concatenated element-block outputs.

use thiserror::Error;

use crate::model::FenniModel;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LegacyError {
    #[error("degenerate element (xb <= xa)")]
    DegenerateElement,
    #[error("the interpolation-layer architecture is 1D only")]
    UnsupportedDimension,
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Piecewise-linear ramp: ya for x <= xa, linear on [xa, xb], yb for
/// x >= xb, built from two nested ReLUs.
pub fn linear_block(x: f64, xa: f64, xb: f64, ya: f64, yb: f64) -> f64 {
    (yb - ya) * relu(-1.0 / (xb - xa) * relu(-x + xb) + 1.0) + ya
}

/// Per-element auxiliary functions. Linear: two ramps whose non-zero
/// tails cancel in the assembly. Quadratic: products of two ramps giving
/// the Lagrange triple on {xa, mid, xb} with plateau tails (1/0, 0/1,
/// 0/0) chosen so the same tail-cancelling assembly applies.
pub fn element_block(x: f64, xa: f64, xb: f64, mid: Option<f64>) -> Vec<f64> {
    match mid {
        None => vec![
            linear_block(x, xa, xb, 1.0, 0.0),
            linear_block(x, xa, xb, 0.0, 1.0),
        ],
        Some(xm) => {
            let end0 = linear_block(x, xa, xb, xa - xm, xb - xm)
                * linear_block(x, xa, xb, xa - xb, 0.0)
                / ((xa - xm) * (xa - xb));
            let end1 = linear_block(x, xa, xb, 0.0, xb - xa)
                * linear_block(x, xa, xb, xa - xm, xb - xm)
                / ((xb - xa) * (xb - xm));
            let midf = linear_block(x, xa, xb, 0.0, xb - xa)
                * linear_block(x, xa, xb, xa - xb, 0.0)
                / ((xm - xa) * (xm - xb));
            vec![end0, end1, midf]
        }
    }
}

/// Sparse rows of the assembly layer: shape k = sum of the auxiliary
/// entries in `rows[k]` plus `bias[k]`.
#[derive(Debug, Clone)]
pub struct AssemblyLayer {
    pub rows: Vec<Vec<usize>>,
    pub bias: Vec<f64>,
}

impl AssemblyLayer {
    pub fn apply(&self, aux: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.bias)
            .map(|(cols, b)| cols.iter().map(|&c| aux[c]).sum::<f64>() + b)
            .collect()
    }
}

/// The assembled 1D model: end-node chain, optional mids, nodal values
/// ordered [end nodes..., mid nodes...].
#[derive(Debug, Clone)]
pub struct LegacyModel {
    pub order: usize,
    pub xs: Vec<f64>,
    pub mids: Vec<f64>,
    pub u: Vec<f64>,
    pub assembly: AssemblyLayer,
}

impl LegacyModel {
    pub fn new(
        xs: Vec<f64>,
        mids: Vec<f64>,
        u: Vec<f64>,
        order: usize,
    ) -> Result<LegacyModel, LegacyError> {
        for w in xs.windows(2) {
            if w[1] <= w[0] {
                return Err(LegacyError::DegenerateElement);
            }
        }
        let np = xs.len();
        let ne = np - 1;
        let stride = if order == 1 { 2 } else { 3 };
        let mut rows = Vec::new();
        let mut bias = Vec::new();
        // End-node shapes: boundary nodes take one auxiliary, interior
        // nodes combine two and drop the constant tails.
        for i in 0..np {
            if i == 0 {
                rows.push(vec![0]);
                bias.push(0.0);
            } else if i == np - 1 {
                rows.push(vec![(ne - 1) * stride + 1]);
                bias.push(0.0);
            } else {
                rows.push(vec![i * stride, (i - 1) * stride + 1]);
                bias.push(-1.0);
            }
        }
        if order == 2 {
            for e in 0..ne {
                rows.push(vec![e * stride + 2]);
                bias.push(0.0);
            }
        }
        Ok(LegacyModel {
            order,
            xs,
            mids,
            u,
            assembly: AssemblyLayer { rows, bias },
        })
    }

    /// Extract the same parameters from a reference-element model.
    pub fn from_fenni(model: &FenniModel) -> Result<LegacyModel, LegacyError> {
        if model.mesh.dim != 1 {
            return Err(LegacyError::UnsupportedDimension);
        }
        let mut elems: Vec<&crate::mesh::Element> = model.mesh.elements.iter().collect();
        elems.sort_by(|a, b| {
            model.mesh.nodes[a.node_ids[0]].coords[0]
                .total_cmp(&model.mesh.nodes[b.node_ids[0]].coords[0])
        });
        let mut xs = vec![model.mesh.nodes[elems[0].node_ids[0]].coords[0]];
        let mut u_end = vec![model.params.u[elems[0].node_ids[0]]];
        let mut mids = Vec::new();
        let mut u_mid = Vec::new();
        for e in &elems {
            xs.push(model.mesh.nodes[e.node_ids[1]].coords[0]);
            u_end.push(model.params.u[e.node_ids[1]]);
            if model.mesh.order == 2 {
                mids.push(model.mesh.nodes[e.node_ids[2]].coords[0]);
                u_mid.push(model.params.u[e.node_ids[2]]);
            }
        }
        let mut u = u_end;
        u.extend(u_mid);
        LegacyModel::new(xs, mids, u, model.mesh.order)
    }

    /// Concatenated element-block outputs at x.
    pub fn aux_values(&self, x: f64) -> Vec<f64> {
        let ne = self.xs.len() - 1;
        let mut aux = Vec::with_capacity(ne * if self.order == 1 { 2 } else { 3 });
        for e in 0..ne {
            let mid = if self.order == 2 {
                Some(self.mids[e])
            } else {
                None
            };
            aux.extend(element_block(x, self.xs[e], self.xs[e + 1], mid));
        }
        aux
    }

    /// All global shape functions at x.
    pub fn shape_values(&self, x: f64) -> Vec<f64> {
        self.assembly.apply(&self.aux_values(x))
    }

    /// Interpolated value: the final linear layer with the nodal values
    /// as weights and zero bias.
    pub fn forward(&self, x: f64) -> f64 {
        self.shape_values(x)
            .iter()
            .zip(&self.u)
            .map(|(n, u)| n * u)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::generate_bar_1d;
    use crate::model::AdaptMode;
    use approx::assert_relative_eq;
    use rand::prelude::*;

    #[test]
    fn linear_block_cases() {
        // Left plateau, ramp midpoint, right plateau.
        assert_eq!(linear_block(1.0, 1.0, 5.0, 0.25, 1.0), 0.25);
        assert_eq!(linear_block(0.0, 1.0, 5.0, 0.25, 1.0), 0.25);
        assert_relative_eq!(linear_block(3.0, 1.0, 5.0, 0.0, 1.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(linear_block(3.0, 1.0, 5.0, 2.0, 4.0), 3.0, epsilon = 1e-15);
        assert_eq!(linear_block(7.0, 1.0, 5.0, 0.25, 1.0), 1.0);
    }

    fn random_bar(order: usize, np: usize, seed: u64) -> FenniModel {
        let mesh = generate_bar_1d(10.0, np, order).unwrap();
        let mut model = FenniModel::new(mesh, AdaptMode::Fixed);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for v in model.params.u.iter_mut() {
            *v = rng.gen::<f64>() - 0.5;
        }
        // Perturb interior end-node positions, keeping monotonicity.
        for i in 1..np - 1 {
            let h = 10.0 / (np - 1) as f64;
            model.mesh.nodes[i].coords[0] += (rng.gen::<f64>() - 0.5) * 0.6 * h;
        }
        model.sync_slaved_mids();
        model
    }

    #[test]
    fn interior_node_shape_is_kronecker() {
        let model = random_bar(1, 8, 1);
        let legacy = LegacyModel::from_fenni(&model).unwrap();
        for (i, &xi) in legacy.xs.iter().enumerate() {
            let shapes = legacy.shape_values(xi);
            for (k, n) in shapes.iter().enumerate() {
                assert_relative_eq!(*n, if k == i { 1.0 } else { 0.0 }, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn quadratic_mid_shape_is_one_at_midpoint() {
        let model = random_bar(2, 6, 2);
        let legacy = LegacyModel::from_fenni(&model).unwrap();
        let np = legacy.xs.len();
        for (e, &xm) in legacy.mids.iter().enumerate() {
            let shapes = legacy.shape_values(xm);
            assert_relative_eq!(shapes[np + e], 1.0, epsilon = 1e-12);
            for (k, n) in shapes.iter().enumerate() {
                if k != np + e {
                    assert_relative_eq!(*n, 0.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn partition_of_unity_both_orders() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for order in [1, 2] {
            let model = random_bar(order, 7, 40 + order as u64);
            let legacy = LegacyModel::from_fenni(&model).unwrap();
            for _ in 0..100 {
                let x = rng.gen::<f64>() * 10.0;
                let s: f64 = legacy.shape_values(x).iter().sum();
                assert_relative_eq!(s, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn architectures_agree_at_random_points() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for order in [1, 2] {
            let model = random_bar(order, 9, 7 * order as u64);
            let legacy = LegacyModel::from_fenni(&model).unwrap();
            for _ in 0..200 {
                let x = rng.gen::<f64>() * 10.0;
                let via_legacy = legacy.forward(x);
                let via_ref = model.eval_point(&[x, 0.0])[0];
                assert_relative_eq!(via_legacy, via_ref, epsilon = 1e-12);
            }
        }
    }
}
