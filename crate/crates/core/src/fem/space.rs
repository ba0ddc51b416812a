//! Taylor-Hood Q2/Q1 space: DOF numbering, boundary nodes and cached geometry.

use std::sync::Arc;

use super::basis::{q1_values, q2_gradients, q2_values, Q2_NODES};
use super::quadrature::Quadrature;
use super::sparse::CsrPattern;
use crate::error::{Error, Result};
use crate::mesh::{BoundaryTag, Mesh};

/// Tensor Gauss order used for matrix assembly (degree-5 exact).
pub const MATRIX_QUADRATURE_ORDER: usize = 3;
/// Tensor Gauss order used for load vectors and error norms of non-polynomial data.
pub const LOAD_QUADRATURE_ORDER: usize = 6;

/// Per-cell quadrature data for one rule.
#[derive(Clone, Debug)]
pub struct QuadCache {
    pub n_qp: usize,
    /// Reference values, shared by all cells.
    pub q2_values: Vec<[f64; 9]>,
    pub q1_values: Vec<[f64; 4]>,
    /// Indexed by `cell * n_qp + q`.
    pub jxw: Vec<f64>,
    pub points: Vec<[f64; 2]>,
    pub q2_grads: Vec<[[f64; 2]; 9]>,
}

impl QuadCache {
    fn build(mesh: &Mesh, rule: &Quadrature) -> Self {
        let n_qp = rule.len();
        let q2_values: Vec<[f64; 9]> = rule.points.iter().map(|&p| q2_values(p)).collect();
        let q1_values: Vec<[f64; 4]> = rule.points.iter().map(|&p| q1_values(p)).collect();
        let ref_grads: Vec<[[f64; 2]; 9]> = rule.points.iter().map(|&p| q2_gradients(p)).collect();
        let geo_grads: Vec<[[f64; 2]; 4]> =
            rule.points.iter().map(|&p| super::basis::q1_gradients(p)).collect();

        let n = mesh.num_cells() * n_qp;
        let mut jxw = Vec::with_capacity(n);
        let mut points = Vec::with_capacity(n);
        let mut q2_grads = Vec::with_capacity(n);
        for c in 0..mesh.num_cells() {
            let corners = mesh.cell_corners(c);
            for q in 0..n_qp {
                // Bilinear geometry map: x = sum_k corner_k * N_k(xi).
                let mut jac = [[0.0; 2]; 2];
                let mut x = [0.0; 2];
                for k in 0..4 {
                    let n_k = q1_values[q][k];
                    for d in 0..2 {
                        x[d] += corners[k][d] * n_k;
                        jac[d][0] += corners[k][d] * geo_grads[q][k][0];
                        jac[d][1] += corners[k][d] * geo_grads[q][k][1];
                    }
                }
                let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
                let inv_t = [[jac[1][1] / det, -jac[1][0] / det], [-jac[0][1] / det, jac[0][0] / det]];
                let grads = ref_grads[q].map(|g| {
                    [inv_t[0][0] * g[0] + inv_t[0][1] * g[1], inv_t[1][0] * g[0] + inv_t[1][1] * g[1]]
                });
                jxw.push(det * rule.weights[q]);
                points.push(x);
                q2_grads.push(grads);
            }
        }
        Self { n_qp, q2_values, q1_values, jxw, points, q2_grads }
    }
}

/// A boundary Q2 node and the tag whose data it carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundaryNode {
    pub node: usize,
    pub tag: BoundaryTag,
}

/// Q2 vector velocity and Q1 pressure on a quadrilateral mesh.
///
/// Scalar Q2 nodes are numbered vertices first, then edge midpoints (by facet
/// index), then cell centers. Velocity DOF `(component, node)` lives at
/// `component * n_nodes + node`; pressure DOF `i` is mesh vertex `i`.
#[derive(Debug)]
pub struct MixedSpace {
    mesh: Arc<Mesh>,
    n_nodes: usize,
    node_coords: Vec<[f64; 2]>,
    cell_nodes: Vec<[usize; 9]>,
    boundary_nodes: Vec<BoundaryNode>,
    constrained: Vec<bool>,
    scalar_pattern: Arc<CsrPattern>,
    velocity_pattern: Arc<CsrPattern>,
    cell_scatter: Vec<[[usize; 9]; 9]>,
    matrix_quad: QuadCache,
    load_quad: QuadCache,
    pressure_weights: Vec<f64>,
}

impl MixedSpace {
    pub fn new(mesh: Arc<Mesh>) -> Self {
        let nv = mesh.num_vertices();
        let nf = mesh.num_facets();
        let n_nodes = nv + nf + mesh.num_cells();

        let mut node_coords = mesh.vertices().to_vec();
        for f in mesh.facets() {
            let [a, b] = f.vertices.map(|v| mesh.vertices()[v]);
            node_coords.push([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
        }
        let cell_nodes: Vec<[usize; 9]> = mesh
            .cells()
            .iter()
            .zip(mesh.cell_facets())
            .enumerate()
            .map(|(c, (cell, edges))| {
                [cell[0], cell[1], cell[2], cell[3], nv + edges[0], nv + edges[1], nv + edges[2], nv + edges[3], nv + nf + c]
            })
            .collect();
        for c in 0..mesh.num_cells() {
            // Center of the bilinear map, i.e. the image of the reference origin.
            let corners = mesh.cell_corners(c);
            let vals = q1_values(Q2_NODES[8]);
            let mut x = [0.0; 2];
            for k in 0..4 {
                x[0] += vals[k] * corners[k][0];
                x[1] += vals[k] * corners[k][1];
            }
            node_coords.push(x);
        }

        // No-slip dominates at corners where tags meet: keep the smallest tag.
        let mut node_tag: Vec<Option<BoundaryTag>> = vec![None; n_nodes];
        for (f, facet) in mesh.boundary_facets() {
            for node in [facet.vertices[0], facet.vertices[1], nv + f] {
                let slot = &mut node_tag[node];
                *slot = Some(slot.map_or(facet.tag, |t| t.min(facet.tag)));
            }
        }
        let boundary_nodes: Vec<BoundaryNode> = node_tag
            .iter()
            .enumerate()
            .filter_map(|(node, tag)| tag.map(|tag| BoundaryNode { node, tag }))
            .collect();
        let mut constrained = vec![false; 2 * n_nodes];
        for b in &boundary_nodes {
            constrained[b.node] = true;
            constrained[n_nodes + b.node] = true;
        }

        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
        for nodes in &cell_nodes {
            for &i in nodes {
                adjacency[i].extend_from_slice(nodes);
            }
        }
        let scalar_pattern = CsrPattern::from_rows(n_nodes, adjacency);
        let mut velocity_rows: Vec<Vec<usize>> = Vec::with_capacity(2 * n_nodes);
        for comp in 0..2 {
            for i in 0..n_nodes {
                velocity_rows.push(scalar_pattern.row(i).iter().map(|&j| comp * n_nodes + j).collect());
            }
        }
        let velocity_pattern = CsrPattern::from_rows(2 * n_nodes, velocity_rows);
        let cell_scatter = cell_nodes
            .iter()
            .map(|nodes| {
                nodes.map(|i| nodes.map(|j| scalar_pattern.index_of(i, j).expect("cell coupling in pattern")))
            })
            .collect();

        let matrix_quad = QuadCache::build(&mesh, &Quadrature::gauss_tensor(MATRIX_QUADRATURE_ORDER));
        let load_quad = QuadCache::build(&mesh, &Quadrature::gauss_tensor(LOAD_QUADRATURE_ORDER));

        let mut pressure_weights = vec![0.0; nv];
        let qc = &matrix_quad;
        for (c, cell) in mesh.cells().iter().enumerate() {
            for q in 0..qc.n_qp {
                let jxw = qc.jxw[c * qc.n_qp + q];
                for k in 0..4 {
                    pressure_weights[cell[k]] += jxw * qc.q1_values[q][k];
                }
            }
        }

        Self {
            mesh,
            n_nodes,
            node_coords,
            cell_nodes,
            boundary_nodes,
            constrained,
            scalar_pattern: Arc::new(scalar_pattern),
            velocity_pattern: Arc::new(velocity_pattern),
            cell_scatter,
            matrix_quad,
            load_quad,
            pressure_weights,
        }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    /// Number of scalar Q2 nodes.
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_u(&self) -> usize {
        2 * self.n_nodes
    }

    pub fn n_p(&self) -> usize {
        self.mesh.num_vertices()
    }

    pub fn velocity_dof(&self, component: usize, node: usize) -> usize {
        component * self.n_nodes + node
    }

    pub fn node_coords(&self) -> &[[f64; 2]] {
        &self.node_coords
    }

    pub fn cell_nodes(&self) -> &[[usize; 9]] {
        &self.cell_nodes
    }

    pub fn boundary_nodes(&self) -> &[BoundaryNode] {
        &self.boundary_nodes
    }

    /// Per velocity DOF: is it fixed by a Dirichlet condition.
    pub fn constrained(&self) -> &[bool] {
        &self.constrained
    }

    pub fn constrained_dofs(&self) -> Vec<usize> {
        (0..self.n_u()).filter(|&d| self.constrained[d]).collect()
    }

    pub fn scalar_pattern(&self) -> &Arc<CsrPattern> {
        &self.scalar_pattern
    }

    pub fn velocity_pattern(&self) -> &Arc<CsrPattern> {
        &self.velocity_pattern
    }

    /// For each cell, positions of the local `(i, j)` couplings in the scalar pattern.
    /// The second velocity component uses the same positions offset by the scalar nnz.
    pub fn cell_scatter(&self) -> &[[[usize; 9]; 9]] {
        &self.cell_scatter
    }

    pub fn matrix_quad(&self) -> &QuadCache {
        &self.matrix_quad
    }

    pub fn load_quad(&self) -> &QuadCache {
        &self.load_quad
    }

    /// `integral of psi_i` for each pressure basis function.
    pub fn pressure_weights(&self) -> &[f64] {
        &self.pressure_weights
    }

    /// Pressure DOF pinned to zero in the saddle-point system.
    pub fn pinned_pressure(&self) -> usize {
        0
    }

    /// Nodal interpolant of a vector field.
    pub fn interpolate<F: Fn([f64; 2]) -> [f64; 2]>(&self, f: F) -> Vec<f64> {
        let mut u = vec![0.0; self.n_u()];
        for (i, &x) in self.node_coords.iter().enumerate() {
            let val = f(x);
            u[i] = val[0];
            u[self.n_nodes + i] = val[1];
        }
        u
    }

    /// Nodal Q1 interpolant of a scalar field.
    pub fn interpolate_pressure<F: Fn([f64; 2]) -> f64>(&self, f: F) -> Vec<f64> {
        self.mesh.vertices().iter().map(|&x| f(x)).collect()
    }

    /// Velocity vector holding Dirichlet data on constrained DOFs and zero elsewhere.
    pub fn boundary_values<F>(&self, mut f: F) -> Result<Vec<f64>>
    where
        F: FnMut(BoundaryTag, [f64; 2]) -> Result<[f64; 2]>,
    {
        let mut g = vec![0.0; self.n_u()];
        for b in &self.boundary_nodes {
            let val = f(b.tag, self.node_coords[b.node])?;
            g[b.node] = val[0];
            g[self.n_nodes + b.node] = val[1];
        }
        Ok(g)
    }

    /// Shifts a pressure vector to zero mean.
    pub fn remove_pressure_mean(&self, p: &mut [f64]) {
        let area: f64 = self.pressure_weights.iter().sum();
        let mean = p.iter().zip(&self.pressure_weights).map(|(a, w)| a * w).sum::<f64>() / area;
        for v in p.iter_mut() {
            *v -= mean;
        }
    }

    /// Values and physical gradients of a velocity DOF vector at the quadrature
    /// points of `cell` under `quad`. Gradient layout: `grad[c][d] = d u_c / d x_d`.
    pub fn eval_velocity(&self, quad: &QuadCache, u: &[f64], cell: usize, out: &mut Vec<([f64; 2], [[f64; 2]; 2])>) {
        out.clear();
        let nodes = &self.cell_nodes[cell];
        let local: [[f64; 2]; 9] = nodes.map(|n| [u[n], u[self.n_nodes + n]]);
        for q in 0..quad.n_qp {
            let vals = &quad.q2_values[q];
            let grads = &quad.q2_grads[cell * quad.n_qp + q];
            let mut val = [0.0; 2];
            let mut grad = [[0.0; 2]; 2];
            for k in 0..9 {
                for c in 0..2 {
                    val[c] += local[k][c] * vals[k];
                    grad[c][0] += local[k][c] * grads[k][0];
                    grad[c][1] += local[k][c] * grads[k][1];
                }
            }
            out.push((val, grad));
        }
    }

    /// Checks that a vector has the velocity length.
    pub fn check_velocity_len(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.n_u() {
            return Err(Error::DimensionMismatch { expected: self.n_u(), got: u.len() });
        }
        Ok(())
    }
}
