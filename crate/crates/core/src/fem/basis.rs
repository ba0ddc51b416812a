//! Nodal Lagrange bases on the reference square.
//!
//! Q2 local node order: corners `(-1,-1), (1,-1), (1,1), (-1,1)`, then the
//! midpoints of edges 0..4 (edge `k` joins corners `k` and `k+1`), then the
//! center. Q1 uses the four corners in the same order.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementKind {
    Q2,
    Q1,
}

impl ElementKind {
    pub fn num_nodes(self) -> usize {
        match self {
            ElementKind::Q2 => 9,
            ElementKind::Q1 => 4,
        }
    }
}

pub const Q2_NODES: [[f64; 2]; 9] = [
    [-1.0, -1.0],
    [1.0, -1.0],
    [1.0, 1.0],
    [-1.0, 1.0],
    [0.0, -1.0],
    [1.0, 0.0],
    [0.0, 1.0],
    [-1.0, 0.0],
    [0.0, 0.0],
];

pub const Q1_NODES: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];

/// 1D quadratic Lagrange functions at nodes -1, 0, 1 and their derivatives.
fn quad_1d(x: f64) -> ([f64; 3], [f64; 3]) {
    (
        [0.5 * x * (x - 1.0), 1.0 - x * x, 0.5 * x * (x + 1.0)],
        [x - 0.5, -2.0 * x, x + 0.5],
    )
}

/// Position of each Q2 node in the 1D factor (0 -> -1, 1 -> 0, 2 -> 1).
const Q2_TENSOR: [[usize; 2]; 9] = [
    [0, 0],
    [2, 0],
    [2, 2],
    [0, 2],
    [1, 0],
    [2, 1],
    [1, 2],
    [0, 1],
    [1, 1],
];

pub fn q2_values(p: [f64; 2]) -> [f64; 9] {
    let (lx, _) = quad_1d(p[0]);
    let (ly, _) = quad_1d(p[1]);
    Q2_TENSOR.map(|[i, j]| lx[i] * ly[j])
}

pub fn q2_gradients(p: [f64; 2]) -> [[f64; 2]; 9] {
    let (lx, dx) = quad_1d(p[0]);
    let (ly, dy) = quad_1d(p[1]);
    Q2_TENSOR.map(|[i, j]| [dx[i] * ly[j], lx[i] * dy[j]])
}

pub fn q1_values(p: [f64; 2]) -> [f64; 4] {
    Q1_NODES.map(|n| 0.25 * (1.0 + n[0] * p[0]) * (1.0 + n[1] * p[1]))
}

pub fn q1_gradients(p: [f64; 2]) -> [[f64; 2]; 4] {
    Q1_NODES.map(|n| [0.25 * n[0] * (1.0 + n[1] * p[1]), 0.25 * n[1] * (1.0 + n[0] * p[0])])
}

/// Values and reference gradients of every basis function of `kind` at `point`.
pub fn basis_eval(kind: ElementKind, point: [f64; 2]) -> (Vec<f64>, Vec<[f64; 2]>) {
    match kind {
        ElementKind::Q2 => (q2_values(point).to_vec(), q2_gradients(point).to_vec()),
        ElementKind::Q1 => (q1_values(point).to_vec(), q1_gradients(point).to_vec()),
    }
}
