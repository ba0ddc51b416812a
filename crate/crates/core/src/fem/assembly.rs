//! Assembly of the mass, viscous, convection and divergence operators and of
//! load vectors. All velocity-block matrices share `MixedSpace::velocity_pattern`,
//! so they can be combined entrywise.

use std::sync::Arc;

use super::space::MixedSpace;
use super::sparse::{CsrMatrix, CsrPattern};
use crate::error::Result;

/// Discrete form of the convection term `(a . grad v, chi)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvectionForm {
    /// `(a . grad v, chi)` as written.
    #[default]
    Standard,
    /// `1/2 [(a . grad v, chi) - (a . grad chi, v)]`, antisymmetric for any `a`.
    Skew,
}

type Local = [[f64; 9]; 9];

/// Adds the same scalar cell matrix into both velocity components.
fn assemble_velocity_block<F>(space: &MixedSpace, mut kernel: F) -> CsrMatrix
where
    F: FnMut(usize, &mut Local),
{
    let mut m = CsrMatrix::zeros(space.velocity_pattern().clone());
    let offset = space.scalar_pattern().nnz();
    let values = m.values_mut();
    for cell in 0..space.mesh().num_cells() {
        let mut local = [[0.0; 9]; 9];
        kernel(cell, &mut local);
        let scatter = &space.cell_scatter()[cell];
        for i in 0..9 {
            for j in 0..9 {
                let k = scatter[i][j];
                values[k] += local[i][j];
                values[offset + k] += local[i][j];
            }
        }
    }
    m
}

/// Velocity mass matrix `(v, chi)`.
pub fn assemble_mass(space: &MixedSpace) -> CsrMatrix {
    let qc = space.matrix_quad();
    assemble_velocity_block(space, |cell, local| {
        for q in 0..qc.n_qp {
            let jxw = qc.jxw[cell * qc.n_qp + q];
            let phi = &qc.q2_values[q];
            for i in 0..9 {
                for j in 0..9 {
                    local[i][j] += jxw * phi[i] * phi[j];
                }
            }
        }
    })
}

/// Vector Laplacian `(grad v, grad chi)` without any viscosity factor.
pub fn assemble_stiffness(space: &MixedSpace) -> CsrMatrix {
    let qc = space.matrix_quad();
    assemble_velocity_block(space, |cell, local| {
        for q in 0..qc.n_qp {
            let idx = cell * qc.n_qp + q;
            let jxw = qc.jxw[idx];
            let g = &qc.q2_grads[idx];
            for i in 0..9 {
                for j in 0..9 {
                    local[i][j] += jxw * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
                }
            }
        }
    })
}

/// Convection matrix `N(a)` for the convecting velocity DOF vector `a`.
pub fn assemble_convection(space: &MixedSpace, a: &[f64], form: ConvectionForm) -> Result<CsrMatrix> {
    space.check_velocity_len(a)?;
    let qc = space.matrix_quad();
    let n_nodes = space.n_nodes();
    Ok(assemble_velocity_block(space, |cell, local| {
        let nodes = &space.cell_nodes()[cell];
        for q in 0..qc.n_qp {
            let idx = cell * qc.n_qp + q;
            let jxw = qc.jxw[idx];
            let phi = &qc.q2_values[q];
            let g = &qc.q2_grads[idx];
            let mut av = [0.0; 2];
            for k in 0..9 {
                av[0] += a[nodes[k]] * phi[k];
                av[1] += a[n_nodes + nodes[k]] * phi[k];
            }
            let adv: [f64; 9] = std::array::from_fn(|j| av[0] * g[j][0] + av[1] * g[j][1]);
            for i in 0..9 {
                for j in 0..9 {
                    local[i][j] += jxw * phi[i] * adv[j];
                }
            }
        }
        if form == ConvectionForm::Skew {
            for i in 0..9 {
                for j in i..9 {
                    let s = 0.5 * (local[i][j] - local[j][i]);
                    local[i][j] = s;
                    local[j][i] = -s;
                }
            }
        }
    }))
}

/// Matrix-free `N(a) u`, using the same quadrature as `assemble_convection`.
pub fn convection_action(space: &MixedSpace, a: &[f64], u: &[f64], form: ConvectionForm) -> Result<Vec<f64>> {
    space.check_velocity_len(a)?;
    space.check_velocity_len(u)?;
    let qc = space.matrix_quad();
    let n_nodes = space.n_nodes();
    let mut out = vec![0.0; space.n_u()];
    let mut a_q = Vec::with_capacity(qc.n_qp);
    let mut u_q = Vec::with_capacity(qc.n_qp);
    for cell in 0..space.mesh().num_cells() {
        space.eval_velocity(qc, a, cell, &mut a_q);
        space.eval_velocity(qc, u, cell, &mut u_q);
        let nodes = &space.cell_nodes()[cell];
        let mut local = [[0.0; 9]; 2];
        for q in 0..qc.n_qp {
            let idx = cell * qc.n_qp + q;
            let jxw = qc.jxw[idx];
            let phi = &qc.q2_values[q];
            let g = &qc.q2_grads[idx];
            let (av, _) = a_q[q];
            let (uv, ug) = u_q[q];
            for c in 0..2 {
                let a_grad_u = av[0] * ug[c][0] + av[1] * ug[c][1];
                for i in 0..9 {
                    match form {
                        ConvectionForm::Standard => local[c][i] += jxw * phi[i] * a_grad_u,
                        ConvectionForm::Skew => {
                            let a_grad_phi = av[0] * g[i][0] + av[1] * g[i][1];
                            local[c][i] += 0.5 * jxw * (phi[i] * a_grad_u - a_grad_phi * uv[c]);
                        }
                    }
                }
            }
        }
        for i in 0..9 {
            out[nodes[i]] += local[0][i];
            out[n_nodes + nodes[i]] += local[1][i];
        }
    }
    Ok(out)
}

/// Pressure-velocity coupling `B[p, u] = -(psi_p, div phi_u)`, shape `n_p x n_u`.
pub fn assemble_div(space: &MixedSpace) -> CsrMatrix {
    let mesh = space.mesh();
    let n_nodes = space.n_nodes();
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); space.n_p()];
    for (cell, verts) in mesh.cells().iter().enumerate() {
        let nodes = &space.cell_nodes()[cell];
        for &p in verts {
            rows[p].extend(nodes.iter().copied());
            rows[p].extend(nodes.iter().map(|&n| n_nodes + n));
        }
    }
    let pattern = Arc::new(CsrPattern::from_rows(space.n_u(), rows));
    let mut b = CsrMatrix::zeros(pattern);
    let qc = space.matrix_quad();
    for (cell, verts) in mesh.cells().iter().enumerate() {
        let nodes = &space.cell_nodes()[cell];
        let mut local = [[[0.0; 9]; 2]; 4];
        for q in 0..qc.n_qp {
            let idx = cell * qc.n_qp + q;
            let jxw = qc.jxw[idx];
            let psi = &qc.q1_values[q];
            let g = &qc.q2_grads[idx];
            for (k, row) in local.iter_mut().enumerate() {
                for j in 0..9 {
                    row[0][j] -= jxw * psi[k] * g[j][0];
                    row[1][j] -= jxw * psi[k] * g[j][1];
                }
            }
        }
        for (k, &p) in verts.iter().enumerate() {
            for j in 0..9 {
                b.add(p, nodes[j], local[k][0][j]);
                b.add(p, n_nodes + nodes[j], local[k][1][j]);
            }
        }
    }
    b
}

/// Load vector `(g, chi)` for a pointwise vector function.
pub fn assemble_rhs<G: Fn([f64; 2]) -> [f64; 2]>(space: &MixedSpace, g: G) -> Vec<f64> {
    let qc = space.load_quad();
    let n_nodes = space.n_nodes();
    let mut out = vec![0.0; space.n_u()];
    for cell in 0..space.mesh().num_cells() {
        let nodes = &space.cell_nodes()[cell];
        for q in 0..qc.n_qp {
            let idx = cell * qc.n_qp + q;
            let jxw = qc.jxw[idx];
            let val = g(qc.points[idx]);
            let phi = &qc.q2_values[q];
            for i in 0..9 {
                out[nodes[i]] += jxw * val[0] * phi[i];
                out[n_nodes + nodes[i]] += jxw * val[1] * phi[i];
            }
        }
    }
    out
}

/// `integral |g|^2` by the load quadrature.
pub fn integrate_squared<G: Fn([f64; 2]) -> [f64; 2]>(space: &MixedSpace, g: G) -> f64 {
    let qc = space.load_quad();
    qc.points
        .iter()
        .zip(&qc.jxw)
        .map(|(&x, &w)| {
            let v = g(x);
            w * (v[0] * v[0] + v[1] * v[1])
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Mesh;
    use rand::{Rng, SeedableRng};

    fn space(n: usize) -> MixedSpace {
        MixedSpace::new(Arc::new(Mesh::unit_square(n).unwrap()))
    }

    fn random_vec(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn zero_trace(space: &MixedSpace, mut x: Vec<f64>) -> Vec<f64> {
        for d in space.constrained_dofs() {
            x[d] = 0.0;
        }
        x
    }

    #[test]
    fn mass_properties() {
        let s = space(3);
        let m = assemble_mass(&s);
        let total: f64 = m.values().iter().sum();
        assert!((total - 2.0).abs() < 1e-13);
        let c = s.interpolate(|_| [1.0, 0.0]);
        assert!((m.inner(&c, &c) - 1.0).abs() < 1e-13);
        for seed in 0..5 {
            let x = random_vec(s.n_u(), seed);
            assert!(m.inner(&x, &x) > 0.0);
        }
        assert!(m.max_abs_diff(&m.transpose()) <= 1e-15);
    }

    #[test]
    fn stiffness_properties() {
        let s = space(4);
        let k = assemble_stiffness(&s);
        let c = s.interpolate(|_| [2.0, -3.0]);
        assert!(k.matvec(&c).iter().all(|v| v.abs() < 1e-12));
        // integral of |grad (x, 0)|^2 over the unit square is 1
        let lin = s.interpolate(|x| [x[0], 0.0]);
        assert!((k.inner(&lin, &lin) - 1.0).abs() < 1e-12);
        assert!(k.max_abs_diff(&k.transpose()) <= 1e-12);
    }

    #[test]
    fn convection_zero_field() {
        let s = space(2);
        let n = assemble_convection(&s, &vec![0.0; s.n_u()], ConvectionForm::Standard).unwrap();
        assert!(n.values().iter().all(|&v| v == 0.0));
        assert!(assemble_convection(&s, &[1.0], ConvectionForm::Standard).is_err());
    }

    #[test]
    fn convection_of_constant_vanishes_in_interior() {
        let s = space(3);
        let a = s.interpolate(|_| [1.0, 1.0]);
        let n = assemble_convection(&s, &a, ConvectionForm::Standard).unwrap();
        let v = s.interpolate(|_| [0.7, -0.2]);
        let nv = n.matvec(&v);
        for d in 0..s.n_u() {
            if !s.constrained()[d] {
                assert!(nv[d].abs() < 1e-14);
            }
        }
    }

    #[test]
    fn convection_matches_first_derivative_operator() {
        // a = (1, 1): (a . grad v, chi) applied to v = (x^2, y) is the load of (2x, 1).
        let s = space(3);
        let a = s.interpolate(|_| [1.0, 1.0]);
        let n = assemble_convection(&s, &a, ConvectionForm::Standard).unwrap();
        let v = s.interpolate(|x| [x[0] * x[0], x[1]]);
        let got = n.matvec(&v);
        let want = assemble_rhs(&s, |x| [2.0 * x[0], 1.0]);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-13);
        }
    }

    #[test]
    fn skew_form_is_antisymmetric() {
        let s = space(3);
        for seed in 0..4 {
            let a = random_vec(s.n_u(), seed);
            let n = assemble_convection(&s, &a, ConvectionForm::Skew).unwrap();
            let x = zero_trace(&s, random_vec(s.n_u(), 100 + seed));
            let xx: f64 = x.iter().map(|v| v * v).sum();
            assert!(n.inner(&x, &x).abs() <= 1e-12 * xx);
            // holds even without a vanishing trace
            let y = random_vec(s.n_u(), 200 + seed);
            let yy: f64 = y.iter().map(|v| v * v).sum();
            assert!(n.inner(&y, &y).abs() <= 1e-12 * yy);
        }
    }

    #[test]
    fn skew_equals_standard_for_solenoidal_zero_trace() {
        // For div a = 0 and zero-trace test/trial functions, both forms agree
        // up to quadrature error.
        let s = space(6);
        let a = s.interpolate(|x| [x[1], x[0]]);
        let std = assemble_convection(&s, &a, ConvectionForm::Standard).unwrap();
        let skew = assemble_convection(&s, &a, ConvectionForm::Skew).unwrap();
        let x = zero_trace(&s, random_vec(s.n_u(), 7));
        let y = zero_trace(&s, random_vec(s.n_u(), 8));
        assert!((std.inner(&x, &y) - skew.inner(&x, &y)).abs() < 1e-12);
    }

    #[test]
    fn action_matches_matrix() {
        let s = space(3);
        let a = random_vec(s.n_u(), 11);
        let u = random_vec(s.n_u(), 12);
        for form in [ConvectionForm::Standard, ConvectionForm::Skew] {
            let n = assemble_convection(&s, &a, form).unwrap();
            let by_matrix = n.matvec(&u);
            let direct = convection_action(&s, &a, &u, form).unwrap();
            for (x, y) in by_matrix.iter().zip(&direct) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn divergence_kernel() {
        let s = space(4);
        let b = assemble_div(&s);
        assert_eq!((b.nrows(), b.ncols()), (s.n_p(), s.n_u()));
        let c = s.interpolate(|_| [1.0, 2.0]);
        assert!(b.matvec(&c).iter().all(|v| v.abs() < 1e-12));
        let lin = s.interpolate(|x| [x[0], -x[1]]);
        assert!(b.matvec(&lin).iter().all(|v| v.abs() < 1e-12));
        // (x, 0) has unit divergence: rows sum to -|Omega|
        let stretch = s.interpolate(|x| [x[0], 0.0]);
        let total: f64 = b.matvec(&stretch).iter().sum();
        assert!((total + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rhs_properties() {
        let s = space(3);
        assert!(assemble_rhs(&s, |_| [0.0, 0.0]).iter().all(|&v| v == 0.0));
        let f = assemble_rhs(&s, |_| [1.0, 0.0]);
        let x_sum: f64 = f[..s.n_nodes()].iter().sum();
        let y_sum: f64 = f[s.n_nodes()..].iter().sum();
        assert!((x_sum - 1.0).abs() < 1e-13 && y_sum.abs() < 1e-15);
    }

    #[test]
    fn inf_sup_proxy() {
        // Smallest nonzero singular value of M_p^{-1/2} B K^{-1/2} on the free
        // velocity DOFs, via dense eigenvalues of the Schur complement.
        let beta = |n: usize| -> f64 {
            let s = space(n);
            let b = assemble_div(&s).to_dense();
            let k = assemble_stiffness(&s).to_dense();
            let free: Vec<usize> = (0..s.n_u()).filter(|&d| !s.constrained()[d]).collect();
            let np = s.n_p();
            // S = B K^{-1} B^T with K restricted to free dofs
            let kf: Vec<Vec<f64>> = free.iter().map(|&i| free.iter().map(|&j| k[i][j]).collect()).collect();
            let bf: Vec<Vec<f64>> = (0..np).map(|p| free.iter().map(|&j| b[p][j]).collect()).collect();
            let x = dense_solve_many(&kf, &bf);
            let mut schur = vec![vec![0.0; np]; np];
            for p in 0..np {
                for r in 0..np {
                    schur[p][r] = bf[p].iter().zip(&x[r]).map(|(a, b)| a * b).sum();
                }
            }
            // pressure mass matrix
            let qc = s.matrix_quad();
            let mut mp = vec![vec![0.0; np]; np];
            for (cell, verts) in s.mesh().cells().iter().enumerate() {
                for q in 0..qc.n_qp {
                    let jxw = qc.jxw[cell * qc.n_qp + q];
                    for a in 0..4 {
                        for c in 0..4 {
                            mp[verts[a]][verts[c]] += jxw * qc.q1_values[q][a] * qc.q1_values[q][c];
                        }
                    }
                }
            }
            let eig = generalized_eigenvalues(&schur, &mp);
            // constant pressure mode is in the kernel
            eig.into_iter().filter(|&l| l > 1e-10).fold(f64::INFINITY, f64::min).sqrt()
        };
        let b4 = beta(4);
        let b8 = beta(8);
        assert!(b4 > 0.05, "beta(1/4) = {b4}");
        assert!(b8 > 0.8 * b4, "beta(1/8) = {b8} vs {b4}");
    }

    fn dense_solve_many(a: &[Vec<f64>], rhs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        // Cholesky; a is SPD here.
        let n = a.len();
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
                if i == j {
                    l[i][i] = (a[i][i] - s).sqrt();
                } else {
                    l[i][j] = (a[i][j] - s) / l[j][j];
                }
            }
        }
        rhs.iter()
            .map(|b| {
                let mut y = b.clone();
                for i in 0..n {
                    let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
                    y[i] = (y[i] - s) / l[i][i];
                }
                for i in (0..n).rev() {
                    let s: f64 = (i + 1..n).map(|k| l[k][i] * y[k]).sum();
                    y[i] = (y[i] - s) / l[i][i];
                }
                y
            })
            .collect()
    }

    /// Eigenvalues of `S x = lambda M x` with `M` SPD, by Cholesky reduction and Jacobi sweeps.
    fn generalized_eigenvalues(s: &[Vec<f64>], m: &[Vec<f64>]) -> Vec<f64> {
        let n = s.len();
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let acc: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
                if i == j {
                    l[i][i] = (m[i][i] - acc).sqrt();
                } else {
                    l[i][j] = (m[i][j] - acc) / l[j][j];
                }
            }
        }
        // C = L^{-1} S L^{-T}
        let forward = |b: &[f64]| {
            let mut y = b.to_vec();
            for i in 0..n {
                let acc: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
                y[i] = (y[i] - acc) / l[i][i];
            }
            y
        };
        let tmp: Vec<Vec<f64>> = (0..n).map(|j| forward(&(0..n).map(|i| s[i][j]).collect::<Vec<_>>())).collect();
        // tmp[j] = L^{-1} S e_j ; apply L^{-1} on the other side
        let mut c = vec![vec![0.0; n]; n];
        for i in 0..n {
            let row: Vec<f64> = (0..n).map(|j| tmp[j][i]).collect();
            let y = forward(&row);
            c[i] = y;
        }
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in p + 1..n {
                    off += c[p][q] * c[p][q];
                    if c[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (c[q][q] - c[p][p]) / (2.0 * c[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let cs = 1.0 / (t * t + 1.0).sqrt();
                    let sn = t * cs;
                    for k in 0..n {
                        let (akp, akq) = (c[k][p], c[k][q]);
                        c[k][p] = cs * akp - sn * akq;
                        c[k][q] = sn * akp + cs * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (c[p][k], c[q][k]);
                        c[p][k] = cs * apk - sn * aqk;
                        c[q][k] = sn * apk + cs * aqk;
                    }
                }
            }
            if off < 1e-26 {
                break;
            }
        }
        (0..n).map(|i| c[i][i]).collect()
    }
}
