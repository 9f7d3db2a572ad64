//! Assembly of the block system and the projection operators.
//!
//! Index layout: displacement unknowns are d-interleaved (component k of
//! scalar function i sits at 2 i + k), strain/multiplier unknowns are
//! node-major (basis component k of node i sits at 2 i + k). With these
//! layouts the block definitions of the mixed formulation transcribe
//! directly; the coupling block B is stored with entries
//! (C Phi_l phi_j, eps(e_k theta_i)) and enters the residual with a minus
//! sign on both off-diagonal positions.

use crate::error::{Error, Result};
use crate::hp_spaces::{DofSystem, StrainBasis};
use crate::linalg::{SparseMatrix, Triplets};
use crate::mesh::Point2;
use crate::quadrature::{elevated_points, GaussRule2d};
use crate::tensors::{basis_s, DevTensor, Dim, MaterialLaw, SymTensor};

/// Assembled blocks of the discrete mixed problem.
#[derive(Debug, Clone)]
pub struct SaddleSystem {
    /// Displacement stiffness, dM x dM, symmetric positive definite.
    pub a_block: SparseMatrix,
    /// Coupling block, dM x LN.
    pub b_block: SparseMatrix,
    /// Strain block, LN x LN, symmetric positive definite.
    pub c_block: SparseMatrix,
    /// Diagonal of the multiplier block: D_i repeated L times per node.
    pub d_diag: Vec<f64>,
    /// Load vector, stored with the sign it carries in the residual
    /// (the negative of the linear functional on the basis).
    pub load: Vec<f64>,
    pub dm: usize,
    pub ln: usize,
}

impl SaddleSystem {
    pub fn k_dim(&self) -> usize {
        self.dm + self.ln
    }
}

/// Volume force and Neumann traction, both evaluable pointwise.
pub struct Loads<'a> {
    pub volume: &'a dyn Fn(Point2) -> [f64; 2],
    pub traction: &'a dyn Fn(Point2) -> [f64; 2],
}

impl<'a> Loads<'a> {
    pub fn zero() -> Loads<'static> {
        Loads { volume: &|_| [0.0, 0.0], traction: &|_| [0.0, 0.0] }
    }
}

/// A smooth vector field with gradient, for manufactured solutions and the
/// displacement projection.
pub struct VectorField<'a> {
    pub value: &'a dyn Fn(Point2) -> [f64; 2],
    /// `grad[k][l]` = d u_k / d x_l
    pub gradient: &'a dyn Fn(Point2) -> [[f64; 2]; 2],
}

impl<'a> VectorField<'a> {
    pub fn strain(&self, x: Point2) -> SymTensor {
        let g = (self.gradient)(x);
        SymTensor::from_2d(g[0][0], g[1][1], 0.5 * (g[0][1] + g[1][0]))
    }
}

/// Reference tangent directions of the four local edges.
pub(crate) fn edge_tangent_ref(le: usize) -> (f64, f64) {
    match le {
        0 => (1.0, 0.0),
        1 => (0.0, 1.0),
        2 => (-1.0, 0.0),
        3 => (0.0, -1.0),
        _ => unreachable!(),
    }
}

/// Reference coordinates of the point at parameter t on a local edge.
pub(crate) fn edge_point_ref(le: usize, t: f64) -> (f64, f64) {
    match le {
        0 => (t, -1.0),
        1 => (1.0, t),
        2 => (-t, 1.0),
        3 => (-1.0, -t),
        _ => unreachable!(),
    }
}

/// Assembles A, B, C, D and the load vector.
pub fn assemble_blocks(
    sys: &DofSystem,
    material: &MaterialLaw,
    loads: &Loads,
) -> Result<SaddleSystem> {
    let mesh = &sys.mesh;
    let dim = Dim::Two;
    let l_comp = dim.basis_len();
    let phi_basis = basis_s(2)?;
    let dm = 2 * sys.n_displacement;
    let ln = l_comp * sys.n_strain;
    if dm == 0 {
        return Err(Error::BoundaryCondition(
            "no free displacement unknowns; the Dirichlet part covers everything".into(),
        ));
    }

    let mu = material.lame_mu;
    let lambda = material.lame_lambda;
    let c_coef = 2.0 * mu + material.hardening_k;

    let mut a_t = Triplets::new(dm, dm);
    let mut b_t = Triplets::new(dm, ln);
    let mut c_t = Triplets::new(ln, ln);
    let mut d_diag = vec![0.0; ln];
    let mut load = vec![0.0; dm];

    for e in 0..mesh.n_elements() {
        let p = mesh.degree(e);
        let geo = mesh.geometry(e);
        let rule = GaussRule2d::with_points(elevated_points(p));
        let lob = sys.lobatto_basis(e);
        let gau = sys.gauss_basis(e);
        let n_disp = (p + 1) * (p + 1);
        let n_strain = p * p;

        let mut k_nodal = vec![0.0; (2 * n_disp) * (2 * n_disp)];
        let mut b_nodal = vec![0.0; (2 * n_disp) * (l_comp * n_strain)];
        let mut c_loc = vec![0.0; n_strain * n_strain];
        let mut l_nodal = vec![0.0; 2 * n_disp];

        for (&(xi, eta), &w) in rule.points.iter().zip(&rule.weights) {
            let (inv_t, det) = geo.jacobian_inv_t(xi, eta);
            let wdet = w * det.abs();
            let x = geo.map(xi, eta);

            let vx = lob.eval_all(xi);
            let vy = lob.eval_all(eta);
            let dx = lob.eval_deriv_all(xi);
            let dy = lob.eval_deriv_all(eta);
            let mut shape = vec![0.0; n_disp];
            let mut grad = vec![[0.0; 2]; n_disp];
            for a in 0..n_disp {
                let (i, j) = (a % (p + 1), a / (p + 1));
                shape[a] = vx[i] * vy[j];
                let g_ref = [dx[i] * vy[j], vx[i] * dy[j]];
                grad[a] = [
                    inv_t[0][0] * g_ref[0] + inv_t[0][1] * g_ref[1],
                    inv_t[1][0] * g_ref[0] + inv_t[1][1] * g_ref[1],
                ];
            }
            let gx = gau.eval_all(xi);
            let gy = gau.eval_all(eta);
            let phi: Vec<f64> = (0..n_strain).map(|k| gx[k % p] * gy[k / p]).collect();

            // stiffness kernel
            for a in 0..n_disp {
                let ga = grad[a];
                for b in 0..n_disp {
                    let gb = grad[b];
                    let dot = ga[0] * gb[0] + ga[1] * gb[1];
                    for k in 0..2 {
                        for l in 0..2 {
                            let val = mu * (if k == l { dot } else { 0.0 } + ga[l] * gb[k])
                                + lambda * ga[k] * gb[l];
                            k_nodal[(2 * a + k) * (2 * n_disp) + (2 * b + l)] += wdet * val;
                        }
                    }
                }
            }
            // coupling kernel: 2 mu phi_j (e_k^T Phi_l grad_a)
            for a in 0..n_disp {
                let ga = grad[a];
                for l in 0..l_comp {
                    let pl = &phi_basis[l];
                    for k in 0..2 {
                        let contraction = pl.get(k, 0) * ga[0] + pl.get(k, 1) * ga[1];
                        let factor = wdet * 2.0 * mu * contraction;
                        for (kq, &ph) in phi.iter().enumerate() {
                            b_nodal[(2 * a + k) * (l_comp * n_strain) + (l_comp * kq + l)] +=
                                factor * ph;
                        }
                    }
                }
            }
            // strain block kernel: (2 mu + k_hard) phi_i phi_j per component
            for ki in 0..n_strain {
                for kj in 0..n_strain {
                    c_loc[ki * n_strain + kj] += wdet * c_coef * phi[ki] * phi[kj];
                }
            }
            // volume load
            let f = (loads.volume)(x);
            for a in 0..n_disp {
                for k in 0..2 {
                    l_nodal[2 * a + k] -= wdet * f[k] * shape[a];
                }
            }
        }

        // scatter through the displacement dof couplings
        for a in 0..n_disp {
            for &(ga, wa) in sys.displacement_node(e, a) {
                for b in 0..n_disp {
                    for &(gb, wb) in sys.displacement_node(e, b) {
                        for k in 0..2 {
                            for l in 0..2 {
                                a_t.push(
                                    2 * ga + k,
                                    2 * gb + l,
                                    wa * wb * k_nodal[(2 * a + k) * (2 * n_disp) + (2 * b + l)],
                                );
                            }
                        }
                    }
                }
                for kq in 0..n_strain {
                    let col0 = l_comp * sys.zeta(e, kq);
                    for k in 0..2 {
                        for l in 0..l_comp {
                            b_t.push(
                                2 * ga + k,
                                col0 + l,
                                wa * b_nodal[(2 * a + k) * (l_comp * n_strain) + (l_comp * kq + l)],
                            );
                        }
                    }
                }
                for k in 0..2 {
                    load[2 * ga + k] += wa * l_nodal[2 * a + k];
                }
            }
        }
        for ki in 0..n_strain {
            let row0 = l_comp * sys.zeta(e, ki);
            for kj in 0..n_strain {
                let col0 = l_comp * sys.zeta(e, kj);
                for comp in 0..l_comp {
                    c_t.push(row0 + comp, col0 + comp, c_loc[ki * n_strain + kj]);
                }
            }
            for comp in 0..l_comp {
                d_diag[row0 + comp] = sys.d_weights[sys.zeta(e, ki)];
            }
        }
    }

    // Neumann traction
    let (edge_nodes_1d, edge_weights_1d) = crate::basis1d::gauss_legendre(
        elevated_points(mesh.degrees.iter().copied().max().unwrap_or(1)),
    );
    for be in &mesh.boundary {
        if be.tag != crate::mesh::BoundaryTag::Neumann {
            continue;
        }
        let e = be.elem;
        let p = mesh.degree(e);
        let geo = mesh.geometry(e);
        let lob = sys.lobatto_basis(e);
        let n_disp = (p + 1) * (p + 1);
        let (tx, ty) = edge_tangent_ref(be.local_edge);
        let mut l_nodal = vec![0.0; 2 * n_disp];
        for (&t, &w) in edge_nodes_1d.iter().zip(&edge_weights_1d) {
            let (xi, eta) = edge_point_ref(be.local_edge, t);
            let jac = geo.jacobian(xi, eta);
            let tangent = [
                jac[0][0] * tx + jac[0][1] * ty,
                jac[1][0] * tx + jac[1][1] * ty,
            ];
            let ds = (tangent[0] * tangent[0] + tangent[1] * tangent[1]).sqrt();
            let x = geo.map(xi, eta);
            let g = (loads.traction)(x);
            let vx = lob.eval_all(xi);
            let vy = lob.eval_all(eta);
            for a in 0..n_disp {
                let shape = vx[a % (p + 1)] * vy[a / (p + 1)];
                for k in 0..2 {
                    l_nodal[2 * a + k] -= w * ds * g[k] * shape;
                }
            }
        }
        for a in 0..n_disp {
            for &(ga, wa) in sys.displacement_node(e, a) {
                for k in 0..2 {
                    load[2 * ga + k] += wa * l_nodal[2 * a + k];
                }
            }
        }
    }

    let a_block = a_t.to_csr(true);
    let b_block = b_t.to_csr(false);
    let c_block = c_t.to_csr(true);
    Ok(SaddleSystem { a_block, b_block, c_block, d_diag, load, dm, ln })
}

/// Evaluates the bilinear form on two discrete pairs given by coefficient
/// vectors (displacements in the nodal basis, strains in the primal basis).
pub fn bilinear_a(
    saddle: &SaddleSystem,
    (a1, b1): (&[f64], &[f64]),
    (a2, b2): (&[f64], &[f64]),
) -> f64 {
    let mut tmp = vec![0.0; saddle.dm];
    saddle.a_block.matvec(a1, &mut tmp);
    let mut val: f64 = tmp.iter().zip(a2).map(|(x, y)| x * y).sum();
    // - a2^T B b1 - a1^T B b2 + b2^T C b1
    let mut bb1 = vec![0.0; saddle.dm];
    saddle.b_block.matvec(b1, &mut bb1);
    val -= bb1.iter().zip(a2).map(|(x, y)| x * y).sum::<f64>();
    let mut bb2 = vec![0.0; saddle.dm];
    saddle.b_block.matvec(b2, &mut bb2);
    val -= bb2.iter().zip(a1).map(|(x, y)| x * y).sum::<f64>();
    let mut cb1 = vec![0.0; saddle.ln];
    saddle.c_block.matvec(b1, &mut cb1);
    val += cb1.iter().zip(b2).map(|(x, y)| x * y).sum::<f64>();
    val
}

/// The linear functional of the loads on a discrete displacement field.
pub fn linear_functional_l(saddle: &SaddleSystem, a: &[f64]) -> f64 {
    // load stores the negated functional on the basis
    -saddle.load.iter().zip(a).map(|(l, v)| l * v).sum::<f64>()
}

/// Elementwise L2 projection onto the strain space; the field is given in
/// element-local form (element, reference coords, physical point).
pub fn project_p_hp(
    sys: &DofSystem,
    mut field: impl FnMut(usize, f64, f64, Point2) -> DevTensor,
) -> Result<Vec<f64>> {
    let mesh = &sys.mesh;
    let l_comp = Dim::Two.basis_len();
    let mut out = vec![0.0; l_comp * sys.n_strain];
    for e in 0..mesh.n_elements() {
        let p = mesh.degree(e);
        let geo = mesh.geometry(e);
        let rule = GaussRule2d::with_points(elevated_points(p));
        let n_t = p * p;
        let mut gram = nalgebra::DMatrix::<f64>::zeros(n_t, n_t);
        let mut rhs = nalgebra::DMatrix::<f64>::zeros(n_t, l_comp);
        for (&(xi, eta), &w) in rule.points.iter().zip(&rule.weights) {
            let wdet = w * geo.jacobian_det(xi, eta).abs();
            let vals: Vec<f64> = (0..n_t).map(|k| sys.eval_phi(e, k, xi, eta)).collect();
            let q = field(e, xi, eta, geo.map(xi, eta));
            for k in 0..n_t {
                for l in 0..n_t {
                    gram[(k, l)] += wdet * vals[k] * vals[l];
                }
                for c in 0..l_comp {
                    rhs[(k, c)] += wdet * vals[k] * q.coeffs()[c];
                }
            }
        }
        let lu = gram.lu();
        let sol = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Assembly(format!("singular strain mass matrix on element {e}")))?;
        for k in 0..n_t {
            let i = sys.zeta(e, k);
            for c in 0..l_comp {
                out[l_comp * i + c] = sol[(k, c)];
            }
        }
    }
    Ok(out)
}

/// Nodal interpolation into the strain space: coefficients are the field
/// values at the tensor Gauss points.
pub fn interpolate_j_hp(
    sys: &DofSystem,
    mut field: impl FnMut(usize, f64, f64, Point2) -> DevTensor,
) -> Vec<f64> {
    let l_comp = Dim::Two.basis_len();
    let mut out = vec![0.0; l_comp * sys.n_strain];
    for e in 0..sys.mesh.n_elements() {
        let geo = sys.mesh.geometry(e);
        for k in 0..sys.n_strain_nodes(e) {
            let (xi, eta) = sys.strain_node_ref(e, k);
            let q = field(e, xi, eta, geo.map(xi, eta));
            let i = sys.zeta(e, k);
            out[l_comp * i..l_comp * i + l_comp].copy_from_slice(q.coeffs());
        }
    }
    out
}

/// Energy (Galerkin) projection onto the displacement space: solves
/// A x = r with r_(ik) = (C eps(v), eps(e_k theta_i)).
pub fn project_i_hp(
    sys: &DofSystem,
    saddle: &SaddleSystem,
    v: &VectorField,
    material: &MaterialLaw,
) -> Result<Vec<f64>> {
    let rhs = elastic_rhs_for_field(sys, v, material);
    crate::linalg::factor_solve(&saddle.a_block, &rhs)
}

/// Assembles (C eps(v), eps(e_k theta_i)) for a smooth field v.
pub fn elastic_rhs_for_field(sys: &DofSystem, v: &VectorField, material: &MaterialLaw) -> Vec<f64> {
    let mesh = &sys.mesh;
    let mut rhs = vec![0.0; 2 * sys.n_displacement];
    for e in 0..mesh.n_elements() {
        let p = mesh.degree(e);
        let geo = mesh.geometry(e);
        let lob = sys.lobatto_basis(e);
        let rule = GaussRule2d::with_points(elevated_points(p) + 2);
        let n_disp = (p + 1) * (p + 1);
        let mut r_nodal = vec![0.0; 2 * n_disp];
        for (&(xi, eta), &w) in rule.points.iter().zip(&rule.weights) {
            let (inv_t, det) = geo.jacobian_inv_t(xi, eta);
            let wdet = w * det.abs();
            let x = geo.map(xi, eta);
            let stress = crate::tensors::apply_c(&v.strain(x), material);
            let dx = lob.eval_deriv_all(xi);
            let dy = lob.eval_deriv_all(eta);
            let vx = lob.eval_all(xi);
            let vy = lob.eval_all(eta);
            for a in 0..n_disp {
                let (i, j) = (a % (p + 1), a / (p + 1));
                let g_ref = [dx[i] * vy[j], vx[i] * dy[j]];
                let g = [
                    inv_t[0][0] * g_ref[0] + inv_t[0][1] * g_ref[1],
                    inv_t[1][0] * g_ref[0] + inv_t[1][1] * g_ref[1],
                ];
                for k in 0..2 {
                    // (sigma, eps(e_k N_a)) = sigma_k. G_a by symmetry
                    let val = stress.get(k, 0) * g[0] + stress.get(k, 1) * g[1];
                    r_nodal[2 * a + k] += wdet * val;
                }
            }
        }
        for a in 0..n_disp {
            for &(ga, wa) in sys.displacement_node(e, a) {
                for k in 0..2 {
                    rhs[2 * ga + k] += wa * r_nodal[2 * a + k];
                }
            }
        }
    }
    rhs
}

/// Symmetric gradient of a discrete displacement field at reference
/// coordinates of an element.
pub fn strain_at(sys: &DofSystem, a: &[f64], elem: usize, xi: f64, eta: f64) -> SymTensor {
    let g = sys.eval_displacement_gradient_ref(a, elem, xi, eta);
    SymTensor::from_2d(g[0][0], g[1][1], 0.5 * (g[0][1] + g[1][0]))
}

/// L2 inner product of two strain-space coefficient fields.
pub fn strain_l2_inner(
    sys: &DofSystem,
    (c1, basis1): (&[f64], StrainBasis),
    (c2, basis2): (&[f64], StrainBasis),
) -> f64 {
    let mesh = &sys.mesh;
    let mut acc = 0.0;
    for e in 0..mesh.n_elements() {
        let p = mesh.degree(e);
        let geo = mesh.geometry(e);
        let rule = GaussRule2d::with_points(elevated_points(p));
        for (&(xi, eta), &w) in rule.points.iter().zip(&rule.weights) {
            let q1 = sys.eval_strain_field_ref(c1, basis1, e, xi, eta);
            let q2 = sys.eval_strain_field_ref(c2, basis2, e, xi, eta);
            acc += w * geo.jacobian_det(xi, eta).abs() * q1.dot(&q2);
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hp_spaces::DofSystem;
    use crate::linalg::smallest_eigenvalue_dense;
    use crate::mesh::{unit_square, HpMesh, SquareSides};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;

    fn material() -> MaterialLaw {
        MaterialLaw::new(1.0, 1.0, 1.0, 1.0).unwrap()
    }

    fn mixed_mesh() -> HpMesh {
        let mut m = unit_square(2, 1, SquareSides::LEFT);
        m.degrees = vec![1, 2, 2, 3];
        m
    }

    #[test]
    fn zero_loads_give_zero_vector() {
        let sys = DofSystem::new(&mixed_mesh(), 1.0).unwrap();
        let saddle = assemble_blocks(&sys, &material(), &Loads::zero()).unwrap();
        assert!(saddle.load.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_element_p1_blocks() {
        let mesh = unit_square(1, 1, SquareSides::LEFT);
        let sys = DofSystem::new(&mesh, 1.0).unwrap();
        let m = material();
        let saddle = assemble_blocks(&sys, &m, &Loads::zero()).unwrap();
        // D = |T| I_2 = I_2
        assert_eq!(saddle.d_diag.len(), 2);
        assert_abs_diff_eq!(saddle.d_diag[0], 1.0, epsilon = 1e-13);
        assert_abs_diff_eq!(saddle.d_diag[1], 1.0, epsilon = 1e-13);
        // C = (2 mu + k) |T| I_2 = 3 I_2
        let c = saddle.c_block.to_dense();
        assert_abs_diff_eq!(c[(0, 0)], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[(1, 1)], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[(0, 1)], 0.0, epsilon = 1e-13);
    }

    #[test]
    fn blocks_are_symmetric() {
        let sys = DofSystem::new(&mixed_mesh(), 1.0).unwrap();
        let saddle = assemble_blocks(&sys, &material(), &Loads::zero()).unwrap();
        let tol_a = 1e-12 * saddle.a_block.max_abs();
        let tol_c = 1e-12 * saddle.c_block.max_abs();
        assert!(saddle.a_block.symmetry_error() <= tol_a);
        assert!(saddle.c_block.symmetry_error() <= tol_c);
    }

    #[test]
    fn blocks_are_positive_definite() {
        let sys = DofSystem::new(&mixed_mesh(), 1.0).unwrap();
        let saddle = assemble_blocks(&sys, &material(), &Loads::zero()).unwrap();
        let lam_a = smallest_eigenvalue_dense(&saddle.a_block.to_dense()).unwrap();
        let lam_c = smallest_eigenvalue_dense(&saddle.c_block.to_dense()).unwrap();
        assert!(lam_a > 0.0, "A must be positive definite, lambda_min = {lam_a}");
        assert!(lam_c > 0.0, "C must be positive definite, lambda_min = {lam_c}");
    }

    #[test]
    fn form_is_positive_on_random_pairs() {
        let sys = DofSystem::new(&mixed_mesh(), 1.0).unwrap();
        let saddle = assemble_blocks(&sys, &material(), &Loads::zero()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a: Vec<f64> = (0..saddle.dm).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..saddle.ln).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v = bilinear_a(&saddle, (&a, &b), (&a, &b));
            assert!(v > 0.0, "V-ellipticity violated: a(x, x) = {v}");
        }
    }

    #[test]
    fn coupling_sign_check() {
        // a((v,0),(0,mu)) = (C eps(v), -mu) must equal -(v^T B mu).
        let sys = DofSystem::new(&mixed_mesh(), 1.0).unwrap();
        let m = material();
        let saddle = assemble_blocks(&sys, &m, &Loads::zero()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..saddle.dm).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mu: Vec<f64> = (0..saddle.ln).map(|_| rng.random_range(-1.0..1.0)).collect();
        // through the form evaluation
        let zero_a = vec![0.0; saddle.dm];
        let zero_b = vec![0.0; saddle.ln];
        let via_form = bilinear_a(&saddle, (&a, &zero_b), (&zero_a, &mu));
        // by direct quadrature of (C eps(v), -mu)
        let mesh = &sys.mesh;
        let mut direct = 0.0;
        for e in 0..mesh.n_elements() {
            let p = mesh.degree(e);
            let geo = mesh.geometry(e);
            let rule = GaussRule2d::with_points(elevated_points(p) + 1);
            for (&(xi, eta), &w) in rule.points.iter().zip(&rule.weights) {
                let eps = strain_at(&sys, &a, e, xi, eta);
                let stress = crate::tensors::apply_c(&eps, &m);
                let muv = sys
                    .eval_strain_field_ref(&mu, StrainBasis::Primal, e, xi, eta)
                    .reconstruct();
                direct -= w * geo.jacobian_det(xi, eta).abs() * stress.frob_dot(&muv);
            }
        }
        assert_abs_diff_eq!(via_form, direct, epsilon = 1e-10 * (1.0 + direct.abs()));
        // and against the stored B entries
        let mut bmu = vec![0.0; saddle.dm];
        saddle.b_block.matvec(&mu, &mut bmu);
        let vb: f64 = bmu.iter().zip(&a).map(|(x, y)| x * y).sum();
        assert_abs_diff_eq!(via_form, -vb, epsilon = 1e-11 * (1.0 + vb.abs()));
    }

    #[test]
    fn trace_free_strain_couples_without_volumetric_term() {
        // For v with div v = 0, q = dev eps(v) in the strain space and mu = 0:
        // a((v, q), (v, q)) reduces to the hardening term (H q, q).
        let mesh = unit_square(1, 1, SquareSides::LEFT);
        let sys = DofSystem::new(&mesh, 1.0).unwrap();
        let m = material();
        let saddle = assemble_blocks(&sys, &m, &Loads::zero()).unwrap();
        // divergence-free linear displacement: u = (y, x) has eps = [[0,1],[1,0]], tr = 0
        let field = VectorField {
            value: &|p| [p.y, p.x],
            gradient: &|_| [[0.0, 1.0], [1.0, 0.0]],
        };
        let a = project_i_hp(&sys, &saddle, &field, &m).unwrap();
        let q = interpolate_j_hp(&sys, |e, xi, eta, _| {
            crate::tensors::deviator(&strain_at(&sys, &a, e, xi, eta))
        });
        // a((v,q),(v,q)) = (C(eps - q), eps - q) + (H q, q); eps = q here, so
        // only (H q, q) = k |q|^2 survives.
        let val = bilinear_a(&saddle, (&a, &q), (&a, &q));
        let hq = strain_l2_inner(&sys, (&q, StrainBasis::Primal), (&q, StrainBasis::Primal));
        assert_abs_diff_eq!(val, m.hardening_k * hq, epsilon = 1e-10 * (1.0 + hq));
    }

    #[test]
    fn volume_load_matches_direct_quadrature() {
        let sys = DofSystem::new(&mixed_mesh(), 1.0).unwrap();
        let f = |_: Point2| [0.3, -0.7];
        let loads = Loads { volume: &f, traction: &|_| [0.0, 0.0] };
        let saddle = assemble_blocks(&sys, &material(), &loads).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..saddle.dm).map(|_| rng.random_range(-1.0..1.0)).collect();
        let via_l = linear_functional_l(&saddle, &a);
        // direct: integral of f . v_h with a finer rule
        let mesh = &sys.mesh;
        let mut direct = 0.0;
        for e in 0..mesh.n_elements() {
            let geo = mesh.geometry(e);
            let rule = GaussRule2d::with_points(elevated_points(mesh.degree(e)) + 2);
            for (&(xi, eta), &w) in rule.points.iter().zip(&rule.weights) {
                let u = sys.eval_displacement_ref(&a, e, xi, eta);
                let fv = f(geo.map(xi, eta));
                direct += w * geo.jacobian_det(xi, eta).abs() * (fv[0] * u[0] + fv[1] * u[1]);
            }
        }
        assert_abs_diff_eq!(via_l, direct, epsilon = 1e-11 * (1.0 + direct.abs()));
    }

    #[test]
    fn traction_only_on_neumann_edges() {
        // Traction on the right side; a bubble supported inside the
        // bottom-left element sees nothing of it.
        let mesh = unit_square(2, 2, SquareSides::LEFT);
        let sys = DofSystem::new(&mesh, 1.0).unwrap();
        let g = |p: Point2| if p.x > 0.99 { [1.0, 0.0] } else { [0.0, 0.0] };
        let loads = Loads { volume: &|_| [0.0, 0.0], traction: &g };
        let saddle = assemble_blocks(&sys, &material(), &loads).unwrap();
        // interior bubble of the left element: last dof block
        let mut a = vec![0.0; saddle.dm];
        let bubble = sys.displacement_node(0, 4)[0].0;
        a[2 * bubble] = 1.0;
        assert_abs_diff_eq!(linear_functional_l(&saddle, &a), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn p_hp_reproduces_strain_space_fields() {
        let sys = DofSystem::new(&mixed_mesh(), 1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let coeffs: Vec<f64> = (0..2 * sys.n_strain).map(|_| rng.random_range(-1.0..1.0)).collect();
        let projected = project_p_hp(&sys, |e, xi, eta, _| {
            sys.eval_strain_field_ref(&coeffs, StrainBasis::Primal, e, xi, eta)
        })
        .unwrap();
        for (p, c) in projected.iter().zip(&coeffs) {
            assert_abs_diff_eq!(p, c, epsilon = 1e-12);
        }
    }

    #[test]
    fn p_hp_of_constant_field() {
        let sys = DofSystem::new(&mixed_mesh(), 1.0).unwrap();
        let q = DevTensor::from_coeffs(Dim::Two, &[0.4, -0.9]);
        let projected = project_p_hp(&sys, |_, _, _, _| q).unwrap();
        for i in 0..sys.n_strain {
            assert_abs_diff_eq!(projected[2 * i], 0.4, epsilon = 1e-12);
            assert_abs_diff_eq!(projected[2 * i + 1], -0.9, epsilon = 1e-12);
        }
    }

    #[test]
    fn j_hp_reproduces_strain_space_fields_and_respects_bounds() {
        let sys = DofSystem::new(&mixed_mesh(), 1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let coeffs: Vec<f64> = (0..2 * sys.n_strain).map(|_| rng.random_range(-1.0..1.0)).collect();
        let interp = interpolate_j_hp(&sys, |e, xi, eta, _| {
            sys.eval_strain_field_ref(&coeffs, StrainBasis::Primal, e, xi, eta)
        });
        for (p, c) in interp.iter().zip(&coeffs) {
            assert_abs_diff_eq!(p, c, epsilon = 1e-12);
        }
        // pointwise bounded field keeps bounded node values
        let sigma = 0.8;
        let bounded = interpolate_j_hp(&sys, |_, xi, eta, _| {
            let s = sigma * (0.5 + 0.5 * (xi * eta));
            DevTensor::from_coeffs(Dim::Two, &[s, 0.0])
        });
        for i in 0..sys.n_strain {
            let norm = (bounded[2 * i].powi(2) + bounded[2 * i + 1].powi(2)).sqrt();
            assert!(norm <= sigma + 1e-12);
        }
    }

    #[test]
    fn i_hp_reproduces_discrete_fields() {
        let mesh = unit_square(2, 2, SquareSides::LEFT);
        let sys = DofSystem::new(&mesh, 1.0).unwrap();
        let m = material();
        let saddle = assemble_blocks(&sys, &m, &Loads::zero()).unwrap();
        // Take a discrete field, wrap it as a smooth field via evaluation,
        // and check the projection returns the same coefficients.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..saddle.dm).map(|_| rng.random_range(-1.0..1.0)).collect();
        let value = |x: Point2| {
            let (e, xi, eta) = sys.mesh.locate(x).unwrap();
            sys.eval_displacement_ref(&a, e, xi, eta)
        };
        let gradient = |x: Point2| {
            let (e, xi, eta) = sys.mesh.locate(x).unwrap();
            sys.eval_displacement_gradient_ref(&a, e, xi, eta)
        };
        let field = VectorField { value: &value, gradient: &gradient };
        let projected = project_i_hp(&sys, &saddle, &field, &m).unwrap();
        for (p, c) in projected.iter().zip(&a) {
            assert_abs_diff_eq!(p, c, epsilon = 1e-11);
        }
        // zero field projects to zero
        let zero = VectorField { value: &|_| [0.0, 0.0], gradient: &|_| [[0.0; 2]; 2] };
        let z = project_i_hp(&sys, &saddle, &zero, &m).unwrap();
        assert!(z.iter().all(|&v| v.abs() <= 1e-13));
    }

    #[test]
    fn stiffness_sparsity_matches_connectivity() {
        // Nonzeros of A may only couple dofs that share an element.
        let mesh = unit_square(2, 2, SquareSides::LEFT);
        let sys = DofSystem::new(&mesh, 1.0).unwrap();
        let saddle = assemble_blocks(&sys, &material(), &Loads::zero()).unwrap();
        let mut share = vec![std::collections::HashSet::new(); sys.n_displacement];
        for e in 0..mesh.n_elements() {
            let mut dofs = Vec::new();
            for a in 0..sys.n_displacement_nodes(e) {
                for &(g, _) in sys.displacement_node(e, a) {
                    dofs.push(g);
                }
            }
            for &i in &dofs {
                for &j in &dofs {
                    share[i].insert(j);
                }
            }
        }
        for r in 0..saddle.dm {
            let (cols, _) = saddle.a_block.row(r);
            for &c in cols {
                assert!(
                    share[r / 2].contains(&(c / 2)),
                    "spurious fill at ({r}, {c})"
                );
            }
        }
    }

    #[test]
    fn projection_operators_converge_at_first_order() {
        // Smooth non-polynomial targets on meshes h and h/2 with p = 1:
        // the L2 projection and the nodal interpolation of the strain field
        // halve their L2 errors, the energy projection halves its H1 error.
        let m = material();
        let smooth_dev = |x: Point2| {
            let s = (1.3 * x.x + 0.7 * x.y).sin();
            DevTensor::from_coeffs(Dim::Two, &[s, 0.5 * (2.0 * x.y).cos()])
        };
        let value = |x: Point2| {
            [
                (std::f64::consts::PI * x.x).sin() * (std::f64::consts::PI * x.y).sin(),
                x.x * (1.0 - x.x) * x.y * (1.0 - x.y),
            ]
        };
        let gradient = crate::analysis::manufactured::sine_bubble_gradient;
        let field = VectorField { value: &value, gradient: &gradient };

        let mut p_errors = Vec::new();
        let mut j_errors = Vec::new();
        let mut i_errors = Vec::new();
        for n in [4usize, 8] {
            let mesh = unit_square(n, 1, SquareSides::ALL);
            let sys = DofSystem::new(&mesh, 1.0).unwrap();
            let saddle = assemble_blocks(&sys, &m, &Loads::zero()).unwrap();

            let projected = project_p_hp(&sys, |_, _, _, x| smooth_dev(x)).unwrap();
            let interpolated = interpolate_j_hp(&sys, |_, _, _, x| smooth_dev(x));
            let coeffs_a = project_i_hp(&sys, &saddle, &field, &m).unwrap();

            // L2 errors of the strain-space approximations
            let l2_err = |coeffs: &[f64]| {
                let mut acc = 0.0;
                for e in 0..mesh.n_elements() {
                    let geo = mesh.geometry(e);
                    let rule = GaussRule2d::with_points(5);
                    for (&(xi, eta), &w) in rule.points.iter().zip(&rule.weights) {
                        let d = sys
                            .eval_strain_field_ref(coeffs, StrainBasis::Primal, e, xi, eta)
                            .sub(&smooth_dev(geo.map(xi, eta)));
                        acc += w * geo.jacobian_det(xi, eta).abs() * d.dot(&d);
                    }
                }
                acc.sqrt()
            };
            p_errors.push(l2_err(&projected));
            j_errors.push(l2_err(&interpolated));

            // H1 seminorm error of the displacement projection
            let mut acc = 0.0;
            for e in 0..mesh.n_elements() {
                let geo = mesh.geometry(e);
                let rule = GaussRule2d::with_points(5);
                for (&(xi, eta), &w) in rule.points.iter().zip(&rule.weights) {
                    let d = strain_at(&sys, &coeffs_a, e, xi, eta)
                        .sub(&field.strain(geo.map(xi, eta)));
                    acc += w * geo.jacobian_det(xi, eta).abs() * d.frob_dot(&d);
                }
            }
            i_errors.push(acc.sqrt());
        }
        for (name, errors) in
            [("P", &p_errors), ("J", &j_errors), ("I", &i_errors)]
        {
            let ratio = errors[0] / errors[1];
            assert!(
                (1.6..=2.6).contains(&ratio),
                "{name}: error ratio {ratio} out of the first-order window ({errors:?})"
            );
        }
    }

    #[test]
    fn discrete_inf_sup_identity() {
        // sup over (v, q) of (mu, q) / ||(v, q)|| equals ||mu|| and is
        // attained at (0, mu); random competitors never exceed it.
        let sys = DofSystem::new(&mixed_mesh(), 1.0).unwrap();
        let saddle = assemble_blocks(&sys, &material(), &Loads::zero()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let mu: Vec<f64> = (0..saddle.ln).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mu_norm = strain_l2_inner(&sys, (&mu, StrainBasis::Primal), (&mu, StrainBasis::Primal)).sqrt();
        // attained at (0, mu)
        let ratio_at_mu = mu_norm; // (mu, mu) / ||mu|| = ||mu||
        assert_abs_diff_eq!(
            strain_l2_inner(&sys, (&mu, StrainBasis::Primal), (&mu, StrainBasis::Primal)) / mu_norm,
            ratio_at_mu,
            epsilon = 1e-12 * mu_norm
        );
        for _ in 0..100 {
            let v: Vec<f64> = (0..saddle.dm).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q: Vec<f64> = (0..saddle.ln).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pairing = strain_l2_inner(&sys, (&mu, StrainBasis::Primal), (&q, StrainBasis::Primal));
            let v_h1 = {
                // ||v||_1^2 = |v|_1^2 + ||v||_0^2 >= |v|_1^2; the seminorm
                // suffices for the bound since it only enlarges the ratio
                // denominator when added.
                let mut tmp = vec![0.0; saddle.dm];
                saddle.a_block.matvec(&v, &mut tmp);
                let energy: f64 = tmp.iter().zip(&v).map(|(x, y)| x * y).sum();
                energy.max(0.0)
            };
            let q_norm2 = strain_l2_inner(&sys, (&q, StrainBasis::Primal), (&q, StrainBasis::Primal));
            let denom = (v_h1 + q_norm2).sqrt();
            if denom > 1e-12 {
                assert!(pairing / denom <= mu_norm * (1.0 + 1e-9));
            }
        }
    }
}
