//! Discrete spaces: the nodal strain basis at tensor Gauss points, its
//! biorthogonal dual family, and the conforming displacement basis.
//!
//! Strain and multiplier fields are elementwise polynomials of degree
//! p_T - 1 per variable with nodes at the p_T^2 tensor Gauss points; the
//! index map `zeta` flattens (local node, element) pairs into a global node
//! numbering. Displacements use tensor Gauss-Lobatto shape functions of
//! degree p_T with shared vertex/edge unknowns; an edge between elements of
//! different degree carries the smaller degree and the higher-order side is
//! constrained by interpolation, which keeps the space conforming.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::basis1d::{gauss_lobatto, Lagrange1d};
use crate::error::{Error, Result};
use crate::mesh::{BoundaryTag, GeometryMap, HpMesh, Point2};
use crate::quadrature::{elevated_points, GaussRule2d};
use crate::tensors::{DevTensor, Dim};

/// Which of the two strain-space families a coefficient vector refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrainBasis {
    /// Nodal Gauss-point Lagrange basis.
    Primal,
    /// Biorthogonal dual basis.
    Dual,
}

/// One displacement local node: linear combination of global scalar dofs.
/// Empty for nodes pinned by the Dirichlet condition.
pub type NodeDofs = Vec<(usize, f64)>;

/// Basis and dof bookkeeping for one mesh.
#[derive(Debug, Clone)]
pub struct DofSystem {
    pub mesh: HpMesh,
    /// zeta: global strain node of (element, local k) is offset[e] + k.
    strain_offsets: Vec<usize>,
    /// Total strain node count N.
    pub n_strain: usize,
    /// D_i = (phi_i, 1).
    pub d_weights: Vec<f64>,
    /// sigma_i = D_i^{-1} (sigma_y, phi_i); equals sigma_y for the constant
    /// yield stress this crate supports.
    pub sigma_weights: Vec<f64>,
    /// Per element: c with dual_j = sum_k c[(j, k)] phi_k on that element.
    pub dual_coeffs: Vec<DMatrix<f64>>,
    /// Scalar displacement dof count M.
    pub n_displacement: usize,
    /// Per element, per local Lobatto node (x-fastest grid): global dofs.
    elem_displacement: Vec<Vec<NodeDofs>>,
    /// 1D Lagrange bases at Gauss nodes, per degree p (strain, degree p-1).
    gauss_lagrange: HashMap<usize, Lagrange1d>,
    /// 1D Lagrange bases at Lobatto nodes, per degree p (displacement).
    lobatto_lagrange: HashMap<usize, Lagrange1d>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct EdgeKey(usize, usize);

impl EdgeKey {
    fn new(a: usize, b: usize) -> Self {
        EdgeKey(a.min(b), a.max(b))
    }
}

struct EdgeData {
    degree: usize,
    dirichlet: bool,
    /// Global ids of the degree-1 interior edge dofs, ordered along the
    /// canonical direction (from the smaller to the larger vertex index).
    dofs: Vec<usize>,
}

impl DofSystem {
    pub fn new(mesh: &HpMesh, sigma_y: f64) -> Result<DofSystem> {
        mesh.validate()?;
        let mesh = mesh.clone();
        let n_elem = mesh.n_elements();

        // --- strain space ---------------------------------------------------
        let mut strain_offsets = Vec::with_capacity(n_elem);
        let mut n_strain = 0;
        for e in 0..n_elem {
            strain_offsets.push(n_strain);
            n_strain += mesh.degree(e) * mesh.degree(e);
        }

        let mut gauss_lagrange = HashMap::new();
        let mut lobatto_lagrange = HashMap::new();
        for &p in mesh.degrees.iter() {
            gauss_lagrange.entry(p).or_insert_with(|| {
                let (nodes, _) = crate::basis1d::gauss_legendre(p);
                Lagrange1d::new(nodes)
            });
            lobatto_lagrange
                .entry(p)
                .or_insert_with(|| Lagrange1d::new(gauss_lobatto(p)));
        }

        let mut d_weights = vec![0.0; n_strain];
        let mut dual_coeffs = Vec::with_capacity(n_elem);
        for e in 0..n_elem {
            let p = mesh.degree(e);
            let geo = mesh.geometry(e);
            let lag = &gauss_lagrange[&p];
            let rule = GaussRule2d::with_points(elevated_points(p));
            let n_t = p * p;
            let mut d_loc = vec![0.0; n_t];
            for (&(xi, eta), &w) in rule.points.iter().zip(&rule.weights) {
                let det = geo.jacobian_det(xi, eta).abs();
                let vx = lag.eval_all(xi);
                let vy = lag.eval_all(eta);
                for (k, dk) in d_loc.iter_mut().enumerate() {
                    *dk += w * det * vx[k % p] * vy[k / p];
                }
            }
            for (k, &dk) in d_loc.iter().enumerate() {
                if dk <= 0.0 {
                    return Err(Error::Assembly(format!(
                        "non-positive weight D = {dk:.3e} at node {k} of element {e}"
                    )));
                }
                d_weights[strain_offsets[e] + k] = dk;
            }
            dual_coeffs.push(build_biorthogonal(&geo, p, lag)?);
        }

        // sigma_y is constant, so sigma_i = D_i^{-1} (sigma_y, phi_i) = sigma_y.
        let sigma_weights = vec![sigma_y; n_strain];

        // --- displacement space ---------------------------------------------
        let mut edges: HashMap<EdgeKey, EdgeData> = HashMap::new();
        for e in 0..n_elem {
            for le in 0..4 {
                let (a, b) = mesh.edge_nodes(e, le);
                let key = EdgeKey::new(a, b);
                let p = mesh.degree(e);
                edges
                    .entry(key)
                    .and_modify(|ed| ed.degree = ed.degree.min(p))
                    .or_insert(EdgeData { degree: p, dirichlet: false, dofs: Vec::new() });
            }
        }
        let mut dirichlet_vertex = vec![false; mesh.nodes.len()];
        for be in &mesh.boundary {
            if be.tag == BoundaryTag::Dirichlet {
                let (a, b) = mesh.edge_nodes(be.elem, be.local_edge);
                edges.get_mut(&EdgeKey::new(a, b)).unwrap().dirichlet = true;
                dirichlet_vertex[a] = true;
                dirichlet_vertex[b] = true;
            }
        }

        let mut n_displacement = 0;
        let mut vertex_dof = vec![usize::MAX; mesh.nodes.len()];
        let mut vertex_used = vec![false; mesh.nodes.len()];
        for e in 0..n_elem {
            for &v in &mesh.elements[e] {
                vertex_used[v] = true;
            }
        }
        for v in 0..mesh.nodes.len() {
            if vertex_used[v] && !dirichlet_vertex[v] {
                vertex_dof[v] = n_displacement;
                n_displacement += 1;
            }
        }
        // Deterministic edge ordering: sorted by key.
        let mut edge_keys: Vec<EdgeKey> = edges.keys().copied().collect();
        edge_keys.sort_by_key(|k| (k.0, k.1));
        for key in &edge_keys {
            let ed = edges.get_mut(key).unwrap();
            if !ed.dirichlet {
                for _ in 0..ed.degree.saturating_sub(1) {
                    ed.dofs.push(n_displacement);
                    n_displacement += 1;
                }
            }
        }
        let mut interior_start = Vec::with_capacity(n_elem);
        for e in 0..n_elem {
            interior_start.push(n_displacement);
            let p = mesh.degree(e);
            n_displacement += (p - 1) * (p - 1);
        }

        let mut elem_displacement = Vec::with_capacity(n_elem);
        for e in 0..n_elem {
            let p = mesh.degree(e);
            let gll = lobatto_lagrange[&p].nodes().to_vec();
            let mut nodes: Vec<NodeDofs> = Vec::with_capacity((p + 1) * (p + 1));
            for j in 0..=p {
                for i in 0..=p {
                    nodes.push(local_node_dofs(
                        &mesh,
                        e,
                        p,
                        i,
                        j,
                        &gll,
                        &edges,
                        &vertex_dof,
                        &interior_start,
                        &lobatto_lagrange,
                    )?);
                }
            }
            elem_displacement.push(nodes);
        }

        Ok(DofSystem {
            mesh,
            strain_offsets,
            n_strain,
            d_weights,
            sigma_weights,
            dual_coeffs,
            n_displacement,
            elem_displacement,
            gauss_lagrange,
            lobatto_lagrange,
        })
    }

    /// zeta: global strain node index of local node k on element e.
    pub fn zeta(&self, elem: usize, k: usize) -> usize {
        self.strain_offsets[elem] + k
    }

    /// Inverse of zeta: (element, local node) of a global strain node.
    pub fn zeta_inv(&self, i: usize) -> (usize, usize) {
        let e = match self.strain_offsets.binary_search(&i) {
            Ok(e) => e,
            Err(e) => e - 1,
        };
        (e, i - self.strain_offsets[e])
    }

    pub fn n_strain_nodes(&self, elem: usize) -> usize {
        let p = self.mesh.degree(elem);
        p * p
    }

    /// 1D Lagrange basis at the Gauss nodes of this element's degree.
    pub fn gauss_basis(&self, elem: usize) -> &Lagrange1d {
        &self.gauss_lagrange[&self.mesh.degree(elem)]
    }

    /// 1D Lagrange basis at the Lobatto nodes of this element's degree.
    pub fn lobatto_basis(&self, elem: usize) -> &Lagrange1d {
        &self.lobatto_lagrange[&self.mesh.degree(elem)]
    }

    /// Reference coordinates of local strain node k (tensor Gauss point).
    pub fn strain_node_ref(&self, elem: usize, k: usize) -> (f64, f64) {
        let p = self.mesh.degree(elem);
        let nodes = self.gauss_basis(elem).nodes();
        (nodes[k % p], nodes[k / p])
    }

    /// Value of the nodal strain basis function k at (xi, eta).
    pub fn eval_phi(&self, elem: usize, k: usize, xi: f64, eta: f64) -> f64 {
        let p = self.mesh.degree(elem);
        let lag = self.gauss_basis(elem);
        lag.eval(k % p, xi) * lag.eval(k / p, eta)
    }

    /// Value of the dual basis function j at (xi, eta) on its element.
    pub fn eval_dual(&self, elem: usize, j: usize, xi: f64, eta: f64) -> f64 {
        let n_t = self.n_strain_nodes(elem);
        let c = &self.dual_coeffs[elem];
        (0..n_t).map(|k| c[(j, k)] * self.eval_phi(elem, k, xi, eta)).sum()
    }

    /// Displacement dof couplings of local Lobatto node (x-fastest index a).
    pub fn displacement_node(&self, elem: usize, a: usize) -> &NodeDofs {
        &self.elem_displacement[elem][a]
    }

    pub fn n_displacement_nodes(&self, elem: usize) -> usize {
        let p = self.mesh.degree(elem);
        (p + 1) * (p + 1)
    }

    /// Evaluates a strain-space field given by flat coefficients (length
    /// L * N, node-major) at reference coordinates of an element.
    pub fn eval_strain_field_ref(
        &self,
        coeffs: &[f64],
        basis: StrainBasis,
        elem: usize,
        xi: f64,
        eta: f64,
    ) -> DevTensor {
        let dim = Dim::Two;
        let l = dim.basis_len();
        let n_t = self.n_strain_nodes(elem);
        let mut acc = vec![0.0; l];
        for k in 0..n_t {
            let shape = match basis {
                StrainBasis::Primal => self.eval_phi(elem, k, xi, eta),
                StrainBasis::Dual => self.eval_dual(elem, k, xi, eta),
            };
            if shape != 0.0 {
                let i = self.zeta(elem, k);
                for c in 0..l {
                    acc[c] += shape * coeffs[l * i + c];
                }
            }
        }
        DevTensor::from_coeffs(dim, &acc)
    }

    /// Evaluates a strain-space field at a physical point (element lookup).
    pub fn eval_strain_field(
        &self,
        coeffs: &[f64],
        basis: StrainBasis,
        x: Point2,
    ) -> Result<DevTensor> {
        let (elem, xi, eta) = self.mesh.locate(x)?;
        Ok(self.eval_strain_field_ref(coeffs, basis, elem, xi, eta))
    }

    /// Evaluates a displacement field (flat coefficients, length 2 M,
    /// d-interleaved) at reference coordinates of an element.
    pub fn eval_displacement_ref(&self, a: &[f64], elem: usize, xi: f64, eta: f64) -> [f64; 2] {
        let p = self.mesh.degree(elem);
        let lag = self.lobatto_basis(elem);
        let vx = lag.eval_all(xi);
        let vy = lag.eval_all(eta);
        let mut u = [0.0; 2];
        for local in 0..(p + 1) * (p + 1) {
            let shape = vx[local % (p + 1)] * vy[local / (p + 1)];
            if shape == 0.0 {
                continue;
            }
            for &(g, w) in &self.elem_displacement[elem][local] {
                u[0] += shape * w * a[2 * g];
                u[1] += shape * w * a[2 * g + 1];
            }
        }
        u
    }

    /// Physical gradient [du_k/dx_l] of a displacement field at reference
    /// coordinates of an element.
    pub fn eval_displacement_gradient_ref(
        &self,
        a: &[f64],
        elem: usize,
        xi: f64,
        eta: f64,
    ) -> [[f64; 2]; 2] {
        let p = self.mesh.degree(elem);
        let lag = self.lobatto_basis(elem);
        let geo = self.mesh.geometry(elem);
        let (inv_t, _) = geo.jacobian_inv_t(xi, eta);
        let vx = lag.eval_all(xi);
        let vy = lag.eval_all(eta);
        let dx = lag.eval_deriv_all(xi);
        let dy = lag.eval_deriv_all(eta);
        let mut grad = [[0.0; 2]; 2];
        for local in 0..(p + 1) * (p + 1) {
            let (i, j) = (local % (p + 1), local / (p + 1));
            let g_ref = [dx[i] * vy[j], vx[i] * dy[j]];
            let g_phys = [
                inv_t[0][0] * g_ref[0] + inv_t[0][1] * g_ref[1],
                inv_t[1][0] * g_ref[0] + inv_t[1][1] * g_ref[1],
            ];
            for &(g, w) in &self.elem_displacement[elem][local] {
                for l in 0..2 {
                    grad[0][l] += w * a[2 * g] * g_phys[l];
                    grad[1][l] += w * a[2 * g + 1] * g_phys[l];
                }
            }
        }
        grad
    }

    /// Converts dual-basis coefficients to primal-basis coefficients of the
    /// same field (both flat, length L * N).
    pub fn dual_to_primal(&self, coeffs: &[f64]) -> Vec<f64> {
        let l = Dim::Two.basis_len();
        let mut out = vec![0.0; coeffs.len()];
        for e in 0..self.mesh.n_elements() {
            let n_t = self.n_strain_nodes(e);
            let c = &self.dual_coeffs[e];
            for j in 0..n_t {
                let gj = self.zeta(e, j);
                for k in 0..n_t {
                    let gk = self.zeta(e, k);
                    for comp in 0..l {
                        out[l * gk + comp] += c[(j, k)] * coeffs[l * gj + comp];
                    }
                }
            }
        }
        out
    }
}

/// Dual coefficient matrix on one element: with the element mass matrix G
/// and the diagonal of weights D, the coefficients are c = D G^{-1}, so that
/// dual_j = sum_k c[(j,k)] phi_k satisfies (phi_i, dual_j) = delta_ij D_i.
pub fn build_biorthogonal(geo: &GeometryMap, p: usize, lag: &Lagrange1d) -> Result<DMatrix<f64>> {
    let n_t = p * p;
    let rule = GaussRule2d::with_points(elevated_points(p));
    let mut gram = DMatrix::<f64>::zeros(n_t, n_t);
    let mut d_loc = DMatrix::<f64>::zeros(n_t, n_t);
    for (&(xi, eta), &w) in rule.points.iter().zip(&rule.weights) {
        let det = geo.jacobian_det(xi, eta).abs();
        let vx = lag.eval_all(xi);
        let vy = lag.eval_all(eta);
        let vals: Vec<f64> = (0..n_t).map(|k| vx[k % p] * vy[k / p]).collect();
        for k in 0..n_t {
            d_loc[(k, k)] += w * det * vals[k];
            for l in 0..n_t {
                gram[(k, l)] += w * det * vals[k] * vals[l];
            }
        }
    }
    let Some(inv) = gram.lu().try_inverse() else {
        return Err(Error::Assembly(
            "singular element mass matrix while building the dual basis".into(),
        ));
    };
    Ok(d_loc * inv)
}

#[allow(clippy::too_many_arguments)]
fn local_node_dofs(
    mesh: &HpMesh,
    elem: usize,
    p: usize,
    i: usize,
    j: usize,
    gll: &[f64],
    edges: &HashMap<EdgeKey, EdgeData>,
    vertex_dof: &[usize],
    interior_start: &[usize],
    lobatto_lagrange: &HashMap<usize, Lagrange1d>,
) -> Result<NodeDofs> {
    let corners = mesh.elements[elem];
    let corner = match (i, j) {
        (0, 0) => Some(0),
        (x, 0) if x == p => Some(1),
        (x, y) if x == p && y == p => Some(2),
        (0, y) if y == p => Some(3),
        _ => None,
    };
    if let Some(c) = corner {
        let v = corners[c];
        return Ok(if vertex_dof[v] == usize::MAX {
            Vec::new()
        } else {
            vec![(vertex_dof[v], 1.0)]
        });
    }
    // Edge-interior nodes: local edge index and signed parameter along the
    // directed local edge.
    let edge = if j == 0 {
        Some((0usize, gll[i]))
    } else if i == p {
        Some((1, gll[j]))
    } else if j == p {
        Some((2, -gll[i]))
    } else if i == 0 {
        Some((3, -gll[j]))
    } else {
        None
    };
    if let Some((le, s)) = edge {
        let (va, vb) = mesh.edge_nodes(elem, le);
        let ed = &edges[&EdgeKey::new(va, vb)];
        if ed.dirichlet {
            return Ok(Vec::new());
        }
        // Canonical parameter runs from the smaller to the larger vertex id.
        let t = if va < vb { s } else { -s };
        if ed.degree == p {
            let enodes = &lobatto_lagrange[&p].nodes()[1..p];
            let m = enodes
                .iter()
                .position(|&x| (x - t).abs() < 1e-9)
                .ok_or_else(|| Error::Assembly("edge node mismatch".into()))?;
            return Ok(vec![(ed.dofs[m], 1.0)]);
        }
        // Constrained edge: interpolate the lower-degree trace at t.
        let pe = ed.degree;
        debug_assert_eq!(pe + 1, p, "neighbour degrees must be comparable");
        let lag_e = &lobatto_lagrange[&pe];
        let mut out = Vec::new();
        let (vmin, vmax) = (va.min(vb), va.max(vb));
        let w_start = lag_e.eval(0, t);
        let w_end = lag_e.eval(pe, t);
        if vertex_dof[vmin] != usize::MAX && w_start != 0.0 {
            out.push((vertex_dof[vmin], w_start));
        }
        if vertex_dof[vmax] != usize::MAX && w_end != 0.0 {
            out.push((vertex_dof[vmax], w_end));
        }
        for (m, &dof) in ed.dofs.iter().enumerate() {
            let w = lag_e.eval(m + 1, t);
            if w != 0.0 {
                out.push((dof, w));
            }
        }
        return Ok(out);
    }
    // Interior bubble node.
    let local = (j - 1) * (p - 1) + (i - 1);
    Ok(vec![(interior_start[elem] + local, 1.0)])
}
