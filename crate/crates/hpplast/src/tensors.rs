//! Algebra on symmetric and trace-free symmetric matrices.
//!
//! Plastic strain and multiplier values live in the space of trace-free
//! symmetric d x d matrices. That space has dimension L = (d-1)(d+2)/2 and
//! carries a fixed orthonormal basis (w.r.t. the Frobenius inner product),
//! so pointwise values are stored as length-L coefficient vectors and all
//! norms and inner products reduce to Euclidean operations.

use crate::error::{Error, Result};

/// Spatial dimension of the tensor algebra.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dim {
    Two,
    Three,
}

impl Dim {
    pub fn new(d: usize) -> Result<Self> {
        match d {
            2 => Ok(Dim::Two),
            3 => Ok(Dim::Three),
            _ => Err(Error::UnsupportedDimension(d)),
        }
    }

    pub fn d(self) -> usize {
        match self {
            Dim::Two => 2,
            Dim::Three => 3,
        }
    }

    /// Dimension L = (d-1)(d+2)/2 of the trace-free symmetric matrices.
    pub fn basis_len(self) -> usize {
        match self {
            Dim::Two => 2,
            Dim::Three => 5,
        }
    }
}

/// A symmetric d x d matrix, stored dense in the top-left block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymTensor {
    dim: Dim,
    a: [[f64; 3]; 3],
}

impl SymTensor {
    /// Builds from entries, checking symmetry exactly.
    pub fn new(dim: Dim, entries: &[&[f64]]) -> Result<Self> {
        let d = dim.d();
        let mut a = [[0.0; 3]; 3];
        for i in 0..d {
            for j in 0..d {
                a[i][j] = entries[i][j];
            }
        }
        for i in 0..d {
            for j in (i + 1)..d {
                if a[i][j] != a[j][i] {
                    return Err(Error::Mesh(format!(
                        "matrix not symmetric: a[{i}][{j}] = {} != a[{j}][{i}] = {}",
                        a[i][j], a[j][i]
                    )));
                }
            }
        }
        Ok(SymTensor { dim, a })
    }

    pub fn zero(dim: Dim) -> Self {
        SymTensor { dim, a: [[0.0; 3]; 3] }
    }

    pub fn identity(dim: Dim) -> Self {
        let mut t = Self::zero(dim);
        for i in 0..dim.d() {
            t.a[i][i] = 1.0;
        }
        t
    }

    /// 2x2 symmetric matrix [[xx, xy], [xy, yy]].
    pub fn from_2d(xx: f64, yy: f64, xy: f64) -> Self {
        let mut t = Self::zero(Dim::Two);
        t.a[0][0] = xx;
        t.a[1][1] = yy;
        t.a[0][1] = xy;
        t.a[1][0] = xy;
        t
    }

    /// Symmetric part (u e_k^T + e_k u^T)/2 of a rank-one matrix, used for
    /// strains of the form eps(e_k v) with grad v = g.
    pub fn sym_rank_one_2d(k: usize, g: [f64; 2]) -> Self {
        let mut t = Self::zero(Dim::Two);
        for j in 0..2 {
            t.a[k][j] += 0.5 * g[j];
            t.a[j][k] += 0.5 * g[j];
        }
        t
    }

    pub fn dim(&self) -> Dim {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i][j]
    }

    pub fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.a[i][j] = v;
        self.a[j][i] = v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim.d()).map(|i| self.a[i][i]).sum()
    }

    /// Frobenius inner product.
    pub fn frob_dot(&self, other: &SymTensor) -> f64 {
        let d = self.dim.d();
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += self.a[i][j] * other.a[i][j];
            }
        }
        s
    }

    pub fn frob_norm(&self) -> f64 {
        self.frob_dot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> SymTensor {
        let mut r = *self;
        for i in 0..3 {
            for j in 0..3 {
                r.a[i][j] *= s;
            }
        }
        r
    }

    pub fn add(&self, other: &SymTensor) -> SymTensor {
        let mut r = *self;
        for i in 0..3 {
            for j in 0..3 {
                r.a[i][j] += other.a[i][j];
            }
        }
        r
    }

    pub fn sub(&self, other: &SymTensor) -> SymTensor {
        self.add(&other.scale(-1.0))
    }
}

/// Element of the trace-free symmetric matrices, stored as coefficients
/// w.r.t. the orthonormal basis returned by [`basis_s`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DevTensor {
    dim: Dim,
    c: [f64; 5],
}

impl DevTensor {
    pub fn zero(dim: Dim) -> Self {
        DevTensor { dim, c: [0.0; 5] }
    }

    pub fn from_coeffs(dim: Dim, coeffs: &[f64]) -> Self {
        let mut c = [0.0; 5];
        c[..dim.basis_len()].copy_from_slice(&coeffs[..dim.basis_len()]);
        DevTensor { dim, c }
    }

    pub fn dim(&self) -> Dim {
        self.dim
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.c[..self.dim.basis_len()]
    }

    /// Euclidean norm of the coefficients; equals the Frobenius norm of the
    /// reconstructed matrix by orthonormality.
    pub fn frob_norm(&self) -> f64 {
        self.coeffs().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &DevTensor) -> f64 {
        self.coeffs()
            .iter()
            .zip(other.coeffs())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn scale(&self, s: f64) -> DevTensor {
        let mut r = *self;
        for x in r.c.iter_mut() {
            *x *= s;
        }
        r
    }

    pub fn add(&self, other: &DevTensor) -> DevTensor {
        let mut r = *self;
        for (x, y) in r.c.iter_mut().zip(other.c.iter()) {
            *x += y;
        }
        r
    }

    pub fn sub(&self, other: &DevTensor) -> DevTensor {
        self.add(&other.scale(-1.0))
    }

    /// Reconstructs the matrix sum_k c_k Phi_k.
    pub fn reconstruct(&self) -> SymTensor {
        let basis = basis_s(self.dim.d()).expect("dim validated at construction");
        let mut t = SymTensor::zero(self.dim);
        for (ck, phi) in self.coeffs().iter().zip(basis.iter()) {
            t = t.add(&phi.scale(*ck));
        }
        t
    }
}

/// Isotropic material data: Hooke elasticity, scalar kinematic hardening and
/// constant yield stress.
#[derive(Debug, Clone, Copy)]
pub struct MaterialLaw {
    pub lame_lambda: f64,
    pub lame_mu: f64,
    pub hardening_k: f64,
    pub yield_sigma_y: f64,
}

impl MaterialLaw {
    pub fn new(lame_lambda: f64, lame_mu: f64, hardening_k: f64, yield_sigma_y: f64) -> Result<Self> {
        if !(lame_lambda >= 0.0) {
            return Err(Error::Material(format!("lame_lambda = {lame_lambda} must be >= 0")));
        }
        if !(lame_mu > 0.0) {
            return Err(Error::Material(format!("lame_mu = {lame_mu} must be > 0")));
        }
        if !(hardening_k > 0.0) {
            return Err(Error::Material(format!("hardening_k = {hardening_k} must be > 0")));
        }
        if !(yield_sigma_y > 0.0) {
            return Err(Error::Material(format!("sigma_y = {yield_sigma_y} must be > 0")));
        }
        Ok(MaterialLaw { lame_lambda, lame_mu, hardening_k, yield_sigma_y })
    }

    /// Ellipticity constant of the elasticity tensor, c_e = 2 mu.
    pub fn c_e(&self) -> f64 {
        2.0 * self.lame_mu
    }

    /// Ellipticity constant of the hardening tensor, c_h = k.
    pub fn c_h(&self) -> f64 {
        self.hardening_k
    }
}

/// Orthonormal basis of the trace-free symmetric d x d matrices.
pub fn basis_s(d: usize) -> Result<Vec<SymTensor>> {
    let s = 1.0 / 2.0_f64.sqrt();
    match d {
        2 => {
            let mut p1 = SymTensor::zero(Dim::Two);
            p1.set_sym(0, 0, s);
            p1.set_sym(1, 1, -s);
            let mut p2 = SymTensor::zero(Dim::Two);
            p2.set_sym(0, 1, s);
            Ok(vec![p1, p2])
        }
        3 => {
            let t = 1.0 / 6.0_f64.sqrt();
            let mut p1 = SymTensor::zero(Dim::Three);
            p1.set_sym(0, 0, s);
            p1.set_sym(1, 1, -s);
            let mut p2 = SymTensor::zero(Dim::Three);
            p2.set_sym(0, 0, t);
            p2.set_sym(1, 1, t);
            p2.set_sym(2, 2, -2.0 * t);
            let mut p3 = SymTensor::zero(Dim::Three);
            p3.set_sym(0, 1, s);
            let mut p4 = SymTensor::zero(Dim::Three);
            p4.set_sym(0, 2, s);
            let mut p5 = SymTensor::zero(Dim::Three);
            p5.set_sym(1, 2, s);
            Ok(vec![p1, p2, p3, p4, p5])
        }
        _ => Err(Error::UnsupportedDimension(d)),
    }
}

/// Deviatoric part t - tr(t)/d I, expressed in basis coefficients.
pub fn deviator(t: &SymTensor) -> DevTensor {
    let dim = t.dim();
    let d = dim.d();
    let tr = t.trace() / d as f64;
    let mut dev = *t;
    for i in 0..d {
        dev.a[i][i] -= tr;
    }
    // Projection onto the orthonormal basis.
    let basis = basis_s(d).expect("dim is valid");
    let mut c = [0.0; 5];
    for (k, phi) in basis.iter().enumerate() {
        c[k] = dev.frob_dot(phi);
    }
    DevTensor { dim, c }
}

/// Applies the isotropic elasticity tensor: C e = 2 mu e + lambda tr(e) I.
pub fn apply_c(e: &SymTensor, m: &MaterialLaw) -> SymTensor {
    let tr = e.trace();
    let mut r = e.scale(2.0 * m.lame_mu);
    for i in 0..e.dim().d() {
        r.a[i][i] += m.lame_lambda * tr;
    }
    r
}

/// Applies the hardening tensor: H q = k q.
pub fn apply_h(q: &DevTensor, m: &MaterialLaw) -> DevTensor {
    q.scale(m.hardening_k)
}

/// Pointwise plastic dissipation density sigma_y |q|_F.
pub fn psi_density(q: &DevTensor, sigma_y: f64) -> f64 {
    sigma_y * q.frob_norm()
}
