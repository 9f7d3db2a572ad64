//! Tensor-product Gauss rules on the reference square and the mesh-dependent
//! quadrature functional behind the discrete plasticity functional.

use crate::basis1d::gauss_legendre;
use crate::mesh::{HpMesh, Point2};

/// Tensor-product Gauss-Legendre rule with n points per direction on
/// [-1,1]^2. Points are ordered x-fastest, matching the local node numbering
/// of the strain space.
#[derive(Debug, Clone)]
pub struct GaussRule2d {
    pub points: Vec<(f64, f64)>,
    pub weights: Vec<f64>,
}

impl GaussRule2d {
    pub fn with_points(n: usize) -> Self {
        let (x, w) = gauss_legendre(n);
        let mut points = Vec::with_capacity(n * n);
        let mut weights = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                points.push((x[i], x[j]));
                weights.push(w[i] * w[j]);
            }
        }
        GaussRule2d { points, weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Integrates f over the reference square.
    pub fn integrate_ref(&self, mut f: impl FnMut(f64, f64) -> f64) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(&(xi, eta), &w)| w * f(xi, eta))
            .sum()
    }
}

/// Quadrature degree used for all bilinear-form and load integrals: p + 2
/// points per direction, comfortably above the p points the plasticity
/// functional prescribes.
pub fn elevated_points(p: usize) -> usize {
    p + 2
}

/// Local quadrature functional: the midpoint value scaled by |T| for p_T = 1,
/// and the mapped Gauss sum over the p_T^2 points otherwise.
pub fn qhp_local(mesh: &HpMesh, elem: usize, mut f: impl FnMut(Point2) -> f64) -> f64 {
    let geo = mesh.geometry(elem);
    let p = mesh.degree(elem);
    if p == 1 {
        geo.measure() * f(geo.map(0.0, 0.0))
    } else {
        let rule = GaussRule2d::with_points(p);
        rule.points
            .iter()
            .zip(&rule.weights)
            .map(|(&(xi, eta), &w)| {
                w * geo.jacobian_det(xi, eta).abs() * f(geo.map(xi, eta))
            })
            .sum()
    }
}

/// Global quadrature functional: sum of the local ones.
pub fn qhp_global(mesh: &HpMesh, mut f: impl FnMut(Point2) -> f64) -> f64 {
    (0..mesh.n_elements()).map(|e| qhp_local(mesh, e, &mut f)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{unit_square, SquareSides};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn tensor_rule_weight_sum() {
        for n in 1..=6 {
            let rule = GaussRule2d::with_points(n);
            assert_eq!(rule.len(), n * n);
            let s: f64 = rule.weights.iter().sum();
            assert_abs_diff_eq!(s, 4.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn tensor_rule_integrates_x2y2() {
        let rule = GaussRule2d::with_points(2);
        let v = rule.integrate_ref(|x, y| x * x * y * y);
        assert_abs_diff_eq!(v, 4.0 / 9.0, epsilon = 1e-14);
    }

    #[test]
    fn tensor_rule_exactness_random_polynomials() {
        // Random polynomials of per-variable degree 2n-1 must be integrated
        // exactly; the reference integral is the product of 1D moments.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for n in 1..=8 {
            let rule = GaussRule2d::with_points(n);
            let deg = 2 * n - 1;
            let coeffs: Vec<f64> = (0..(deg + 1) * (deg + 1))
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let poly = |x: f64, y: f64| {
                let mut acc = 0.0;
                let mut yp = 1.0;
                for j in 0..=deg {
                    let mut xp = 1.0;
                    for i in 0..=deg {
                        acc += coeffs[j * (deg + 1) + i] * xp * yp;
                        xp *= x;
                    }
                    yp *= y;
                }
                acc
            };
            let moment = |k: usize| if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            let mut exact = 0.0;
            for j in 0..=deg {
                for i in 0..=deg {
                    exact += coeffs[j * (deg + 1) + i] * moment(i) * moment(j);
                }
            }
            let quad = rule.integrate_ref(poly);
            assert_abs_diff_eq!(quad, exact, epsilon = 1e-12 * (1.0 + exact.abs()));
        }
    }

    #[test]
    fn qhp_constant_gives_measure() {
        for p in [1, 2, 3] {
            let mesh = unit_square(2, p, SquareSides::LEFT);
            for e in 0..mesh.n_elements() {
                let v = qhp_local(&mesh, e, |_| 1.0);
                assert_abs_diff_eq!(v, 0.25, epsilon = 1e-13);
            }
            assert_abs_diff_eq!(qhp_global(&mesh, |_| 1.0), 1.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn qhp_additive_under_refinement() {
        let mesh = unit_square(2, 1, SquareSides::LEFT);
        let fine = mesh.refine_uniform();
        assert_abs_diff_eq!(
            qhp_global(&mesh, |_| 1.0),
            qhp_global(&fine, |_| 1.0),
            epsilon = 1e-13
        );
    }

    #[test]
    fn qhp_exact_for_linear_field_p2() {
        let mesh = unit_square(3, 2, SquareSides::LEFT);
        let f = |p: Point2| 2.0 * p.x - 0.5 * p.y + 1.0;
        // Integral over the unit square: 2*1/2 - 0.5*1/2 + 1 = 1.75
        assert_abs_diff_eq!(qhp_global(&mesh, f), 1.75, epsilon = 1e-13);
    }

    #[test]
    fn qhp_nonnegative_for_nonnegative_integrand() {
        let mesh = unit_square(2, 3, SquareSides::LEFT);
        let v = qhp_global(&mesh, |p| (p.x - 0.3).abs() + p.y * p.y);
        assert!(v >= 0.0);
    }
}
