//! One-dimensional polynomial tools: Legendre evaluation, Gauss and
//! Gauss-Lobatto node computation, and barycentric Lagrange bases.

use nalgebra::DMatrix;

/// Evaluates the Legendre polynomial P_n and its derivative at x.
pub fn legendre_with_deriv(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let mut p_prev = 1.0;
    let mut p = x;
    for k in 1..n {
        let kf = k as f64;
        let p_next = ((2.0 * kf + 1.0) * x * p - kf * p_prev) / (kf + 1.0);
        p_prev = p;
        p = p_next;
    }
    // (1 - x^2) P_n' = n (P_{n-1} - x P_n)
    let dp = if (1.0 - x * x).abs() > 1e-30 {
        n as f64 * (p_prev - x * p) / (1.0 - x * x)
    } else {
        // At the endpoints: P_n'(+-1) = (+-1)^{n-1} n(n+1)/2
        let sign = if x > 0.0 { 1.0 } else { (-1.0f64).powi(n as i32 - 1) };
        sign * (n * (n + 1)) as f64 / 2.0
    };
    (p, dp)
}

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1].
///
/// Eigenvalues of the symmetric Jacobi matrix give initial nodes, one Newton
/// step on P_n sharpens them, and weights come from 2 / ((1-x^2) P_n'(x)^2).
/// The rule is symmetrized so that nodes appear in exact +- pairs.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one Gauss point");
    if n == 1 {
        return (vec![0.0], vec![2.0]);
    }
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = i as f64 / ((4 * i * i - 1) as f64).sqrt();
        jacobi[(i, i - 1)] = b;
        jacobi[(i - 1, i)] = b;
    }
    let eigen = jacobi.symmetric_eigenvalues();
    let mut nodes: Vec<f64> = eigen.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());

    for x in nodes.iter_mut() {
        let (p, dp) = legendre_with_deriv(n, *x);
        *x -= p / dp;
    }
    // Enforce exact symmetry of the node set.
    for i in 0..n / 2 {
        let avg = 0.5 * (nodes[n - 1 - i] - nodes[i]);
        nodes[i] = -avg;
        nodes[n - 1 - i] = avg;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }

    let mut weights = vec![0.0; n];
    for (x, w) in nodes.iter().zip(weights.iter_mut()) {
        let (_, dp) = legendre_with_deriv(n, *x);
        *w = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    for i in 0..n / 2 {
        let avg = 0.5 * (weights[i] + weights[n - 1 - i]);
        weights[i] = avg;
        weights[n - 1 - i] = avg;
    }
    (nodes, weights)
}

/// Gauss-Lobatto-Legendre nodes for polynomial degree p (p + 1 nodes
/// including the endpoints). Interior nodes are the roots of P_p'.
pub fn gauss_lobatto(p: usize) -> Vec<f64> {
    assert!(p >= 1);
    let mut nodes = Vec::with_capacity(p + 1);
    nodes.push(-1.0);
    for j in 1..p {
        // Chebyshev-Lobatto initial guess, then Newton on P_p'.
        let mut x = -(std::f64::consts::PI * j as f64 / p as f64).cos();
        for _ in 0..100 {
            let (pp, dp) = legendre_with_deriv(p, x);
            // P_p'' from the Legendre ODE (valid away from +-1).
            let ddp = (2.0 * x * dp - (p * (p + 1)) as f64 * pp) / (1.0 - x * x);
            let step = dp / ddp;
            x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        nodes.push(x);
    }
    nodes.push(1.0);
    // Symmetrize the interior nodes.
    let n = nodes.len();
    for i in 0..n / 2 {
        let avg = 0.5 * (nodes[n - 1 - i] - nodes[i]);
        nodes[i] = -avg;
        nodes[n - 1 - i] = avg;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    nodes
}

/// Barycentric Lagrange basis on a fixed set of distinct nodes.
#[derive(Debug, Clone)]
pub struct Lagrange1d {
    nodes: Vec<f64>,
    bary: Vec<f64>,
}

impl Lagrange1d {
    pub fn new(nodes: Vec<f64>) -> Self {
        let n = nodes.len();
        let mut bary = vec![1.0; n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    bary[i] /= nodes[i] - nodes[j];
                }
            }
        }
        Lagrange1d { nodes, bary }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Value of basis function i at x.
    pub fn eval(&self, i: usize, x: f64) -> f64 {
        // Exact Kronecker property when x hits a node.
        for (j, &xj) in self.nodes.iter().enumerate() {
            if x == xj {
                return if i == j { 1.0 } else { 0.0 };
            }
        }
        let mut num = self.bary[i];
        for (j, &xj) in self.nodes.iter().enumerate() {
            if j != i {
                num *= x - xj;
            }
        }
        num
    }

    /// Derivative of basis function i at x.
    pub fn eval_deriv(&self, i: usize, x: f64) -> f64 {
        let n = self.nodes.len();
        // l_i'(x) = sum_{m != i} prod_{j != i, m} (x - x_j) * bary_i
        let mut acc = 0.0;
        for m in 0..n {
            if m == i {
                continue;
            }
            let mut term = self.bary[i];
            for (j, &xj) in self.nodes.iter().enumerate() {
                if j != i && j != m {
                    term *= x - xj;
                }
            }
            acc += term;
        }
        acc
    }

    /// Values of all basis functions at x.
    pub fn eval_all(&self, x: f64) -> Vec<f64> {
        (0..self.len()).map(|i| self.eval(i, x)).collect()
    }

    pub fn eval_deriv_all(&self, x: f64) -> Vec<f64> {
        (0..self.len()).map(|i| self.eval_deriv(i, x)).collect()
    }
}
