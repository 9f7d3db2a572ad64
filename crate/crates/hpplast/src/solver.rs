//! Decoupled complementarity functions and the semismooth Newton solver.
//!
//! With the multiplier in the dual basis its admissibility decouples into
//! per-node Frobenius-ball constraints |mu_i| <= sigma_i, and the
//! variational inequality constraint at node i is equivalent to the root of
//!
//!   chi_i(q_i, mu_i) = max(sigma_i, |mu_i + rho q_i|) mu_i
//!                      - sigma_i (mu_i + rho q_i).
//!
//! Stacking the affine block rows and the chi rows gives a Lipschitz,
//! semismooth residual; each iteration picks one element of the Clarke
//! subdifferential and solves the resulting sparse linear system.

use nalgebra::DMatrix;

use crate::assembly::SaddleSystem;
use crate::error::{Error, Result};
use crate::hp_spaces::DofSystem;
use crate::linalg::{norm2, Factorized, Triplets};
use crate::tensors::{DevTensor, Dim};

/// Branch choice for the Clarke element at kink points |mu + rho q| = sigma.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KinkBranch {
    /// Treat the node as inactive (max evaluates to sigma_i).
    Inactive,
    /// Treat the node as active (max evaluates to the norm).
    Active,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    /// Regularization parameter of the complementarity function.
    pub rho: f64,
    /// Convergence tolerance on the Euclidean norm of the residual.
    pub tol: f64,
    pub max_iter: usize,
    pub kink_branch: KinkBranch,
    /// Step scaling; the plain local method uses 1.
    pub damping: f64,
    pub verbose: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            rho: 1.0,
            tol: 1e-10,
            max_iter: 100,
            kink_branch: KinkBranch::Inactive,
            damping: 1.0,
            verbose: false,
        }
    }
}

/// Coefficient triple of one Newton iterate.
#[derive(Debug, Clone)]
pub struct NewtonState {
    /// Displacement coefficients (length dM).
    pub a: Vec<f64>,
    /// Plastic strain coefficients in the primal basis (length LN).
    pub b: Vec<f64>,
    /// Multiplier coefficients in the dual basis (length LN).
    pub c: Vec<f64>,
}

impl NewtonState {
    pub fn zero(saddle: &SaddleSystem) -> Self {
        NewtonState {
            a: vec![0.0; saddle.dm],
            b: vec![0.0; saddle.ln],
            c: vec![0.0; saddle.ln],
        }
    }

    /// Per-node slice of the plastic strain coefficients.
    pub fn b_node(&self, i: usize) -> DevTensor {
        node_slice(&self.b, i)
    }

    /// Per-node slice of the multiplier coefficients.
    pub fn c_node(&self, i: usize) -> DevTensor {
        node_slice(&self.c, i)
    }
}

fn node_slice(v: &[f64], i: usize) -> DevTensor {
    let l = Dim::Two.basis_len();
    DevTensor::from_coeffs(Dim::Two, &v[l * i..l * i + l])
}

/// The per-node complementarity function.
pub fn chi(sigma_i: f64, rho: f64, q: &DevTensor, mu: &DevTensor) -> DevTensor {
    let w = mu.add(&q.scale(rho));
    let m = sigma_i.max(w.frob_norm());
    mu.scale(m).sub(&w.scale(sigma_i))
}

/// One Clarke-subdifferential element of chi at (q, mu): the pair of L x L
/// blocks (d chi / d q, d chi / d mu). At kinks the branch comes from the
/// configuration.
pub fn chi_subdifferential(
    sigma_i: f64,
    rho: f64,
    q: &DevTensor,
    mu: &DevTensor,
    branch: KinkBranch,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let l = q.dim().basis_len();
    let w = mu.add(&q.scale(rho));
    let n = w.frob_norm();
    let active = match branch {
        KinkBranch::Inactive => n > sigma_i,
        KinkBranch::Active => n >= sigma_i,
    };
    if !active {
        // chi = -sigma rho q on this branch
        let dq = DMatrix::identity(l, l) * (-sigma_i * rho);
        let dmu = DMatrix::zeros(l, l);
        (dq, dmu)
    } else {
        // chi = |w| mu - sigma w
        let mut dq = DMatrix::zeros(l, l);
        let mut dmu = DMatrix::zeros(l, l);
        for r in 0..l {
            for c in 0..l {
                let rank_one = mu.coeffs()[r] * w.coeffs()[c] / n;
                dq[(r, c)] = rho * rank_one - if r == c { sigma_i * rho } else { 0.0 };
                dmu[(r, c)] = rank_one + if r == c { n - sigma_i } else { 0.0 };
            }
        }
        (dq, dmu)
    }
}

/// Residual of the nonsmooth system at a state: the affine block rows
/// followed by the stacked chi coefficients, length dM + 2 LN.
pub fn evaluate_f(
    sys: &DofSystem,
    saddle: &SaddleSystem,
    state: &NewtonState,
    rho: f64,
) -> Vec<f64> {
    let (dm, ln) = (saddle.dm, saddle.ln);
    let l = Dim::Two.basis_len();
    let mut f = vec![0.0; dm + 2 * ln];
    // rows 0..dm: A a - B b + l
    saddle.a_block.matvec_add(1.0, &state.a, &mut f[..dm]);
    saddle.b_block.matvec_add(-1.0, &state.b, &mut f[..dm]);
    for (fi, li) in f[..dm].iter_mut().zip(&saddle.load) {
        *fi += li;
    }
    // rows dm..dm+ln: -B^T a + C b + D c
    {
        let (head, tail) = f.split_at_mut(dm);
        let mid = &mut tail[..ln];
        let _ = head;
        saddle.b_block.matvec_transpose_add(-1.0, &state.a, mid);
        saddle.c_block.matvec_add(1.0, &state.b, mid);
        for (i, m) in mid.iter_mut().enumerate() {
            *m += saddle.d_diag[i] * state.c[i];
        }
    }
    // rows dm+ln..: chi per node
    for i in 0..sys.n_strain {
        let v = chi(sys.sigma_weights[i], rho, &state.b_node(i), &state.c_node(i));
        f[dm + ln + l * i..dm + ln + l * i + l].copy_from_slice(v.coeffs());
    }
    f
}

/// Per-node classification and consistency report of a converged state.
#[derive(Debug, Clone)]
pub struct NodeComplementarity {
    pub lambda_norm: f64,
    pub p_norm: f64,
    /// |lambda_i : p_i - sigma_i |p_i||, the complementarity defect.
    pub defect: f64,
    /// Norm of the component of p orthogonal to lambda (active nodes).
    pub cross_deficiency: f64,
    /// p = c lambda with c >= 0 on active nodes.
    pub scale_c: f64,
    pub active: bool,
    pub ok: bool,
}

#[derive(Debug, Clone)]
pub struct ComplementarityReport {
    pub nodes: Vec<NodeComplementarity>,
    pub n_active: usize,
    pub all_ok: bool,
}

/// Checks the decoupled feasibility and complementarity conditions
/// node by node.
pub fn check_complementarity(sys: &DofSystem, state: &NewtonState) -> ComplementarityReport {
    let mut nodes = Vec::with_capacity(sys.n_strain);
    let mut n_active = 0;
    let mut all_ok = true;
    for i in 0..sys.n_strain {
        let sigma_i = sys.sigma_weights[i];
        let lambda = state.c_node(i);
        let p = state.b_node(i);
        let lambda_norm = lambda.frob_norm();
        let p_norm = p.frob_norm();
        let defect = (lambda.dot(&p) - sigma_i * p_norm).abs();
        let active = lambda_norm >= sigma_i - 1e-7;
        let mut ok = lambda_norm <= sigma_i + 1e-9;
        ok &= defect <= 1e-9 * (1.0 + p_norm);
        let (mut cross_deficiency, mut scale_c) = (0.0, 0.0);
        if !active {
            ok &= p_norm <= 1e-9;
        } else if lambda_norm > 0.0 {
            scale_c = lambda.dot(&p) / (lambda_norm * lambda_norm);
            let residual = p.sub(&lambda.scale(scale_c));
            cross_deficiency = residual.frob_norm();
            ok &= cross_deficiency <= 1e-7 * (1.0 + p_norm);
            ok &= scale_c >= -1e-9;
        }
        if active {
            n_active += 1;
        }
        all_ok &= ok;
        nodes.push(NodeComplementarity {
            lambda_norm,
            p_norm,
            defect,
            cross_deficiency,
            scale_c,
            active,
            ok,
        });
    }
    ComplementarityReport { nodes, n_active, all_ok }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub state: NewtonState,
    pub converged: bool,
    /// Number of Newton updates performed.
    pub iterations: usize,
    /// Residual norms, starting with the initial guess.
    pub residual_history: Vec<f64>,
    pub complementarity: ComplementarityReport,
}

/// Elastic predictor: pure elasticity solve with frozen plastic variables.
pub fn elastic_predictor(saddle: &SaddleSystem) -> Result<NewtonState> {
    let rhs: Vec<f64> = saddle.load.iter().map(|v| -v).collect();
    let a = crate::linalg::factor_solve(&saddle.a_block, &rhs)?;
    Ok(NewtonState { a, b: vec![0.0; saddle.ln], c: vec![0.0; saddle.ln] })
}

/// Semismooth Newton iteration on the stacked residual.
pub fn newton_solve(
    sys: &DofSystem,
    saddle: &SaddleSystem,
    config: &SolverConfig,
    initial: Option<NewtonState>,
) -> Result<SolveReport> {
    let (dm, ln) = (saddle.dm, saddle.ln);
    let l = Dim::Two.basis_len();
    let n_total = dm + 2 * ln;

    let mut state = match initial {
        Some(s) => s,
        None => elastic_predictor(saddle)?,
    };

    // Static triplets of the affine rows, reused every iteration.
    let mut static_triplets = Triplets::new(n_total, n_total);
    for r in 0..dm {
        let (cols, vals) = saddle.a_block.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            static_triplets.push(r, c, v);
        }
        let (cols, vals) = saddle.b_block.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            static_triplets.push(r, dm + c, -v);
            static_triplets.push(dm + c, r, -v);
        }
    }
    for r in 0..ln {
        let (cols, vals) = saddle.c_block.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            static_triplets.push(dm + r, dm + c, v);
        }
        static_triplets.push(dm + r, dm + ln + r, saddle.d_diag[r]);
    }

    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let f = evaluate_f(sys, saddle, &state, config.rho);
        let res = norm2(&f);
        history.push(res);
        if config.verbose {
            let report = check_complementarity(sys, &state);
            println!(
                "{} {:.6e} {} {}",
                iterations,
                res,
                report.n_active,
                sys.n_strain - report.n_active
            );
        }
        if res <= config.tol {
            let complementarity = check_complementarity(sys, &state);
            return Ok(SolveReport {
                state,
                converged: true,
                iterations,
                residual_history: history,
                complementarity,
            });
        }
        if iterations >= config.max_iter {
            let complementarity = check_complementarity(sys, &state);
            return Ok(SolveReport {
                state,
                converged: false,
                iterations,
                residual_history: history,
                complementarity,
            });
        }

        // Clarke element rows of the chi block.
        let mut triplets = static_triplets.clone();
        for i in 0..sys.n_strain {
            let (dq, dmu) = chi_subdifferential(
                sys.sigma_weights[i],
                config.rho,
                &state.b_node(i),
                &state.c_node(i),
                config.kink_branch,
            );
            let row0 = dm + ln + l * i;
            for r in 0..l {
                for c in 0..l {
                    triplets.push(row0 + r, dm + l * i + c, dq[(r, c)]);
                    triplets.push(row0 + r, dm + ln + l * i + c, dmu[(r, c)]);
                }
            }
        }
        let h = triplets.to_csr(false);
        let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        let delta = Factorized::new(&h)
            .and_then(|fac| fac.solve(&rhs))
            .map_err(|e| {
                Error::SingularSystem(format!("Newton step {iterations}: {e}"))
            })?;
        for (x, d) in state.a.iter_mut().zip(&delta[..dm]) {
            *x += config.damping * d;
        }
        for (x, d) in state.b.iter_mut().zip(&delta[dm..dm + ln]) {
            *x += config.damping * d;
        }
        for (x, d) in state.c.iter_mut().zip(&delta[dm + ln..]) {
            *x += config.damping * d;
        }
        iterations += 1;
    }
}
