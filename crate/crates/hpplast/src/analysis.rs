//! Error machinery: multiplier recovery, the computable plasticity error and
//! its minimizer, the auxiliary linear problem, norms, and h/p convergence
//! studies with manufactured or overkill references.

use std::fmt::Write as _;

use crate::assembly::{
    assemble_blocks, elastic_rhs_for_field, project_p_hp, strain_at, Loads, SaddleSystem,
    VectorField,
};
use crate::error::{Error, Result};
use crate::hp_spaces::{DofSystem, StrainBasis};
use crate::linalg::{factor_solve, Triplets};
use crate::mesh::{HpMesh, Point2};
use crate::quadrature::{elevated_points, GaussRule2d};
use crate::solver::{newton_solve, SolveReport, SolverConfig};
use crate::tensors::{apply_c, deviator, DevTensor, Dim, MaterialLaw};

/// Affine map from a fine element's reference square into the reference
/// square of its level-0 ancestor: (xi, eta) -> (sx xi + ox, sy eta + oy).
#[derive(Debug, Clone, Copy)]
pub struct RefMap {
    pub elem: usize,
    pub sx: f64,
    pub ox: f64,
    pub sy: f64,
    pub oy: f64,
}

impl RefMap {
    pub fn identity(elem: usize) -> Self {
        RefMap { elem, sx: 1.0, ox: 0.0, sy: 1.0, oy: 0.0 }
    }

    pub fn apply(&self, xi: f64, eta: f64) -> (f64, f64) {
        (self.sx * xi + self.ox, self.sy * eta + self.oy)
    }
}

/// Uniformly refines a mesh several times, composing the reference maps so
/// that every fine element knows its ancestor in the input mesh.
pub fn refine_with_links(mesh: &HpMesh, refinements: usize) -> (HpMesh, Vec<RefMap>) {
    let mut current = mesh.clone();
    let mut links: Vec<RefMap> = (0..mesh.n_elements()).map(RefMap::identity).collect();
    for _ in 0..refinements {
        let (fine, child_maps) = current.refine_uniform_with_map();
        let mut fine_links = Vec::with_capacity(fine.n_elements());
        for (child, cm) in child_maps.iter().enumerate() {
            let up = links[cm.parent];
            let (ax, ay) = match cm.quadrant {
                0 => (-1.0, -1.0),
                1 => (0.0, -1.0),
                2 => (0.0, 0.0),
                3 => (-1.0, 0.0),
                _ => unreachable!(),
            };
            let (qox, qoy) = (ax + 0.5, ay + 0.5);
            fine_links.push(RefMap {
                elem: up.elem,
                sx: up.sx * 0.5,
                ox: up.sx * qox + up.ox,
                sy: up.sy * 0.5,
                oy: up.sy * qoy + up.oy,
            });
            let _ = child;
        }
        links = fine_links;
        current = fine;
    }
    (current, links)
}

/// Displacement/plastic-strain pair evaluable on an integration mesh.
pub trait PairField {
    fn displacement(&self, elem: usize, xi: f64, eta: f64, x: Point2) -> [f64; 2];
    fn strain(&self, elem: usize, xi: f64, eta: f64, x: Point2) -> crate::tensors::SymTensor;
    fn plastic(&self, elem: usize, xi: f64, eta: f64, x: Point2) -> DevTensor;
}

/// Discrete pair on the integration mesh itself.
pub struct OwnPair<'a> {
    pub sys: &'a DofSystem,
    pub a: &'a [f64],
    pub b: &'a [f64],
}

impl PairField for OwnPair<'_> {
    fn displacement(&self, elem: usize, xi: f64, eta: f64, _x: Point2) -> [f64; 2] {
        self.sys.eval_displacement_ref(self.a, elem, xi, eta)
    }
    fn strain(&self, elem: usize, xi: f64, eta: f64, _x: Point2) -> crate::tensors::SymTensor {
        strain_at(self.sys, self.a, elem, xi, eta)
    }
    fn plastic(&self, elem: usize, xi: f64, eta: f64, _x: Point2) -> DevTensor {
        self.sys.eval_strain_field_ref(self.b, StrainBasis::Primal, elem, xi, eta)
    }
}

/// Discrete pair on a coarser mesh, evaluated through refinement links.
pub struct LinkedPair<'a> {
    pub sys: &'a DofSystem,
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub links: &'a [RefMap],
}

impl PairField for LinkedPair<'_> {
    fn displacement(&self, elem: usize, xi: f64, eta: f64, _x: Point2) -> [f64; 2] {
        let m = self.links[elem];
        let (cx, cy) = m.apply(xi, eta);
        self.sys.eval_displacement_ref(self.a, m.elem, cx, cy)
    }
    fn strain(&self, elem: usize, xi: f64, eta: f64, _x: Point2) -> crate::tensors::SymTensor {
        let m = self.links[elem];
        let (cx, cy) = m.apply(xi, eta);
        strain_at(self.sys, self.a, m.elem, cx, cy)
    }
    fn plastic(&self, elem: usize, xi: f64, eta: f64, _x: Point2) -> DevTensor {
        let m = self.links[elem];
        let (cx, cy) = m.apply(xi, eta);
        self.sys.eval_strain_field_ref(self.b, StrainBasis::Primal, m.elem, cx, cy)
    }
}

/// Smooth elastic pair (plastic strain identically zero).
pub struct ExactPair<'a> {
    pub u: &'a VectorField<'a>,
}

impl PairField for ExactPair<'_> {
    fn displacement(&self, _e: usize, _xi: f64, _eta: f64, x: Point2) -> [f64; 2] {
        (self.u.value)(x)
    }
    fn strain(&self, _e: usize, _xi: f64, _eta: f64, x: Point2) -> crate::tensors::SymTensor {
        self.u.strain(x)
    }
    fn plastic(&self, _e: usize, _xi: f64, _eta: f64, _x: Point2) -> DevTensor {
        DevTensor::zero(Dim::Two)
    }
}

/// Multiplier-like field evaluable on an integration mesh.
pub trait StrainFieldEval {
    fn eval(&self, elem: usize, xi: f64, eta: f64, x: Point2) -> DevTensor;
}

pub struct OwnStrain<'a> {
    pub sys: &'a DofSystem,
    pub coeffs: &'a [f64],
    pub basis: StrainBasis,
}

impl StrainFieldEval for OwnStrain<'_> {
    fn eval(&self, elem: usize, xi: f64, eta: f64, _x: Point2) -> DevTensor {
        self.sys.eval_strain_field_ref(self.coeffs, self.basis, elem, xi, eta)
    }
}

pub struct LinkedStrain<'a> {
    pub sys: &'a DofSystem,
    pub coeffs: &'a [f64],
    pub basis: StrainBasis,
    pub links: &'a [RefMap],
}

impl StrainFieldEval for LinkedStrain<'_> {
    fn eval(&self, elem: usize, xi: f64, eta: f64, _x: Point2) -> DevTensor {
        let m = self.links[elem];
        let (cx, cy) = m.apply(xi, eta);
        self.sys.eval_strain_field_ref(self.coeffs, self.basis, m.elem, cx, cy)
    }
}

pub struct PointwiseStrain<'a>(pub &'a dyn Fn(Point2) -> DevTensor);

impl StrainFieldEval for PointwiseStrain<'_> {
    fn eval(&self, _e: usize, _xi: f64, _eta: f64, x: Point2) -> DevTensor {
        (self.0)(x)
    }
}

/// Squared norms of a pair field over the integration mesh: the strain
/// seminorm of u, the L2 norm of u, and the L2 norm of p, with per-element
/// contributions of the pair norm.
pub struct PairNorms {
    pub u_seminorm_sq: f64,
    pub u_l2_sq: f64,
    pub p_l2_sq: f64,
    pub per_element: Vec<f64>,
}

impl PairNorms {
    /// |u|_1^2 + ||u||_0^2
    pub fn u_h1_sq(&self) -> f64 {
        self.u_seminorm_sq + self.u_l2_sq
    }

    /// ||(u, p)||^2 = ||u||_1^2 + ||p||_0^2
    pub fn pair_sq(&self) -> f64 {
        self.u_h1_sq() + self.p_l2_sq
    }

    pub fn pair(&self) -> f64 {
        self.pair_sq().sqrt()
    }
}

/// Integrates the norms of a pair field over the mesh of `sys`.
pub fn pair_norms(sys: &DofSystem, field: &dyn PairField) -> PairNorms {
    let mesh = &sys.mesh;
    let mut out = PairNorms {
        u_seminorm_sq: 0.0,
        u_l2_sq: 0.0,
        p_l2_sq: 0.0,
        per_element: vec![0.0; mesh.n_elements()],
    };
    for e in 0..mesh.n_elements() {
        let p_deg = mesh.degree(e);
        let geo = mesh.geometry(e);
        let rule = GaussRule2d::with_points(elevated_points(p_deg) + 1);
        let (mut semi, mut l2u, mut l2p) = (0.0, 0.0, 0.0);
        for (&(xi, eta), &w) in rule.points.iter().zip(&rule.weights) {
            let wdet = w * geo.jacobian_det(xi, eta).abs();
            let x = geo.map(xi, eta);
            let u = field.displacement(e, xi, eta, x);
            let eps = field.strain(e, xi, eta, x);
            let pl = field.plastic(e, xi, eta, x);
            semi += wdet * eps.frob_dot(&eps);
            l2u += wdet * (u[0] * u[0] + u[1] * u[1]);
            l2p += wdet * pl.dot(&pl);
        }
        out.u_seminorm_sq += semi;
        out.u_l2_sq += l2u;
        out.p_l2_sq += l2p;
        out.per_element[e] = semi + l2u + l2p;
    }
    out
}

/// Difference of two pair fields, itself a pair field.
pub struct PairDiff<'a>(pub &'a dyn PairField, pub &'a dyn PairField);

impl PairField for PairDiff<'_> {
    fn displacement(&self, e: usize, xi: f64, eta: f64, x: Point2) -> [f64; 2] {
        let a = self.0.displacement(e, xi, eta, x);
        let b = self.1.displacement(e, xi, eta, x);
        [a[0] - b[0], a[1] - b[1]]
    }
    fn strain(&self, e: usize, xi: f64, eta: f64, x: Point2) -> crate::tensors::SymTensor {
        self.0.strain(e, xi, eta, x).sub(&self.1.strain(e, xi, eta, x))
    }
    fn plastic(&self, e: usize, xi: f64, eta: f64, x: Point2) -> DevTensor {
        self.0.plastic(e, xi, eta, x).sub(&self.1.plastic(e, xi, eta, x))
    }
}

/// L2 norm (squared, with per-element parts) of the difference of two
/// multiplier-like fields.
pub fn strain_diff_l2_sq(
    sys: &DofSystem,
    f1: &dyn StrainFieldEval,
    f2: &dyn StrainFieldEval,
) -> (f64, Vec<f64>) {
    let mesh = &sys.mesh;
    let mut total = 0.0;
    let mut per_element = vec![0.0; mesh.n_elements()];
    for e in 0..mesh.n_elements() {
        let p_deg = mesh.degree(e);
        let geo = mesh.geometry(e);
        let rule = GaussRule2d::with_points(elevated_points(p_deg) + 1);
        let mut acc = 0.0;
        for (&(xi, eta), &w) in rule.points.iter().zip(&rule.weights) {
            let x = geo.map(xi, eta);
            let d = f1.eval(e, xi, eta, x).sub(&f2.eval(e, xi, eta, x));
            acc += w * geo.jacobian_det(xi, eta).abs() * d.dot(&d);
        }
        per_element[e] = acc;
        total += acc;
    }
    (total, per_element)
}

/// Recovered multiplier: L2 projection of dev(sigma(u, p) - H p) onto the
/// strain space, returned as primal-basis coefficients.
pub fn recover_lambda(
    sys: &DofSystem,
    a: &[f64],
    b: &[f64],
    material: &MaterialLaw,
) -> Result<Vec<f64>> {
    project_p_hp(sys, |e, xi, eta, _| lambda_density(sys, a, b, material, e, xi, eta))
}

/// Pointwise dev(sigma(u,p) - H p) = 2 mu dev(eps(u)) - (2 mu + k) p.
pub fn lambda_density(
    sys: &DofSystem,
    a: &[f64],
    b: &[f64],
    material: &MaterialLaw,
    elem: usize,
    xi: f64,
    eta: f64,
) -> DevTensor {
    let eps = strain_at(sys, a, elem, xi, eta);
    let p = sys.eval_strain_field_ref(b, StrainBasis::Primal, elem, xi, eta);
    deviator(&eps)
        .scale(2.0 * material.lame_mu)
        .sub(&p.scale(2.0 * material.lame_mu + material.hardening_k))
}

/// The pointwise minimizer of the plasticity error: the radial projection of
/// lambda_N + p_N / 2 onto the sigma_y-ball.
pub struct MuStar<'a> {
    pub sys: &'a DofSystem,
    /// Plastic strain coefficients (primal basis).
    pub p_coeffs: &'a [f64],
    /// Multiplier coefficients (primal basis).
    pub lambda_coeffs: &'a [f64],
    pub sigma_y: f64,
}

impl StrainFieldEval for MuStar<'_> {
    fn eval(&self, elem: usize, xi: f64, eta: f64, _x: Point2) -> DevTensor {
        let lam = self
            .sys
            .eval_strain_field_ref(self.lambda_coeffs, StrainBasis::Primal, elem, xi, eta);
        let p = self
            .sys
            .eval_strain_field_ref(self.p_coeffs, StrainBasis::Primal, elem, xi, eta);
        project_mu_star_pointwise(&lam, &p, self.sigma_y)
    }
}

/// min(1, sigma_y / |mu_hat|) mu_hat with mu_hat = lambda + p/2.
pub fn project_mu_star_pointwise(lambda: &DevTensor, p: &DevTensor, sigma_y: f64) -> DevTensor {
    let mu_hat = lambda.add(&p.scale(0.5));
    let norm = mu_hat.frob_norm();
    if norm <= sigma_y {
        mu_hat
    } else {
        mu_hat.scale(sigma_y / norm)
    }
}

/// Global plasticity error e_p(mu) = ||mu - lambda_N||^2 + psi(p_N) minus
/// the pairing (mu, p_N), by elevated quadrature; mu must satisfy
/// |mu| <= sigma_y at the quadrature points.
pub fn plasticity_error(
    sys: &DofSystem,
    mu: &dyn StrainFieldEval,
    p_coeffs: &[f64],
    lambda_coeffs: &[f64],
    sigma_y: f64,
) -> Result<f64> {
    let mesh = &sys.mesh;
    let mut total = 0.0;
    let mut total_abs = 0.0;
    for e in 0..mesh.n_elements() {
        let p_deg = mesh.degree(e);
        let geo = mesh.geometry(e);
        let rule = GaussRule2d::with_points(elevated_points(p_deg) + 1);
        for (&(xi, eta), &w) in rule.points.iter().zip(&rule.weights) {
            let x = geo.map(xi, eta);
            let m = mu.eval(e, xi, eta, x);
            let norm = m.frob_norm();
            if norm > sigma_y * (1.0 + 1e-9) + 1e-12 {
                return Err(Error::InfeasibleMultiplier { norm, sigma_y });
            }
            let lam = sys.eval_strain_field_ref(lambda_coeffs, StrainBasis::Primal, e, xi, eta);
            let p = sys.eval_strain_field_ref(p_coeffs, StrainBasis::Primal, e, xi, eta);
            let d = m.sub(&lam);
            let wdet = w * geo.jacobian_det(xi, eta).abs();
            let integrand = d.dot(&d) + sigma_y * p.frob_norm() - m.dot(&p);
            total += wdet * integrand;
            total_abs += wdet * (d.dot(&d) + sigma_y * p.frob_norm() + m.dot(&p).abs());
        }
    }
    // The error is nonnegative for admissible mu; cancellation can leave
    // rounding-level negatives, which are cleaned up here.
    if total < 0.0 && total >= -1e-12 * total_abs.max(1e-300) {
        total = 0.0;
    }
    Ok(total)
}

/// Solution of the auxiliary linear problem on a finer space.
pub struct AuxSolution {
    pub sys: DofSystem,
    pub links: Vec<RefMap>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Solves the frozen-multiplier linear problem
/// a((u*, p*), (v, q)) = l(v) - (lambda_N, q) on a finer space: `refinements`
/// uniform refinements and `degree_inc` extra polynomial degrees.
pub fn solve_auxiliary(
    coarse: &DofSystem,
    lambda_coeffs: &[f64],
    loads: &Loads,
    material: &MaterialLaw,
    refinements: usize,
    degree_inc: usize,
) -> Result<AuxSolution> {
    let (fine_mesh, links) = refine_with_links(&coarse.mesh, refinements);
    let fine_mesh = fine_mesh.with_degree_increment(degree_inc);
    let fine = DofSystem::new(&fine_mesh, material.yield_sigma_y)?;
    let saddle = assemble_blocks(&fine, material, loads)?;
    let lambda_on_fine = LinkedStrain {
        sys: coarse,
        coeffs: lambda_coeffs,
        basis: StrainBasis::Primal,
        links: &links,
    };
    let (a, b) = solve_frozen_multiplier(&fine, &saddle, &lambda_on_fine)?;
    Ok(AuxSolution { sys: fine, links, a, b })
}

/// Solves the elliptic system [[A, -B], [-B^T, C]] (a; b) = (l; -g) with
/// g_(ik) = (lambda, Phi_k phi_i).
pub fn solve_frozen_multiplier(
    sys: &DofSystem,
    saddle: &SaddleSystem,
    lambda: &dyn StrainFieldEval,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (dm, ln) = (saddle.dm, saddle.ln);
    let l_comp = Dim::Two.basis_len();
    let mut rhs = vec![0.0; dm + ln];
    for (r, li) in saddle.load.iter().enumerate() {
        rhs[r] = -li;
    }
    // g entries by elevated quadrature
    let mesh = &sys.mesh;
    for e in 0..mesh.n_elements() {
        let p_deg = mesh.degree(e);
        let geo = mesh.geometry(e);
        let rule = GaussRule2d::with_points(elevated_points(p_deg) + 1);
        let n_t = sys.n_strain_nodes(e);
        for (&(xi, eta), &w) in rule.points.iter().zip(&rule.weights) {
            let wdet = w * geo.jacobian_det(xi, eta).abs();
            let x = geo.map(xi, eta);
            let lam = lambda.eval(e, xi, eta, x);
            for k in 0..n_t {
                let phi = sys.eval_phi(e, k, xi, eta);
                if phi == 0.0 {
                    continue;
                }
                let i = sys.zeta(e, k);
                for c in 0..l_comp {
                    rhs[dm + l_comp * i + c] -= wdet * phi * lam.coeffs()[c];
                }
            }
        }
    }
    // block matrix [[A, -B], [-B^T, C]] (symmetric positive definite)
    let mut t = Triplets::new(dm + ln, dm + ln);
    for r in 0..dm {
        let (cols, vals) = saddle.a_block.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            t.push(r, c, v);
        }
        let (cols, vals) = saddle.b_block.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            t.push(r, dm + c, -v);
            t.push(dm + c, r, -v);
        }
    }
    for r in 0..ln {
        let (cols, vals) = saddle.c_block.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            t.push(dm + r, dm + c, v);
        }
    }
    let m = t.to_csr(true);
    let sol = factor_solve(&m, &rhs)?;
    Ok((sol[..dm].to_vec(), sol[dm..].to_vec()))
}

/// Error quantities of one discrete solution, with per-element
/// contributions accumulated on the solution mesh (finer integration meshes
/// fold back through the refinement links).
#[derive(Debug, Clone)]
pub struct ErrorReport {
    /// ||(u - u_N, p - p_N)|| against the chosen reference.
    pub energy_norm_pair: f64,
    /// ||lambda - lambda_N||_{0,Omega} against the chosen reference.
    pub lambda_error: f64,
    /// e_p(mu*), the computable plasticity error at its minimizer.
    pub e_plast: f64,
    /// ||(u* - u_N, p* - p_N)|| against the auxiliary solution on the
    /// strictly finer space (one refinement, one extra degree).
    pub aux_error: f64,
    pub per_element_pair: Vec<f64>,
    pub per_element_lambda: Vec<f64>,
    pub per_element_aux: Vec<f64>,
}

/// One level of a convergence study.
#[derive(Debug, Clone)]
pub struct StudyLevel {
    pub level: usize,
    pub h_max: f64,
    pub p_min: usize,
    pub ndof: usize,
    pub err_pair: f64,
    pub err_lambda: f64,
    pub e_plast: f64,
    pub aux_err: f64,
    pub order_pair: Option<f64>,
    pub report: ErrorReport,
}

#[derive(Debug, Clone)]
pub struct ConvergenceStudy {
    pub levels: Vec<StudyLevel>,
    /// Sobolev regularity (s, t, l) of the reference solution when known.
    pub regularity: Option<(f64, f64, f64)>,
    /// Levels whose pair-norm error did not decrease; flagged, not fatal.
    pub non_monotone_levels: Vec<usize>,
}

impl ConvergenceStudy {
    /// Observed order between the last two levels.
    pub fn final_order(&self) -> Option<f64> {
        self.levels.last().and_then(|l| l.order_pair)
    }

    /// CSV rendering with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,h_max,p_min,ndof,err_pair,err_lambda,e_plast,aux_err,order_pair\n");
        for l in &self.levels {
            let order = l
                .order_pair
                .map(|o| format!("{:.16e}", o))
                .unwrap_or_default();
            writeln!(
                s,
                "{},{:.16e},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                l.level, l.h_max, l.p_min, l.ndof, l.err_pair, l.err_lambda, l.e_plast, l.aux_err, order
            )
            .unwrap();
        }
        s
    }
}

/// How study errors are measured.
pub enum ReferenceMode<'a> {
    /// Exact smooth elastic solution (plastic strain zero) with its
    /// multiplier dev(C eps(u)).
    Manufactured {
        u: &'a VectorField<'a>,
        lambda: &'a dyn Fn(Point2) -> DevTensor,
        regularity: (f64, f64, f64),
    },
    /// Discrete reference on a much finer space.
    Overkill { extra_refinements: usize, degree_inc: usize },
}

pub struct StudyProblem<'a> {
    pub base_mesh: HpMesh,
    pub material: MaterialLaw,
    pub loads: Loads<'a>,
    pub solver: SolverConfig,
}

/// Result of solving one level: the system, blocks, and solver report.
pub struct LevelSolution {
    pub sys: DofSystem,
    pub saddle: SaddleSystem,
    pub report: SolveReport,
    pub lambda_primal: Vec<f64>,
}

/// Solves the discrete problem on the given mesh.
pub fn solve_on_mesh(
    mesh: &HpMesh,
    material: &MaterialLaw,
    loads: &Loads,
    solver: &SolverConfig,
) -> Result<LevelSolution> {
    let sys = DofSystem::new(mesh, material.yield_sigma_y)?;
    let saddle = assemble_blocks(&sys, material, loads)?;
    let report = newton_solve(&sys, &saddle, solver, None)?;
    if !report.converged {
        return Err(Error::NonConvergence {
            iterations: report.iterations,
            residual: *report.residual_history.last().unwrap_or(&f64::NAN),
        });
    }
    let lambda_primal = sys.dual_to_primal(&report.state.c);
    Ok(LevelSolution { sys, saddle, report, lambda_primal })
}

/// Runs a uniform-refinement convergence study.
pub fn run_convergence_study(
    problem: &StudyProblem,
    levels: usize,
    reference: &ReferenceMode,
) -> Result<ConvergenceStudy> {
    let mut out = Vec::with_capacity(levels);
    let mut mesh = problem.base_mesh.clone();
    let mut prev_err: Option<f64> = None;
    for level in 0..levels {
        if level > 0 {
            mesh = mesh.refine_uniform();
        }
        let sol = solve_on_mesh(&mesh, &problem.material, &problem.loads, &problem.solver)?;
        let report = error_report(&sol, problem, reference)?;

        let order_pair = prev_err.map(|p: f64| (p / report.energy_norm_pair).log2());
        prev_err = Some(report.energy_norm_pair);

        out.push(StudyLevel {
            level,
            h_max: mesh.h_max(),
            p_min: mesh.p_min(),
            ndof: sol.saddle.dm + sol.saddle.ln,
            err_pair: report.energy_norm_pair,
            err_lambda: report.lambda_error,
            e_plast: report.e_plast,
            aux_err: report.aux_error,
            order_pair,
            report,
        });
    }
    let regularity = match reference {
        ReferenceMode::Manufactured { regularity, .. } => Some(*regularity),
        ReferenceMode::Overkill { .. } => None,
    };
    let non_monotone_levels = out
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1].err_pair >= w[0].err_pair)
        .map(|(i, _)| i + 1)
        .collect();
    Ok(ConvergenceStudy { levels: out, regularity, non_monotone_levels })
}

/// Accumulates per-element contributions computed on a refined mesh onto
/// the elements of the ancestor mesh.
fn fold_to_coarse(per_fine: &[f64], links: &[RefMap], n_coarse: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_coarse];
    for (e, v) in per_fine.iter().enumerate() {
        out[links[e].elem] += v;
    }
    out
}

/// Full error report of one discrete solution against a reference, with
/// per-element contributions on the solution mesh.
pub fn error_report(
    sol: &LevelSolution,
    problem: &StudyProblem,
    reference: &ReferenceMode,
) -> Result<ErrorReport> {
    let state = &sol.report.state;
    let n_elems = sol.sys.mesh.n_elements();

    let (err_pair_sq, err_lambda_sq, per_pair, per_lambda) = match reference {
        ReferenceMode::Manufactured { u, lambda, .. } => {
            let own = OwnPair { sys: &sol.sys, a: &state.a, b: &state.b };
            let exact = ExactPair { u };
            let diff = PairDiff(&own, &exact);
            let norms = pair_norms(&sol.sys, &diff);
            let own_lam =
                OwnStrain { sys: &sol.sys, coeffs: &sol.lambda_primal, basis: StrainBasis::Primal };
            let exact_lam = PointwiseStrain(lambda);
            let (lam_sq, per_lam) = strain_diff_l2_sq(&sol.sys, &own_lam, &exact_lam);
            (norms.pair_sq(), lam_sq, norms.per_element.clone(), per_lam)
        }
        ReferenceMode::Overkill { extra_refinements, degree_inc } => {
            let (fine_mesh, links) = refine_with_links(&sol.sys.mesh, *extra_refinements);
            let fine_mesh = fine_mesh.with_degree_increment(*degree_inc);
            let fine = solve_on_mesh(&fine_mesh, &problem.material, &problem.loads, &problem.solver)?;
            let own = OwnPair { sys: &fine.sys, a: &fine.report.state.a, b: &fine.report.state.b };
            let coarse = LinkedPair { sys: &sol.sys, a: &state.a, b: &state.b, links: &links };
            let diff = PairDiff(&own, &coarse);
            let norms = pair_norms(&fine.sys, &diff);
            let fine_lam =
                OwnStrain { sys: &fine.sys, coeffs: &fine.lambda_primal, basis: StrainBasis::Primal };
            let coarse_lam = LinkedStrain {
                sys: &sol.sys,
                coeffs: &sol.lambda_primal,
                basis: StrainBasis::Primal,
                links: &links,
            };
            let (lam_sq, per_lam) = strain_diff_l2_sq(&fine.sys, &fine_lam, &coarse_lam);
            (
                norms.pair_sq(),
                lam_sq,
                fold_to_coarse(&norms.per_element, &links, n_elems),
                fold_to_coarse(&per_lam, &links, n_elems),
            )
        }
    };

    let mu_star = MuStar {
        sys: &sol.sys,
        p_coeffs: &state.b,
        lambda_coeffs: &sol.lambda_primal,
        sigma_y: problem.material.yield_sigma_y,
    };
    let e_plast = plasticity_error(
        &sol.sys,
        &mu_star,
        &state.b,
        &sol.lambda_primal,
        problem.material.yield_sigma_y,
    )?;

    let aux =
        solve_auxiliary(&sol.sys, &sol.lambda_primal, &problem.loads, &problem.material, 1, 1)?;
    let aux_own = OwnPair { sys: &aux.sys, a: &aux.a, b: &aux.b };
    let sol_linked = LinkedPair { sys: &sol.sys, a: &state.a, b: &state.b, links: &aux.links };
    let aux_diff = PairDiff(&aux_own, &sol_linked);
    let aux_norms = pair_norms(&aux.sys, &aux_diff);

    Ok(ErrorReport {
        energy_norm_pair: err_pair_sq.sqrt(),
        lambda_error: err_lambda_sq.sqrt(),
        e_plast,
        aux_error: aux_norms.pair(),
        per_element_pair: per_pair,
        per_element_lambda: per_lambda,
        per_element_aux: fold_to_coarse(&aux_norms.per_element, &aux.links, n_elems),
    })
}

/// Energy projection of a smooth field onto the displacement space of an
/// assembled system (the operator behind the displacement a priori bound).
pub fn project_i_hp_via(
    sys: &DofSystem,
    saddle: &SaddleSystem,
    v: &VectorField,
    material: &MaterialLaw,
) -> Result<Vec<f64>> {
    let rhs = elastic_rhs_for_field(sys, v, material);
    factor_solve(&saddle.a_block, &rhs)
}

/// Membership of a dual-basis multiplier in the discrete admissible set via
/// the per-node coefficient balls.
pub fn in_lambda_hp_by_nodes(sys: &DofSystem, mu_dual: &[f64], slack: f64) -> bool {
    let l = Dim::Two.basis_len();
    (0..sys.n_strain).all(|i| {
        let norm: f64 = mu_dual[l * i..l * i + l].iter().map(|x| x * x).sum::<f64>().sqrt();
        norm <= sys.sigma_weights[i] + slack
    })
}

/// Membership via the pointwise Gauss-point bound |mu_hp(x_k)| <= sigma_y.
pub fn in_lambda_hp_by_gauss_points(sys: &DofSystem, mu_dual: &[f64], slack: f64) -> bool {
    for e in 0..sys.mesh.n_elements() {
        for k in 0..sys.n_strain_nodes(e) {
            let (xi, eta) = sys.strain_node_ref(e, k);
            let v = sys.eval_strain_field_ref(mu_dual, StrainBasis::Dual, e, xi, eta);
            let i = sys.zeta(e, k);
            if v.frob_norm() > sys.sigma_weights[i] + slack {
                return false;
            }
        }
    }
    true
}

/// Discrete plasticity functional: the mesh quadrature rule applied to
/// sigma_y |q_hp|_F, evaluated element by element (midpoint branch for
/// degree one, mapped Gauss sum otherwise).
pub fn psi_hp(sys: &DofSystem, q_primal: &[f64], sigma_y: f64) -> f64 {
    let mesh = &sys.mesh;
    let mut total = 0.0;
    for e in 0..mesh.n_elements() {
        let p = mesh.degree(e);
        let geo = mesh.geometry(e);
        if p == 1 {
            let q = sys.eval_strain_field_ref(q_primal, StrainBasis::Primal, e, 0.0, 0.0);
            total += geo.measure() * sigma_y * q.frob_norm();
        } else {
            let rule = GaussRule2d::with_points(p);
            for (&(xi, eta), &w) in rule.points.iter().zip(&rule.weights) {
                let q = sys.eval_strain_field_ref(q_primal, StrainBasis::Primal, e, xi, eta);
                total += w * geo.jacobian_det(xi, eta).abs() * sigma_y * q.frob_norm();
            }
        }
    }
    total
}

/// Elementwise pairing matrices (dual_i, phi_j)_{0,T} by elevated
/// quadrature; with them the L2 pairing of a dual-basis multiplier and a
/// primal-basis strain reduces to cached-integral sums.
pub fn dual_primal_pairings(sys: &DofSystem) -> Vec<nalgebra::DMatrix<f64>> {
    let mesh = &sys.mesh;
    let mut out = Vec::with_capacity(mesh.n_elements());
    for e in 0..mesh.n_elements() {
        let p = mesh.degree(e);
        let geo = mesh.geometry(e);
        let rule = GaussRule2d::with_points(elevated_points(p));
        let n_t = sys.n_strain_nodes(e);
        let mut m = nalgebra::DMatrix::<f64>::zeros(n_t, n_t);
        for (&(xi, eta), &w) in rule.points.iter().zip(&rule.weights) {
            let wdet = w * geo.jacobian_det(xi, eta).abs();
            let duals: Vec<f64> = (0..n_t).map(|i| sys.eval_dual(e, i, xi, eta)).collect();
            let phis: Vec<f64> = (0..n_t).map(|j| sys.eval_phi(e, j, xi, eta)).collect();
            for i in 0..n_t {
                for j in 0..n_t {
                    m[(i, j)] += wdet * duals[i] * phis[j];
                }
            }
        }
        out.push(m);
    }
    out
}

/// (mu_hp, q_hp)_{0,Omega} for a dual-basis mu and primal-basis q through
/// precomputed elementwise pairings.
pub fn paired_inner(
    sys: &DofSystem,
    pairings: &[nalgebra::DMatrix<f64>],
    mu_dual: &[f64],
    q_primal: &[f64],
) -> f64 {
    let l = Dim::Two.basis_len();
    let mut acc = 0.0;
    for e in 0..sys.mesh.n_elements() {
        let n_t = sys.n_strain_nodes(e);
        let m = &pairings[e];
        for i in 0..n_t {
            let gi = sys.zeta(e, i);
            for j in 0..n_t {
                let gj = sys.zeta(e, j);
                let dot: f64 = (0..l)
                    .map(|c| mu_dual[l * gi + c] * q_primal[l * gj + c])
                    .sum();
                acc += m[(i, j)] * dot;
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::strain_l2_inner;
    use crate::mesh::{unit_square, SquareSides};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;

    fn material(sigma_y: f64) -> MaterialLaw {
        MaterialLaw::new(100.0, 80.0, 10.0, sigma_y).unwrap()
    }

    fn plastic_benchmark() -> (DofSystem, SaddleSystem, MaterialLaw, SolveReport) {
        let mesh = unit_square(3, 2, SquareSides::LEFT);
        let m = material(0.30);
        let sys = DofSystem::new(&mesh, m.yield_sigma_y).unwrap();
        let g = |p: Point2| if p.x > 0.999 { [0.45, 0.0] } else { [0.0, 0.0] };
        let loads = Loads { volume: &|_| [0.0, 0.0], traction: &g };
        let saddle = assemble_blocks(&sys, &m, &loads).unwrap();
        let report = newton_solve(&sys, &saddle, &SolverConfig::default(), None).unwrap();
        assert!(report.converged);
        (sys, saddle, m, report)
    }

    #[test]
    fn recover_lambda_of_zero_fields_is_zero() {
        let mesh = unit_square(2, 2, SquareSides::LEFT);
        let m = material(1.0);
        let sys = DofSystem::new(&mesh, 1.0).unwrap();
        let a = vec![0.0; 2 * sys.n_displacement];
        let b = vec![0.0; 2 * sys.n_strain];
        let lam = recover_lambda(&sys, &a, &b, &m).unwrap();
        assert!(lam.iter().all(|&v| v.abs() <= 1e-14));
    }

    #[test]
    fn recovered_lambda_matches_solver_multiplier() {
        // The recovery identity: P_hp(dev(sigma - H p)) equals the converged
        // multiplier after the change to the primal basis.
        let (sys, _, m, report) = plastic_benchmark();
        let recovered = recover_lambda(&sys, &report.state.a, &report.state.b, &m).unwrap();
        let from_solver = sys.dual_to_primal(&report.state.c);
        let num = strain_diff_l2_sq(
            &sys,
            &OwnStrain { sys: &sys, coeffs: &recovered, basis: StrainBasis::Primal },
            &OwnStrain { sys: &sys, coeffs: &from_solver, basis: StrainBasis::Primal },
        )
        .0
        .sqrt();
        let den = strain_l2_inner(
            &sys,
            (&from_solver, StrainBasis::Primal),
            (&from_solver, StrainBasis::Primal),
        )
        .sqrt();
        assert!(num <= 1e-8 * den, "relative multiplier gap {:e}", num / den);
    }

    #[test]
    fn recovered_lambda_strictly_inside_in_elastic_limit() {
        let mesh = unit_square(3, 2, SquareSides::LEFT);
        let sigma_y = 1e12 * 0.45;
        let m = material(sigma_y);
        let sys = DofSystem::new(&mesh, sigma_y).unwrap();
        let g = |p: Point2| if p.x > 0.999 { [0.45, 0.0] } else { [0.0, 0.0] };
        let loads = Loads { volume: &|_| [0.0, 0.0], traction: &g };
        let saddle = assemble_blocks(&sys, &m, &loads).unwrap();
        let report = newton_solve(&sys, &saddle, &SolverConfig::default(), None).unwrap();
        let lam = recover_lambda(&sys, &report.state.a, &report.state.b, &m).unwrap();
        let l = Dim::Two.basis_len();
        for i in 0..sys.n_strain {
            let norm: f64 = lam[l * i..l * i + l].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm < 0.5 * sigma_y, "multiplier should sit deep inside the ball");
        }
        // Projection property: the defect dev(C eps(u)) - lambda_hp is
        // L2-orthogonal to the strain space (p = 0 in the elastic limit).
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let scale = crate::assembly::strain_l2_inner(
            &sys,
            (&lam, StrainBasis::Primal),
            (&lam, StrainBasis::Primal),
        )
        .sqrt();
        for _ in 0..10 {
            let e = rng.random_range(0..sys.mesh.n_elements());
            let k = rng.random_range(0..sys.n_strain_nodes(e));
            let comp = rng.random_range(0..2);
            let geo = sys.mesh.geometry(e);
            let rule = GaussRule2d::with_points(elevated_points(sys.mesh.degree(e)) + 2);
            let mut defect = 0.0;
            for (&(xi, eta), &w) in rule.points.iter().zip(&rule.weights) {
                let direct = deviator(&apply_c(&strain_at(&sys, &report.state.a, e, xi, eta), &m));
                let proj = sys.eval_strain_field_ref(&lam, StrainBasis::Primal, e, xi, eta);
                let phi = sys.eval_phi(e, k, xi, eta);
                defect += w
                    * geo.jacobian_det(xi, eta).abs()
                    * (direct.coeffs()[comp] - proj.coeffs()[comp])
                    * phi;
            }
            assert!(
                defect.abs() <= 1e-10 * scale,
                "projection defect not orthogonal: {defect:e}"
            );
        }
    }

    #[test]
    fn mu_star_pointwise_examples() {
        let zero = DevTensor::zero(Dim::Two);
        let v = project_mu_star_pointwise(&zero, &zero, 1.0);
        assert_eq!(v.frob_norm(), 0.0);
        // |mu_hat| <= sigma: unchanged
        let lam = DevTensor::from_coeffs(Dim::Two, &[0.3, 0.1]);
        let p = DevTensor::from_coeffs(Dim::Two, &[0.2, 0.0]);
        let v = project_mu_star_pointwise(&lam, &p, 1.0);
        assert_abs_diff_eq!(v.coeffs()[0], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(v.coeffs()[1], 0.1, epsilon = 1e-15);
        // mu_hat = 2 sigma Phi_1 -> sigma Phi_1
        let lam = DevTensor::from_coeffs(Dim::Two, &[2.0, 0.0]);
        let v = project_mu_star_pointwise(&lam, &zero, 1.0);
        assert_abs_diff_eq!(v.coeffs()[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn plasticity_error_zero_when_mu_equals_lambda_and_no_flow() {
        // Lowest order: the multiplier is elementwise constant, so lambda_N
        // itself is admissible and e_p(lambda_N) with p_N = 0 vanishes.
        let mesh = unit_square(4, 1, SquareSides::LEFT);
        let m = material(0.30);
        let sys = DofSystem::new(&mesh, m.yield_sigma_y).unwrap();
        let g = |p: Point2| if p.x > 0.999 { [0.45, 0.0] } else { [0.0, 0.0] };
        let loads = Loads { volume: &|_| [0.0, 0.0], traction: &g };
        let saddle = assemble_blocks(&sys, &m, &loads).unwrap();
        let report = newton_solve(&sys, &saddle, &SolverConfig::default(), None).unwrap();
        assert!(report.converged);
        let lambda = sys.dual_to_primal(&report.state.c);
        let p0 = vec![0.0; lambda.len()];
        let mu = OwnStrain { sys: &sys, coeffs: &lambda, basis: StrainBasis::Primal };
        let e = plasticity_error(&sys, &mu, &p0, &lambda, m.yield_sigma_y).unwrap();
        assert!(e.abs() <= 1e-10, "e_p = {e:e}");
        // with p_N = 0 any feasible mu gives the nonnegative distance term
        let mu0 = PointwiseStrain(&|_| DevTensor::zero(Dim::Two));
        let e0 = plasticity_error(&sys, &mu0, &p0, &lambda, m.yield_sigma_y).unwrap();
        assert!(e0 >= 0.0);
    }

    #[test]
    fn plasticity_error_rejects_infeasible_mu() {
        let (sys, _, m, report) = plastic_benchmark();
        let lambda = sys.dual_to_primal(&report.state.c);
        let big = DevTensor::from_coeffs(Dim::Two, &[2.0 * m.yield_sigma_y, 0.0]);
        let mu = PointwiseStrain(&|_| big);
        let err = plasticity_error(&sys, &mu, &report.state.b, &lambda, m.yield_sigma_y);
        assert!(matches!(err, Err(Error::InfeasibleMultiplier { .. })));
    }

    #[test]
    fn mu_star_minimizes_plasticity_error() {
        let (sys, _, m, report) = plastic_benchmark();
        let lambda = sys.dual_to_primal(&report.state.c);
        let mu_star = MuStar {
            sys: &sys,
            p_coeffs: &report.state.b,
            lambda_coeffs: &lambda,
            sigma_y: m.yield_sigma_y,
        };
        let best =
            plasticity_error(&sys, &mu_star, &report.state.b, &lambda, m.yield_sigma_y).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            // random feasible field: random direction scaled into the ball
            let c0: f64 = rng.random_range(-1.0..1.0);
            let c1: f64 = rng.random_range(-1.0..1.0);
            let scale: f64 = rng.random_range(0.0..1.0);
            let f = move |_x: Point2| {
                let n = (c0 * c0 + c1 * c1).sqrt().max(1e-12);
                DevTensor::from_coeffs(Dim::Two, &[c0 / n * scale * 0.3, c1 / n * scale * 0.3])
            };
            let mu = PointwiseStrain(&f);
            let e = plasticity_error(&sys, &mu, &report.state.b, &lambda, m.yield_sigma_y).unwrap();
            assert!(best <= e + 1e-12, "minimizer beaten: {best} > {e}");
        }
    }

    #[test]
    fn auxiliary_zero_data_gives_zero() {
        let mesh = unit_square(2, 1, SquareSides::LEFT);
        let m = material(1.0);
        let sys = DofSystem::new(&mesh, 1.0).unwrap();
        let lambda = vec![0.0; 2 * sys.n_strain];
        let loads = Loads::zero();
        let aux = solve_auxiliary(&sys, &lambda, &loads, &m, 1, 1).unwrap();
        assert!(aux.a.iter().all(|&v| v.abs() <= 1e-12));
        assert!(aux.b.iter().all(|&v| v.abs() <= 1e-12));
    }

    #[test]
    fn auxiliary_satisfies_weak_equation() {
        // Residual of the frozen-multiplier equation at random test
        // functions of the fine space.
        let (sys, _, m, report) = plastic_benchmark();
        let lambda = sys.dual_to_primal(&report.state.c);
        let g = |p: Point2| if p.x > 0.999 { [0.45, 0.0] } else { [0.0, 0.0] };
        let loads = Loads { volume: &|_| [0.0, 0.0], traction: &g };
        let aux = solve_auxiliary(&sys, &lambda, &loads, &m, 1, 1).unwrap();
        let fine_saddle = assemble_blocks(&aux.sys, &m, &loads).unwrap();
        // residual vector r = [[A,-B],[-B^T,C]](a;b) - (l; -g)
        let (dm, ln) = (fine_saddle.dm, fine_saddle.ln);
        let mut r = vec![0.0; dm + ln];
        fine_saddle.a_block.matvec_add(1.0, &aux.a, &mut r[..dm]);
        fine_saddle.b_block.matvec_add(-1.0, &aux.b, &mut r[..dm]);
        for (ri, li) in r[..dm].iter_mut().zip(&fine_saddle.load) {
            *ri += li; // load = -l
        }
        {
            let tail = &mut r[dm..];
            fine_saddle.b_block.matvec_transpose_add(-1.0, &aux.a, tail);
            fine_saddle.c_block.matvec_add(1.0, &aux.b, tail);
        }
        // add (lambda_N, Phi_k phi_i)
        let lam_fine = LinkedStrain {
            sys: &sys,
            coeffs: &lambda,
            basis: StrainBasis::Primal,
            links: &aux.links,
        };
        let mesh = &aux.sys.mesh;
        for e in 0..mesh.n_elements() {
            let p_deg = mesh.degree(e);
            let geo = mesh.geometry(e);
            let rule = GaussRule2d::with_points(elevated_points(p_deg) + 1);
            for (&(xi, eta), &w) in rule.points.iter().zip(&rule.weights) {
                let wdet = w * geo.jacobian_det(xi, eta).abs();
                let lam = lam_fine.eval(e, xi, eta, geo.map(xi, eta));
                for k in 0..aux.sys.n_strain_nodes(e) {
                    let phi = aux.sys.eval_phi(e, k, xi, eta);
                    let i = aux.sys.zeta(e, k);
                    for c in 0..2 {
                        r[dm + 2 * i + c] += wdet * phi * lam.coeffs()[c];
                    }
                }
            }
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let scale = crate::linalg::norm2(&fine_saddle.load).max(1.0);
        for _ in 0..100 {
            let test: Vec<f64> = (0..dm + ln).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dot: f64 = test.iter().zip(&r).map(|(x, y)| x * y).sum();
            let tnorm = crate::linalg::norm2(&test);
            assert!(dot.abs() <= 1e-10 * scale * tnorm, "weak residual {dot:e}");
        }
    }

    #[test]
    fn lambda_membership_routes_agree() {
        // Sampling both characterizations of the discrete admissible set:
        // per-node coefficient balls vs pointwise Gauss values vs the
        // inequality against the discrete plasticity functional.
        let mesh = unit_square(2, 2, SquareSides::LEFT);
        let sigma_y = 0.9;
        let sys = DofSystem::new(&mesh, sigma_y).unwrap();
        let l = Dim::Two.basis_len();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(19);
        for trial in 0..50 {
            let feasible = trial % 2 == 0;
            let mut mu = vec![0.0; l * sys.n_strain];
            for i in 0..sys.n_strain {
                let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let r: f64 = if feasible {
                    rng.random_range(0.0..sigma_y)
                } else if i == 0 {
                    1.5 * sigma_y
                } else {
                    rng.random_range(0.0..sigma_y)
                };
                mu[l * i] = r * dir.cos();
                mu[l * i + 1] = r * dir.sin();
            }
            assert_eq!(in_lambda_hp_by_nodes(&sys, &mu, 1e-12), feasible);
            assert_eq!(in_lambda_hp_by_gauss_points(&sys, &mu, 1e-9), feasible);
            // inequality route: (mu, q) <= psi_hp(q) for random q when
            // feasible; a violating q exists otherwise.
            let mu_primal = sys.dual_to_primal(&mu);
            if feasible {
                for _ in 0..20 {
                    let q: Vec<f64> =
                        (0..l * sys.n_strain).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let pairing =
                        strain_l2_inner(&sys, (&mu_primal, StrainBasis::Primal), (&q, StrainBasis::Primal));
                    let bound = psi_hp(&sys, &q, sigma_y);
                    assert!(pairing <= bound + 1e-10 * (1.0 + bound.abs()));
                }
            } else {
                // support a violating q at the infeasible node
                let mut q = vec![0.0; l * sys.n_strain];
                q[0] = mu[0];
                q[1] = mu[1];
                let pairing =
                    strain_l2_inner(&sys, (&mu_primal, StrainBasis::Primal), (&q, StrainBasis::Primal));
                let bound = psi_hp(&sys, &q, sigma_y);
                assert!(pairing > bound + 1e-12, "violation not detected");
            }
        }
    }

    #[test]
    fn energy_norm_identities() {
        let (sys, _, _, report) = plastic_benchmark();
        let own = OwnPair { sys: &sys, a: &report.state.a, b: &report.state.b };
        let norms = pair_norms(&sys, &own);
        assert!(norms.u_seminorm_sq > 0.0, "Korn: admissible nonzero field has energy");
        assert_abs_diff_eq!(
            norms.pair_sq(),
            norms.u_seminorm_sq + norms.u_l2_sq + norms.p_l2_sq,
            epsilon = 1e-14 * norms.pair_sq()
        );
        // zero field
        let a0 = vec![0.0; report.state.a.len()];
        let b0 = vec![0.0; report.state.b.len()];
        let zero = OwnPair { sys: &sys, a: &a0, b: &b0 };
        assert_eq!(pair_norms(&sys, &zero).pair_sq(), 0.0);
    }

    #[test]
    fn nested_evaluation_is_exact() {
        // A discrete field evaluated through refinement links agrees with
        // direct evaluation at the same physical points.
        let mesh = unit_square(2, 2, SquareSides::LEFT);
        let sys = DofSystem::new(&mesh, 1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        let a: Vec<f64> = (0..2 * sys.n_displacement).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (fine_mesh, links) = refine_with_links(&mesh, 2);
        for e in 0..fine_mesh.n_elements() {
            let geo = fine_mesh.geometry(e);
            for &(xi, eta) in &[(0.3, -0.7), (0.0, 0.0)] {
                let x = geo.map(xi, eta);
                let m = links[e];
                let (cx, cy) = m.apply(xi, eta);
                let via_link = sys.eval_displacement_ref(&a, m.elem, cx, cy);
                let (ce, pxi, peta) = sys.mesh.locate(x).unwrap();
                let direct = sys.eval_displacement_ref(&a, ce, pxi, peta);
                assert_abs_diff_eq!(via_link[0], direct[0], epsilon = 1e-9);
                assert_abs_diff_eq!(via_link[1], direct[1], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn manufactured_elastic_study_p1_order_one() {
        let m = MaterialLaw::new(1.0, 1.0, 1.0, 1e9).unwrap();
        let force = manufactured::sine_bubble_force(m);
        let value = manufactured::sine_bubble_value;
        let gradient = manufactured::sine_bubble_gradient;
        let u = VectorField { value: &value, gradient: &gradient };
        let lam = manufactured::sine_bubble_lambda(m);
        let problem = StudyProblem {
            base_mesh: unit_square(2, 1, SquareSides::ALL),
            material: m,
            loads: Loads { volume: &force, traction: &|_| [0.0, 0.0] },
            solver: SolverConfig::default(),
        };
        let reference = ReferenceMode::Manufactured {
            u: &u,
            lambda: &lam,
            regularity: (2.0, 2.0, 2.0),
        };
        let study = run_convergence_study(&problem, 3, &reference).unwrap();
        let order = study.final_order().unwrap();
        assert!(order >= 0.9, "observed order {order}");
        // error must decrease monotonically
        for w in study.levels.windows(2) {
            assert!(w[1].err_pair < w[0].err_pair);
        }
        assert!(study.non_monotone_levels.is_empty());
        // per-element contributions are nonnegative and sum to the squared
        // global quantities
        for l in &study.levels {
            let r = &l.report;
            for v in r
                .per_element_pair
                .iter()
                .chain(&r.per_element_lambda)
                .chain(&r.per_element_aux)
            {
                assert!(*v >= 0.0);
            }
            let sums = [
                (r.per_element_pair.iter().sum::<f64>(), r.energy_norm_pair.powi(2)),
                (r.per_element_lambda.iter().sum::<f64>(), r.lambda_error.powi(2)),
                (r.per_element_aux.iter().sum::<f64>(), r.aux_error.powi(2)),
            ];
            for (sum, total) in sums {
                assert_abs_diff_eq!(sum, total, epsilon = 1e-12 * (1.0 + total));
            }
        }
    }

    #[test]
    fn psi_hp_is_homogeneous_and_convex_in_coefficients() {
        let mut mesh = unit_square(2, 1, SquareSides::LEFT);
        mesh.degrees = vec![1, 2, 2, 3];
        let sigma_y = 1.4;
        let sys = DofSystem::new(&mesh, sigma_y).unwrap();
        let n = 2 * sys.n_strain;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(37);
        for _ in 0..20 {
            let q1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q2: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s: f64 = rng.random_range(0.0..5.0);
            let scaled: Vec<f64> = q1.iter().map(|x| s * x).collect();
            let v1 = psi_hp(&sys, &q1, sigma_y);
            assert_abs_diff_eq!(psi_hp(&sys, &scaled, sigma_y), s * v1, epsilon = 1e-11 * (1.0 + v1));
            // midpoint convexity
            let mid: Vec<f64> = q1.iter().zip(&q2).map(|(a, b)| 0.5 * (a + b)).collect();
            let v2 = psi_hp(&sys, &q2, sigma_y);
            let vm = psi_hp(&sys, &mid, sigma_y);
            assert!(vm <= 0.5 * (v1 + v2) + 1e-11 * (1.0 + v1 + v2));
        }
    }

    #[test]
    fn manufactured_elastic_study_p2_order_two() {
        let m = MaterialLaw::new(1.0, 1.0, 1.0, 1e9).unwrap();
        let force = manufactured::sine_bubble_force(m);
        let value = manufactured::sine_bubble_value;
        let gradient = manufactured::sine_bubble_gradient;
        let u = VectorField { value: &value, gradient: &gradient };
        let lam = manufactured::sine_bubble_lambda(m);
        let problem = StudyProblem {
            base_mesh: unit_square(2, 2, SquareSides::ALL),
            material: m,
            loads: Loads { volume: &force, traction: &|_| [0.0, 0.0] },
            solver: SolverConfig::default(),
        };
        let reference = ReferenceMode::Manufactured {
            u: &u,
            lambda: &lam,
            regularity: (3.0, 3.0, 3.0),
        };
        let study = run_convergence_study(&problem, 3, &reference).unwrap();
        let order = study.final_order().unwrap();
        assert!(order >= 1.7, "observed order {order}");
        assert!(study.non_monotone_levels.is_empty());
    }

    #[test]
    fn study_csv_has_expected_header() {
        let study = ConvergenceStudy {
            levels: vec![StudyLevel {
                level: 0,
                h_max: 0.5,
                p_min: 1,
                ndof: 10,
                err_pair: 0.1,
                err_lambda: 0.05,
                e_plast: 0.0,
                aux_err: 0.01,
                order_pair: None,
                report: ErrorReport {
                    energy_norm_pair: 0.1,
                    lambda_error: 0.05,
                    e_plast: 0.0,
                    aux_error: 0.01,
                    per_element_pair: vec![0.01],
                    per_element_lambda: vec![0.0025],
                    per_element_aux: vec![0.0001],
                },
            }],
            regularity: None,
            non_monotone_levels: Vec::new(),
        };
        let csv = study.to_csv();
        assert!(csv.starts_with("level,h_max,p_min,ndof,err_pair,err_lambda,e_plast,aux_err,order_pair\n"));
        assert!(csv.lines().nth(1).unwrap().starts_with("0,5.0"));
    }
}

/// Catalog of smooth displacement fields for manufactured elastic runs.
/// All fields vanish on the boundary of the unit square.
pub mod manufactured {
    use super::*;
    use std::f64::consts::PI;

    /// u_1 = sin(pi x) sin(pi y), u_2 = x (1-x) y (1-y).
    pub fn sine_bubble_value(p: Point2) -> [f64; 2] {
        [
            (PI * p.x).sin() * (PI * p.y).sin(),
            p.x * (1.0 - p.x) * p.y * (1.0 - p.y),
        ]
    }

    pub fn sine_bubble_gradient(p: Point2) -> [[f64; 2]; 2] {
        [
            [
                PI * (PI * p.x).cos() * (PI * p.y).sin(),
                PI * (PI * p.x).sin() * (PI * p.y).cos(),
            ],
            [
                (1.0 - 2.0 * p.x) * p.y * (1.0 - p.y),
                p.x * (1.0 - p.x) * (1.0 - 2.0 * p.y),
            ],
        ]
    }

    /// Volume force f = -div(C eps(u)) of the catalog field.
    pub fn sine_bubble_force(m: MaterialLaw) -> impl Fn(Point2) -> [f64; 2] {
        move |p: Point2| {
            let (mu, la) = (m.lame_mu, m.lame_lambda);
            let (s, c) = ((PI * p.x).sin(), (PI * p.x).cos());
            let (sy, cy) = ((PI * p.y).sin(), (PI * p.y).cos());
            // u1 = s sy, u2 = x(1-x) y(1-y)
            let lap_u1 = -2.0 * PI * PI * s * sy;
            let lap_u2 = -2.0 * p.y * (1.0 - p.y) - 2.0 * p.x * (1.0 - p.x);
            // div u = pi c sy + x(1-x)(1-2y)
            let d1_div = -PI * PI * s * sy + (1.0 - 2.0 * p.x) * (1.0 - 2.0 * p.y);
            let d2_div = PI * PI * c * cy - 2.0 * p.x * (1.0 - p.x);
            [
                -mu * lap_u1 - (mu + la) * d1_div,
                -mu * lap_u2 - (mu + la) * d2_div,
            ]
        }
    }

    /// Exact multiplier of the elastic regime: dev(C eps(u)).
    pub fn sine_bubble_lambda(m: MaterialLaw) -> impl Fn(Point2) -> DevTensor {
        move |p: Point2| {
            let g = sine_bubble_gradient(p);
            let eps = crate::tensors::SymTensor::from_2d(
                g[0][0],
                g[1][1],
                0.5 * (g[0][1] + g[1][0]),
            );
            deviator(&apply_c(&eps, &m))
        }
    }
}
