//! Batch front end: problem configuration files, the solve/study/check
//! pipelines, and their artifacts.
//!
//! Configuration files are flat `key = value` text grouped by `[section]`
//! headers; every key has a default, so an empty file is a valid
//! configuration. Any key can be overridden through the environment as
//! `HPPLAST_<SECTION>_<KEY>`.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{
    self, in_lambda_hp_by_gauss_points, in_lambda_hp_by_nodes, psi_hp, recover_lambda,
    solve_on_mesh, ConvergenceStudy, MuStar, ReferenceMode, StudyProblem,
};
use crate::assembly::{assemble_blocks, strain_l2_inner, Loads, VectorField};
use crate::error::{Error, Result};
use crate::hp_spaces::{DofSystem, StrainBasis};
use crate::mesh::{unit_square, HpMesh, Point2, SquareSides};
use crate::quadrature::GaussRule2d;
use crate::solver::{chi, chi_subdifferential, KinkBranch, SolverConfig};
use crate::tensors::{DevTensor, Dim, MaterialLaw};

/// Exit codes of the command-line interface.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NONCONVERGENCE: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum MeshSpec {
    Generator { n: usize, degree: usize, dirichlet: SquareSides },
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StudyReference {
    Manufactured,
    Overkill,
}

/// Parsed and validated problem configuration.
#[derive(Debug, Clone)]
pub struct ProblemConfig {
    pub mesh: MeshSpec,
    pub material: MaterialLaw,
    /// Constant volume force.
    pub f: [f64; 2],
    /// Constant traction on Neumann edges.
    pub g: [f64; 2],
    /// Per-side traction overrides (left, right, bottom, top).
    pub g_sides: [Option<[f64; 2]>; 4],
    /// Manufactured-solution mode: forces come from the catalog field and
    /// the study compares against it.
    pub manufactured: Option<String>,
    pub solver: SolverConfig,
    pub levels: usize,
    pub reference: StudyReference,
    pub overkill_refinements: usize,
    pub overkill_degree_inc: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dump_system: bool,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            mesh: MeshSpec::Generator { n: 4, degree: 2, dirichlet: SquareSides::LEFT },
            material: MaterialLaw::new(100.0, 80.0, 10.0, 0.30).expect("default material"),
            f: [0.0, 0.0],
            g: [0.0, 0.0],
            g_sides: [None; 4],
            manufactured: None,
            solver: SolverConfig::default(),
            levels: 3,
            reference: StudyReference::Overkill,
            overkill_refinements: 2,
            overkill_degree_inc: 1,
            seed: 42,
            out_dir: PathBuf::from("out"),
            dump_system: false,
        }
    }
}

fn parse_sides(value: &str, line: usize) -> Result<SquareSides> {
    let mut sides = SquareSides { left: false, right: false, bottom: false, top: false };
    for part in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match part {
            "left" => sides.left = true,
            "right" => sides.right = true,
            "bottom" => sides.bottom = true,
            "top" => sides.top = true,
            "all" => sides = SquareSides::ALL,
            other => {
                return Err(Error::ConfigParse {
                    line,
                    msg: format!("unknown side '{other}' (expected left/right/bottom/top/all)"),
                })
            }
        }
    }
    Ok(sides)
}

fn parse_vec2(value: &str, key: &str, line: usize) -> Result<[f64; 2]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 2 {
        return Err(Error::ConfigParse { line, msg: format!("{key} needs two components") });
    }
    let x = parts[0]
        .parse()
        .map_err(|_| Error::ConfigParse { line, msg: format!("bad number in {key}") })?;
    let y = parts[1]
        .parse()
        .map_err(|_| Error::ConfigParse { line, msg: format!("bad number in {key}") })?;
    Ok([x, y])
}

impl ProblemConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    /// Parses the flat key = value format, then applies environment
    /// overrides of the form `HPPLAST_<SECTION>_<KEY>`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String, usize)> = Vec::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if content.starts_with('[') && content.ends_with(']') {
                section = content[1..content.len() - 1].trim().to_lowercase();
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::ConfigParse {
                    line,
                    msg: format!("expected key = value, got '{content}'"),
                });
            };
            let full_key = if section.is_empty() {
                key.trim().to_lowercase()
            } else {
                format!("{section}.{}", key.trim().to_lowercase())
            };
            entries.push((full_key, value.trim().to_string(), line));
        }
        for (var, value) in std::env::vars() {
            if let Some(rest) = var.strip_prefix("HPPLAST_") {
                if let Some((section, key)) = rest.split_once('_') {
                    entries.push((
                        format!("{}.{}", section.to_lowercase(), key.to_lowercase()),
                        value,
                        0,
                    ));
                }
            }
        }
        Self::from_entries(&entries)
    }

    fn from_entries(entries: &[(String, String, usize)]) -> Result<Self> {
        let mut config = ProblemConfig::default();
        let mut mesh_file: Option<PathBuf> = None;
        let mut mesh_n = 4usize;
        let mut mesh_degree = 2usize;
        let mut mesh_dirichlet = SquareSides::LEFT;
        let mut use_generator = true;

        let bad_key = |key: &str, line: usize| Error::ConfigParse {
            line,
            msg: format!("unknown configuration key '{key}'"),
        };
        let bad_value = |key: &str, line: usize| Error::ConfigParse {
            line,
            msg: format!("invalid value for '{key}'"),
        };
        let parse_f64 = |v: &str, key: &str, line: usize| -> Result<f64> {
            v.parse().map_err(|_| bad_value(key, line))
        };
        let parse_usize = |v: &str, key: &str, line: usize| -> Result<usize> {
            v.parse().map_err(|_| bad_value(key, line))
        };

        let (mut lambda, mut mu, mut hard, mut sigma_y) = (
            config.material.lame_lambda,
            config.material.lame_mu,
            config.material.hardening_k,
            config.material.yield_sigma_y,
        );

        for (key, value, line) in entries {
            let line = *line;
            match key.as_str() {
                "mesh.generator" => {
                    if value != "unit_square" {
                        return Err(Error::ConfigParse {
                            line,
                            msg: format!("unknown generator '{value}' (only unit_square)"),
                        });
                    }
                    use_generator = true;
                }
                "mesh.file" => {
                    mesh_file = Some(PathBuf::from(value));
                    use_generator = false;
                }
                "mesh.n" => mesh_n = parse_usize(value, key, line)?,
                "mesh.degree" => mesh_degree = parse_usize(value, key, line)?,
                "mesh.dirichlet" => mesh_dirichlet = parse_sides(value, line)?,
                "material.lame_lambda" => lambda = parse_f64(value, key, line)?,
                "material.lame_mu" => mu = parse_f64(value, key, line)?,
                "material.hardening_k" => hard = parse_f64(value, key, line)?,
                "material.sigma_y" => sigma_y = parse_f64(value, key, line)?,
                "load.f" => config.f = parse_vec2(value, key, line)?,
                "load.g" => config.g = parse_vec2(value, key, line)?,
                "load.g_left" => config.g_sides[0] = Some(parse_vec2(value, key, line)?),
                "load.g_right" => config.g_sides[1] = Some(parse_vec2(value, key, line)?),
                "load.g_bottom" => config.g_sides[2] = Some(parse_vec2(value, key, line)?),
                "load.g_top" => config.g_sides[3] = Some(parse_vec2(value, key, line)?),
                "load.manufactured" => config.manufactured = Some(value.clone()),
                "solver.rho" => config.solver.rho = parse_f64(value, key, line)?,
                "solver.tol" => config.solver.tol = parse_f64(value, key, line)?,
                "solver.max_iter" => config.solver.max_iter = parse_usize(value, key, line)?,
                "solver.damping" => config.solver.damping = parse_f64(value, key, line)?,
                "solver.verbose" => {
                    config.solver.verbose = value.parse().map_err(|_| bad_value(key, line))?
                }
                "solver.branch" => {
                    config.solver.kink_branch = match value.as_str() {
                        "inactive" => KinkBranch::Inactive,
                        "active" => KinkBranch::Active,
                        _ => return Err(bad_value(key, line)),
                    }
                }
                "study.levels" => config.levels = parse_usize(value, key, line)?,
                "study.reference" => {
                    config.reference = match value.as_str() {
                        "manufactured" => StudyReference::Manufactured,
                        "overkill" => StudyReference::Overkill,
                        _ => return Err(bad_value(key, line)),
                    }
                }
                "study.overkill_refinements" => {
                    config.overkill_refinements = parse_usize(value, key, line)?
                }
                "study.overkill_degree_inc" => {
                    config.overkill_degree_inc = parse_usize(value, key, line)?
                }
                "check.seed" => config.seed = value.parse().map_err(|_| bad_value(key, line))?,
                "output.dir" => config.out_dir = PathBuf::from(value),
                "output.dump_system" => {
                    config.dump_system = value.parse().map_err(|_| bad_value(key, line))?
                }
                _ => return Err(bad_key(key, line)),
            }
        }

        config.material = MaterialLaw::new(lambda, mu, hard, sigma_y)
            .map_err(|e| Error::Config(format!("[material] {e}")))?;
        if config.levels < 1 {
            return Err(Error::Config("[study] levels must be >= 1".into()));
        }
        config.mesh = if use_generator {
            if mesh_n < 1 || mesh_degree < 1 {
                return Err(Error::Config("[mesh] n and degree must be >= 1".into()));
            }
            MeshSpec::Generator { n: mesh_n, degree: mesh_degree, dirichlet: mesh_dirichlet }
        } else {
            let file = mesh_file.expect("mesh.file was set");
            if !file.exists() {
                return Err(Error::Config(format!(
                    "[mesh] file '{}' does not exist",
                    file.display()
                )));
            }
            MeshSpec::File(file)
        };
        Ok(config)
    }

    pub fn build_mesh(&self) -> Result<HpMesh> {
        match &self.mesh {
            MeshSpec::Generator { n, degree, dirichlet } => Ok(unit_square(*n, *degree, *dirichlet)),
            MeshSpec::File(path) => HpMesh::from_file(path),
        }
    }

    /// Bound traction closure: per-side overrides resolved against the mesh
    /// bounding box, with the uniform value elsewhere.
    pub fn traction_fn(&self, mesh: &HpMesh) -> impl Fn(Point2) -> [f64; 2] + '_ {
        let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
        for n in &mesh.nodes {
            min_x = min_x.min(n.x);
            max_x = max_x.max(n.x);
            min_y = min_y.min(n.y);
            max_y = max_y.max(n.y);
        }
        let tol = 1e-9 * (max_x - min_x).max(max_y - min_y).max(1.0);
        move |p: Point2| {
            if p.x <= min_x + tol {
                if let Some(g) = self.g_sides[0] {
                    return g;
                }
            }
            if p.x >= max_x - tol {
                if let Some(g) = self.g_sides[1] {
                    return g;
                }
            }
            if p.y <= min_y + tol {
                if let Some(g) = self.g_sides[2] {
                    return g;
                }
            }
            if p.y >= max_y - tol {
                if let Some(g) = self.g_sides[3] {
                    return g;
                }
            }
            self.g
        }
    }

    pub fn volume_fn(&self) -> Result<Box<dyn Fn(Point2) -> [f64; 2]>> {
        match self.manufactured.as_deref() {
            None => {
                let f = self.f;
                Ok(Box::new(move |_| f))
            }
            Some("sine_bubble") => {
                Ok(Box::new(analysis::manufactured::sine_bubble_force(self.material)))
            }
            Some(other) => Err(Error::Config(format!(
                "[load] unknown manufactured field '{other}' (available: sine_bubble)"
            ))),
        }
    }
}

/// Paths written by a pipeline run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub vtk: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

/// Writes a file atomically (temp file in the same directory, then rename).
pub fn write_atomic(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, content)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Solve pipeline: assemble, run the Newton solver, write VTK, iteration
/// log and complementarity report. On non-convergence the artifacts are
/// still written and the error is returned.
pub fn cmd_solve(config: &ProblemConfig) -> Result<RunArtifacts> {
    let mesh = config.build_mesh()?;
    let volume = config.volume_fn()?;
    let traction = config.traction_fn(&mesh);
    let loads = Loads { volume: &*volume, traction: &traction };
    let sys = DofSystem::new(&mesh, config.material.yield_sigma_y)?;
    let saddle = assemble_blocks(&sys, &config.material, &loads)?;
    let report = crate::solver::newton_solve(&sys, &saddle, &config.solver, None)?;

    let out = &config.out_dir;
    std::fs::create_dir_all(out)?;

    if config.dump_system {
        for (name, m) in [("A", &saddle.a_block), ("B", &saddle.b_block), ("C", &saddle.c_block)] {
            let mut buf = Vec::new();
            m.write_coordinate(&mut buf)?;
            write_atomic(&out.join(format!("matrix_{name}.txt")), &String::from_utf8_lossy(&buf))?;
        }
    }

    let mut log = String::new();
    for (k, r) in report.residual_history.iter().enumerate() {
        log.push_str(&format!("{} {:.16e}\n", k, r));
    }
    let log_path = out.join("iterations.log");
    write_atomic(&log_path, &log)?;

    let lambda = sys.dual_to_primal(&report.state.c);
    let vtk_path = out.join("solution.vtk");
    let vtk_text = crate::vtk::render_vtk(&crate::vtk::VtkFields {
        sys: &sys,
        report: &report,
        lambda_primal: &lambda,
        material: &config.material,
    });
    write_atomic(&vtk_path, &vtk_text)?;

    let mut comp = String::from("node,lambda_norm,p_norm,defect,cross_deficiency,scale_c,active,ok\n");
    for (i, n) in report.complementarity.nodes.iter().enumerate() {
        comp.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}\n",
            i,
            n.lambda_norm,
            n.p_norm,
            n.defect,
            n.cross_deficiency,
            n.scale_c,
            n.active as u8,
            n.ok as u8
        ));
    }
    let csv_path = out.join("complementarity.csv");
    write_atomic(&csv_path, &comp)?;

    if !report.converged {
        return Err(Error::NonConvergence {
            iterations: report.iterations,
            residual: *report.residual_history.last().unwrap_or(&f64::NAN),
        });
    }
    Ok(RunArtifacts { vtk: Some(vtk_path), csv: Some(csv_path), log: Some(log_path) })
}

/// Convergence-study pipeline: writes the study CSV.
pub fn cmd_study(config: &ProblemConfig) -> Result<RunArtifacts> {
    let study = run_study(config)?;
    let out = &config.out_dir;
    std::fs::create_dir_all(out)?;
    let csv_path = out.join("study.csv");
    write_atomic(&csv_path, &study.to_csv())?;
    Ok(RunArtifacts { vtk: None, csv: Some(csv_path), log: None })
}

pub fn run_study(config: &ProblemConfig) -> Result<ConvergenceStudy> {
    let mesh = config.build_mesh()?;
    let volume = config.volume_fn()?;
    let traction = config.traction_fn(&mesh);
    let loads = Loads { volume: &*volume, traction: &traction };
    let problem = StudyProblem {
        base_mesh: mesh,
        material: config.material,
        loads,
        solver: config.solver,
    };
    match config.reference {
        StudyReference::Manufactured => {
            if config.manufactured.as_deref() != Some("sine_bubble") {
                return Err(Error::Config(
                    "[study] reference = manufactured requires load.manufactured = sine_bubble"
                        .into(),
                ));
            }
            let value = analysis::manufactured::sine_bubble_value;
            let gradient = analysis::manufactured::sine_bubble_gradient;
            let u = VectorField { value: &value, gradient: &gradient };
            let lam = analysis::manufactured::sine_bubble_lambda(config.material);
            let reference = ReferenceMode::Manufactured {
                u: &u,
                lambda: &lam,
                regularity: (2.0, 2.0, 2.0),
            };
            analysis::run_convergence_study(&problem, config.levels, &reference)
        }
        StudyReference::Overkill => {
            let reference = ReferenceMode::Overkill {
                extra_refinements: config.overkill_refinements,
                degree_inc: config.overkill_degree_inc,
            };
            analysis::run_convergence_study(&problem, config.levels, &reference)
        }
    }
}

/// One verification group of the check pipeline.
pub struct CheckResult {
    pub group: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub const CHECK_GROUPS: [&str; 6] =
    ["geometry", "quadrature", "biorth", "jacobian", "complementarity", "lambda_rep"];

/// Check pipeline: runs the invariant suite group by group, prints one
/// PASS/FAIL line each, writes a report CSV, and fails if any group fails.
pub fn cmd_check(config: &ProblemConfig, group_filter: Option<&str>) -> Result<(Vec<CheckResult>, RunArtifacts)> {
    if let Some(g) = group_filter {
        if !CHECK_GROUPS.contains(&g) {
            return Err(Error::Config(format!(
                "unknown check group '{g}' (available: {})",
                CHECK_GROUPS.join(", ")
            )));
        }
    }
    let mut results = Vec::new();
    for group in CHECK_GROUPS {
        if group_filter.is_some_and(|g| g != group) {
            continue;
        }
        let result = match group {
            "geometry" => check_geometry(config),
            "quadrature" => check_quadrature(config),
            "biorth" => check_biorth(config),
            "jacobian" => check_jacobian(config),
            "complementarity" => check_complementarity_group(config),
            "lambda_rep" => check_lambda_rep(config),
            _ => unreachable!(),
        };
        results.push(result);
    }
    let out = &config.out_dir;
    std::fs::create_dir_all(out)?;
    let mut csv = String::from("group,passed,detail\n");
    for r in &results {
        csv.push_str(&format!("{},{},{}\n", r.group, r.passed as u8, r.detail));
    }
    let csv_path = out.join("check_report.csv");
    write_atomic(&csv_path, &csv)?;
    Ok((results, RunArtifacts { vtk: None, csv: Some(csv_path), log: None }))
}

fn check_outcome(group: &'static str, outcome: std::result::Result<String, String>) -> CheckResult {
    match outcome {
        Ok(detail) => CheckResult { group, passed: true, detail },
        Err(detail) => CheckResult { group, passed: false, detail },
    }
}

fn check_geometry(config: &ProblemConfig) -> CheckResult {
    check_outcome("geometry", (|| {
        let mesh = config.build_mesh().map_err(|e| e.to_string())?;
        mesh.validate().map_err(|e| e.to_string())?;
        for e in 0..mesh.n_elements() {
            if !mesh.geometry(e).satisfies_mapping_assumption() {
                return Err(format!("element {e} violates the mapping assumption"));
            }
        }
        let area = mesh.total_measure();
        let refined_area = mesh.refine_uniform().total_measure();
        if (area - refined_area).abs() > 1e-12 * area.abs() {
            return Err(format!("measure changes under refinement: {area} vs {refined_area}"));
        }
        Ok(format!("{} elements, |Omega| = {:.6}", mesh.n_elements(), area))
    })())
}

fn check_quadrature(config: &ProblemConfig) -> CheckResult {
    check_outcome("quadrature", (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for n in 1..=8usize {
            let rule = GaussRule2d::with_points(n);
            let sum: f64 = rule.weights.iter().sum();
            if (sum - 4.0).abs() > 1e-12 {
                return Err(format!("weights of the {n}-point rule sum to {sum}"));
            }
            let deg = 2 * n - 1;
            for _ in 0..5 {
                let coeffs: Vec<f64> =
                    (0..(deg + 1) * (deg + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
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
                if (quad - exact).abs() > 1e-12 * (1.0 + exact.abs()) {
                    return Err(format!(
                        "degree-{deg} polynomial not integrated exactly by {n} points: {quad} vs {exact}"
                    ));
                }
            }
        }
        Ok("tensor rules exact up to degree 2p-1 for p = 1..8".into())
    })())
}

fn mixed_degree_square() -> HpMesh {
    let mut mesh = unit_square(4, 1, SquareSides::LEFT);
    // comparable mixed degrees 1..3 in vertical bands
    for e in 0..mesh.n_elements() {
        let col = e % 4;
        mesh.degrees[e] = match col {
            0 => 1,
            1 => 2,
            2 => 2,
            _ => 3,
        };
    }
    mesh
}

fn check_biorth(config: &ProblemConfig) -> CheckResult {
    check_outcome("biorth", (|| {
        let sigma_y = config.material.yield_sigma_y;
        for mesh in [config.build_mesh().map_err(|e| e.to_string())?, mixed_degree_square()] {
            let sys = DofSystem::new(&mesh, sigma_y).map_err(|e| e.to_string())?;
            let max_d = sys.d_weights.iter().cloned().fold(0.0, f64::max);
            if sys.d_weights.iter().any(|&d| d <= 0.0) {
                return Err("non-positive node weight".into());
            }
            if sys.sigma_weights.iter().any(|&s| (s - sigma_y).abs() > 1e-12 * sigma_y) {
                return Err("sigma weights differ from the constant yield stress".into());
            }
            // full pairing matrix, elementwise supports
            for e in 0..mesh.n_elements() {
                let p = mesh.degree(e);
                let geo = mesh.geometry(e);
                let rule = GaussRule2d::with_points(crate::quadrature::elevated_points(p));
                let n_t = sys.n_strain_nodes(e);
                for ki in 0..n_t {
                    for kj in 0..n_t {
                        let mut val = 0.0;
                        for (&(xi, eta), &w) in rule.points.iter().zip(&rule.weights) {
                            val += w
                                * geo.jacobian_det(xi, eta).abs()
                                * sys.eval_phi(e, ki, xi, eta)
                                * sys.eval_dual(e, kj, xi, eta);
                        }
                        let expected = if ki == kj { sys.d_weights[sys.zeta(e, ki)] } else { 0.0 };
                        if (val - expected).abs() > 1e-12 * max_d {
                            return Err(format!(
                                "biorthogonality defect {:.3e} on element {e}",
                                (val - expected).abs()
                            ));
                        }
                    }
                }
            }
        }
        Ok("pairing matrix diagonal within 1e-12 of the node weights".into())
    })())
}

fn check_jacobian(config: &ProblemConfig) -> CheckResult {
    check_outcome("jacobian", (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 100 {
            let sigma: f64 = rng.random_range(0.5..2.0);
            let rho = [0.01, 1.0, 100.0][rng.random_range(0..3)];
            let q = DevTensor::from_coeffs(
                Dim::Two,
                &[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            );
            let mu = DevTensor::from_coeffs(
                Dim::Two,
                &[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            );
            let w = mu.add(&q.scale(rho));
            if (w.frob_norm() - sigma).abs() < 1e-3 * sigma.max(1.0) {
                continue;
            }
            checked += 1;
            let (dq, dmu) = chi_subdifferential(sigma, rho, &q, &mu, KinkBranch::Inactive);
            for c in 0..2 {
                let perturb = |v: &DevTensor, delta: f64| {
                    let mut cs = [v.coeffs()[0], v.coeffs()[1]];
                    cs[c] += delta;
                    DevTensor::from_coeffs(Dim::Two, &cs)
                };
                let fp = chi(sigma, rho, &perturb(&q, h), &mu);
                let fm = chi(sigma, rho, &perturb(&q, -h), &mu);
                for r in 0..2 {
                    let fd = (fp.coeffs()[r] - fm.coeffs()[r]) / (2.0 * h);
                    if (dq[(r, c)] - fd).abs() > 1e-5 * dq[(r, c)].abs().max(1.0) {
                        return Err(format!("dchi/dq mismatch at ({r},{c}): {} vs {fd}", dq[(r, c)]));
                    }
                }
                let fp = chi(sigma, rho, &q, &perturb(&mu, h));
                let fm = chi(sigma, rho, &q, &perturb(&mu, -h));
                for r in 0..2 {
                    let fd = (fp.coeffs()[r] - fm.coeffs()[r]) / (2.0 * h);
                    if (dmu[(r, c)] - fd).abs() > 1e-5 * dmu[(r, c)].abs().max(1.0) {
                        return Err(format!(
                            "dchi/dmu mismatch at ({r},{c}): {} vs {fd}",
                            dmu[(r, c)]
                        ));
                    }
                }
            }
        }
        Ok("100 Clarke rows match central differences within 1e-5".into())
    })())
}

fn check_complementarity_group(config: &ProblemConfig) -> CheckResult {
    check_outcome("complementarity", (|| {
        // constructed roots and violations of the node conditions
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let sigma = config.material.yield_sigma_y;
        for rho in [0.01, 1.0, 100.0] {
            for _ in 0..1000 {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let dir = DevTensor::from_coeffs(Dim::Two, &[angle.cos(), angle.sin()]);
                let (p, lambda) = if rng.random_bool(0.5) {
                    let c: f64 = rng.random_range(0.0..3.0);
                    (dir.scale(sigma * c), dir.scale(sigma))
                } else {
                    (DevTensor::zero(Dim::Two), dir.scale(rng.random_range(0.0..sigma)))
                };
                if chi(sigma, rho, &p, &lambda).frob_norm() > 1e-12 {
                    return Err(format!("constructed root rejected at rho = {rho}"));
                }
                let bad = dir.scale(1.5 * sigma);
                if chi(sigma, rho, &DevTensor::zero(Dim::Two), &bad).frob_norm() <= 1e-8 {
                    return Err(format!("violation accepted at rho = {rho}"));
                }
            }
        }
        // converged benchmark satisfies the decoupled conditions
        let mesh = config.build_mesh().map_err(|e| e.to_string())?;
        let volume = config.volume_fn().map_err(|e| e.to_string())?;
        let traction = config.traction_fn(&mesh);
        let loads = Loads { volume: &*volume, traction: &traction };
        let sol = solve_on_mesh(&mesh, &config.material, &loads, &config.solver)
            .map_err(|e| e.to_string())?;
        if !sol.report.complementarity.all_ok {
            return Err("converged state violates the per-node conditions".into());
        }
        Ok(format!(
            "Newton converged in {} iterations, {} of {} nodes active",
            sol.report.iterations,
            sol.report.complementarity.n_active,
            sol.sys.n_strain
        ))
    })())
}

fn check_lambda_rep(config: &ProblemConfig) -> CheckResult {
    check_outcome("lambda_rep", (|| {
        let mesh = mixed_degree_square();
        let sigma_y = config.material.yield_sigma_y;
        let sys = DofSystem::new(&mesh, sigma_y).map_err(|e| e.to_string())?;
        let pairings = analysis::dual_primal_pairings(&sys);
        let l = Dim::Two.basis_len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for trial in 0..200 {
            // feasible multiplier in per-node balls
            let mut mu = vec![0.0; l * sys.n_strain];
            for i in 0..sys.n_strain {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let r: f64 = rng.random_range(0.0..sigma_y);
                mu[l * i] = r * angle.cos();
                mu[l * i + 1] = r * angle.sin();
            }
            if !in_lambda_hp_by_nodes(&sys, &mu, 1e-12)
                || !in_lambda_hp_by_gauss_points(&sys, &mu, 1e-9)
            {
                return Err("feasible sample rejected by a membership route".into());
            }
            for _ in 0..100 {
                let q: Vec<f64> =
                    (0..l * sys.n_strain).map(|_| rng.random_range(-1.0..1.0)).collect();
                let pairing = analysis::paired_inner(&sys, &pairings, &mu, &q);
                let bound = psi_hp(&sys, &q, sigma_y);
                if pairing > bound + 1e-10 * (1.0 + bound) {
                    return Err(format!(
                        "feasible multiplier violates the functional bound at trial {trial}"
                    ));
                }
            }
            // infeasible: scale one node to 1.5 sigma and exhibit a violating q
            let node = rng.random_range(0..sys.n_strain);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            mu[l * node] = 1.5 * sigma_y * angle.cos();
            mu[l * node + 1] = 1.5 * sigma_y * angle.sin();
            let mut q = vec![0.0; l * sys.n_strain];
            q[l * node] = mu[l * node];
            q[l * node + 1] = mu[l * node + 1];
            let pairing = analysis::paired_inner(&sys, &pairings, &mu, &q);
            let bound = psi_hp(&sys, &q, sigma_y);
            if pairing <= bound + 1e-12 {
                return Err(format!("infeasible multiplier not detected at trial {trial}"));
            }
        }
        Ok("200 feasible and 200 infeasible samples classified correctly".into())
    })())
}

/// Solve-and-report helper shared by tests: returns the recovered
/// multiplier gap of a converged solve.
pub fn multiplier_recovery_gap(config: &ProblemConfig) -> Result<f64> {
    let mesh = config.build_mesh()?;
    let volume = config.volume_fn()?;
    let traction = config.traction_fn(&mesh);
    let loads = Loads { volume: &*volume, traction: &traction };
    let sol = solve_on_mesh(&mesh, &config.material, &loads, &config.solver)?;
    let recovered =
        recover_lambda(&sol.sys, &sol.report.state.a, &sol.report.state.b, &config.material)?;
    let (num, _) = analysis::strain_diff_l2_sq(
        &sol.sys,
        &analysis::OwnStrain { sys: &sol.sys, coeffs: &recovered, basis: StrainBasis::Primal },
        &analysis::OwnStrain {
            sys: &sol.sys,
            coeffs: &sol.lambda_primal,
            basis: StrainBasis::Primal,
        },
    );
    let den = strain_l2_inner(
        &sol.sys,
        (&sol.lambda_primal, StrainBasis::Primal),
        (&sol.lambda_primal, StrainBasis::Primal),
    );
    Ok((num / den.max(1e-300)).sqrt())
}

/// The e_p minimizer margin of a converged solve: max over random feasible
/// samples of e_p(mu_star) - e_p(mu); nonpositive when mu_star minimizes.
pub fn mu_star_margin(config: &ProblemConfig, samples: usize) -> Result<f64> {
    let mesh = config.build_mesh()?;
    let volume = config.volume_fn()?;
    let traction = config.traction_fn(&mesh);
    let loads = Loads { volume: &*volume, traction: &traction };
    let sol = solve_on_mesh(&mesh, &config.material, &loads, &config.solver)?;
    let sigma_y = config.material.yield_sigma_y;
    let mu_star = MuStar {
        sys: &sol.sys,
        p_coeffs: &sol.report.state.b,
        lambda_coeffs: &sol.lambda_primal,
        sigma_y,
    };
    let best = analysis::plasticity_error(
        &sol.sys,
        &mu_star,
        &sol.report.state.b,
        &sol.lambda_primal,
        sigma_y,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut margin = f64::NEG_INFINITY;
    for _ in 0..samples {
        let c0: f64 = rng.random_range(-1.0..1.0);
        let c1: f64 = rng.random_range(-1.0..1.0);
        let r: f64 = rng.random_range(0.0..sigma_y);
        let f = move |_: Point2| {
            let n = (c0 * c0 + c1 * c1).sqrt().max(1e-12);
            DevTensor::from_coeffs(Dim::Two, &[c0 / n * r, c1 / n * r])
        };
        let mu = analysis::PointwiseStrain(&f);
        let e = analysis::plasticity_error(
            &sol.sys,
            &mu,
            &sol.report.state.b,
            &sol.lambda_primal,
            sigma_y,
        )?;
        margin = margin.max(best - e);
    }
    Ok(margin)
}
