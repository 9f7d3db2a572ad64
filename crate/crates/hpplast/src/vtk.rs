//! Legacy ASCII VTK export of solution fields.
//!
//! Every element is subdivided into p_T x p_T sub-quads in reference space.
//! Displacements are written as point data at the subdivision vertices;
//! strain-space fields, which live at interior Gauss points and may jump
//! across element boundaries, are written as cell data at sub-cell centers.
//! For p_T = 1 this degenerates to one cell per element.

use std::fmt::Write as _;

use crate::hp_spaces::{DofSystem, StrainBasis};
use crate::solver::SolveReport;
use crate::tensors::MaterialLaw;

pub struct VtkFields<'a> {
    pub sys: &'a DofSystem,
    pub report: &'a SolveReport,
    /// Multiplier in the primal basis (recovered or converted).
    pub lambda_primal: &'a [f64],
    pub material: &'a MaterialLaw,
}

pub fn render_vtk(fields: &VtkFields) -> String {
    let sys = fields.sys;
    let mesh = &sys.mesh;
    let state = &fields.report.state;

    let mut points: Vec<(f64, f64)> = Vec::new();
    let mut point_disp: Vec<[f64; 2]> = Vec::new();
    let mut cells: Vec<[usize; 4]> = Vec::new();
    let mut cell_center: Vec<(usize, f64, f64)> = Vec::new();

    for e in 0..mesh.n_elements() {
        let p = mesh.degree(e);
        let geo = mesh.geometry(e);
        let base = points.len();
        let np = p + 1;
        for j in 0..np {
            for i in 0..np {
                let xi = -1.0 + 2.0 * i as f64 / p as f64;
                let eta = -1.0 + 2.0 * j as f64 / p as f64;
                let x = geo.map(xi, eta);
                points.push((x.x, x.y));
                point_disp.push(sys.eval_displacement_ref(&state.a, e, xi, eta));
            }
        }
        for j in 0..p {
            for i in 0..p {
                cells.push([
                    base + j * np + i,
                    base + j * np + i + 1,
                    base + (j + 1) * np + i + 1,
                    base + (j + 1) * np + i,
                ]);
                let xi = -1.0 + 2.0 * (i as f64 + 0.5) / p as f64;
                let eta = -1.0 + 2.0 * (j as f64 + 0.5) / p as f64;
                cell_center.push((e, xi, eta));
            }
        }
    }

    let mut s = String::new();
    s.push_str("# vtk DataFile Version 3.0\n");
    s.push_str("elastoplasticity solution\n");
    s.push_str("ASCII\nDATASET UNSTRUCTURED_GRID\n");
    writeln!(s, "POINTS {} double", points.len()).unwrap();
    for (x, y) in &points {
        writeln!(s, "{:.16e} {:.16e} 0", x, y).unwrap();
    }
    writeln!(s, "CELLS {} {}", cells.len(), 5 * cells.len()).unwrap();
    for c in &cells {
        writeln!(s, "4 {} {} {} {}", c[0], c[1], c[2], c[3]).unwrap();
    }
    writeln!(s, "CELL_TYPES {}", cells.len()).unwrap();
    for _ in &cells {
        s.push_str("9\n");
    }

    writeln!(s, "POINT_DATA {}", points.len()).unwrap();
    s.push_str("VECTORS displacement double\n");
    for d in &point_disp {
        writeln!(s, "{:.16e} {:.16e} 0", d[0], d[1]).unwrap();
    }

    writeln!(s, "CELL_DATA {}", cells.len()).unwrap();
    let scalar = |name: &str, f: &mut dyn FnMut(usize, f64, f64) -> f64, s: &mut String| {
        writeln!(s, "SCALARS {} double 1", name).unwrap();
        s.push_str("LOOKUP_TABLE default\n");
        for &(e, xi, eta) in &cell_center {
            writeln!(s, "{:.16e}", f(e, xi, eta)).unwrap();
        }
    };
    scalar(
        "plastic_strain_norm",
        &mut |e, xi, eta| {
            fields
                .sys
                .eval_strain_field_ref(&state.b, StrainBasis::Primal, e, xi, eta)
                .frob_norm()
        },
        &mut s,
    );
    scalar(
        "multiplier_norm",
        &mut |e, xi, eta| {
            fields
                .sys
                .eval_strain_field_ref(fields.lambda_primal, StrainBasis::Primal, e, xi, eta)
                .frob_norm()
        },
        &mut s,
    );
    // reconstructed matrix components of the plastic strain
    for (name, row, col) in [("p_xx", 0, 0), ("p_xy", 0, 1), ("p_yy", 1, 1)] {
        scalar(
            name,
            &mut |e, xi, eta| {
                fields
                    .sys
                    .eval_strain_field_ref(&state.b, StrainBasis::Primal, e, xi, eta)
                    .reconstruct()
                    .get(row, col)
            },
            &mut s,
        );
    }
    // nearest-node activity flag
    scalar(
        "active",
        &mut |e, xi, eta| {
            let p = mesh.degree(e);
            let nodes = sys.gauss_basis(e).nodes();
            let nearest = |v: f64| {
                nodes
                    .iter()
                    .enumerate()
                    .min_by(|a, b| (a.1 - v).abs().partial_cmp(&(b.1 - v).abs()).unwrap())
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            };
            let k = nearest(eta) * p + nearest(xi);
            let i = sys.zeta(e, k);
            if fields.report.complementarity.nodes[i].active {
                1.0
            } else {
                0.0
            }
        },
        &mut s,
    );
    s
}
