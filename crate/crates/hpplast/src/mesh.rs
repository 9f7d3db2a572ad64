//! Quadrilateral meshes with bilinear geometry maps, per-element degrees,
//! boundary tags and uniform refinement.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::basis1d::gauss_legendre;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Boundary condition tag on a boundary edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryTag {
    Dirichlet,
    Neumann,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundaryEdge {
    pub elem: usize,
    /// Local edge k runs from local corner k to local corner (k + 1) % 4.
    pub local_edge: usize,
    pub tag: BoundaryTag,
}

#[derive(Debug, Clone)]
pub struct HpMesh {
    pub nodes: Vec<Point2>,
    /// Counter-clockwise corner indices per element.
    pub elements: Vec<[usize; 4]>,
    pub boundary: Vec<BoundaryEdge>,
    /// Per-element polynomial degree p_T >= 1.
    pub degrees: Vec<usize>,
}

/// Bilinear map from the reference square [-1,1]^2 onto one element.
#[derive(Debug, Clone, Copy)]
pub struct GeometryMap {
    corners: [Point2; 4],
}

impl GeometryMap {
    pub fn new(corners: [Point2; 4]) -> Self {
        GeometryMap { corners }
    }

    fn shape(xi: f64, eta: f64) -> [f64; 4] {
        [
            0.25 * (1.0 - xi) * (1.0 - eta),
            0.25 * (1.0 + xi) * (1.0 - eta),
            0.25 * (1.0 + xi) * (1.0 + eta),
            0.25 * (1.0 - xi) * (1.0 + eta),
        ]
    }

    /// M_T(xhat): bilinear interpolation of the corners.
    pub fn map(&self, xi: f64, eta: f64) -> Point2 {
        let n = Self::shape(xi, eta);
        let mut p = Point2::new(0.0, 0.0);
        for (ni, c) in n.iter().zip(self.corners.iter()) {
            p.x += ni * c.x;
            p.y += ni * c.y;
        }
        p
    }

    /// Jacobian [[dx/dxi, dx/deta], [dy/dxi, dy/deta]] at (xi, eta).
    pub fn jacobian(&self, xi: f64, eta: f64) -> [[f64; 2]; 2] {
        let dn_dxi = [
            -0.25 * (1.0 - eta),
            0.25 * (1.0 - eta),
            0.25 * (1.0 + eta),
            -0.25 * (1.0 + eta),
        ];
        let dn_deta = [
            -0.25 * (1.0 - xi),
            -0.25 * (1.0 + xi),
            0.25 * (1.0 + xi),
            0.25 * (1.0 - xi),
        ];
        let mut j = [[0.0; 2]; 2];
        for (k, c) in self.corners.iter().enumerate() {
            j[0][0] += dn_dxi[k] * c.x;
            j[0][1] += dn_deta[k] * c.x;
            j[1][0] += dn_dxi[k] * c.y;
            j[1][1] += dn_deta[k] * c.y;
        }
        j
    }

    pub fn jacobian_det(&self, xi: f64, eta: f64) -> f64 {
        let j = self.jacobian(xi, eta);
        j[0][0] * j[1][1] - j[0][1] * j[1][0]
    }

    /// Physical gradient factors: returns (inverse-transpose of J, det J).
    pub fn jacobian_inv_t(&self, xi: f64, eta: f64) -> ([[f64; 2]; 2], f64) {
        let j = self.jacobian(xi, eta);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        let inv_t = [
            [j[1][1] / det, -j[1][0] / det],
            [-j[0][1] / det, j[0][0] / det],
        ];
        (inv_t, det)
    }

    /// True iff det grad M_T is affine on the reference square. For planar
    /// quadrilaterals the bilinear cross term always cancels, so this holds
    /// for every two-dimensional element; checked numerically through the
    /// mixed second difference of the determinant.
    pub fn satisfies_mapping_assumption(&self) -> bool {
        let d = |xi: f64, eta: f64| self.jacobian_det(xi, eta);
        let mixed = d(1.0, 1.0) - d(1.0, -1.0) - d(-1.0, 1.0) + d(-1.0, -1.0);
        let scale = d(0.0, 0.0).abs().max(1e-300);
        (mixed / scale).abs() < 1e-10
    }

    /// Validates positivity of the Jacobian determinant at a tensor Gauss
    /// grid of degree 10.
    pub fn validate(&self, elem: usize) -> Result<()> {
        let (nodes, _) = gauss_legendre(10);
        for &xi in &nodes {
            for &eta in &nodes {
                let det = self.jacobian_det(xi, eta);
                if det <= 0.0 {
                    return Err(Error::InvertedElement { elem, det, xi, eta });
                }
            }
        }
        Ok(())
    }

    /// Inverts the bilinear map by Newton iteration. Returns reference
    /// coordinates if the point lies inside the element (with tolerance).
    pub fn inverse(&self, p: Point2) -> Option<(f64, f64)> {
        let mut xi = 0.0;
        let mut eta = 0.0;
        for _ in 0..50 {
            let q = self.map(xi, eta);
            let rx = q.x - p.x;
            let ry = q.y - p.y;
            if rx.abs() + ry.abs() < 1e-13 {
                break;
            }
            let j = self.jacobian(xi, eta);
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if det.abs() < 1e-300 {
                return None;
            }
            xi -= (j[1][1] * rx - j[0][1] * ry) / det;
            eta -= (-j[1][0] * rx + j[0][0] * ry) / det;
            xi = xi.clamp(-2.0, 2.0);
            eta = eta.clamp(-2.0, 2.0);
        }
        let q = self.map(xi, eta);
        let tol = 1e-9;
        if q.dist(&p) < 1e-9 && xi.abs() <= 1.0 + tol && eta.abs() <= 1.0 + tol {
            Some((xi.clamp(-1.0, 1.0), eta.clamp(-1.0, 1.0)))
        } else {
            None
        }
    }

    /// Element measure by Gauss quadrature of the determinant (exact for
    /// bilinear maps).
    pub fn measure(&self) -> f64 {
        let (nodes, weights) = gauss_legendre(2);
        let mut area = 0.0;
        for (i, &xi) in nodes.iter().enumerate() {
            for (j, &eta) in nodes.iter().enumerate() {
                area += weights[i] * weights[j] * self.jacobian_det(xi, eta).abs();
            }
        }
        area
    }

    /// Element diameter: largest distance between two corners.
    pub fn diameter(&self) -> f64 {
        let mut h: f64 = 0.0;
        for i in 0..4 {
            for j in (i + 1)..4 {
                h = h.max(self.corners[i].dist(&self.corners[j]));
            }
        }
        h
    }
}

/// Map from a child element of one uniform refinement back to its parent.
#[derive(Debug, Clone, Copy)]
pub struct ChildMap {
    pub parent: usize,
    /// Quadrant 0..3, matching the parent corner the child contains.
    pub quadrant: u8,
}

impl ChildMap {
    /// Maps child reference coordinates to parent reference coordinates.
    pub fn to_parent(&self, xi: f64, eta: f64) -> (f64, f64) {
        let (ax, ay) = match self.quadrant {
            0 => (-1.0, -1.0),
            1 => (0.0, -1.0),
            2 => (0.0, 0.0),
            3 => (-1.0, 0.0),
            _ => unreachable!(),
        };
        (ax + 0.5 * (xi + 1.0), ay + 0.5 * (eta + 1.0))
    }
}

impl HpMesh {
    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn geometry(&self, elem: usize) -> GeometryMap {
        let e = self.elements[elem];
        GeometryMap::new([
            self.nodes[e[0]],
            self.nodes[e[1]],
            self.nodes[e[2]],
            self.nodes[e[3]],
        ])
    }

    pub fn degree(&self, elem: usize) -> usize {
        self.degrees[elem]
    }

    /// Element size h_T (diameter).
    pub fn size(&self, elem: usize) -> f64 {
        self.geometry(elem).diameter()
    }

    pub fn h_max(&self) -> f64 {
        (0..self.n_elements()).map(|e| self.size(e)).fold(0.0, f64::max)
    }

    pub fn p_min(&self) -> usize {
        self.degrees.iter().copied().min().unwrap_or(1)
    }

    pub fn total_measure(&self) -> f64 {
        (0..self.n_elements()).map(|e| self.geometry(e).measure()).sum()
    }

    /// Checks element validity, boundary sanity, and degree comparability.
    pub fn validate(&self) -> Result<()> {
        if self.degrees.len() != self.elements.len() {
            return Err(Error::Mesh("degrees and elements length mismatch".into()));
        }
        for (e, _) in self.elements.iter().enumerate() {
            if self.degrees[e] < 1 {
                return Err(Error::Mesh(format!("element {e} has degree 0")));
            }
            for &n in &self.elements[e] {
                if n >= self.nodes.len() {
                    return Err(Error::Mesh(format!("element {e} references missing node {n}")));
                }
            }
            self.geometry(e).validate(e)?;
        }
        // Dirichlet part must have positive length.
        let mut dirichlet_len = 0.0;
        for be in &self.boundary {
            if be.elem >= self.elements.len() || be.local_edge > 3 {
                return Err(Error::Mesh(format!(
                    "boundary entry references element {} edge {}",
                    be.elem, be.local_edge
                )));
            }
            if be.tag == BoundaryTag::Dirichlet {
                let (a, b) = self.edge_nodes(be.elem, be.local_edge);
                dirichlet_len += self.nodes[a].dist(&self.nodes[b]);
            }
        }
        if dirichlet_len <= 0.0 {
            return Err(Error::BoundaryCondition(
                "Dirichlet boundary has zero length".into(),
            ));
        }
        // Comparable degrees between edge neighbours.
        let mut edge_owner: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
        for e in 0..self.n_elements() {
            for le in 0..4 {
                let (a, b) = self.edge_nodes(e, le);
                let key = (a.min(b), a.max(b));
                if let Some(&(other, _)) = edge_owner.get(&key) {
                    let (p, q) = (self.degrees[e], self.degrees[other]);
                    if p.abs_diff(q) > 1 {
                        return Err(Error::Mesh(format!(
                            "degrees {p} and {q} of neighbouring elements {e} and {other} are not comparable"
                        )));
                    }
                } else {
                    edge_owner.insert(key, (e, le));
                }
            }
        }
        Ok(())
    }

    /// Global node indices (start, end) of a directed local edge.
    pub fn edge_nodes(&self, elem: usize, local_edge: usize) -> (usize, usize) {
        let e = self.elements[elem];
        (e[local_edge], e[(local_edge + 1) % 4])
    }

    /// Uniform red refinement: every quadrilateral splits into four children
    /// through the edge midpoints and the centroid. Children of element e are
    /// 4e..4e+3; degrees and boundary tags are inherited.
    pub fn refine_uniform(&self) -> HpMesh {
        self.refine_uniform_with_map().0
    }

    pub fn refine_uniform_with_map(&self) -> (HpMesh, Vec<ChildMap>) {
        let mut nodes = self.nodes.clone();
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, nodes: &mut Vec<Point2>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoint.entry(key).or_insert_with(|| {
                let p = Point2::new(
                    0.5 * (nodes[a].x + nodes[b].x),
                    0.5 * (nodes[a].y + nodes[b].y),
                );
                nodes.push(p);
                nodes.len() - 1
            })
        };

        let mut elements = Vec::with_capacity(4 * self.n_elements());
        let mut degrees = Vec::with_capacity(4 * self.n_elements());
        let mut child_maps = Vec::with_capacity(4 * self.n_elements());
        for (e, &[v0, v1, v2, v3]) in self.elements.iter().enumerate() {
            let m01 = mid(v0, v1, &mut nodes);
            let m12 = mid(v1, v2, &mut nodes);
            let m23 = mid(v2, v3, &mut nodes);
            let m30 = mid(v3, v0, &mut nodes);
            let ctr = {
                let p = Point2::new(
                    0.25 * (nodes[v0].x + nodes[v1].x + nodes[v2].x + nodes[v3].x),
                    0.25 * (nodes[v0].y + nodes[v1].y + nodes[v2].y + nodes[v3].y),
                );
                nodes.push(p);
                nodes.len() - 1
            };
            elements.push([v0, m01, ctr, m30]);
            elements.push([m01, v1, m12, ctr]);
            elements.push([ctr, m12, v2, m23]);
            elements.push([m30, ctr, m23, v3]);
            for q in 0..4u8 {
                degrees.push(self.degrees[e]);
                child_maps.push(ChildMap { parent: e, quadrant: q });
            }
        }

        // Parent edge le is shared by children le and (le + 1) % 4, in both
        // cases as their local edge le.
        let mut boundary = Vec::with_capacity(2 * self.boundary.len());
        for be in &self.boundary {
            for child in [be.local_edge, (be.local_edge + 1) % 4] {
                boundary.push(BoundaryEdge {
                    elem: 4 * be.elem + child,
                    local_edge: be.local_edge,
                    tag: be.tag,
                });
            }
        }

        (HpMesh { nodes, elements, boundary, degrees }, child_maps)
    }

    /// Returns a copy with every element degree raised by `dp`.
    pub fn with_degree_increment(&self, dp: usize) -> HpMesh {
        let mut m = self.clone();
        for p in m.degrees.iter_mut() {
            *p += dp;
        }
        m
    }

    /// Locates the element containing a physical point (linear scan).
    pub fn locate(&self, p: Point2) -> Result<(usize, f64, f64)> {
        for e in 0..self.n_elements() {
            if let Some((xi, eta)) = self.geometry(e).inverse(p) {
                return Ok((e, xi, eta));
            }
        }
        Err(Error::PointOutsideMesh(p.x, p.y))
    }

    /// Serializes to the plain-text mesh format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "NODES {}", self.nodes.len()).unwrap();
        for n in &self.nodes {
            writeln!(s, "{:.16e} {:.16e}", n.x, n.y).unwrap();
        }
        writeln!(s, "ELEMENTS {}", self.elements.len()).unwrap();
        for (e, el) in self.elements.iter().enumerate() {
            writeln!(s, "{} {} {} {} {}", el[0], el[1], el[2], el[3], self.degrees[e]).unwrap();
        }
        writeln!(s, "BOUNDARY {}", self.boundary.len()).unwrap();
        for be in &self.boundary {
            let tag = match be.tag {
                BoundaryTag::Dirichlet => "D",
                BoundaryTag::Neumann => "N",
            };
            writeln!(s, "{} {} {}", be.elem, be.local_edge, tag).unwrap();
        }
        s
    }

    /// Parses the plain-text mesh format (sections NODES/ELEMENTS/BOUNDARY).
    pub fn from_text(text: &str) -> Result<HpMesh> {
        let mut nodes = Vec::new();
        let mut elements = Vec::new();
        let mut degrees = Vec::new();
        let mut boundary = Vec::new();

        #[derive(PartialEq)]
        enum Section {
            None,
            Nodes(usize),
            Elements(usize),
            Boundary(usize),
        }
        let mut section = Section::None;

        let err = |line: usize, msg: &str| Error::MeshParse { line, msg: msg.to_string() };

        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            match fields[0] {
                "NODES" | "ELEMENTS" | "BOUNDARY" => {
                    let count: usize = fields
                        .get(1)
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| err(line, "section header needs a count"))?;
                    section = match fields[0] {
                        "NODES" => Section::Nodes(count),
                        "ELEMENTS" => Section::Elements(count),
                        _ => Section::Boundary(count),
                    };
                }
                _ => match section {
                    Section::Nodes(_) => {
                        if fields.len() != 2 {
                            return Err(err(line, "node line needs two coordinates"));
                        }
                        let x: f64 = fields[0].parse().map_err(|_| err(line, "bad x coordinate"))?;
                        let y: f64 = fields[1].parse().map_err(|_| err(line, "bad y coordinate"))?;
                        nodes.push(Point2::new(x, y));
                    }
                    Section::Elements(_) => {
                        if fields.len() != 5 {
                            return Err(err(line, "element line needs four node indices and a degree"));
                        }
                        let mut conn = [0usize; 4];
                        for (c, f) in conn.iter_mut().zip(&fields[..4]) {
                            *c = f.parse().map_err(|_| err(line, "bad node index"))?;
                        }
                        let p: usize = fields[4].parse().map_err(|_| err(line, "bad degree"))?;
                        if p < 1 {
                            return Err(err(line, "degree must be >= 1"));
                        }
                        elements.push(conn);
                        degrees.push(p);
                    }
                    Section::Boundary(_) => {
                        if fields.len() != 3 {
                            return Err(err(line, "boundary line needs element, local edge and tag"));
                        }
                        let elem: usize = fields[0].parse().map_err(|_| err(line, "bad element index"))?;
                        let local_edge: usize = fields[1].parse().map_err(|_| err(line, "bad edge index"))?;
                        let tag = match fields[2] {
                            "D" => BoundaryTag::Dirichlet,
                            "N" => BoundaryTag::Neumann,
                            _ => return Err(err(line, "tag must be D or N")),
                        };
                        boundary.push(BoundaryEdge { elem, local_edge, tag });
                    }
                    Section::None => return Err(err(line, "data before any section header")),
                },
            }
        }
        Ok(HpMesh { nodes, elements, boundary, degrees })
    }

    pub fn from_file(path: &Path) -> Result<HpMesh> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

/// Which sides of the generated unit square carry the Dirichlet condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SquareSides {
    pub left: bool,
    pub right: bool,
    pub bottom: bool,
    pub top: bool,
}

impl SquareSides {
    pub const ALL: SquareSides = SquareSides { left: true, right: true, bottom: true, top: true };
    pub const LEFT: SquareSides = SquareSides { left: true, right: false, bottom: false, top: false };
}

/// Structured n x n mesh of the unit square with uniform degree p.
/// Sides listed in `dirichlet` are tagged D, the rest N.
pub fn unit_square(n: usize, p: usize, dirichlet: SquareSides) -> HpMesh {
    assert!(n >= 1 && p >= 1);
    let np = n + 1;
    let mut nodes = Vec::with_capacity(np * np);
    for j in 0..np {
        for i in 0..np {
            nodes.push(Point2::new(i as f64 / n as f64, j as f64 / n as f64));
        }
    }
    let mut elements = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let v0 = j * np + i;
            elements.push([v0, v0 + 1, v0 + np + 1, v0 + np]);
        }
    }
    let mut boundary = Vec::new();
    let tag = |d: bool| if d { BoundaryTag::Dirichlet } else { BoundaryTag::Neumann };
    for i in 0..n {
        // bottom row: elements i, local edge 0; top row: local edge 2
        boundary.push(BoundaryEdge { elem: i, local_edge: 0, tag: tag(dirichlet.bottom) });
        boundary.push(BoundaryEdge { elem: (n - 1) * n + i, local_edge: 2, tag: tag(dirichlet.top) });
        // left column: elements i*n, local edge 3; right column: local edge 1
        boundary.push(BoundaryEdge { elem: i * n, local_edge: 3, tag: tag(dirichlet.left) });
        boundary.push(BoundaryEdge { elem: i * n + n - 1, local_edge: 1, tag: tag(dirichlet.right) });
    }
    HpMesh { nodes, elements, boundary, degrees: vec![p; n * n] }
}
