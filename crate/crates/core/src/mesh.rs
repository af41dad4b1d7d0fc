//! Conforming triangulations of 2D polygons with a two-part boundary
//! partition: `Gamma1` carries the Dirichlet/Robin condition, `Gamma2` the
//! prescribed flux.
//!
//! Meshes are immutable once built. Construction goes through
//! [`Mesh::new`], which checks orientation, conformity and tagging, so every
//! `Mesh` value in the crate satisfies those invariants.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point = [f64; 2];

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("degenerate polygon: {0}")]
    DegeneratePolygon(String),
    #[error("subdivision count must be at least 1")]
    ZeroSubdivision,
    #[error("Gamma1 selector matches no boundary segment")]
    EmptyGamma1,
    #[error("Gamma1 side index {index} out of range for a polygon with {sides} sides")]
    SideOutOfRange { index: usize, sides: usize },
    #[error("triangle {0} has non-positive area")]
    NonPositiveArea(usize),
    #[error("vertex index {index} out of range ({count} vertices)")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("non-conforming mesh: {0}")]
    NonConforming(String),
    #[error("non-finite vertex coordinate at vertex {0}")]
    NonFinite(usize),
    #[error("mesh file parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundaryTag {
    Gamma1,
    Gamma2,
}

impl BoundaryTag {
    fn code(self) -> u8 {
        match self {
            BoundaryTag::Gamma1 => 1,
            BoundaryTag::Gamma2 => 2,
        }
    }
}

/// A boundary edge, oriented counterclockwise with respect to the owning
/// triangle so the outward normal is `(dy, -dx) / len`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub tag: BoundaryTag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<BoundaryEdge>,
    h: f64,
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn dist(a: Point, b: Point) -> f64 {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    (dx * dx + dy * dy).sqrt()
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

impl Mesh {
    /// Validates and builds a mesh. Triangles must be counterclockwise;
    /// boundary edges may be given in either orientation and are reoriented.
    pub fn new(
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        boundary_edges: Vec<BoundaryEdge>,
    ) -> Result<Self, MeshError> {
        let nv = vertices.len();
        for (i, v) in vertices.iter().enumerate() {
            if !v[0].is_finite() || !v[1].is_finite() {
                return Err(MeshError::NonFinite(i));
            }
        }
        if triangles.is_empty() {
            return Err(MeshError::NonConforming("mesh has no triangles".into()));
        }
        // edge -> (count, directed edge as seen from the first owner)
        let mut edges: HashMap<(usize, usize), (usize, [usize; 2])> = HashMap::new();
        for (t, tri) in triangles.iter().enumerate() {
            for &i in tri {
                if i >= nv {
                    return Err(MeshError::IndexOutOfRange { index: i, count: nv });
                }
            }
            let [a, b, c] = *tri;
            if a == b || b == c || a == c {
                return Err(MeshError::NonPositiveArea(t));
            }
            if cross(vertices[a], vertices[b], vertices[c]) <= 0.0 {
                return Err(MeshError::NonPositiveArea(t));
            }
            for (p, q) in [(a, b), (b, c), (c, a)] {
                let entry = edges.entry(edge_key(p, q)).or_insert((0, [p, q]));
                entry.0 += 1;
            }
        }
        let mut boundary: HashMap<(usize, usize), [usize; 2]> = HashMap::new();
        for (key, (count, directed)) in &edges {
            match count {
                1 => {
                    boundary.insert(*key, *directed);
                }
                2 => {}
                _ => {
                    return Err(MeshError::NonConforming(format!(
                        "edge {:?} shared by {} triangles",
                        key, count
                    )))
                }
            }
        }
        let mut seen = HashMap::new();
        let mut oriented = Vec::with_capacity(boundary_edges.len());
        for e in &boundary_edges {
            for &i in &e.vertices {
                if i >= nv {
                    return Err(MeshError::IndexOutOfRange { index: i, count: nv });
                }
            }
            let key = edge_key(e.vertices[0], e.vertices[1]);
            let Some(directed) = boundary.get(&key) else {
                return Err(MeshError::NonConforming(format!(
                    "tagged edge {:?} is not a boundary edge",
                    key
                )));
            };
            if seen.insert(key, ()).is_some() {
                return Err(MeshError::NonConforming(format!(
                    "boundary edge {:?} tagged twice",
                    key
                )));
            }
            oriented.push(BoundaryEdge {
                vertices: *directed,
                tag: e.tag,
            });
        }
        if seen.len() != boundary.len() {
            return Err(MeshError::NonConforming(format!(
                "{} boundary edges but {} tagged",
                boundary.len(),
                seen.len()
            )));
        }
        let mut h: f64 = 0.0;
        for tri in &triangles {
            for (p, q) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
                h = h.max(dist(vertices[p], vertices[q]));
            }
        }
        let mesh = Mesh {
            vertices,
            triangles,
            boundary_edges: oriented,
            h,
        };
        if mesh.tagged_length(BoundaryTag::Gamma1) <= 0.0 {
            return Err(MeshError::EmptyGamma1);
        }
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Longest triangle side.
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        0.5 * cross(self.vertices[a], self.vertices[b], self.vertices[c])
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn edge_length(&self, e: &BoundaryEdge) -> f64 {
        dist(self.vertices[e.vertices[0]], self.vertices[e.vertices[1]])
    }

    pub fn outward_normal(&self, e: &BoundaryEdge) -> Point {
        let a = self.vertices[e.vertices[0]];
        let b = self.vertices[e.vertices[1]];
        let len = dist(a, b);
        [(b[1] - a[1]) / len, -(b[0] - a[0]) / len]
    }

    pub fn tagged_length(&self, tag: BoundaryTag) -> f64 {
        self.boundary_edges
            .iter()
            .filter(|e| e.tag == tag)
            .map(|e| self.edge_length(e))
            .sum()
    }

    /// Sorted, deduplicated vertices lying on the closure of `Gamma1`.
    /// Corner vertices shared with `Gamma2` are included.
    pub fn gamma1_nodes(&self) -> Vec<usize> {
        let mut nodes: Vec<usize> = self
            .boundary_edges
            .iter()
            .filter(|e| e.tag == BoundaryTag::Gamma1)
            .flat_map(|e| e.vertices)
            .collect();
        nodes.sort_unstable();
        nodes.dedup();
        nodes
    }

    /// All distinct edges (boundary and interior), in first-seen order.
    pub fn edges(&self) -> Vec<[usize; 2]> {
        let mut index = HashMap::new();
        let mut out = Vec::new();
        for tri in &self.triangles {
            for (p, q) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
                let key = edge_key(p, q);
                if index.insert(key, out.len()).is_none() {
                    out.push([key.0, key.1]);
                }
            }
        }
        out
    }
}

/// Which polygon sides form `Gamma1`.
#[derive(Clone)]
pub enum Gamma1Selector {
    /// Side `i` runs from polygon vertex `i` to vertex `i + 1`.
    Sides(Vec<usize>),
    /// Evaluated at the midpoint of every boundary edge.
    Predicate(Arc<dyn Fn(Point) -> bool + Send + Sync>),
}

impl fmt::Debug for Gamma1Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gamma1Selector::Sides(s) => f.debug_tuple("Sides").field(s).finish(),
            Gamma1Selector::Predicate(_) => f.write_str("Predicate(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DomainSpec {
    pub polygon: Vec<Point>,
    pub gamma1: Gamma1Selector,
    pub n: usize,
}

impl DomainSpec {
    /// Unit square with `Gamma1` the bottom side `y = 0`.
    pub fn unit_square(n: usize) -> Self {
        DomainSpec {
            polygon: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            gamma1: Gamma1Selector::Sides(vec![0]),
            n,
        }
    }
}

fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |a: Point, b: Point, p: Point, d: f64| {
        d == 0.0
            && p[0] >= a[0].min(b[0])
            && p[0] <= a[0].max(b[0])
            && p[1] >= a[1].min(b[1])
            && p[1] <= a[1].max(b[1])
    };
    on(q1, q2, p1, d1) || on(q1, q2, p2, d2) || on(p1, p2, q1, d3) || on(p1, p2, q2, d4)
}

fn signed_area(poly: &[Point]) -> f64 {
    let m = poly.len();
    (0..m)
        .map(|i| {
            let a = poly[i];
            let b = poly[(i + 1) % m];
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        * 0.5
}

/// Returns the polygon in counterclockwise order together with, for each
/// side of the returned polygon, the index of the corresponding input side.
fn normalize_polygon(poly: &[Point]) -> Result<(Vec<Point>, Vec<usize>), MeshError> {
    let m = poly.len();
    if m < 3 {
        return Err(MeshError::DegeneratePolygon(format!(
            "{} vertices, need at least 3",
            m
        )));
    }
    for (i, p) in poly.iter().enumerate() {
        if !p[0].is_finite() || !p[1].is_finite() {
            return Err(MeshError::DegeneratePolygon(format!(
                "vertex {} is not finite",
                i
            )));
        }
    }
    for i in 0..m {
        for j in (i + 1)..m {
            if poly[i] == poly[j] {
                return Err(MeshError::DegeneratePolygon(format!(
                    "vertices {} and {} coincide",
                    i, j
                )));
            }
        }
    }
    for i in 0..m {
        for j in (i + 1)..m {
            let adjacent = j == i + 1 || (i == 0 && j == m - 1);
            if adjacent {
                continue;
            }
            if segments_intersect(poly[i], poly[(i + 1) % m], poly[j], poly[(j + 1) % m]) {
                return Err(MeshError::DegeneratePolygon(format!(
                    "sides {} and {} intersect",
                    i, j
                )));
            }
        }
    }
    let area = signed_area(poly);
    if area == 0.0 {
        return Err(MeshError::DegeneratePolygon("zero area".into()));
    }
    if area > 0.0 {
        Ok((poly.to_vec(), (0..m).collect()))
    } else {
        let rev: Vec<Point> = poly.iter().rev().copied().collect();
        // reversed side k joins original vertices m-1-k and m-2-k
        let sides = (0..m).map(|k| (2 * m - 2 - k) % m).collect();
        Ok((rev, sides))
    }
}

fn point_in_triangle(p: Point, a: Point, b: Point, c: Point) -> bool {
    cross(a, b, p) >= 0.0 && cross(b, c, p) >= 0.0 && cross(c, a, p) >= 0.0
}

/// Ear clipping of a counterclockwise simple polygon.
fn ear_clip(poly: &[Point]) -> Result<Vec<[usize; 3]>, MeshError> {
    let mut idx: Vec<usize> = (0..poly.len()).collect();
    let mut out = Vec::with_capacity(poly.len() - 2);
    while idx.len() > 3 {
        let k = idx.len();
        let mut clipped = false;
        for i in 0..k {
            let (ia, ib, ic) = (idx[(i + k - 1) % k], idx[i], idx[(i + 1) % k]);
            let (a, b, c) = (poly[ia], poly[ib], poly[ic]);
            if cross(a, b, c) <= 0.0 {
                continue;
            }
            let blocked = idx
                .iter()
                .filter(|&&j| j != ia && j != ib && j != ic)
                .any(|&j| point_in_triangle(poly[j], a, b, c));
            if blocked {
                continue;
            }
            out.push([ia, ib, ic]);
            idx.remove(i);
            clipped = true;
            break;
        }
        if !clipped {
            return Err(MeshError::DegeneratePolygon(
                "ear clipping failed (collinear or self-touching outline)".into(),
            ));
        }
    }
    let (a, b, c) = (poly[idx[0]], poly[idx[1]], poly[idx[2]]);
    if cross(a, b, c) <= 0.0 {
        return Err(MeshError::DegeneratePolygon("collinear final ear".into()));
    }
    out.push([idx[0], idx[1], idx[2]]);
    Ok(out)
}

fn is_axis_rectangle(poly: &[Point]) -> Option<(Point, Point)> {
    if poly.len() != 4 {
        return None;
    }
    let xmin = poly.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let xmax = poly.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let ymin = poly.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let ymax = poly.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let corners = [[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]];
    if corners.iter().all(|c| poly.contains(c)) {
        Some(([xmin, ymin], [xmax, ymax]))
    } else {
        None
    }
}

/// Index of the polygon side containing segment `a`–`b`, if any.
fn side_containing(poly: &[Point], a: Point, b: Point) -> Option<usize> {
    let m = poly.len();
    (0..m).find(|&s| {
        let (p, q) = (poly[s], poly[(s + 1) % m]);
        let len = dist(p, q);
        let tol = 1e-12 * len.max(1.0);
        let within = |x: Point| {
            cross(p, q, x).abs() <= tol * len
                && (x[0] - p[0]) * (q[0] - p[0]) + (x[1] - p[1]) * (q[1] - p[1]) >= -tol * len
                && (x[0] - q[0]) * (p[0] - q[0]) + (x[1] - q[1]) * (p[1] - q[1]) >= -tol * len
        };
        within(a) && within(b)
    })
}

/// Builds a conforming triangulation of the polygon in `spec`.
///
/// Axis-aligned rectangles get a uniform `n x n` grid with every cell split
/// along the same diagonal. Any other simple polygon is ear-clipped and each
/// coarse triangle is subdivided into `n^2` similar triangles.
pub fn build_structured_mesh(spec: &DomainSpec) -> Result<Mesh, MeshError> {
    if spec.n == 0 {
        return Err(MeshError::ZeroSubdivision);
    }
    let (poly, side_map) = normalize_polygon(&spec.polygon)?;
    let n = spec.n;
    let (vertices, triangles, bedges) = if let Some((lo, hi)) = is_axis_rectangle(&poly) {
        grid_rectangle(lo, hi, n)
    } else {
        subdivide_polygon(&poly, n)?
    };

    let m = poly.len();
    if let Gamma1Selector::Sides(sides) = &spec.gamma1 {
        if sides.is_empty() {
            return Err(MeshError::EmptyGamma1);
        }
        if let Some(&bad) = sides.iter().find(|&&s| s >= m) {
            return Err(MeshError::SideOutOfRange { index: bad, sides: m });
        }
    }
    let mut tagged = Vec::with_capacity(bedges.len());
    for [a, b] in bedges {
        let (pa, pb) = (vertices[a], vertices[b]);
        let is_gamma1 = match &spec.gamma1 {
            Gamma1Selector::Sides(sides) => {
                let side = side_containing(&poly, pa, pb).ok_or_else(|| {
                    MeshError::NonConforming("boundary edge off the polygon outline".into())
                })?;
                sides.contains(&side_map[side])
            }
            Gamma1Selector::Predicate(pred) => {
                pred([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])])
            }
        };
        tagged.push(BoundaryEdge {
            vertices: [a, b],
            tag: if is_gamma1 {
                BoundaryTag::Gamma1
            } else {
                BoundaryTag::Gamma2
            },
        });
    }
    if !tagged.iter().any(|e| e.tag == BoundaryTag::Gamma1) {
        return Err(MeshError::EmptyGamma1);
    }
    Mesh::new(vertices, triangles, tagged)
}

type RawMesh = (Vec<Point>, Vec<[usize; 3]>, Vec<[usize; 2]>);

fn grid_rectangle(lo: Point, hi: Point, n: usize) -> RawMesh {
    let coord = |k: usize, a: f64, b: f64| {
        if k == n {
            b
        } else {
            a + (b - a) * (k as f64) / (n as f64)
        }
    };
    let id = |i: usize, j: usize| j * (n + 1) + i;
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            vertices.push([coord(i, lo[0], hi[0]), coord(j, lo[1], hi[1])]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (v00, v10, v11, v01) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    let mut bedges = Vec::with_capacity(4 * n);
    for i in 0..n {
        bedges.push([id(i, 0), id(i + 1, 0)]);
    }
    for j in 0..n {
        bedges.push([id(n, j), id(n, j + 1)]);
    }
    for i in (0..n).rev() {
        bedges.push([id(i + 1, n), id(i, n)]);
    }
    for j in (0..n).rev() {
        bedges.push([id(0, j + 1), id(0, j)]);
    }
    (vertices, triangles, bedges)
}

fn subdivide_polygon(poly: &[Point], n: usize) -> Result<RawMesh, MeshError> {
    let coarse = ear_clip(poly)?;
    let m = poly.len();
    let mut vertices: Vec<Point> = poly.to_vec();
    let mut edge_nodes: HashMap<(usize, usize, usize), usize> = HashMap::new();
    let mut triangles = Vec::with_capacity(coarse.len() * n * n);

    for tri in &coarse {
        let mut lattice = vec![usize::MAX; (n + 1) * (n + 1)];
        let at = |i: usize, j: usize| j * (n + 1) + i;
        for j in 0..=n {
            for i in 0..=(n - j) {
                // barycentric integer weights (n-i-j, i, j) on (tri[0], tri[1], tri[2])
                let w = [n - i - j, i, j];
                let nonzero: Vec<usize> = (0..3).filter(|&k| w[k] > 0).collect();
                let index = match nonzero.len() {
                    1 => tri[nonzero[0]],
                    2 => {
                        let (x, y) = (tri[nonzero[0]], tri[nonzero[1]]);
                        let (lo_v, hi_v, w_hi) = if x < y {
                            (x, y, w[nonzero[1]])
                        } else {
                            (y, x, w[nonzero[0]])
                        };
                        *edge_nodes.entry((lo_v, hi_v, w_hi)).or_insert_with(|| {
                            let t = w_hi as f64 / n as f64;
                            let (p, q) = (poly[lo_v], poly[hi_v]);
                            vertices.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
                            vertices.len() - 1
                        })
                    }
                    _ => {
                        let (a, b, c) = (poly[tri[0]], poly[tri[1]], poly[tri[2]]);
                        let (s, t) = (i as f64 / n as f64, j as f64 / n as f64);
                        vertices.push([
                            a[0] + s * (b[0] - a[0]) + t * (c[0] - a[0]),
                            a[1] + s * (b[1] - a[1]) + t * (c[1] - a[1]),
                        ]);
                        vertices.len() - 1
                    }
                };
                lattice[at(i, j)] = index;
            }
        }
        for j in 0..n {
            for i in 0..(n - j) {
                triangles.push([lattice[at(i, j)], lattice[at(i + 1, j)], lattice[at(i, j + 1)]]);
                if i + j + 1 < n {
                    triangles.push([
                        lattice[at(i + 1, j)],
                        lattice[at(i + 1, j + 1)],
                        lattice[at(i, j + 1)],
                    ]);
                }
            }
        }
    }

    let mut bedges = Vec::with_capacity(m * n);
    for s in 0..m {
        let (a, b) = (s, (s + 1) % m);
        let (lo_v, hi_v) = edge_key(a, b);
        let node = |k: usize| -> usize {
            // k steps from `a` towards `b`
            if k == 0 {
                a
            } else if k == n {
                b
            } else {
                let w_hi = if hi_v == b { k } else { n - k };
                edge_nodes[&(lo_v, hi_v, w_hi)]
            }
        };
        for k in 0..n {
            bedges.push([node(k), node(k + 1)]);
        }
    }
    Ok((vertices, triangles, bedges))
}

/// Linear prolongation from a mesh to its uniform refinement: fine vertex
/// `k` takes the mean of coarse values at `parents[k]` (equal entries for
/// inherited vertices). Exact for P1 functions.
#[derive(Debug, Clone, PartialEq)]
pub struct Prolongation {
    pub n_coarse: usize,
    pub parents: Vec<[usize; 2]>,
}

impl Prolongation {
    pub fn n_fine(&self) -> usize {
        self.parents.len()
    }

    pub fn apply(&self, coarse: &[f64]) -> Vec<f64> {
        assert_eq!(coarse.len(), self.n_coarse, "prolongation size mismatch");
        self.parents
            .iter()
            .map(|&[a, b]| {
                if a == b {
                    coarse[a]
                } else {
                    0.5 * (coarse[a] + coarse[b])
                }
            })
            .collect()
    }

    /// Transpose action, used to test fine-mesh data against coarse basis
    /// functions.
    pub fn apply_transpose(&self, fine: &[f64]) -> Vec<f64> {
        assert_eq!(fine.len(), self.n_fine(), "prolongation size mismatch");
        let mut out = vec![0.0; self.n_coarse];
        for (k, &[a, b]) in self.parents.iter().enumerate() {
            if a == b {
                out[a] += fine[k];
            } else {
                out[a] += 0.5 * fine[k];
                out[b] += 0.5 * fine[k];
            }
        }
        out
    }
}

/// Splits every triangle into four congruent children through the edge
/// midpoints. Boundary tags are inherited.
pub fn refine_uniform(mesh: &Mesh) -> Mesh {
    refine_with_prolongation(mesh).0
}

pub fn refine_with_prolongation(mesh: &Mesh) -> (Mesh, Prolongation) {
    let nv = mesh.num_vertices();
    let mut vertices = mesh.vertices.clone();
    let mut parents: Vec<[usize; 2]> = (0..nv).map(|i| [i, i]).collect();
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut mid = |a: usize, b: usize, vertices: &mut Vec<Point>| -> usize {
        *midpoint.entry(edge_key(a, b)).or_insert_with(|| {
            let (p, q) = (vertices[a], vertices[b]);
            vertices.push([0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]);
            let (lo, hi) = edge_key(a, b);
            parents.push([lo, hi]);
            vertices.len() - 1
        })
    };
    let mut triangles = Vec::with_capacity(4 * mesh.triangles.len());
    for &[a, b, c] in &mesh.triangles {
        let ab = mid(a, b, &mut vertices);
        let bc = mid(b, c, &mut vertices);
        let ca = mid(c, a, &mut vertices);
        triangles.push([a, ab, ca]);
        triangles.push([ab, b, bc]);
        triangles.push([ca, bc, c]);
        triangles.push([ab, bc, ca]);
    }
    let mut boundary = Vec::with_capacity(2 * mesh.boundary_edges.len());
    for e in &mesh.boundary_edges {
        let [a, b] = e.vertices;
        let m = mid(a, b, &mut vertices);
        boundary.push(BoundaryEdge { vertices: [a, m], tag: e.tag });
        boundary.push(BoundaryEdge { vertices: [m, b], tag: e.tag });
    }
    let fine = Mesh::new(vertices, triangles, boundary)
        .expect("refinement of a valid mesh is valid");
    (
        fine,
        Prolongation {
            n_coarse: nv,
            parents,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshQuality {
    pub h: f64,
    /// Degrees.
    pub min_angle: f64,
    pub gamma1_length: f64,
    pub gamma2_length: f64,
}

pub fn mesh_quality_report(mesh: &Mesh) -> MeshQuality {
    let mut min_angle = f64::INFINITY;
    for tri in &mesh.triangles {
        for k in 0..3 {
            let o = mesh.vertices[tri[k]];
            let a = mesh.vertices[tri[(k + 1) % 3]];
            let b = mesh.vertices[tri[(k + 2) % 3]];
            let u = [a[0] - o[0], a[1] - o[1]];
            let v = [b[0] - o[0], b[1] - o[1]];
            let cos = (u[0] * v[0] + u[1] * v[1])
                / ((u[0] * u[0] + u[1] * u[1]).sqrt() * (v[0] * v[0] + v[1] * v[1]).sqrt());
            min_angle = min_angle.min(cos.clamp(-1.0, 1.0).acos().to_degrees());
        }
    }
    MeshQuality {
        h: mesh.h,
        min_angle,
        gamma1_length: mesh.tagged_length(BoundaryTag::Gamma1),
        gamma2_length: mesh.tagged_length(BoundaryTag::Gamma2),
    }
}

/// Writes the plain-text mesh format:
/// `vertices N triangles M bedges K`, then coordinates, triangles and
/// tagged boundary edges (tag 1 = Gamma1, 2 = Gamma2), all 0-based.
pub fn write_mesh<W: Write>(mesh: &Mesh, mut w: W) -> std::io::Result<()> {
    writeln!(
        w,
        "vertices {} triangles {} bedges {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        mesh.boundary_edges.len()
    )?;
    for v in &mesh.vertices {
        writeln!(w, "{} {}", v[0], v[1])?;
    }
    for t in &mesh.triangles {
        writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
    }
    for e in &mesh.boundary_edges {
        writeln!(w, "{} {} {}", e.vertices[0], e.vertices[1], e.tag.code())?;
    }
    Ok(())
}

pub fn read_mesh<R: BufRead>(r: R) -> Result<Mesh, MeshError> {
    let mut lines = r
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| match l {
            Ok(s) => !s.trim().is_empty() && !s.trim_start().starts_with('#'),
            Err(_) => true,
        });
    let mut next = |what: &str| -> Result<(usize, Vec<String>), MeshError> {
        match lines.next() {
            Some((no, Ok(s))) => Ok((no, s.split_whitespace().map(String::from).collect())),
            Some((_, Err(e))) => Err(MeshError::Io(e)),
            None => Err(MeshError::Parse {
                line: 0,
                msg: format!("unexpected end of file, expected {}", what),
            }),
        }
    };
    fn num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T, MeshError> {
        s.parse().map_err(|_| MeshError::Parse {
            line,
            msg: format!("cannot parse '{}'", s),
        })
    }
    let (no, header) = next("header")?;
    if header.len() != 6
        || header[0] != "vertices"
        || header[2] != "triangles"
        || header[4] != "bedges"
    {
        return Err(MeshError::Parse {
            line: no,
            msg: "expected 'vertices N triangles M bedges K'".into(),
        });
    }
    let nv: usize = num(no, &header[1])?;
    let nt: usize = num(no, &header[3])?;
    let nb: usize = num(no, &header[5])?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (no, f) = next("vertex")?;
        if f.len() != 2 {
            return Err(MeshError::Parse { line: no, msg: "expected 'x y'".into() });
        }
        vertices.push([num(no, &f[0])?, num(no, &f[1])?]);
    }
    let mut triangles = Vec::with_capacity(nt);
    for _ in 0..nt {
        let (no, f) = next("triangle")?;
        if f.len() != 3 {
            return Err(MeshError::Parse { line: no, msg: "expected 'i j k'".into() });
        }
        triangles.push([num(no, &f[0])?, num(no, &f[1])?, num(no, &f[2])?]);
    }
    let mut bedges = Vec::with_capacity(nb);
    for _ in 0..nb {
        let (no, f) = next("boundary edge")?;
        if f.len() != 3 {
            return Err(MeshError::Parse { line: no, msg: "expected 'i j tag'".into() });
        }
        let tag = match f[2].as_str() {
            "1" => BoundaryTag::Gamma1,
            "2" => BoundaryTag::Gamma2,
            other => {
                return Err(MeshError::Parse {
                    line: no,
                    msg: format!("unknown tag '{}'", other),
                })
            }
        };
        bedges.push(BoundaryEdge {
            vertices: [num(no, &f[0])?, num(no, &f[1])?],
            tag,
        });
    }
    Mesh::new(vertices, triangles, bedges)
}
