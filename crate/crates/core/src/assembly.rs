//! P1 assembly: stiffness, mass and boundary-mass matrices, boundary loads,
//! nodal interpolation and the discrete norms.
//!
//! All element integrals are evaluated in closed form. The only numerical
//! quadrature here is [`exact_error`], which measures distances to analytic
//! functions.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::{BoundaryTag, Mesh, Point};
use crate::sparse::{dot, SparseMatrix};

/// A continuous piecewise-linear function, one coefficient per vertex.
#[derive(Debug, Clone)]
pub struct FeFunction {
    mesh: Arc<Mesh>,
    values: Vec<f64>,
}

impl FeFunction {
    pub fn new(mesh: Arc<Mesh>, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.num_vertices() {
            return Err(Error::LengthMismatch {
                expected: mesh.num_vertices(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(FeFunction { mesh, values })
    }

    pub fn zeros(mesh: Arc<Mesh>) -> Self {
        Self::constant(mesh, 0.0)
    }

    pub fn constant(mesh: Arc<Mesh>, c: f64) -> Self {
        let n = mesh.num_vertices();
        FeFunction {
            mesh,
            values: vec![c; n],
        }
    }

    pub(crate) fn from_raw(mesh: Arc<Mesh>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), mesh.num_vertices());
        FeFunction { mesh, values }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn same_mesh(&self, other: &FeFunction) -> bool {
        same_mesh(&self.mesh, &other.mesh)
    }

    pub fn check_mesh(&self, mesh: &Arc<Mesh>) -> Result<()> {
        if same_mesh(&self.mesh, mesh) {
            Ok(())
        } else {
            Err(Error::MeshMismatch)
        }
    }

    /// `a * self + b * other`.
    pub fn lin_comb(&self, a: f64, b: f64, other: &FeFunction) -> Result<FeFunction> {
        if !self.same_mesh(other) {
            return Err(Error::MeshMismatch);
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(FeFunction::from_raw(self.mesh.clone(), values))
    }

    pub fn sub(&self, other: &FeFunction) -> Result<FeFunction> {
        self.lin_comb(1.0, -1.0, other)
    }

    pub fn add(&self, other: &FeFunction) -> Result<FeFunction> {
        self.lin_comb(1.0, 1.0, other)
    }

    pub fn scaled(&self, s: f64) -> FeFunction {
        FeFunction::from_raw(self.mesh.clone(), self.values.iter().map(|v| s * v).collect())
    }

    pub fn max_abs_diff(&self, other: &FeFunction) -> Result<f64> {
        Ok(self.sub(other)?.values.iter().fold(0.0, |m, v| m.max(v.abs())))
    }
}

pub(crate) fn same_mesh(a: &Arc<Mesh>, b: &Arc<Mesh>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

/// Flux datum `q` on `Gamma2`.
#[derive(Clone)]
pub enum FluxData {
    Constant(f64),
    /// Nodal values of a continuous trace (entries off `Gamma2` are ignored).
    Nodal(Vec<f64>),
    /// Evaluated at each `Gamma2` edge endpoint with that edge's outward
    /// normal, so side-wise data may jump at polygon corners.
    Function(Arc<dyn Fn(Point, Point) -> f64 + Send + Sync>),
}

impl fmt::Debug for FluxData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FluxData::Constant(c) => f.debug_tuple("Constant").field(c).finish(),
            FluxData::Nodal(v) => f.debug_tuple("Nodal").field(&v.len()).finish(),
            FluxData::Function(_) => f.write_str("Function(..)"),
        }
    }
}

impl FluxData {
    /// Endpoint values of `q` on every boundary edge, aligned with
    /// `mesh.boundary_edges()`; `Gamma1` edges get zeros.
    pub fn edge_trace(&self, mesh: &Mesh) -> Result<Vec<[f64; 2]>> {
        if let FluxData::Nodal(v) = self {
            if v.len() != mesh.num_vertices() {
                return Err(Error::LengthMismatch {
                    expected: mesh.num_vertices(),
                    got: v.len(),
                });
            }
        }
        let mut out = Vec::with_capacity(mesh.boundary_edges().len());
        for e in mesh.boundary_edges() {
            if e.tag != BoundaryTag::Gamma2 {
                out.push([0.0, 0.0]);
                continue;
            }
            let vals = match self {
                FluxData::Constant(c) => [*c, *c],
                FluxData::Nodal(v) => [v[e.vertices[0]], v[e.vertices[1]]],
                FluxData::Function(f) => {
                    let n = mesh.outward_normal(e);
                    [
                        f(mesh.vertices()[e.vertices[0]], n),
                        f(mesh.vertices()[e.vertices[1]], n),
                    ]
                }
            };
            for (k, v) in vals.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite(e.vertices[k]));
                }
            }
            out.push(vals);
        }
        Ok(out)
    }
}

/// Discrete forms and loads of one mesh.
#[derive(Debug, Clone)]
pub struct AssembledForms {
    pub mesh: Arc<Mesh>,
    /// `a(u, v) = int grad u . grad v`
    pub stiffness: SparseMatrix,
    /// `(u, v)_H`
    pub mass: SparseMatrix,
    /// `int_{Gamma1} u v`
    pub gamma1_mass: SparseMatrix,
    /// `int_{Gamma2} u v`
    pub gamma2_mass: SparseMatrix,
    pub b: f64,
    /// `q` endpoint values per boundary edge (zeros on `Gamma1`).
    pub q_trace: Vec<[f64; 2]>,
    /// `int_{Gamma2} q v`
    pub flux_load: Vec<f64>,
    /// `int_{Gamma1} b v`
    pub gamma1_load: Vec<f64>,
    /// Vertices on the closure of `Gamma1`, sorted.
    pub dirichlet_nodes: Vec<usize>,
    /// Complement of `dirichlet_nodes`, sorted.
    pub free_nodes: Vec<usize>,
}

pub fn local_stiffness(p: [Point; 3]) -> [[f64; 3]; 3] {
    let area2 = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]);
    let mut bx = [0.0; 3];
    let mut cy = [0.0; 3];
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        bx[i] = p[j][1] - p[k][1];
        cy[i] = p[k][0] - p[j][0];
    }
    let mut k = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let v = (bx[i] * bx[j] + cy[i] * cy[j]) / (2.0 * area2);
            k[i][j] = v;
            k[j][i] = v;
        }
    }
    k
}

pub fn local_mass(p: [Point; 3]) -> [[f64; 3]; 3] {
    let area = 0.5
        * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]));
    let mut m = [[area / 12.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = area / 6.0;
    }
    m
}

fn edge_mass(len: f64) -> [[f64; 2]; 2] {
    [[len / 3.0, len / 6.0], [len / 6.0, len / 3.0]]
}

/// Assembles every matrix and load on `mesh` for flux `q` and constant
/// boundary temperature `b`.
pub fn assemble(mesh: Arc<Mesh>, q: &FluxData, b: f64) -> Result<AssembledForms> {
    if !b.is_finite() {
        return Err(Error::InvalidParameter {
            name: "b",
            value: b,
            reason: "must be finite",
        });
    }
    let n = mesh.num_vertices();
    let mut ks = Vec::with_capacity(9 * mesh.triangles().len());
    let mut ms = Vec::with_capacity(9 * mesh.triangles().len());
    for tri in mesh.triangles() {
        let p = [
            mesh.vertices()[tri[0]],
            mesh.vertices()[tri[1]],
            mesh.vertices()[tri[2]],
        ];
        let kl = local_stiffness(p);
        let ml = local_mass(p);
        for i in 0..3 {
            for j in 0..3 {
                ks.push((tri[i], tri[j], kl[i][j]));
                ms.push((tri[i], tri[j], ml[i][j]));
            }
        }
    }
    let mut b1 = Vec::new();
    let mut b2 = Vec::new();
    for e in mesh.boundary_edges() {
        let el = edge_mass(mesh.edge_length(e));
        let target = match e.tag {
            BoundaryTag::Gamma1 => &mut b1,
            BoundaryTag::Gamma2 => &mut b2,
        };
        for i in 0..2 {
            for j in 0..2 {
                target.push((e.vertices[i], e.vertices[j], el[i][j]));
            }
        }
    }
    let q_trace = q.edge_trace(&mesh)?;
    let mut flux_load = vec![0.0; n];
    for (e, qv) in mesh.boundary_edges().iter().zip(&q_trace) {
        if e.tag != BoundaryTag::Gamma2 {
            continue;
        }
        let el = edge_mass(mesh.edge_length(e));
        for i in 0..2 {
            flux_load[e.vertices[i]] += el[i][0] * qv[0] + el[i][1] * qv[1];
        }
    }
    let gamma1_mass = SparseMatrix::from_triplets(n, n, &b1);
    let gamma1_load = gamma1_mass.mul_vec(&vec![b; n]);
    let dirichlet_nodes = mesh.gamma1_nodes();
    let mut is_dir = vec![false; n];
    dirichlet_nodes.iter().for_each(|&i| is_dir[i] = true);
    let free_nodes = (0..n).filter(|&i| !is_dir[i]).collect();
    Ok(AssembledForms {
        stiffness: SparseMatrix::from_triplets(n, n, &ks),
        mass: SparseMatrix::from_triplets(n, n, &ms),
        gamma1_mass,
        gamma2_mass: SparseMatrix::from_triplets(n, n, &b2),
        b,
        q_trace,
        flux_load,
        gamma1_load,
        dirichlet_nodes,
        free_nodes,
        mesh,
    })
}

impl AssembledForms {
    pub fn num_nodes(&self) -> usize {
        self.mesh.num_vertices()
    }

    /// `A + alpha * B1`, the matrix of `a_alpha`.
    pub fn alpha_form(&self, alpha: f64) -> Result<SparseMatrix> {
        check_alpha(alpha)?;
        Ok(self.stiffness.add_scaled(alpha, &self.gamma1_mass))
    }

    /// `A + Mmass`, the matrix of the V (full H1) inner product.
    pub fn v_inner(&self) -> SparseMatrix {
        self.stiffness.add_scaled(1.0, &self.mass)
    }

    pub fn boundary_mass(&self) -> SparseMatrix {
        self.gamma1_mass.add_scaled(1.0, &self.gamma2_mass)
    }

    fn check(&self, v: &FeFunction) -> Result<()> {
        v.check_mesh(&self.mesh)
    }

    pub fn norm_v(&self, v: &FeFunction) -> Result<f64> {
        self.check(v)?;
        Ok(self.norm_v_raw(v.values()))
    }

    pub fn norm_h(&self, v: &FeFunction) -> Result<f64> {
        self.check(v)?;
        Ok(self.norm_h_raw(v.values()))
    }

    /// L2 norm over `Gamma2`.
    pub fn norm_q_gamma(&self, v: &FeFunction) -> Result<f64> {
        self.check(v)?;
        Ok(self.gamma2_mass.quad_form(v.values()).max(0.0).sqrt())
    }

    /// `int_{Gamma1} (v - b)^2`.
    pub fn gamma1_deviation(&self, v: &FeFunction, b: f64) -> Result<f64> {
        self.check(v)?;
        Ok(self.gamma1_deviation_raw(v.values(), b))
    }

    pub(crate) fn norm_v_raw(&self, v: &[f64]) -> f64 {
        (self.stiffness.quad_form(v) + self.mass.quad_form(v)).max(0.0).sqrt()
    }

    pub(crate) fn norm_h_raw(&self, v: &[f64]) -> f64 {
        self.mass.quad_form(v).max(0.0).sqrt()
    }

    pub(crate) fn gamma1_deviation_raw(&self, v: &[f64], b: f64) -> f64 {
        let d: Vec<f64> = v.iter().map(|x| x - b).collect();
        self.gamma1_mass.quad_form(&d).max(0.0)
    }

    /// `||q||_Q`, the L2(Gamma2) norm of the flux trace.
    pub fn q_norm(&self) -> f64 {
        self.mesh
            .boundary_edges()
            .iter()
            .zip(&self.q_trace)
            .filter(|(e, _)| e.tag == BoundaryTag::Gamma2)
            .map(|(e, q)| self.mesh.edge_length(e) / 3.0 * (q[0] * q[0] + q[0] * q[1] + q[1] * q[1]))
            .sum::<f64>()
            .sqrt()
    }

    pub fn inner_h(&self, u: &FeFunction, v: &FeFunction) -> Result<f64> {
        self.check(u)?;
        self.check(v)?;
        Ok(dot(u.values(), &self.mass.mul_vec(v.values())))
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "alpha",
            value: alpha,
            reason: "must be positive and finite",
        })
    }
}

/// Nodal interpolant `pi_h f`.
pub fn interpolate(mesh: Arc<Mesh>, f: impl Fn(Point) -> f64) -> Result<FeFunction> {
    let values: Vec<f64> = mesh.vertices().iter().map(|&p| f(p)).collect();
    FeFunction::new(mesh, values)
}

/// Degree-5, 7-point triangle rule in barycentric coordinates; weights sum
/// to one.
const QUAD7: [([f64; 3], f64); 7] = {
    const A1: f64 = 0.059_715_871_789_770;
    const B1: f64 = 0.470_142_064_105_115;
    const W1: f64 = 0.132_394_152_788_506;
    const A2: f64 = 0.797_426_985_353_087;
    const B2: f64 = 0.101_286_507_323_456;
    const W2: f64 = 0.125_939_180_544_827;
    [
        ([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 0.225),
        ([A1, B1, B1], W1),
        ([B1, A1, B1], W1),
        ([B1, B1, A1], W1),
        ([A2, B2, B2], W2),
        ([B2, A2, B2], W2),
        ([B2, B2, A2], W2),
    ]
};

/// `int_Omega f` by the 7-point rule on every triangle.
pub fn integrate(mesh: &Mesh, f: impl Fn(Point) -> f64) -> f64 {
    let mut total = 0.0;
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let p = tri.map(|i| mesh.vertices()[i]);
        let area = mesh.triangle_area(t);
        for (l, w) in QUAD7 {
            let x = [
                l[0] * p[0][0] + l[1] * p[1][0] + l[2] * p[2][0],
                l[0] * p[0][1] + l[1] * p[1][1] + l[2] * p[2][1],
            ];
            total += area * w * f(x);
        }
    }
    total
}

/// L2 error and H1-seminorm error of a P1 function against an analytic
/// function with known gradient, by 7-point quadrature on every triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactError {
    pub l2: f64,
    pub h1_semi: f64,
}

impl ExactError {
    /// Full H1 (V) norm of the error.
    pub fn v(&self) -> f64 {
        (self.l2 * self.l2 + self.h1_semi * self.h1_semi).sqrt()
    }
}

pub fn exact_error(
    v: &FeFunction,
    exact: impl Fn(Point) -> f64,
    grad: impl Fn(Point) -> [f64; 2],
) -> ExactError {
    let mesh = v.mesh();
    let (mut l2, mut h1) = (0.0, 0.0);
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let p = tri.map(|i| mesh.vertices()[i]);
        let c = tri.map(|i| v.values()[i]);
        let area = mesh.triangle_area(t);
        // constant gradient of the P1 field
        let det = 2.0 * area;
        let gx = (c[0] * (p[1][1] - p[2][1]) + c[1] * (p[2][1] - p[0][1]) + c[2] * (p[0][1] - p[1][1]))
            / det;
        let gy = (c[0] * (p[2][0] - p[1][0]) + c[1] * (p[0][0] - p[2][0]) + c[2] * (p[1][0] - p[0][0]))
            / det;
        for (l, w) in QUAD7 {
            let x = [
                l[0] * p[0][0] + l[1] * p[1][0] + l[2] * p[2][0],
                l[0] * p[0][1] + l[1] * p[1][1] + l[2] * p[2][1],
            ];
            let vh = l[0] * c[0] + l[1] * c[1] + l[2] * c[2];
            let e = exact(x) - vh;
            let g = grad(x);
            l2 += area * w * e * e;
            h1 += area * w * ((g[0] - gx).powi(2) + (g[1] - gy).powi(2));
        }
    }
    ExactError {
        l2: l2.sqrt(),
        h1_semi: h1.sqrt(),
    }
}
