//! Independent dense reference implementations used as test oracles.
#![allow(dead_code)]

use std::sync::Arc;

use mixed_ocp::assembly::{assemble, FeFunction, FluxData};
use mixed_ocp::mesh::{build_structured_mesh, BoundaryEdge, BoundaryTag, DomainSpec, Mesh, Point};
use mixed_ocp::pde_solvers::ProblemData;
use nalgebra::{DMatrix, DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_square(n: usize) -> Arc<Mesh> {
    Arc::new(build_structured_mesh(&DomainSpec::unit_square(n)).unwrap())
}

/// Unit square split along its diagonal, `Gamma1` the bottom side.
pub fn two_triangles() -> Arc<Mesh> {
    let v = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
    let t = vec![[0, 1, 2], [0, 2, 3]];
    let e = |a, b, tag| BoundaryEdge { vertices: [a, b], tag };
    let edges = vec![
        e(0, 1, BoundaryTag::Gamma1),
        e(1, 2, BoundaryTag::Gamma2),
        e(2, 3, BoundaryTag::Gamma2),
        e(3, 0, BoundaryTag::Gamma2),
    ];
    Arc::new(Mesh::new(v, t, edges).unwrap())
}

pub fn random_fn(mesh: &Arc<Mesh>, rng: &mut impl Rng, scale: f64) -> FeFunction {
    let v = (0..mesh.num_vertices()).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
    FeFunction::new(mesh.clone(), v).unwrap()
}

/// Problem data with constant flux `q` and nodal target `z_d`.
pub fn problem(mesh: &Arc<Mesh>, b: f64, q: f64, z_d: Vec<f64>, m: f64, alpha: Option<f64>) -> ProblemData {
    let forms = Arc::new(assemble(mesh.clone(), &FluxData::Constant(q), b).unwrap());
    let z = FeFunction::new(mesh.clone(), z_d).unwrap();
    ProblemData::new(forms, z, m, alpha).unwrap()
}

/// Dense P1 matrices built from barycentric coordinates (stiffness),
/// edge-midpoint quadrature (mass) and Simpson's rule (boundary mass),
/// all exact for the polynomial degrees involved.
pub struct DenseForms {
    pub stiffness: DMatrix<f64>,
    pub mass: DMatrix<f64>,
    pub gamma1_mass: DMatrix<f64>,
    pub gamma2_mass: DMatrix<f64>,
    pub gamma1_nodes: Vec<usize>,
}

pub fn dense_forms(mesh: &Mesh) -> DenseForms {
    let n = mesh.num_vertices();
    let mut k = DMatrix::zeros(n, n);
    let mut m = DMatrix::zeros(n, n);
    for tri in mesh.triangles() {
        let p: Vec<Point> = tri.iter().map(|&i| mesh.vertices()[i]).collect();
        let t = Matrix3::new(
            1.0, p[0][0], p[0][1], //
            1.0, p[1][0], p[1][1], //
            1.0, p[2][0], p[2][1],
        );
        let area = 0.5 * t.determinant().abs();
        let c = t.try_inverse().unwrap();
        // phi_i = c[0,i] + c[1,i] x + c[2,i] y
        let phi = |i: usize, x: Point| c[(0, i)] + c[(1, i)] * x[0] + c[(2, i)] * x[1];
        let mids: Vec<Point> = (0..3)
            .map(|a| {
                let b = (a + 1) % 3;
                [(p[a][0] + p[b][0]) / 2.0, (p[a][1] + p[b][1]) / 2.0]
            })
            .collect();
        for i in 0..3 {
            for j in 0..3 {
                let gij = c[(1, i)] * c[(1, j)] + c[(2, i)] * c[(2, j)];
                k[(tri[i], tri[j])] += area * gij;
                let q: f64 = mids.iter().map(|&x| phi(i, x) * phi(j, x)).sum::<f64>() / 3.0;
                m[(tri[i], tri[j])] += area * q;
            }
        }
    }
    let mut g1 = DMatrix::zeros(n, n);
    let mut g2 = DMatrix::zeros(n, n);
    let mut nodes = Vec::new();
    for e in mesh.boundary_edges() {
        let [a, b] = e.vertices;
        let len = mesh.edge_length(e);
        // Simpson on the products of hat functions
        let local = [[len / 3.0, len / 6.0], [len / 6.0, len / 3.0]];
        let target = match e.tag {
            BoundaryTag::Gamma1 => {
                nodes.extend([a, b]);
                &mut g1
            }
            BoundaryTag::Gamma2 => &mut g2,
        };
        for (x, &i) in [a, b].iter().enumerate() {
            for (y, &j) in [a, b].iter().enumerate() {
                target[(i, j)] += local[x][y];
            }
        }
    }
    nodes.sort_unstable();
    nodes.dedup();
    DenseForms {
        stiffness: k,
        mass: m,
        gamma1_mass: g1,
        gamma2_mass: g2,
        gamma1_nodes: nodes,
    }
}

pub struct DenseOptimum {
    pub g: Vec<f64>,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
}

/// Solves the full optimality system in the unknowns `(u, p, g)` by dense
/// LU, with Dirichlet rows replaced by `u = b`, `p = 0` when `alpha` is
/// `None`. The control is kept as an unknown:
///
/// ```text
/// A u - Mass g          = -Q + alpha b G1 1
/// A p - Mass u          = -Mass z_d
/// Mass p + M Mass g     = 0
/// ```
pub fn dense_kkt(mesh: &Mesh, b: f64, q: f64, z_d: &[f64], m_reg: f64, alpha: Option<f64>) -> DenseOptimum {
    let f = dense_forms(mesh);
    let n = mesh.num_vertices();
    let ones = DVector::from_element(n, 1.0);
    let flux = &f.gamma2_mass * &ones * q;
    let z = DVector::from_column_slice(z_d);
    let a = match alpha {
        Some(al) => &f.stiffness + &f.gamma1_mass * al,
        None => f.stiffness.clone(),
    };
    let mut big = DMatrix::zeros(3 * n, 3 * n);
    let mut rhs = DVector::zeros(3 * n);
    let (u0, p0, g0) = (0, n, 2 * n);
    big.view_mut((u0, u0), (n, n)).copy_from(&a);
    big.view_mut((u0, g0), (n, n)).copy_from(&(-&f.mass));
    big.view_mut((p0, p0), (n, n)).copy_from(&a);
    big.view_mut((p0, u0), (n, n)).copy_from(&(-&f.mass));
    big.view_mut((g0, p0), (n, n)).copy_from(&f.mass);
    big.view_mut((g0, g0), (n, n)).copy_from(&(&f.mass * m_reg));
    let mut state_rhs = -flux;
    if let Some(al) = alpha {
        state_rhs += &f.gamma1_mass * &ones * (al * b);
    }
    rhs.rows_mut(u0, n).copy_from(&state_rhs);
    rhs.rows_mut(p0, n).copy_from(&(-(&f.mass * &z)));
    if alpha.is_none() {
        for &i in &f.gamma1_nodes {
            for (row, value) in [(u0 + i, b), (p0 + i, 0.0)] {
                big.row_mut(row).fill(0.0);
                big[(row, row)] = 1.0;
                rhs[row] = value;
            }
        }
    }
    let x = big.lu().solve(&rhs).expect("dense KKT system is regular");
    DenseOptimum {
        u: x.rows(u0, n).iter().copied().collect(),
        p: x.rows(p0, n).iter().copied().collect(),
        g: x.rows(g0, n).iter().copied().collect(),
    }
}

/// Eigenvalues of the pencil `(A, B)`, `B` positive definite, ascending.
pub fn pencil_eigenvalues(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let l = b.clone().cholesky().expect("B positive definite").l();
    let li = l.try_inverse().unwrap();
    let c = &li * a * li.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let mut ev: Vec<f64> = c.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev
}

pub fn submatrix(a: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| a[(idx[i], idx[j])])
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn to_dense(a: &mixed_ocp::sparse::SparseMatrix) -> DMatrix<f64> {
    let rows = a.to_dense();
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| rows[i][j])
}
