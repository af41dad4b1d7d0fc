mod common;

use common::*;
use mixed_ocp::assembly::{assemble, FluxData};
use mixed_ocp::constants_bounds::estimate_constants;
use mixed_ocp::linsolve::{largest_generalized_eigenvalue, smallest_generalized_eigenvalue, solve_spd};
use mixed_ocp::optimal_control::{solve_fixed_point, solve_kkt_direct};
use mixed_ocp::assembly::FeFunction;
use mixed_ocp::sparse::SparseMatrix;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn dense_close(a: &SparseMatrix, b: &DMatrix<f64>, tol: f64) {
    let d = to_dense(a);
    let diff = (&d - b).abs().max();
    assert!(diff <= tol, "max entry difference {diff:e}");
}

#[test]
fn assembled_matrices_match_dense_reference() {
    for mesh in [two_triangles(), unit_square(3), unit_square(5)] {
        let forms = assemble(mesh.clone(), &FluxData::Constant(0.7), 1.5).unwrap();
        let dense = dense_forms(&mesh);
        dense_close(&forms.stiffness, &dense.stiffness, 1e-13);
        dense_close(&forms.mass, &dense.mass, 1e-14);
        dense_close(&forms.gamma1_mass, &dense.gamma1_mass, 1e-14);
        dense_close(&forms.gamma2_mass, &dense.gamma2_mass, 1e-14);
        let ones = DVector::from_element(mesh.num_vertices(), 1.0);
        let flux = &dense.gamma2_mass * &ones * 0.7;
        assert!(max_diff(&forms.flux_load, flux.as_slice()) < 1e-14);
        assert_eq!(forms.dirichlet_nodes, dense.gamma1_nodes);
    }
}

#[test]
fn spd_solve_matches_dense_elimination() {
    let mut r = rng(7);
    for n in [1usize, 5, 17, 40] {
        // random sparse-ish SPD: B^T B + n I restricted to a band
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i..(i + 4).min(n) {
                let v: f64 = r.gen_range(-1.0..1.0);
                dense[(i, j)] = v;
                dense[(j, i)] = v;
            }
            dense[(i, i)] = 5.0 + r.gen_range(0.0..1.0);
        }
        let rhs: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| dense.row(i).iter().copied().collect()).collect();
        let a = SparseMatrix::from_dense(&rows);
        let rep = solve_spd(&a, &rhs, 1e-12, 8).unwrap();
        let want = dense.clone().lu().solve(&DVector::from_column_slice(&rhs)).unwrap();
        assert!(max_diff(&rep.solution, want.as_slice()) < 1e-12);
        assert!(rep.converged && rep.residual_norm <= 1e-12);
        // the reported residual is reproducible from the solution
        let res = &dense * DVector::from_column_slice(&rep.solution) - DVector::from_column_slice(&rhs);
        let rel = res.norm() / DVector::from_column_slice(&rhs).norm();
        assert!((rel - rep.residual_norm).abs() <= 1e-14, "{rel:e} vs {:e}", rep.residual_norm);
    }
}

#[test]
fn stiffness_solve_matches_dense_elimination() {
    let mesh = unit_square(6);
    let forms = assemble(mesh.clone(), &FluxData::Constant(0.0), 0.0).unwrap();
    let a = forms.stiffness.add_scaled(1.0, &forms.gamma1_mass);
    let mut r = rng(3);
    let rhs: Vec<f64> = (0..mesh.num_vertices()).map(|_| r.gen_range(-1.0..1.0)).collect();
    let rep = solve_spd(&a, &rhs, 1e-12, 8).unwrap();
    let want = to_dense(&a).lu().solve(&DVector::from_column_slice(&rhs)).unwrap();
    assert!(max_diff(&rep.solution, want.as_slice()) < 1e-11);
}

#[test]
fn eigenvalues_match_dense_pencil() {
    let mut r = rng(11);
    let n = 10;
    let mut x = DMatrix::<f64>::zeros(n, n);
    x.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
    let a = &x * x.transpose() + DMatrix::identity(n, n) * 0.5;
    let mut y = DMatrix::<f64>::zeros(n, n);
    y.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
    let b = &y * y.transpose() + DMatrix::identity(n, n) * 2.0;
    let sp = |m: &DMatrix<f64>| {
        SparseMatrix::from_dense(&(0..n).map(|i| m.row(i).iter().copied().collect()).collect::<Vec<_>>())
    };
    let ev = pencil_eigenvalues(&a, &b);
    let lo = smallest_generalized_eigenvalue(&sp(&a), &sp(&b), 1e-10).unwrap();
    let hi = largest_generalized_eigenvalue(&sp(&a), &sp(&b), 1e-10).unwrap();
    assert!((lo.value - ev[0]).abs() <= 1e-9 * ev[0], "{} vs {}", lo.value, ev[0]);
    assert!((hi.value - ev[n - 1]).abs() <= 1e-9 * ev[n - 1], "{} vs {}", hi.value, ev[n - 1]);
}

#[test]
fn mesh_constants_match_dense_pencils() {
    for n in [2usize, 4] {
        let mesh = unit_square(n);
        let forms = assemble(mesh.clone(), &FluxData::Constant(0.0), 0.0).unwrap();
        let c = estimate_constants(&forms).unwrap();
        let d = dense_forms(&mesh);
        let v = &d.stiffness + &d.mass;
        let free: Vec<usize> = (0..mesh.num_vertices()).filter(|i| !d.gamma1_nodes.contains(i)).collect();
        let lambda = pencil_eigenvalues(&submatrix(&d.stiffness, &free), &submatrix(&v, &free))[0];
        let lambda1 = pencil_eigenvalues(&(&d.stiffness + &d.gamma1_mass), &v)[0];
        let trace = pencil_eigenvalues(&(&d.gamma1_mass + &d.gamma2_mass), &v);
        let trace = trace.last().unwrap().sqrt();
        assert!((c.lambda_h - lambda).abs() < 1e-9, "{} vs {}", c.lambda_h, lambda);
        assert!((c.lambda1_h - lambda1).abs() < 1e-9);
        assert!((c.trace_norm_h - trace).abs() < 1e-9);
    }
}

#[test]
fn optimum_matches_dense_kkt_oracle() {
    let mut r = rng(21);
    for mesh in [two_triangles(), unit_square(3)] {
        for alpha in [None, Some(3.0), Some(50.0)] {
            let n = mesh.num_vertices();
            let z: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
            let (b, q) = (0.8, -0.4);
            let base = problem(&mesh, b, q, z.clone(), 1.0, alpha);
            let c = base.constants().unwrap();
            let lam = match alpha {
                None => c.lambda_h,
                Some(a) => c.lambda1_h * a.min(1.0),
            };
            let m = 4.0 / (lam * lam);
            let data = base.with_m_reg(m).unwrap();
            let oracle = dense_kkt(&mesh, b, q, &z, m, alpha);
            let kkt = solve_kkt_direct(&data).unwrap();
            let fp = solve_fixed_point(&data, &FeFunction::zeros(mesh.clone()), 1e-14, 200).unwrap();
            assert!(fp.converged);
            for (name, got) in [("kkt", &kkt), ("fixed point", &fp)] {
                assert!(max_diff(got.g_op.values(), &oracle.g) < 1e-10, "{name} g, alpha {alpha:?}");
                assert!(max_diff(got.u_op.values(), &oracle.u) < 1e-10, "{name} u, alpha {alpha:?}");
                assert!(max_diff(got.p_op.values(), &oracle.p) < 1e-10, "{name} p, alpha {alpha:?}");
            }
        }
    }
}
