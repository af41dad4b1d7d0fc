mod common;

use std::sync::Arc;

use common::*;
use mixed_ocp::assembly::{assemble, interpolate, FeFunction, FluxData};
use mixed_ocp::convergence_lab::{estimate_rate, ManufacturedCase};
use mixed_ocp::linsolve::solve_spd;
use mixed_ocp::mesh::{
    build_structured_mesh, read_mesh, refine_with_prolongation, write_mesh, BoundaryTag, DomainSpec,
    Gamma1Selector,
};
use mixed_ocp::optimal_control::{cost, solve_kkt_direct};
use mixed_ocp::pde_solvers::solve_state;
use mixed_ocp::sparse::SparseMatrix;
use proptest::prelude::*;

fn domain(n: usize, sides: Vec<usize>) -> DomainSpec {
    DomainSpec {
        gamma1: Gamma1Selector::Sides(sides),
        ..DomainSpec::unit_square(n)
    }
}

fn sides() -> impl Strategy<Value = Vec<usize>> {
    proptest::sample::subsequence(vec![0usize, 1, 2, 3], 1..=4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mesh_text_round_trip(n in 1usize..7, s in sides()) {
        let mesh = build_structured_mesh(&domain(n, s)).unwrap();
        let mut buf = Vec::new();
        write_mesh(&mesh, &mut buf).unwrap();
        let back = read_mesh(&buf[..]).unwrap();
        prop_assert_eq!(back, mesh);
    }

    #[test]
    fn form_sums_measure_the_domain(n in 1usize..7, s in sides(), b in 0.0f64..3.0) {
        let mesh = Arc::new(build_structured_mesh(&domain(n, s.clone())).unwrap());
        let f = assemble(mesh.clone(), &FluxData::Constant(0.0), b).unwrap();
        let ones = vec![1.0; mesh.num_vertices()];
        prop_assert!(f.stiffness.mul_vec(&ones).iter().all(|v| v.abs() < 1e-12));
        prop_assert!((f.mass.quad_form(&ones) - 1.0).abs() < 1e-12);
        prop_assert!((f.gamma1_mass.quad_form(&ones) - s.len() as f64).abs() < 1e-12);
        prop_assert!((f.gamma2_mass.quad_form(&ones) - (4 - s.len()) as f64).abs() < 1e-12);
        prop_assert!((mesh.tagged_length(BoundaryTag::Gamma1) - s.len() as f64).abs() < 1e-12);
        prop_assert!(f.stiffness.is_symmetric() && f.mass.is_symmetric());
    }

    #[test]
    fn prolongation_is_exact_on_affine_functions(n in 1usize..6, a in -2.0f64..2.0, c in -2.0f64..2.0) {
        let coarse = build_structured_mesh(&DomainSpec::unit_square(n)).unwrap();
        let (fine, p) = refine_with_prolongation(&coarse);
        let f = |x: [f64; 2]| 0.3 + a * x[0] + c * x[1];
        let lifted = p.apply(&interpolate(Arc::new(coarse), f).unwrap().into_values());
        let direct = interpolate(Arc::new(fine), f).unwrap();
        prop_assert!(max_diff(&lifted, direct.values()) < 1e-13);
    }

    #[test]
    fn affine_states_are_reproduced_exactly(n in 1usize..6, b in 0.0f64..3.0, alpha in proptest::option::of(1.5f64..50.0)) {
        let case = ManufacturedCase::affine(b);
        let mesh = Arc::new(build_structured_mesh(&DomainSpec::unit_square(n)).unwrap());
        let data = case.problem_spec(1.0).instantiate(mesh.clone(), None).unwrap();
        let g = FeFunction::zeros(mesh.clone());
        let u = solve_state(&data, &g).unwrap().u;
        let exact = interpolate(mesh.clone(), |p| (case.u)(p)).unwrap();
        prop_assert!(u.max_abs_diff(&exact).unwrap() < 1e-10);
        if let Some(a) = alpha {
            // u = b + y has -du/dn = 1 on y = 0, so the Robin state is b + 1/a + y
            let robin = data.with_alpha(Some(a)).unwrap();
            let ua = solve_state(&robin, &g).unwrap().u;
            let want = interpolate(mesh, |p| b + 1.0 / a + p[1]).unwrap();
            prop_assert!(ua.max_abs_diff(&want).unwrap() < 1e-10);
        }
    }

    #[test]
    fn solve_residual_is_reproducible(seed in any::<u64>(), n in 2usize..30) {
        use rand::Rng;
        let mut r = rng(seed);
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0 + r.gen_range(0.0..1.0)));
            if i + 1 < n {
                let v = r.gen_range(-1.0..1.0);
                t.push((i, i + 1, v));
                t.push((i + 1, i, v));
            }
        }
        let a = SparseMatrix::from_triplets(n, n, &t);
        let rhs: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let rep = solve_spd(&a, &rhs, 1e-12, 8).unwrap();
        let res: f64 = a.residual(&rep.solution, &rhs).iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = res / rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert_eq!(rel, rep.residual_norm);
        prop_assert!(rep.residual_norm <= 1e-12);
    }

    #[test]
    fn optimum_minimizes_the_cost(seed in any::<u64>(), alpha in proptest::option::of(1.5f64..100.0), m in 0.05f64..5.0) {
        let mesh = unit_square(3);
        let mut r = rng(seed);
        let z = random_fn(&mesh, &mut r, 1.0).into_values();
        let data = problem(&mesh, 1.0, 0.2, z, m, alpha);
        let opt = solve_kkt_direct(&data).unwrap();
        prop_assert!(opt.cost >= 0.0);
        for _ in 0..4 {
            let g = random_fn(&mesh, &mut r, 1.0);
            prop_assert!(cost(&data, &g).unwrap() >= opt.cost * (1.0 - 1e-12));
        }
    }

    #[test]
    fn power_laws_fit_exactly(r in 0.5f64..3.0, c in 0.01f64..100.0) {
        let h = [0.4f64, 0.2, 0.1, 0.05];
        let e: Vec<f64> = h.iter().map(|x| c * x.powf(r)).collect();
        let fit = estimate_rate(&h, &e).unwrap();
        prop_assert!((fit.slope - r).abs() < 1e-10);
        prop_assert!(fit.residual < 1e-10);
    }
}
