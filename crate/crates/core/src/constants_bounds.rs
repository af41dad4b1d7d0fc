//! Discrete coercivity and trace constants, the explicit constants
//! `c1..c11` of the uniform a-priori estimates, and a checker that
//! evaluates those estimates on computed solutions.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{check_alpha, AssembledForms, FeFunction};
use crate::error::{Error, Result};
use crate::linsolve::{
    largest_generalized_eigenvalue, smallest_generalized_eigenvalue, DEFAULT_EIGEN_TOL,
};
use crate::mesh::Mesh;
use crate::optimal_control::solve_kkt_direct;
use crate::pde_solvers::{solve_state, ProblemData, ProblemSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantSet {
    /// Coercivity of `a` on `V_0h` with respect to the V-norm.
    pub lambda_h: f64,
    /// Coercivity of `a_1` on `V_h`.
    pub lambda1_h: f64,
    /// Norm of the trace `V_h -> L2(Gamma)`.
    pub trace_norm_h: f64,
    pub h: f64,
    pub num_vertices: usize,
}

/// Rayleigh-quotient estimates of the constants on the mesh of `forms`.
pub fn estimate_constants(forms: &AssembledForms) -> Result<ConstantSet> {
    let v = forms.v_inner();
    let f = &forms.free_nodes;
    if f.is_empty() {
        return Err(Error::Precondition("mesh has no free nodes".into()));
    }
    let lambda = smallest_generalized_eigenvalue(
        &forms.stiffness.submatrix(f, f),
        &v.submatrix(f, f),
        DEFAULT_EIGEN_TOL,
    )?;
    let lambda1 = smallest_generalized_eigenvalue(
        &forms.stiffness.add_scaled(1.0, &forms.gamma1_mass),
        &v,
        DEFAULT_EIGEN_TOL,
    )?;
    let trace = largest_generalized_eigenvalue(&forms.boundary_mass(), &v, DEFAULT_EIGEN_TOL)?;
    Ok(ConstantSet {
        lambda_h: lambda.value,
        lambda1_h: lambda1.value,
        trace_norm_h: trace.value.sqrt(),
        h: forms.mesh.h(),
        num_vertices: forms.num_nodes(),
    })
}

/// `lambda_alpha = lambda1 * min(1, alpha)`.
pub fn lambda_alpha(constants: &ConstantSet, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(constants.lambda1_h * alpha.min(1.0))
}

/// Scalar inputs of the explicit constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CInputs {
    /// V-norm of the constant lifting `b`, i.e. `b * sqrt(|Omega|)`.
    pub b_norm: f64,
    /// `||q||_Q`.
    pub q_norm: f64,
    /// `||z_d||_H`.
    pub z_d_norm: f64,
    pub m_reg: f64,
    pub lambda: f64,
    pub lambda1: f64,
    pub trace_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
    pub c7: f64,
    pub c8: f64,
    pub c9: f64,
    pub c10: f64,
    pub c11: f64,
}

impl CConstants {
    pub fn as_array(&self) -> [f64; 11] {
        [
            self.c1, self.c2, self.c3, self.c4, self.c5, self.c6, self.c7, self.c8, self.c9,
            self.c10, self.c11,
        ]
    }

    /// `c_k` for `k` in `1..=11`.
    pub fn get(&self, k: usize) -> f64 {
        self.as_array()[k - 1]
    }
}

pub fn evaluate_c_constants(x: &CInputs) -> CConstants {
    let (b, z) = (x.b_norm, x.z_d_norm);
    let t = x.q_norm * x.trace_norm;
    let il = 1.0 / x.lambda;
    let il1 = 1.0 / x.lambda1;
    let ism = 1.0 / x.m_reg.sqrt();
    // recurring groups
    let k1 = 1.0 + il1;
    let lsm = 1.0 + il * ism;

    let c1 = b + t * il;
    let c2 = b * k1 + t * (il1 + il * k1);
    let c3 = x.lambda1 * il * il * (b + t * (1.0 + il)).powi(2);
    let c4 = ism * (z + c2);
    let c5 = 2.0 * z + c2;
    let c6 = ism * (z + c1);
    let c7 = b * lsm + il * ism * z + t * il * lsm;
    let c8 = z * ism * (il1 + il * k1)
        + b * k1 * (1.0 + il * ism + il1 * ism)
        + t * (il1 + il * k1 + ism * (il1 * il1 + il * il * k1 + il * il1 * k1));
    let c9 = il1
        * (z * ism * (1.0 + il)
            + b * (1.0 + ism * (1.0 + il1 + il))
            + t * (1.0 + il + ism * (il + il1 + il * il + il * il1)))
            .powi(2);
    let c10 = il * lsm * (z + c1);
    let c11 = z * (il1 * (1.0 + ism * (il1 + il + il * il1)) + il * k1 * lsm)
        + b * (il1 * k1 * (1.0 + il * ism + il1 * ism) + il * k1 * lsm)
        + t * (il1 * (il1 + il * k1 + ism * (il * il1 + il * il * k1 + il1 * il1 * (1.0 + il)))
            + il * il * k1 * lsm);
    CConstants {
        c1,
        c2,
        c3,
        c4,
        c5,
        c6,
        c7,
        c8,
        c9,
        c10,
        c11,
    }
}

/// How the regularization weight is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegWeight {
    Fixed(f64),
    /// `M = c / lambda^2`.
    OverLambdaSq(f64),
}

impl RegWeight {
    pub fn resolve(&self, lambda: f64) -> f64 {
        match *self {
            RegWeight::Fixed(m) => m,
            RegWeight::OverLambdaSq(c) => c / (lambda * lambda),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    /// Index `k` of the constant `c_k` bounding this quantity.
    pub family: usize,
    pub quantity: String,
    pub h: f64,
    pub alpha: Option<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub inputs: CInputs,
    pub constants: CConstants,
    pub mesh_constants: Vec<ConstantSet>,
    pub checks: Vec<BoundCheck>,
    pub skipped: Vec<String>,
    pub notes: Vec<String>,
    pub violations: usize,
}

impl BoundReport {
    pub fn all_satisfied(&self) -> bool {
        self.violations == 0
    }

    /// Families with at least one check.
    pub fn families_checked(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.checks.iter().map(|c| c.family).collect();
        f.sort_unstable();
        f.dedup();
        f
    }
}

const QUANTITIES: [&str; 11] = [
    "||u_h(0)||_V",
    "||u_h,alpha(0)||_V",
    "(alpha-1) int_Gamma1 (u_h,alpha(0) - b)^2",
    "||g_h,alpha,op||_H",
    "||u_h,alpha(g_h,alpha,op)||_H",
    "||g_h,op||_H",
    "||u_h(g_h,op)||_V",
    "||u_h,alpha(g_h,alpha,op)||_V",
    "(alpha-1) int_Gamma1 (u_h,alpha(g_h,alpha,op) - b)^2",
    "||p_h(g_h,op)||_V",
    "||p_h,alpha(g_h,alpha,op)||_V",
];

fn check(family: usize, h: f64, alpha: Option<f64>, lhs: f64, c: &CConstants) -> BoundCheck {
    let rhs = c.get(family);
    BoundCheck {
        family,
        quantity: QUANTITIES[family - 1].to_string(),
        h,
        alpha,
        lhs,
        rhs,
        satisfied: lhs.is_finite() && lhs <= rhs,
    }
}

/// Solves the uncontrolled and optimal problems on every mesh and every
/// `alpha` and checks the eleven estimates.
///
/// The constants are taken conservatively over the whole grid: smallest
/// coercivity constants, largest trace norm and largest data norms. The
/// regularization weight is resolved with that smallest `lambda`.
pub fn verify_bounds(
    spec: &ProblemSpec,
    reg: RegWeight,
    meshes: &[Arc<Mesh>],
    alphas: &[f64],
) -> Result<BoundReport> {
    if meshes.is_empty() {
        return Err(Error::Precondition("verify_bounds needs at least one mesh".into()));
    }
    for &a in alphas {
        check_alpha(a)?;
    }
    let base: Vec<ProblemData> = meshes
        .par_iter()
        .map(|m| spec.instantiate(m.clone(), None))
        .collect::<Result<_>>()?;
    let mesh_constants: Vec<ConstantSet> = base
        .par_iter()
        .map(|d| d.constants())
        .collect::<Result<_>>()?;
    let lambda = mesh_constants.iter().map(|c| c.lambda_h).fold(f64::INFINITY, f64::min);
    let lambda1 = mesh_constants.iter().map(|c| c.lambda1_h).fold(f64::INFINITY, f64::min);
    let trace_norm = mesh_constants.iter().map(|c| c.trace_norm_h).fold(0.0, f64::max);
    let m_reg = reg.resolve(lambda);
    let base: Vec<ProblemData> = base
        .iter()
        .map(|d| d.with_m_reg(m_reg))
        .collect::<Result<_>>()?;
    let max_over = |f: &dyn Fn(&ProblemData) -> f64| base.iter().map(f).fold(0.0, f64::max);
    let inputs = CInputs {
        b_norm: max_over(&|d| d.b() * d.mesh().area().sqrt()),
        q_norm: max_over(&|d| d.forms().q_norm()),
        z_d_norm: max_over(&|d| d.forms().norm_h_raw(d.z_d().values())),
        m_reg,
        lambda,
        lambda1,
        trace_norm,
    };
    let c = evaluate_c_constants(&inputs);

    let mut jobs: Vec<(usize, Option<f64>)> = Vec::new();
    for k in 0..base.len() {
        jobs.push((k, None));
        for &a in alphas {
            jobs.push((k, Some(a)));
        }
    }
    let rows: Vec<Vec<BoundCheck>> = jobs
        .par_iter()
        .map(|&(k, alpha)| grid_point_checks(&base[k], alpha, &c))
        .collect::<Result<_>>()?;
    let checks: Vec<BoundCheck> = rows.into_iter().flatten().collect();
    let skipped = alphas
        .iter()
        .filter(|&&a| a <= 1.0)
        .map(|a| format!("alpha = {}: weighted Gamma1 deviation checks need alpha > 1", a))
        .collect();
    let violations = checks.iter().filter(|c| !c.satisfied).count();
    Ok(BoundReport {
        inputs,
        constants: c,
        mesh_constants,
        checks,
        skipped,
        notes: vec![
            "constants are discrete Rayleigh-quotient estimates; the smallest lambda and lambda1 and the largest trace norm over the grid are used".into(),
            "b enters the estimates through the V-norm of the constant lifting, b * sqrt(|Omega|)".into(),
            "the trace norm is taken onto the whole boundary".into(),
            "the c10 check uses the Dirichlet adjoint at the Dirichlet optimal control".into(),
        ],
        violations,
    })
}

fn grid_point_checks(
    data: &ProblemData,
    alpha: Option<f64>,
    c: &CConstants,
) -> Result<Vec<BoundCheck>> {
    let forms = data.forms();
    let h = data.mesh().h();
    let zero = FeFunction::zeros(data.mesh().clone());
    let mut out = Vec::new();
    match alpha {
        None => {
            let u0 = solve_state(data, &zero)?;
            out.push(check(1, h, None, forms.norm_v_raw(u0.u.values()), c));
            let opt = solve_kkt_direct(data)?;
            out.push(check(6, h, None, forms.norm_h_raw(opt.g_op.values()), c));
            out.push(check(7, h, None, forms.norm_v_raw(opt.u_op.values()), c));
            out.push(check(10, h, None, forms.norm_v_raw(opt.p_op.values()), c));
        }
        Some(a) => {
            let d = data.with_alpha(Some(a))?;
            let u0 = solve_state(&d, &zero)?;
            out.push(check(2, h, alpha, forms.norm_v_raw(u0.u.values()), c));
            let opt = solve_kkt_direct(&d)?;
            out.push(check(4, h, alpha, forms.norm_h_raw(opt.g_op.values()), c));
            out.push(check(5, h, alpha, forms.norm_h_raw(opt.u_op.values()), c));
            out.push(check(8, h, alpha, forms.norm_v_raw(opt.u_op.values()), c));
            out.push(check(11, h, alpha, forms.norm_v_raw(opt.p_op.values()), c));
            if a > 1.0 {
                let dev0 = (a - 1.0) * forms.gamma1_deviation_raw(u0.u.values(), d.b());
                out.push(check(3, h, alpha, dev0, c));
                let dev = (a - 1.0) * forms.gamma1_deviation_raw(opt.u_op.values(), d.b());
                out.push(check(9, h, alpha, dev, c));
            }
        }
    }
    out.sort_by_key(|c| c.family);
    Ok(out)
}
