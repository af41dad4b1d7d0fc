//! Discrete costs, gradients and the two optimizers: the fixed-point map
//! `g -> -p_g / M` and a direct solve of the coupled state/adjoint system.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::assembly::FeFunction;
use crate::constants_bounds::lambda_alpha;
use crate::error::{Error, Result};
use crate::pde_solvers::{scatter, solve_adjoint, solve_state, ProblemData};

pub const DEFAULT_FIXED_POINT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 500;

/// State, adjoint, cost and gradient at one control.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub u: FeFunction,
    pub p: FeFunction,
    pub cost: f64,
    pub gradient: FeFunction,
}

fn cost_of(data: &ProblemData, g: &FeFunction, u: &FeFunction) -> f64 {
    let forms = data.forms();
    let d: Vec<f64> = u
        .values()
        .iter()
        .zip(data.z_d().values())
        .map(|(a, b)| a - b)
        .collect();
    0.5 * forms.mass.quad_form(&d) + 0.5 * data.m_reg() * forms.mass.quad_form(g.values())
}

pub fn evaluate(data: &ProblemData, g: &FeFunction) -> Result<Evaluation> {
    let state = solve_state(data, g)?;
    let p = solve_adjoint(data, &state)?;
    let cost = cost_of(data, g, &state.u);
    let gradient = g.lin_comb(data.m_reg(), 1.0, &p)?;
    Ok(Evaluation {
        u: state.u,
        p,
        cost,
        gradient,
    })
}

/// `J(g) = 1/2 ||u_g - z_d||_H^2 + M/2 ||g||_H^2`, with the Dirichlet or
/// Robin state depending on `data`.
pub fn cost(data: &ProblemData, g: &FeFunction) -> Result<f64> {
    let state = solve_state(data, g)?;
    Ok(cost_of(data, g, &state.u))
}

/// Riesz representative `M g + p_g` of the derivative of the cost in H.
pub fn gradient(data: &ProblemData, g: &FeFunction) -> Result<FeFunction> {
    Ok(evaluate(data, g)?.gradient)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    FixedPoint,
    DirectKkt,
}

/// Whether the fixed-point map is guaranteed to contract:
/// `1 / (M lambda^2) < 1` with the discretely estimated constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionPrecheck {
    /// `lambda_h` for the Dirichlet problem, `lambda_alpha,h` for Robin.
    pub lambda: f64,
    pub factor: f64,
    pub satisfied: bool,
}

pub fn contraction_precheck(data: &ProblemData) -> Result<ContractionPrecheck> {
    let c = data.constants()?;
    let lambda = match data.alpha() {
        None => c.lambda_h,
        Some(a) => lambda_alpha(&c, a)?,
    };
    let factor = 1.0 / (data.m_reg() * lambda * lambda);
    Ok(ContractionPrecheck {
        lambda,
        factor,
        satisfied: factor < 1.0,
    })
}

#[derive(Debug, Clone)]
pub struct OptimalTriple {
    pub g_op: FeFunction,
    pub u_op: FeFunction,
    pub p_op: FeFunction,
    pub cost: f64,
    /// Fixed-point steps, or factor solves for the direct method.
    pub iterations: usize,
    /// H-norm of the last fixed-point update; zero for the direct method.
    pub final_update_norm: f64,
    /// H-norms of every fixed-point update.
    pub update_norms: Vec<f64>,
    pub method: Method,
    pub converged: bool,
    /// `||M g_op + p_op||_H` with `p_op` the adjoint of `g_op`.
    pub optimality_residual: f64,
    pub precheck: Option<ContractionPrecheck>,
}

impl OptimalTriple {
    /// Ratios of successive update norms.
    pub fn update_ratios(&self) -> Vec<f64> {
        self.update_norms
            .windows(2)
            .filter(|w| w[0] > 0.0)
            .map(|w| w[1] / w[0])
            .collect()
    }
}

/// Iterates `g <- -p_g / M` from `g0` until the H-norm of the update is at
/// most `tol`.
///
/// The returned state and adjoint belong to the returned control, so the
/// optimality residual is at most `M * tol` on convergence. Running out of
/// iterations is not an error: the last iterate comes back with
/// `converged = false`.
pub fn solve_fixed_point(
    data: &ProblemData,
    g0: &FeFunction,
    tol: f64,
    max_iter: usize,
) -> Result<OptimalTriple> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter {
            name: "tol",
            value: tol,
            reason: "must be positive",
        });
    }
    g0.check_mesh(data.mesh())?;
    let precheck = contraction_precheck(data)?;
    if !precheck.satisfied {
        warn!(
            "fixed-point map may not contract: 1/(M lambda^2) = {:.4} >= 1 (M = {}, lambda = {:.6})",
            precheck.factor,
            data.m_reg(),
            precheck.lambda
        );
    }
    let forms = data.forms();
    let mut g = g0.clone();
    let mut eval = evaluate(data, &g)?;
    let mut update_norms = Vec::new();
    let mut converged = false;
    while update_norms.len() < max_iter {
        let next = eval.p.scaled(-1.0 / data.m_reg());
        let step = forms.norm_h_raw(next.sub(&g)?.values());
        update_norms.push(step);
        g = next;
        eval = evaluate(data, &g)?;
        if step <= tol {
            converged = true;
            break;
        }
    }
    Ok(OptimalTriple {
        optimality_residual: forms.norm_h_raw(eval.gradient.values()),
        g_op: g,
        u_op: eval.u,
        p_op: eval.p,
        cost: eval.cost,
        iterations: update_norms.len(),
        final_update_norm: update_norms.last().copied().unwrap_or(0.0),
        update_norms,
        method: Method::FixedPoint,
        converged,
        precheck: Some(precheck),
    })
}

/// Eliminates the control through `g = -p / M` and solves the coupled
/// symmetric quasi-definite system for state and adjoint at once.
pub fn solve_kkt_direct(data: &ProblemData) -> Result<OptimalTriple> {
    let forms = data.forms();
    let sys = data.kkt_system()?;
    let s = 1.0 / data.m_reg();
    let n = forms.num_nodes();
    let mz = forms.mass.mul_vec(data.z_d().values());
    let (rhs, idx): (Vec<f64>, Option<&[usize]>) = match data.alpha() {
        None => {
            let f = &forms.free_nodes;
            let mb = forms.mass.mul_vec(&vec![forms.b; n]);
            let mut rhs = Vec::with_capacity(2 * f.len());
            for &i in f {
                rhs.push(-forms.flux_load[i]);
                rhs.push(s * (mz[i] - mb[i]));
            }
            (rhs, Some(f.as_slice()))
        }
        Some(alpha) => {
            let mut rhs = Vec::with_capacity(2 * n);
            for i in 0..n {
                rhs.push(-forms.flux_load[i] + alpha * forms.gamma1_load[i]);
                rhs.push(s * mz[i]);
            }
            (rhs, None)
        }
    };
    let report = sys.solve(&rhs, data.solve_tol())?;
    let w: Vec<f64> = report.solution.iter().step_by(2).copied().collect();
    let p: Vec<f64> = report.solution.iter().skip(1).step_by(2).copied().collect();
    let (u, p) = match idx {
        Some(f) => (scatter(&w, f, n, forms.b), scatter(&p, f, n, 0.0)),
        None => (w, p),
    };
    let mesh = data.mesh().clone();
    let u = FeFunction::from_raw(mesh.clone(), u);
    let p = FeFunction::from_raw(mesh, p);
    let g = p.scaled(-s);
    let check = evaluate(data, &g)?;
    Ok(OptimalTriple {
        cost: cost_of(data, &g, &u),
        optimality_residual: forms.norm_h_raw(check.gradient.values()),
        g_op: g,
        u_op: u,
        p_op: p,
        iterations: report.iterations,
        final_update_norm: 0.0,
        update_norms: Vec::new(),
        method: Method::DirectKkt,
        converged: true,
        precheck: None,
    })
}

/// Method selection for callers that do not care: the fixed-point map when
/// the precheck guarantees contraction, the direct solve otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    FixedPoint,
    Kkt,
    Auto,
}

pub fn solve_optimal(
    data: &ProblemData,
    choice: MethodChoice,
    tol: f64,
    max_iter: usize,
) -> Result<OptimalTriple> {
    let use_fixed_point = match choice {
        MethodChoice::FixedPoint => true,
        MethodChoice::Kkt => false,
        MethodChoice::Auto => contraction_precheck(data)?.satisfied,
    };
    if use_fixed_point {
        solve_fixed_point(data, &FeFunction::zeros(data.mesh().clone()), tol, max_iter)
    } else {
        solve_kkt_direct(data)
    }
}
