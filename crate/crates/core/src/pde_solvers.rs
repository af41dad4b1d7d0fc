//! The four discrete state and adjoint problems.
//!
//! Dirichlet problems are solved on the free nodes only: the state is
//! lifted as `u = b + w` with `w` vanishing on the closure of `Gamma1`, and
//! the adjoint lives in the same reduced space. Robin problems use the full
//! matrix `A + alpha B1`. Factorizations are cached per [`ProblemData`] and
//! shared between values derived from one another, so repeated solves cost
//! two triangular sweeps each.

use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::assembly::{assemble, check_alpha, interpolate, AssembledForms, FeFunction, FluxData};
use crate::constants_bounds::{estimate_constants, ConstantSet};
use crate::error::{Error, Result};
use crate::linsolve::{
    Definiteness, LdltFactor, SolveError, SolveReport, DEFAULT_REFINEMENT_STEPS, DEFAULT_SOLVE_TOL,
};
use crate::mesh::{Mesh, Point};
use crate::sparse::SparseMatrix;

/// A matrix together with its factorization.
#[derive(Debug)]
pub(crate) struct Factored {
    pub(crate) matrix: SparseMatrix,
    pub(crate) factor: LdltFactor,
}

impl Factored {
    fn new(matrix: SparseMatrix, kind: Definiteness) -> std::result::Result<Arc<Self>, SolveError> {
        let factor = LdltFactor::new(&matrix, kind)?;
        Ok(Arc::new(Factored { matrix, factor }))
    }

    pub(crate) fn solve(&self, rhs: &[f64], tol: f64) -> Result<SolveReport> {
        let report = self
            .factor
            .solve_refined(&self.matrix, rhs, tol, DEFAULT_REFINEMENT_STEPS);
        if report.converged {
            Ok(report)
        } else {
            Err(SolveError::NotConverged {
                iterations: report.iterations,
                residual: report.residual_norm,
                tol,
            }
            .into())
        }
    }
}

type Cached<T> = OnceLock<std::result::Result<T, SolveError>>;

/// Caches that do not depend on `alpha`, `M_reg` or `z_d`.
#[derive(Default)]
struct Shared {
    dirichlet: Cached<Arc<Factored>>,
    constants: Cached<ConstantSet>,
}

/// Caches tied to one `(alpha, M_reg)` pair.
#[derive(Default)]
struct Local {
    robin: Cached<Arc<Factored>>,
    kkt: Cached<Arc<Factored>>,
}

/// Data of one discrete problem: `(P_h)` when `alpha` is absent, `(P_h alpha)`
/// otherwise.
#[derive(Clone)]
pub struct ProblemData {
    forms: Arc<AssembledForms>,
    z_d: FeFunction,
    m_reg: f64,
    alpha: Option<f64>,
    solve_tol: f64,
    shared: Arc<Shared>,
    local: Arc<Local>,
}

impl fmt::Debug for ProblemData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemData")
            .field("nodes", &self.forms.num_nodes())
            .field("b", &self.forms.b)
            .field("m_reg", &self.m_reg)
            .field("alpha", &self.alpha)
            .finish()
    }
}

fn check_positive(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            value,
            reason: "must be positive and finite",
        })
    }
}

impl ProblemData {
    pub fn new(
        forms: Arc<AssembledForms>,
        z_d: FeFunction,
        m_reg: f64,
        alpha: Option<f64>,
    ) -> Result<Self> {
        check_positive("M_reg", m_reg)?;
        if let Some(a) = alpha {
            check_alpha(a)?;
        }
        if forms.b < 0.0 {
            return Err(Error::InvalidParameter {
                name: "b",
                value: forms.b,
                reason: "must be nonnegative",
            });
        }
        z_d.check_mesh(&forms.mesh)?;
        Ok(ProblemData {
            forms,
            z_d,
            m_reg,
            alpha,
            solve_tol: DEFAULT_SOLVE_TOL,
            shared: Arc::default(),
            local: Arc::default(),
        })
    }

    /// Same data with a different `alpha` (`None` for the Dirichlet
    /// problem). Alpha-independent caches are shared.
    pub fn with_alpha(&self, alpha: Option<f64>) -> Result<Self> {
        if let Some(a) = alpha {
            check_alpha(a)?;
        }
        Ok(ProblemData {
            alpha,
            local: Arc::default(),
            ..self.clone()
        })
    }

    pub fn with_m_reg(&self, m_reg: f64) -> Result<Self> {
        check_positive("M_reg", m_reg)?;
        Ok(ProblemData {
            m_reg,
            local: Arc::default(),
            ..self.clone()
        })
    }

    /// Same forms and weights, different target.
    pub fn with_z_d(&self, z_d: FeFunction) -> Result<Self> {
        z_d.check_mesh(&self.forms.mesh)?;
        Ok(ProblemData {
            z_d,
            ..self.clone()
        })
    }

    /// Relative residual tolerance of every linear solve.
    pub fn with_solve_tol(&self, tol: f64) -> Result<Self> {
        check_positive("solve_tol", tol)?;
        Ok(ProblemData {
            solve_tol: tol,
            ..self.clone()
        })
    }

    pub fn forms(&self) -> &Arc<AssembledForms> {
        &self.forms
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.forms.mesh
    }

    pub fn z_d(&self) -> &FeFunction {
        &self.z_d
    }

    pub fn m_reg(&self) -> f64 {
        self.m_reg
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    pub fn b(&self) -> f64 {
        self.forms.b
    }

    pub fn solve_tol(&self) -> f64 {
        self.solve_tol
    }

    /// Discrete coercivity and trace constants of the mesh, computed once.
    pub fn constants(&self) -> Result<ConstantSet> {
        Ok(self
            .shared
            .constants
            .get_or_init(|| estimate_constants(&self.forms).map_err(solve_error_of))
            .clone()?)
    }

    pub(crate) fn dirichlet_system(&self) -> Result<Arc<Factored>> {
        Ok(self
            .shared
            .dirichlet
            .get_or_init(|| {
                let f = &self.forms.free_nodes;
                Factored::new(self.forms.stiffness.submatrix(f, f), Definiteness::Positive)
            })
            .clone()?)
    }

    pub(crate) fn robin_system(&self) -> Result<Arc<Factored>> {
        let alpha = self.require_alpha()?;
        Ok(self
            .local
            .robin
            .get_or_init(|| {
                Factored::new(
                    self.forms.stiffness.add_scaled(alpha, &self.forms.gamma1_mass),
                    Definiteness::Positive,
                )
            })
            .clone()?)
    }

    /// The symmetric quasi-definite optimality system with unknowns
    /// interleaved as `(w_0, p_0, w_1, p_1, ...)`.
    pub(crate) fn kkt_system(&self) -> Result<Arc<Factored>> {
        Ok(self
            .local
            .kkt
            .get_or_init(|| {
                let (a, m) = match self.alpha {
                    None => {
                        let f = &self.forms.free_nodes;
                        (
                            self.forms.stiffness.submatrix(f, f),
                            self.forms.mass.submatrix(f, f),
                        )
                    }
                    Some(alpha) => (
                        self.forms.stiffness.add_scaled(alpha, &self.forms.gamma1_mass),
                        self.forms.mass.clone(),
                    ),
                };
                let s = 1.0 / self.m_reg;
                let mut t = Vec::with_capacity(2 * (a.nnz() + m.nnz()));
                for (i, j, v) in a.triplets() {
                    t.push((2 * i, 2 * j, v));
                    t.push((2 * i + 1, 2 * j + 1, -s * v));
                }
                for (i, j, v) in m.triplets() {
                    t.push((2 * i, 2 * j + 1, s * v));
                    t.push((2 * i + 1, 2 * j, s * v));
                }
                let n = 2 * a.nrows();
                Factored::new(
                    SparseMatrix::from_triplets(n, n, &t),
                    Definiteness::QuasiDefinite {
                        positive: |i| i % 2 == 0,
                    },
                )
            })
            .clone()?)
    }

    pub(crate) fn require_alpha(&self) -> Result<f64> {
        self.alpha.ok_or_else(|| {
            Error::Precondition("the Robin problem needs alpha; this data describes the Dirichlet problem".into())
        })
    }

    fn require_dirichlet(&self) -> Result<()> {
        match self.alpha {
            None => Ok(()),
            Some(_) => Err(Error::Precondition(
                "the Dirichlet problem is defined without alpha; use with_alpha(None)".into(),
            )),
        }
    }
}

fn solve_error_of(e: Error) -> SolveError {
    match e {
        Error::Solve(s) => s,
        other => SolveError::DimensionMismatch(other.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StateKind {
    Dirichlet,
    Robin(f64),
}

#[derive(Debug, Clone)]
pub struct StateSolution {
    pub u: FeFunction,
    /// Report of the linear solve; for Dirichlet problems the solution
    /// vector holds the free-node values of `u - b`.
    pub report: SolveReport,
    pub kind: StateKind,
}

pub(crate) fn gather(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Writes `reduced` into a vector of length `n` that equals `fill` elsewhere.
pub(crate) fn scatter(reduced: &[f64], idx: &[usize], n: usize, fill: f64) -> Vec<f64> {
    let mut out = vec![fill; n];
    for (&i, &v) in idx.iter().zip(reduced) {
        out[i] = v + fill;
    }
    out
}

/// Solves the Dirichlet state equation for control `g`.
pub fn solve_state_dirichlet(data: &ProblemData, g: &FeFunction) -> Result<StateSolution> {
    g.check_mesh(data.mesh())?;
    let forms = &data.forms;
    let sys = data.dirichlet_system()?;
    let mg = forms.mass.mul_vec(g.values());
    let rhs: Vec<f64> = forms
        .free_nodes
        .iter()
        .map(|&i| mg[i] - forms.flux_load[i])
        .collect();
    let report = sys.solve(&rhs, data.solve_tol)?;
    let u = scatter(&report.solution, &forms.free_nodes, forms.num_nodes(), forms.b);
    Ok(StateSolution {
        u: FeFunction::from_raw(data.mesh().clone(), u),
        report,
        kind: StateKind::Dirichlet,
    })
}

/// Solves the Robin state equation for control `g` on the full space.
pub fn solve_state_robin(data: &ProblemData, g: &FeFunction) -> Result<StateSolution> {
    g.check_mesh(data.mesh())?;
    let alpha = data.require_alpha()?;
    let forms = &data.forms;
    let sys = data.robin_system()?;
    let mg = forms.mass.mul_vec(g.values());
    let rhs: Vec<f64> = (0..forms.num_nodes())
        .map(|i| mg[i] - forms.flux_load[i] + alpha * forms.gamma1_load[i])
        .collect();
    let report = sys.solve(&rhs, data.solve_tol)?;
    Ok(StateSolution {
        u: FeFunction::from_raw(data.mesh().clone(), report.solution.clone()),
        report,
        kind: StateKind::Robin(alpha),
    })
}

/// Dispatches on the presence of `alpha`.
pub fn solve_state(data: &ProblemData, g: &FeFunction) -> Result<StateSolution> {
    match data.alpha {
        None => solve_state_dirichlet(data, g),
        Some(_) => solve_state_robin(data, g),
    }
}

fn adjoint_load(data: &ProblemData, u: &FeFunction) -> Vec<f64> {
    let d: Vec<f64> = u
        .values()
        .iter()
        .zip(data.z_d.values())
        .map(|(a, b)| a - b)
        .collect();
    data.forms.mass.mul_vec(&d)
}

/// Dirichlet adjoint: zero on the closure of `Gamma1`.
pub fn solve_adjoint_dirichlet(data: &ProblemData, u: &StateSolution) -> Result<FeFunction> {
    data.require_dirichlet()?;
    if u.kind != StateKind::Dirichlet {
        return Err(Error::Precondition("expected a Dirichlet state".into()));
    }
    u.u.check_mesh(data.mesh())?;
    let forms = &data.forms;
    let sys = data.dirichlet_system()?;
    let rhs = gather(&adjoint_load(data, &u.u), &forms.free_nodes);
    let report = sys.solve(&rhs, data.solve_tol)?;
    let p = scatter(&report.solution, &forms.free_nodes, forms.num_nodes(), 0.0);
    Ok(FeFunction::from_raw(data.mesh().clone(), p))
}

pub fn solve_adjoint_robin(data: &ProblemData, u: &StateSolution) -> Result<FeFunction> {
    let alpha = data.require_alpha()?;
    if u.kind != StateKind::Robin(alpha) {
        return Err(Error::Precondition(format!(
            "expected a Robin state for alpha = {}",
            alpha
        )));
    }
    u.u.check_mesh(data.mesh())?;
    let sys = data.robin_system()?;
    let report = sys.solve(&adjoint_load(data, &u.u), data.solve_tol)?;
    Ok(FeFunction::from_raw(data.mesh().clone(), report.solution))
}

pub fn solve_adjoint(data: &ProblemData, u: &StateSolution) -> Result<FeFunction> {
    match data.alpha {
        None => solve_adjoint_dirichlet(data, u),
        Some(_) => solve_adjoint_robin(data, u),
    }
}

pub type ScalarField = Arc<dyn Fn(Point) -> f64 + Send + Sync>;

/// Mesh-independent problem description; [`ProblemSpec::instantiate`]
/// assembles it on a concrete mesh.
#[derive(Clone)]
pub struct ProblemSpec {
    pub b: f64,
    pub q: FluxData,
    pub z_d: ScalarField,
    pub m_reg: f64,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("b", &self.b)
            .field("q", &self.q)
            .field("m_reg", &self.m_reg)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn instantiate(&self, mesh: Arc<Mesh>, alpha: Option<f64>) -> Result<ProblemData> {
        let forms = Arc::new(assemble(mesh.clone(), &self.q, self.b)?);
        let z = &self.z_d;
        let z_d = interpolate(mesh, |p| z(p))?;
        ProblemData::new(forms, z_d, self.m_reg, alpha)
    }
}
