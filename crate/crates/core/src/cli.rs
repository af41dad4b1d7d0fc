//! Command-line front end: JSON experiment configs, dispatch to the solvers
//! and sweeps, and artifact files.
//!
//! Every artifact embeds the resolved configuration: CSV and mesh files as
//! a leading `# config=<json>` comment line, JSON reports under a
//! `"config"` key.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::assembly::{assemble, interpolate, FeFunction, FluxData};
use crate::constants_bounds::{verify_bounds, RegWeight};
use crate::convergence_lab::{
    run_alpha_sweep, run_diagonal_sweep, run_h_sweep_dirichlet, run_h_sweep_robin,
    ManufacturedCase, SweepOptions,
};
use crate::error::{Error, Result};
use crate::linsolve::DEFAULT_SOLVE_TOL;
use crate::mesh::{
    build_structured_mesh, mesh_quality_report, read_mesh, refine_uniform, write_mesh, DomainSpec,
    Gamma1Selector, Mesh, Point,
};
use crate::optimal_control::{
    solve_optimal, MethodChoice, OptimalTriple, DEFAULT_FIXED_POINT_TOL, DEFAULT_MAX_ITER,
};
use crate::pde_solvers::{solve_adjoint, solve_state, ProblemData, ProblemSpec, ScalarField};

#[derive(Debug, Parser)]
#[command(name = "mixed-ocp", version, about = "P1 finite-element optimal control laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Mode {
    /// Build (or read) a mesh and write it with a quality summary
    Mesh,
    /// Solve the state and adjoint equations for a given control
    Solve,
    /// Solve the optimal control problem
    Optimize,
    /// Mesh-refinement study on a manufactured solution
    SweepH,
    /// Robin-to-Dirichlet study on a fixed mesh
    SweepAlpha,
    /// Joint refinement and alpha growth
    SweepDiagonal,
    /// Verify the uniform a-priori estimates
    Bounds,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Mesh => "mesh",
            Mode::Solve => "solve",
            Mode::Optimize => "optimize",
            Mode::SweepH => "sweep-h",
            Mode::SweepAlpha => "sweep-alpha",
            Mode::SweepDiagonal => "sweep-diagonal",
            Mode::Bounds => "bounds",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    Mesh(CommonArgs),
    Solve(CommonArgs),
    Optimize(CommonArgs),
    SweepH(CommonArgs),
    SweepAlpha(CommonArgs),
    SweepDiagonal(CommonArgs),
    Bounds(CommonArgs),
}

impl Command {
    pub fn split(&self) -> (Mode, &CommonArgs) {
        match self {
            Command::Mesh(a) => (Mode::Mesh, a),
            Command::Solve(a) => (Mode::Solve, a),
            Command::Optimize(a) => (Mode::Optimize, a),
            Command::SweepH(a) => (Mode::SweepH, a),
            Command::SweepAlpha(a) => (Mode::SweepAlpha, a),
            Command::SweepDiagonal(a) => (Mode::SweepDiagonal, a),
            Command::Bounds(a) => (Mode::Bounds, a),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON experiment configuration
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created if missing)
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for sweeps (default: all cores)
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Read the mesh from this file instead of building it
    #[arg(long)]
    pub mesh_in: Option<PathBuf>,
    /// Also write the mesh to this file
    #[arg(long)]
    pub mesh_out: Option<PathBuf>,
}

// ---- configuration -------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RegWeightSpec {
    Value(f64),
    OverLambdaSq { over_lambda_sq: f64 },
}

impl RegWeightSpec {
    fn weight(&self) -> RegWeight {
        match *self {
            RegWeightSpec::Value(m) => RegWeight::Fixed(m),
            RegWeightSpec::OverLambdaSq { over_lambda_sq } => RegWeight::OverLambdaSq(over_lambda_sq),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    #[serde(default = "unit_square_polygon")]
    pub polygon: Vec<Point>,
    #[serde(default = "default_gamma1")]
    pub gamma1: Vec<usize>,
    #[serde(default = "default_n")]
    pub n: usize,
}

fn unit_square_polygon() -> Vec<Point> {
    vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
}

fn default_gamma1() -> Vec<usize> {
    vec![0]
}

fn default_n() -> usize {
    4
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            polygon: unit_square_polygon(),
            gamma1: default_gamma1(),
            n: default_n(),
        }
    }
}

impl DomainConfig {
    pub fn spec(&self) -> DomainSpec {
        DomainSpec {
            polygon: self.polygon.clone(),
            gamma1: Gamma1Selector::Sides(self.gamma1.clone()),
            n: self.n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub b: Option<f64>,
    pub q: Option<String>,
    pub z_d: Option<String>,
    #[serde(rename = "M_reg")]
    pub m_reg: Option<RegWeightSpec>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub domain: DomainConfig,
    pub data: DataConfig,
    pub mode: Option<String>,
    #[serde(default)]
    pub params: Value,
}

fn config_error(field: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        msg: msg.into(),
    }
}

/// Parses a config document. Syntax errors report line and column; missing
/// or malformed fields are named by their dotted path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| {
        config_error("<document>", format!("line {}, column {}: {}", e.line(), e.column(), e))
    })?;
    let obj = value
        .as_object()
        .ok_or_else(|| config_error("<document>", "expected a JSON object"))?;
    if !obj.contains_key("data") {
        return Err(config_error("data", "missing section"));
    }
    for key in obj.keys() {
        if !["domain", "data", "mode", "params"].contains(&key.as_str()) {
            return Err(config_error(key, "unknown top-level field"));
        }
    }
    for section in ["domain", "data"] {
        if let Some(v) = obj.get(section) {
            let probe: std::result::Result<Value, _> = match section {
                "domain" => serde_json::from_value::<DomainConfig>(v.clone()).map(|_| Value::Null),
                _ => serde_json::from_value::<DataConfig>(v.clone()).map(|_| Value::Null),
            };
            if let Err(e) = probe {
                let field = e
                    .to_string()
                    .split('`')
                    .nth(1)
                    .map(|f| format!("{}.{}", section, f))
                    .unwrap_or_else(|| section.to_string());
                return Err(config_error(&field, e.to_string()));
            }
        }
    }
    serde_json::from_value(value).map_err(|e| config_error("<document>", e.to_string()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}

/// A data field given by preset.
#[derive(Clone)]
pub enum FieldSpec {
    Analytic(ScalarField),
    Nodal(Vec<f64>),
}

/// Resolves `constant:c`, `affine:a,b,c` (`a + b x + c y`), `sinprod`
/// (`sin(pi x) sin(pi y)`) and `file:path` (whitespace- or comma-separated
/// nodal values, `#` comments allowed).
pub fn parse_preset(field: &str, text: &str, base_dir: &Path) -> Result<FieldSpec> {
    let (kind, arg) = match text.split_once(':') {
        Some((k, a)) => (k.trim(), a.trim()),
        None => (text.trim(), ""),
    };
    let nums = |s: &str| -> Result<Vec<f64>> {
        s.split(',')
            .map(|x| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|_| config_error(field, format!("cannot parse number '{}'", x.trim())))
            })
            .collect()
    };
    match kind {
        "constant" => {
            let v = nums(arg)?;
            if v.len() != 1 {
                return Err(config_error(field, "constant preset takes one value"));
            }
            let c = v[0];
            Ok(FieldSpec::Analytic(Arc::new(move |_| c)))
        }
        "affine" => {
            let v = nums(arg)?;
            if v.len() != 3 {
                return Err(config_error(field, "affine preset takes a,b,c for a + b x + c y"));
            }
            let (a, b, c) = (v[0], v[1], v[2]);
            Ok(FieldSpec::Analytic(Arc::new(move |p| a + b * p[0] + c * p[1])))
        }
        "sinprod" => {
            use std::f64::consts::PI;
            Ok(FieldSpec::Analytic(Arc::new(|p| (PI * p[0]).sin() * (PI * p[1]).sin())))
        }
        "file" => {
            let path = base_dir.join(arg);
            let text = fs::read_to_string(&path)
                .map_err(|e| config_error(field, format!("{}: {}", path.display(), e)))?;
            let mut values = Vec::new();
            for (no, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("");
                for tok in line.split(|c: char| c == ',' || c.is_whitespace()) {
                    if tok.is_empty() {
                        continue;
                    }
                    values.push(tok.parse::<f64>().map_err(|_| {
                        config_error(field, format!("{} line {}: cannot parse '{}'", path.display(), no + 1, tok))
                    })?);
                }
            }
            Ok(FieldSpec::Nodal(values))
        }
        other => Err(config_error(
            field,
            format!("unknown preset '{}' (constant:c, affine:a,b,c, sinprod, file:path)", other),
        )),
    }
}

fn field_on_mesh(field: &str, spec: &FieldSpec, mesh: &Arc<Mesh>) -> Result<FeFunction> {
    match spec {
        FieldSpec::Analytic(f) => interpolate(mesh.clone(), |p| f(p)),
        FieldSpec::Nodal(v) => FeFunction::new(mesh.clone(), v.clone())
            .map_err(|e| config_error(field, e.to_string())),
    }
}

fn analytic(field: &str, spec: FieldSpec) -> Result<ScalarField> {
    match spec {
        FieldSpec::Analytic(f) => Ok(f),
        FieldSpec::Nodal(_) => Err(config_error(
            field,
            "nodal files are tied to one mesh; this mode needs an analytic preset",
        )),
    }
}

fn flux_of(spec: FieldSpec) -> FluxData {
    match spec {
        FieldSpec::Analytic(f) => FluxData::Function(Arc::new(move |p, _| f(p))),
        FieldSpec::Nodal(v) => FluxData::Nodal(v),
    }
}

/// Parameters of the modes, with defaults filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    #[serde(default = "default_method")]
    pub method: MethodChoice,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Relative residual tolerance of the linear solves.
    #[serde(default = "default_solve_tol")]
    pub solve_tol: f64,
    /// Control for `solve`.
    #[serde(default = "default_g")]
    pub g: String,
    /// Manufactured case for `sweep-h`: smooth, affine or constant.
    #[serde(default = "default_case")]
    pub case: String,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_reference_levels")]
    pub reference_levels: usize,
    #[serde(default = "default_ladder")]
    pub ladder: Vec<f64>,
    #[serde(default = "default_alpha0")]
    pub alpha0: f64,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    /// Subdivision counts for `bounds`.
    #[serde(default = "default_bound_ns")]
    pub bound_ns: Vec<usize>,
    #[serde(default = "default_bound_alphas")]
    pub bound_alphas: Vec<f64>,
}

fn default_method() -> MethodChoice {
    MethodChoice::Auto
}
fn default_tol() -> f64 {
    DEFAULT_FIXED_POINT_TOL
}
fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}
fn default_solve_tol() -> f64 {
    DEFAULT_SOLVE_TOL
}
fn default_g() -> String {
    "constant:0".into()
}
fn default_case() -> String {
    "smooth".into()
}
fn default_levels() -> usize {
    4
}
fn default_reference_levels() -> usize {
    1
}
fn default_ladder() -> Vec<f64> {
    vec![2.0, 8.0, 32.0, 128.0, 512.0]
}
fn default_alpha0() -> f64 {
    4.0
}
fn default_k_max() -> usize {
    3
}
fn default_bound_ns() -> Vec<usize> {
    vec![4, 8, 16]
}
fn default_bound_alphas() -> Vec<f64> {
    vec![2.0, 8.0, 32.0, 128.0]
}

pub fn parse_params(value: &Value) -> Result<Params> {
    let v = if value.is_null() { json!({}) } else { value.clone() };
    serde_json::from_value(v).map_err(|e| {
        let field = e
            .to_string()
            .split('`')
            .nth(1)
            .map(|f| format!("params.{}", f))
            .unwrap_or_else(|| "params".into());
        config_error(&field, e.to_string())
    })
}

// ---- running -------------------------------------------------------------

/// What a run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Asserted properties that failed; non-empty means nonzero exit.
    pub failures: Vec<String>,
}

struct Ctx<'a> {
    mode: Mode,
    args: &'a CommonArgs,
    config: ExperimentConfig,
    params: Params,
    base_dir: PathBuf,
    /// Echoed into every artifact; filled in as values get resolved.
    echo: Value,
    files: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.args.out.join(name)
    }

    fn echo_line(&self) -> String {
        format!("# config={}", serde_json::to_string(&self.echo).expect("config serializes"))
    }

    fn write_text(&mut self, name: &str, body: &[u8]) -> Result<()> {
        let path = self.path(name);
        let mut f = fs::File::create(&path)?;
        writeln!(f, "{}", self.echo_line())?;
        f.write_all(body)?;
        self.files.push(path);
        Ok(())
    }

    fn write_json(&mut self, name: &str, mut body: Value) -> Result<()> {
        if let Value::Object(map) = &mut body {
            map.insert("config".into(), self.echo.clone());
        }
        let path = self.path(name);
        fs::write(&path, serde_json::to_string_pretty(&body)? + "\n")?;
        self.files.push(path);
        Ok(())
    }

    fn write_mesh_file(&mut self, path: PathBuf, mesh: &Mesh) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "{}", self.echo_line())?;
        write_mesh(mesh, &mut buf)?;
        fs::write(&path, buf)?;
        self.files.push(path);
        Ok(())
    }

    fn b(&self) -> Result<f64> {
        self.config.data.b.ok_or_else(|| config_error("data.b", "missing"))
    }

    fn reg(&self) -> Result<RegWeight> {
        self.config
            .data
            .m_reg
            .as_ref()
            .map(RegWeightSpec::weight)
            .ok_or_else(|| config_error("data.M_reg", "missing"))
    }

    fn preset(&self, field: &str, value: &Option<String>) -> Result<FieldSpec> {
        let text = value
            .as_ref()
            .ok_or_else(|| config_error(field, "missing"))?;
        parse_preset(field, text, &self.base_dir)
    }

    fn mesh(&mut self) -> Result<Arc<Mesh>> {
        let mesh = match &self.args.mesh_in {
            Some(p) => read_mesh(BufReader::new(fs::File::open(p)?))?,
            None => build_structured_mesh(&self.config.domain.spec())?,
        };
        Ok(Arc::new(mesh))
    }

    fn no_mesh_in(&self) -> Result<()> {
        if self.args.mesh_in.is_some() {
            return Err(Error::Precondition(format!(
                "--mesh-in is not supported by {}: it builds nested meshes from the domain",
                self.mode.name()
            )));
        }
        Ok(())
    }

    fn sweep_options(&self, reg: RegWeight) -> SweepOptions {
        SweepOptions {
            m_reg: reg,
            method: self.params.method,
            tol: self.params.tol,
            max_iter: self.params.max_iter,
            reference_levels: self.params.reference_levels,
            solve_tol: self.params.solve_tol,
        }
    }

    /// Problem data on one mesh; `M_reg` over lambda^2 uses that mesh.
    fn single_mesh_data(&mut self, mesh: &Arc<Mesh>) -> Result<ProblemData> {
        let b = self.b()?;
        let q = flux_of(self.preset("data.q", &self.config.data.q.clone())?);
        let z = self.preset("data.z_d", &self.config.data.z_d.clone())?;
        let z_d = field_on_mesh("data.z_d", &z, mesh)?;
        let forms = Arc::new(assemble(mesh.clone(), &q, b)?);
        let data = ProblemData::new(forms, z_d, 1.0, self.config.data.alpha)?
            .with_solve_tol(self.params.solve_tol)?;
        let m = match self.reg()? {
            RegWeight::Fixed(m) => m,
            w => w.resolve(data.constants()?.lambda_h),
        };
        self.echo["resolved"]["M_reg"] = json!(m);
        data.with_m_reg(m)
    }

    fn analytic_spec(&self) -> Result<ProblemSpec> {
        Ok(ProblemSpec {
            b: self.b()?,
            q: flux_of(self.preset("data.q", &self.config.data.q)?),
            z_d: analytic("data.z_d", self.preset("data.z_d", &self.config.data.z_d)?)?,
            m_reg: 1.0,
        })
    }
}

fn nodal_csv(mesh: &Mesh, columns: &[(&str, &FeFunction)]) -> Vec<u8> {
    let mut out = String::from("vertex,x,y");
    for (name, _) in columns {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, p) in mesh.vertices().iter().enumerate() {
        out.push_str(&format!("{},{},{}", i, p[0], p[1]));
        for (_, f) in columns {
            out.push_str(&format!(",{}", f.values()[i]));
        }
        out.push('\n');
    }
    out.into_bytes()
}

fn triple_summary(t: &OptimalTriple, data: &ProblemData) -> Value {
    let f = data.forms();
    json!({
        "method": t.method,
        "converged": t.converged,
        "iterations": t.iterations,
        "cost": t.cost,
        "final_update_norm": t.final_update_norm,
        "update_norms": t.update_norms,
        "update_ratios": t.update_ratios(),
        "optimality_residual": t.optimality_residual,
        "precheck": t.precheck,
        "g_norm_H": f.norm_h_raw(t.g_op.values()),
        "g_norm_V": f.norm_v_raw(t.g_op.values()),
        "u_norm_V": f.norm_v_raw(t.u_op.values()),
        "p_norm_V": f.norm_v_raw(t.p_op.values()),
    })
}

/// Parses arguments, runs, and returns the process exit code. Failures of
/// asserted properties give 1, usage/config errors 2, other errors 3.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(outcome) if outcome.failures.is_empty() => 0,
        Ok(outcome) => {
            for f in &outcome.failures {
                eprintln!("FAILED: {}", f);
            }
            1
        }
        Err(e) => {
            eprintln!("error: {}", e);
            if let Error::Solve(crate::linsolve::SolveError::NotConverged { .. }) = e {
                eprintln!("hint: fine meshes can floor above the default solve tolerance; raise params.solve_tol");
            }
            match e {
                Error::Config { .. } => 2,
                _ => 3,
            }
        }
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let (mode, args) = cli.command.split();
    let config = load_config(&args.config)?;
    if let Some(m) = &config.mode {
        if m != mode.name() {
            return Err(config_error(
                "mode",
                format!("config is for '{}' but the subcommand is '{}'", m, mode.name()),
            ));
        }
    }
    let params = parse_params(&config.params)?;
    if config.data.m_reg.is_none() && mode != Mode::Mesh {
        return Err(config_error("data.M_reg", "missing"));
    }
    fs::create_dir_all(&args.out)?;
    let echo = json!({
        "mode": mode.name(),
        "domain": config.domain,
        "data": config.data,
        "params": params,
        "mesh_in": args.mesh_in,
        "resolved": {},
    });
    let base_dir = args
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let mut ctx = Ctx {
        mode,
        args,
        config,
        params,
        base_dir,
        echo,
        files: Vec::new(),
    };
    let work = |ctx: &mut Ctx| -> Result<Vec<String>> {
        match mode {
            Mode::Mesh => run_mesh(ctx),
            Mode::Solve => run_solve(ctx),
            Mode::Optimize => run_optimize(ctx),
            Mode::SweepH => run_sweep_h(ctx),
            Mode::SweepAlpha => run_sweep_alpha(ctx),
            Mode::SweepDiagonal => run_sweep_diagonal(ctx),
            Mode::Bounds => run_bounds(ctx),
        }
    };
    let failures = match args.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Precondition(e.to_string()))?
            .install(|| work(&mut ctx))?,
        None => work(&mut ctx)?,
    };
    let echo = ctx.echo.clone();
    ctx.write_json("config.json", echo)?;
    if !failures.is_empty() {
        ctx.write_json(
            "failure.json",
            json!({ "mode": mode.name(), "failed": failures }),
        )?;
    }
    Ok(Outcome {
        files: ctx.files,
        failures,
    })
}

fn maybe_mesh_out(ctx: &mut Ctx, mesh: &Mesh) -> Result<()> {
    if let Some(p) = ctx.args.mesh_out.clone() {
        ctx.write_mesh_file(p, mesh)?;
    }
    Ok(())
}

fn run_mesh(ctx: &mut Ctx) -> Result<Vec<String>> {
    let mesh = ctx.mesh()?;
    let path = ctx.args.mesh_out.clone().unwrap_or_else(|| ctx.path("mesh.txt"));
    ctx.write_mesh_file(path, &mesh)?;
    let q = mesh_quality_report(&mesh);
    ctx.write_json(
        "mesh_quality.json",
        json!({
            "vertices": mesh.num_vertices(),
            "triangles": mesh.triangles().len(),
            "boundary_edges": mesh.boundary_edges().len(),
            "quality": q,
        }),
    )?;
    Ok(Vec::new())
}

fn run_solve(ctx: &mut Ctx) -> Result<Vec<String>> {
    let mesh = ctx.mesh()?;
    maybe_mesh_out(ctx, &mesh)?;
    let data = ctx.single_mesh_data(&mesh)?;
    let g_spec = parse_preset("params.g", &ctx.params.g, &ctx.base_dir)?;
    let g = field_on_mesh("params.g", &g_spec, &mesh)?;
    let state = solve_state(&data, &g)?;
    let p = solve_adjoint(&data, &state)?;
    let body = nodal_csv(&mesh, &[("g", &g), ("u", &state.u), ("p", &p)]);
    ctx.write_text("solution.csv", &body)?;
    let f = data.forms();
    ctx.write_json(
        "solve.json",
        json!({
            "kind": state.kind,
            "iterations": state.report.iterations,
            "residual_norm": state.report.residual_norm,
            "cost": crate::optimal_control::cost(&data, &g)?,
            "u_norm_V": f.norm_v_raw(state.u.values()),
            "p_norm_V": f.norm_v_raw(p.values()),
            "gamma1_deviation": f.gamma1_deviation_raw(state.u.values(), data.b()),
        }),
    )?;
    Ok(Vec::new())
}

fn run_optimize(ctx: &mut Ctx) -> Result<Vec<String>> {
    let mesh = ctx.mesh()?;
    maybe_mesh_out(ctx, &mesh)?;
    let data = ctx.single_mesh_data(&mesh)?;
    let t = solve_optimal(&data, ctx.params.method, ctx.params.tol, ctx.params.max_iter)?;
    ctx.write_text("g_op.csv", &nodal_csv(&mesh, &[("g", &t.g_op)]))?;
    ctx.write_text(
        "optimal.csv",
        &nodal_csv(&mesh, &[("g", &t.g_op), ("u", &t.u_op), ("p", &t.p_op)]),
    )?;
    ctx.write_json("optimize.json", triple_summary(&t, &data))?;
    let mut failures = Vec::new();
    if !t.converged {
        failures.push(format!(
            "fixed-point iteration did not converge in {} steps (last update {})",
            t.iterations, t.final_update_norm
        ));
    }
    Ok(failures)
}

fn manufactured(ctx: &Ctx, alpha: Option<f64>) -> Result<ManufacturedCase> {
    let b = ctx.b()?;
    match (ctx.params.case.as_str(), alpha) {
        ("smooth", None) => Ok(ManufacturedCase::smooth(b)),
        ("smooth", Some(a)) => Ok(ManufacturedCase::smooth_robin(b, a)),
        ("affine", _) => Ok(ManufacturedCase::affine(b)),
        ("constant", _) => Ok(ManufacturedCase::constant(b)),
        (other, _) => Err(config_error(
            "params.case",
            format!("unknown case '{}' (smooth, affine, constant)", other),
        )),
    }
}

fn run_sweep_h(ctx: &mut Ctx) -> Result<Vec<String>> {
    ctx.no_mesh_in()?;
    let alpha = ctx.config.data.alpha;
    let case = manufactured(ctx, alpha)?;
    let opts = ctx.sweep_options(ctx.reg()?);
    let base = ctx.config.domain.spec();
    let (table, report) = match alpha {
        None => run_h_sweep_dirichlet(&case, &base, ctx.params.levels, &opts)?,
        Some(a) => run_h_sweep_robin(&case, &base, ctx.params.levels, a, &opts)?,
    };
    ctx.echo["resolved"]["M_reg"] = json!(table.m_reg);
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    ctx.write_text("sweep_h.csv", &csv)?;
    ctx.write_json(
        "rates.json",
        json!({ "report": report, "m_reg": table.m_reg, "constants": table.constants, "reference": table.reference }),
    )?;
    let mut failures: Vec<String> = report
        .columns
        .iter()
        .chain(report.manufactured.iter())
        .filter(|(_, c)| !c.pass)
        .map(|(name, c)| {
            format!(
                "{}: slope {:?} (expected >= {}), fit residual {:?}",
                name,
                c.slope,
                c.expected - crate::convergence_lab::SLOPE_SLACK,
                c.residual
            )
        })
        .collect();
    if report.cost_gap_chain.iter().any(|&b| !b) {
        failures.push(format!("cost-gap lower bound violated: {:?}", report.cost_gap_chain));
    }
    if report.cost_envelope.iter().any(|&b| !b) {
        failures.push(format!("cost envelope violated: {:?}", report.cost_envelope));
    }
    Ok(failures)
}

fn run_sweep_alpha(ctx: &mut Ctx) -> Result<Vec<String>> {
    let mesh = ctx.mesh()?;
    maybe_mesh_out(ctx, &mesh)?;
    let data = ctx.single_mesh_data(&mesh)?;
    let sweep = run_alpha_sweep(&data, &ctx.params.ladder, &ctx.sweep_options(RegWeight::Fixed(data.m_reg())))?;
    let mut csv = Vec::new();
    sweep.table.write_csv(&mut csv)?;
    ctx.write_text("sweep_alpha.csv", &csv)?;
    ctx.write_json("sweep_alpha.json", serde_json::to_value(&sweep)?)?;
    Ok(sweep
        .monotonicity
        .iter()
        .filter(|m| !m.strictly_decreasing)
        .map(|m| format!("{} not strictly decreasing at rows {:?}", m.column, m.offending_rows))
        .collect())
}

fn run_sweep_diagonal(ctx: &mut Ctx) -> Result<Vec<String>> {
    ctx.no_mesh_in()?;
    let spec = ctx.analytic_spec()?;
    let opts = ctx.sweep_options(ctx.reg()?);
    let sweep = run_diagonal_sweep(
        &spec,
        &ctx.config.domain.spec(),
        ctx.params.alpha0,
        ctx.params.k_max,
        &opts,
    )?;
    ctx.echo["resolved"]["M_reg"] = json!(sweep.table.m_reg);
    let mut csv = Vec::new();
    sweep.table.write_csv(&mut csv)?;
    ctx.write_text("sweep_diagonal.csv", &csv)?;
    ctx.write_json("sweep_diagonal.json", serde_json::to_value(&sweep)?)?;
    let mut failures: Vec<String> = sweep
        .monotonicity
        .iter()
        .filter(|m| !m.strictly_decreasing)
        .map(|m| format!("{} not strictly decreasing at rows {:?}", m.column, m.offending_rows))
        .collect();
    for t in sweep.triangle.iter().filter(|t| !t.satisfied) {
        failures.push(format!("triangle check failed at k = {} for {}", t.k, t.column));
    }
    Ok(failures)
}

fn run_bounds(ctx: &mut Ctx) -> Result<Vec<String>> {
    ctx.no_mesh_in()?;
    let spec = ctx.analytic_spec()?;
    let domain = ctx.config.domain.clone();
    let base = build_structured_mesh(&domain.spec())?;
    let meshes: Vec<Arc<Mesh>> = ctx
        .params
        .bound_ns
        .iter()
        .map(|&n| {
            // refinements of the domain mesh when n is a multiple of domain.n
            if n >= domain.n && n % domain.n == 0 && (n / domain.n).is_power_of_two() {
                let mut m = base.clone();
                let mut k = domain.n;
                while k < n {
                    m = refine_uniform(&m);
                    k *= 2;
                }
                Ok(Arc::new(m))
            } else {
                build_structured_mesh(&DomainSpec { n, ..domain.spec() }).map(Arc::new).map_err(Error::from)
            }
        })
        .collect::<Result<_>>()?;
    let report = verify_bounds(&spec, ctx.reg()?, &meshes, &ctx.params.bound_alphas)?;
    ctx.echo["resolved"]["M_reg"] = json!(report.inputs.m_reg);
    ctx.write_json("bounds.json", serde_json::to_value(&report)?)?;
    Ok(report
        .checks
        .iter()
        .filter(|c| !c.satisfied)
        .map(|c| {
            format!(
                "c{} violated at h = {}, alpha = {:?}: {} > {}",
                c.family, c.h, c.alpha, c.lhs, c.rhs
            )
        })
        .collect())
}
