//! Dörfler marking, the solve / estimate / mark / refine loop, reference
//! energy errors and convergence rates.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{estimate_all, EstimatorReport};
use crate::fem::{
    apply_k, assemble_load, assemble_stiffness, energy_norm, galerkin_solve, Coefficient, FeFunction, FeSpace,
    ResidualFunctional, ScalarField, Solver,
};
use crate::linalg::CsrMatrix;
use crate::mesh::{uniform_mesh, Domain, Point, TriangleMesh};
use crate::par;
use crate::quadrature::triangle_rule;
use crate::schwarz::{
    spectral_bounds, trial_vectors, two_level, verify_decomposition_identity, SpectralMethod, SubspaceDecomposition,
    VerificationReport, VerificationRow, IDENTITY_CAP,
};

/// Gradient callback.
pub type VectorField = Arc<dyn Fn(Point) -> [f64; 2] + Send + Sync>;

#[derive(Clone)]
pub struct ExactSolution {
    pub u: ScalarField,
    pub grad: VectorField,
}

/// Benchmark problem `-div K∇u = f` with homogeneous Dirichlet data.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub domain: Domain,
    pub coefficient: Coefficient,
    pub source: ScalarField,
    pub exact: Option<ExactSolution>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .field("has_exact", &self.exact.is_some())
            .finish()
    }
}

impl ProblemSpec {
    pub const NAMES: [&'static str; 4] = ["unit_square_manufactured", "l_shape", "checkerboard", "zero_source"];

    pub fn builtin(name: &str) -> Result<Self> {
        let one: ScalarField = Arc::new(|_| 1.0);
        let spec = match name {
            "unit_square_manufactured" => Self {
                name: name.into(),
                domain: Domain::UnitSquare,
                coefficient: Coefficient::identity(),
                source: Arc::new(|x: Point| 2.0 * PI * PI * (PI * x[0]).sin() * (PI * x[1]).sin()),
                exact: Some(ExactSolution {
                    u: Arc::new(|x: Point| (PI * x[0]).sin() * (PI * x[1]).sin()),
                    grad: Arc::new(|x: Point| {
                        [
                            PI * (PI * x[0]).cos() * (PI * x[1]).sin(),
                            PI * (PI * x[0]).sin() * (PI * x[1]).cos(),
                        ]
                    }),
                }),
            },
            "l_shape" => Self {
                name: name.into(),
                domain: Domain::LShape,
                coefficient: Coefficient::identity(),
                source: one,
                exact: None,
            },
            "checkerboard" => Self {
                name: name.into(),
                domain: Domain::CheckerboardSquare,
                coefficient: Coefficient::scalar_per_region(&[(0, 1.0), (1, 10.0), (2, 10.0), (3, 1.0)])?,
                source: one,
                exact: None,
            },
            "zero_source" => Self {
                name: name.into(),
                domain: Domain::UnitSquare,
                coefficient: Coefficient::identity(),
                source: Arc::new(|_| 0.0),
                exact: Some(ExactSolution {
                    u: Arc::new(|_| 0.0),
                    grad: Arc::new(|_| [0.0, 0.0]),
                }),
            },
            other => return Err(Error::UnknownProblem(other.into())),
        };
        Ok(spec)
    }

    /// Quadrature order used for every integral involving `f` at degree `p`.
    pub fn quad_order(&self, p: usize) -> usize {
        2 * p + 4
    }

    /// Largest weak-form defect `|a(u, φ_i) − (f, φ_i)|` of the exact
    /// solution against P2 test functions on a fixed probe mesh, relative to
    /// `max |(f, φ_i)|`. Zero when there is no exact solution to check.
    pub fn exact_defect(&self) -> Result<f64> {
        let Some(ex) = &self.exact else { return Ok(0.0) };
        let mesh = Arc::new(uniform_mesh(self.domain, 3)?);
        let space = FeSpace::new(mesh.clone(), 2);
        let order = 12;
        let b = assemble_load(&space, &*self.source, Some(order));
        let rule = triangle_rule(order);
        let mut au = vec![0.0; space.num_interior()];
        for t in 0..mesh.num_triangles() {
            let kt = self.coefficient.get(mesh.regions()[t])?;
            let bgrad = mesh.barycentric_gradients(t);
            let area = mesh.area(t);
            for (q, &w) in rule.points.iter().zip(&rule.weights) {
                let kg = apply_k(&kt, (ex.grad)(mesh.map_point(t, *q)));
                for (&d, g) in space.triangle_dofs(t).iter().zip(space.element().gradients(*q, &bgrad)) {
                    if let Some(i) = space.interior_index(d) {
                        au[i] += w * area * (kg[0] * g[0] + kg[1] * g[1]);
                    }
                }
            }
        }
        let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let defect = au.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        Ok(if scale > 0.0 { defect / scale } else { defect })
    }
}

/// Which indicator drives marking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    ExplicitZeta,
    BubbleEta,
    Smoother,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::ExplicitZeta => "explicit_zeta",
            Self::BubbleEta => "bubble_eta",
            Self::Smoother => "smoother",
        }
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explicit_zeta" => Ok(Self::ExplicitZeta),
            "bubble_eta" => Ok(Self::BubbleEta),
            "smoother" => Ok(Self::Smoother),
            _ => Err(Error::InvalidArgument(format!("unknown estimator {s:?}"))),
        }
    }
}

/// Linear solver used inside the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Direct,
    /// PCG with the two-level decomposition built on the previous mesh;
    /// the first level is solved directly.
    #[default]
    Pcg,
}

/// Squared indicators, per element or per vertex.
#[derive(Debug, Clone, Copy)]
pub enum Indicators<'a> {
    Element(&'a [f64]),
    Vertex(&'a [f64]),
}

/// Greedy Dörfler selection: the shortest prefix of the values sorted in
/// descending order (ties by ascending index) whose sum reaches
/// `θ · total`. Returns the selected indices in ascending order.
pub fn dorfler_select(values: &[f64], theta: f64) -> Result<Vec<usize>> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::InvalidArgument(format!("theta = {theta} outside (0, 1]")));
    }
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("indicator {v} is not a nonnegative number")));
    }
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| values[i] > 0.0).collect();
    if order.is_empty() {
        return Err(Error::AllZeroIndicators);
    }
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    if theta >= 1.0 {
        order.sort_unstable();
        return Ok(order);
    }
    let total: f64 = order.iter().map(|&i| values[i]).sum();
    let goal = theta * total;
    let mut acc = 0.0;
    let mut n = 0;
    for &i in &order {
        acc += values[i];
        n += 1;
        if acc >= goal {
            break;
        }
    }
    let mut chosen = order[..n].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Marked elements; vertex indicators mark the union of the selected patches.
pub fn dorfler_mark(ind: Indicators<'_>, theta: f64, mesh: &TriangleMesh) -> Result<Vec<usize>> {
    match ind {
        Indicators::Element(v) => {
            if v.len() != mesh.num_triangles() {
                return Err(Error::DimensionMismatch {
                    expected: mesh.num_triangles(),
                    got: v.len(),
                });
            }
            dorfler_select(v, theta)
        }
        Indicators::Vertex(v) => {
            if v.len() != mesh.num_vertices() {
                return Err(Error::DimensionMismatch {
                    expected: mesh.num_vertices(),
                    got: v.len(),
                });
            }
            let mut marked: Vec<usize> = dorfler_select(v, theta)?
                .into_iter()
                .flat_map(|k| mesh.vertex_triangles(k).iter().copied())
                .collect();
            marked.sort_unstable();
            marked.dedup();
            Ok(marked)
        }
    }
}

/// `‖u − u_h‖_A` against the exact solution, quadrature order `2p + 6`.
pub fn manufactured_error(problem: &ProblemSpec, u_h: &FeFunction) -> Result<f64> {
    let ex = problem
        .exact
        .as_ref()
        .ok_or_else(|| Error::MissingExactSolution(problem.name.clone()))?;
    let mesh = u_h.space().mesh();
    let rule = triangle_rule(2 * u_h.space().degree() + 6);
    for &r in mesh.regions() {
        problem.coefficient.get(r)?;
    }
    let parts: Vec<f64> = par::map_range(mesh.num_triangles(), |t| {
        let kt = problem.coefficient.get(mesh.regions()[t]).expect("checked");
        let area = mesh.area(t);
        rule.points
            .iter()
            .zip(&rule.weights)
            .map(|(q, w)| {
                let g = (ex.grad)(mesh.map_point(t, *q));
                let gh = u_h.gradient(t, *q);
                let d = [g[0] - gh[0], g[1] - gh[1]];
                let kd = apply_k(&kt, d);
                w * area * (kd[0] * d[0] + kd[1] * d[1])
            })
            .sum()
    });
    Ok(parts.iter().sum::<f64>().max(0.0).sqrt())
}

/// Galerkin solution on a nested refinement used as a stand-in for `u`.
pub struct ReferenceSolution {
    chain: Vec<Arc<TriangleMesh>>,
    space: Arc<FeSpace>,
    u_ref: FeFunction,
    a: CsrMatrix,
}

impl ReferenceSolution {
    /// `chain` lists meshes each of which is the direct refinement of its
    /// predecessor; the reference mesh is the last one refined uniformly
    /// `extra` more times.
    pub fn new(problem: &ProblemSpec, chain: &[Arc<TriangleMesh>], p: usize, extra: usize) -> Result<Self> {
        let mut chain = chain.to_vec();
        let Some(last) = chain.last().cloned() else {
            return Err(Error::InvalidArgument("empty mesh chain".into()));
        };
        for w in chain.windows(2) {
            check_parent(&w[1], &w[0])?;
        }
        let mut mesh = last;
        for _ in 0..extra {
            mesh = Arc::new(mesh.refine_uniform()?);
            chain.push(mesh.clone());
        }
        let space = Arc::new(FeSpace::new(mesh, p));
        let a = assemble_stiffness(&space, &problem.coefficient)?;
        let b = assemble_load(&space, &*problem.source, Some(problem.quad_order(p)));
        let (u_ref, _) = galerkin_solve(&space, &a, &b, Solver::DirectSparse)?;
        Ok(Self { chain, space, u_ref, a })
    }

    pub fn space(&self) -> &Arc<FeSpace> {
        &self.space
    }
    pub fn solution(&self) -> &FeFunction {
        &self.u_ref
    }

    /// `‖u_ref − u_h‖_A` with `u_h` interpolated exactly onto the reference mesh.
    pub fn error(&self, u_h: &FeFunction) -> Result<f64> {
        let id = u_h.space().mesh().id();
        let start = self.chain.iter().position(|m| m.id() == id).ok_or(Error::NonNested)?;
        let rmesh = self.space.mesh();
        let mut anc: Vec<usize> = (0..rmesh.num_triangles()).collect();
        for j in (start + 1..self.chain.len()).rev() {
            let g = self.chain[j].genealogy().ok_or(Error::NonNested)?;
            for a in anc.iter_mut() {
                *a = g.parent[*a];
            }
        }
        let umesh = u_h.space().mesh();
        let mut coeffs = vec![0.0; self.space.num_dofs()];
        for t in 0..rmesh.num_triangles() {
            for (i, &d) in self.space.triangle_dofs(t).iter().enumerate() {
                let x = rmesh.map_point(t, self.space.element().node_bary(i));
                coeffs[d] = u_h.value(anc[t], umesh.barycentric(anc[t], x));
            }
        }
        let e: Vec<f64> = self
            .space
            .interior_dofs()
            .iter()
            .map(|&d| self.u_ref.coeffs()[d] - coeffs[d])
            .collect();
        energy_norm(&self.a, &e)
    }
}

fn check_parent(child: &TriangleMesh, parent: &TriangleMesh) -> Result<()> {
    match child.genealogy() {
        Some(g) if g.parent_id == parent.id() => Ok(()),
        _ => Err(Error::NonNested),
    }
}

/// Source of the reference error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceMode {
    Manufactured,
    /// Reference on `extra` uniform refinements of the mesh of `u_h`.
    DeepRefine { extra: usize },
}

pub fn reference_energy_error(problem: &ProblemSpec, u_h: &FeFunction, mode: ReferenceMode) -> Result<f64> {
    match mode {
        ReferenceMode::Manufactured => manufactured_error(problem, u_h),
        ReferenceMode::DeepRefine { extra } => {
            let chain = [u_h.space().mesh_arc().clone()];
            ReferenceSolution::new(problem, &chain, u_h.space().degree(), extra)?.error(u_h)
        }
    }
}

/// Least-squares slope of `log value` against `log ndof`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub per_step: Vec<f64>,
}

pub fn fit_rate(ndof: &[usize], values: &[f64]) -> Result<RateFit> {
    if ndof.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: ndof.len(),
            got: values.len(),
        });
    }
    if ndof.len() < 3 {
        return Err(Error::InsufficientData(format!("{} points, need at least 3", ndof.len())));
    }
    if values.iter().any(|v| !(*v > 0.0)) || ndof.contains(&0) {
        return Err(Error::InsufficientData("values must be positive".into()));
    }
    let xs: Vec<f64> = ndof.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("all ndof equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let per_step = xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (y[1] - y[0]) / (x[1] - x[0]))
        .collect();
    Ok(RateFit {
        slope: sxy / sxx,
        per_step,
    })
}

/// One level of the loop.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelRecord {
    pub level: usize,
    pub ndof: usize,
    pub energy_error: Option<f64>,
    pub eta_tilde_total: f64,
    pub zeta_total: f64,
    /// `⟨r, Sr⟩^{1/2}`.
    pub smoother_estimate: f64,
    pub osc: f64,
    pub pcg_iters: Option<usize>,
    pub lambda_min: Option<f64>,
    pub lambda_max: Option<f64>,
    pub marked_count: usize,
}

/// Per-level history of one adaptive run.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptTrace {
    pub problem: String,
    pub estimator: EstimatorKind,
    pub theta: f64,
    pub records: Vec<LevelRecord>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AdaptTrace {
    pub const HEADER: &'static str =
        "level,ndof,energy_error,eta_tilde_total,zeta_total,smoother_estimate,osc,pcg_iters,lambda_min,lambda_max,marked_count";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.level,
                r.ndof,
                opt(r.energy_error),
                r.eta_tilde_total,
                r.zeta_total,
                r.smoother_estimate,
                r.osc,
                opt(r.pcg_iters),
                opt(r.lambda_min),
                opt(r.lambda_max),
                r.marked_count
            ));
        }
        s
    }

    pub fn ndofs(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.ndof).collect()
    }

    /// Values of a numeric column by CSV name.
    pub fn column(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let get = |r: &LevelRecord| -> Option<f64> {
            match name {
                "ndof" => Some(r.ndof as f64),
                "energy_error" => r.energy_error,
                "eta_tilde_total" => Some(r.eta_tilde_total),
                "zeta_total" => Some(r.zeta_total),
                "smoother_estimate" => Some(r.smoother_estimate),
                "osc" => Some(r.osc),
                "pcg_iters" => r.pcg_iters.map(|x| x as f64),
                "lambda_min" => r.lambda_min,
                "lambda_max" => r.lambda_max,
                _ => None,
            }
        };
        if !AdaptTrace::HEADER.split(',').any(|c| c == name) || name == "level" || name == "marked_count" {
            return Err(Error::InvalidArgument(format!("no numeric column {name:?}")));
        }
        Ok(self.records.iter().map(get).collect())
    }

    /// Slope of a column against ndof over the levels where it is present.
    pub fn rate(&self, name: &str) -> Result<RateFit> {
        let col = self.column(name)?;
        let (n, v): (Vec<usize>, Vec<f64>) = self
            .records
            .iter()
            .zip(col)
            .filter_map(|(r, c)| c.filter(|c| *c > 0.0 && r.ndof > 0).map(|c| (r.ndof, c)))
            .unzip();
        fit_rate(&n, &v)
    }

    /// Like [`AdaptTrace::rate`], restricted to the last half of the usable
    /// levels (at least three) to leave out the pre-asymptotic range.
    pub fn tail_rate(&self, name: &str) -> Result<RateFit> {
        let col = self.column(name)?;
        let (n, v): (Vec<usize>, Vec<f64>) = self
            .records
            .iter()
            .zip(col)
            .filter_map(|(r, c)| c.filter(|c| *c > 0.0 && r.ndof > 0).map(|c| (r.ndof, c)))
            .unzip();
        let start = n.len().saturating_sub((n.len() / 2).max(3));
        fit_rate(&n[start..], &v[start..])
    }
}

/// Loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOptions {
    pub estimator: EstimatorKind,
    pub theta: f64,
    pub max_dof: usize,
    pub p: usize,
    pub q: usize,
    pub solver: SolverKind,
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Spectral bounds of the estimator decomposition on every level.
    pub spectral: bool,
    /// Dual-decomposition identity check on levels small enough for it.
    pub identity: bool,
    pub levels_cap: Option<usize>,
    /// Uniform refinements of the builtin mesh before the loop starts.
    pub initial_level: usize,
    /// Compute reference errors (exact solution or deep refinement).
    pub reference: bool,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        Self {
            estimator: EstimatorKind::ExplicitZeta,
            theta: 0.5,
            max_dof: 5000,
            p: 1,
            q: 2,
            solver: SolverKind::Pcg,
            rel_tol: 1e-8,
            max_iter: 1000,
            spectral: false,
            identity: false,
            levels_cap: None,
            initial_level: 0,
            reference: true,
        }
    }
}

/// State kept for every level.
#[derive(Debug)]
pub struct LevelState {
    pub space: Arc<FeSpace>,
    pub solution: FeFunction,
    pub report: EstimatorReport,
    /// `⟨r, Sr⟩` in the estimator decomposition.
    pub smoother_sq: f64,
}

/// Output of [`adapt_loop`].
#[derive(Debug)]
pub struct AdaptRun {
    pub trace: AdaptTrace,
    pub levels: Vec<LevelState>,
    /// Two-level solver decomposition, per level where one exists.
    pub solver_verification: VerificationReport,
    /// Estimator decomposition, per level when spectral checks are on.
    pub estimator_verification: VerificationReport,
}

const IDENTITY_TRIALS: usize = 20;

fn verification_row(d: &SubspaceDecomposition, level: usize, identity: bool) -> Result<VerificationRow> {
    let sb = spectral_bounds(d, SpectralMethod::Auto)?;
    let identity_err = if identity && d.dim() <= IDENTITY_CAP {
        Some(verify_decomposition_identity(d, &trial_vectors(d.dim(), IDENTITY_TRIALS))?)
    } else {
        None
    };
    Ok(VerificationRow {
        level,
        ndof: d.dim(),
        lambda_min: sb.lambda_min,
        lambda_max: sb.lambda_max,
        identity_err,
    })
}

/// Runs the loop on the builtin mesh of the problem domain.
pub fn adapt_loop(problem: &ProblemSpec, opts: &AdaptOptions) -> Result<AdaptRun> {
    let mesh = uniform_mesh(problem.domain, opts.initial_level)?;
    adapt_loop_from(problem, mesh, opts)
}

/// Runs the loop from a given initial mesh.
pub fn adapt_loop_from(problem: &ProblemSpec, initial: TriangleMesh, opts: &AdaptOptions) -> Result<AdaptRun> {
    if !(opts.theta > 0.0 && opts.theta <= 1.0) {
        return Err(Error::InvalidArgument(format!("theta = {} outside (0, 1]", opts.theta)));
    }
    if !(1..=2).contains(&opts.p) {
        return Err(Error::InvalidArgument(format!("degree p = {} not in {{1, 2}}", opts.p)));
    }
    let p = opts.p;
    let order = problem.quad_order(p);
    let k = &problem.coefficient;
    let mut mesh = Arc::new(initial);
    let first = FeSpace::new(mesh.clone(), p);
    if first.num_interior() > opts.max_dof {
        return Err(Error::InvalidArgument(format!(
            "max_dof = {} below the {} dofs of the initial mesh",
            opts.max_dof,
            first.num_interior()
        )));
    }
    let mut prev: Option<Arc<FeSpace>> = None;
    let mut records = Vec::new();
    let mut levels = Vec::new();
    let mut solver_verification = VerificationReport::default();
    let mut estimator_verification = VerificationReport::default();
    for level in 0.. {
        let space = Arc::new(FeSpace::new(mesh.clone(), p));
        let ndof = space.num_interior();
        log::info!("level {level}: {} triangles, {ndof} dofs", mesh.num_triangles());
        let a = assemble_stiffness(&space, k)?;
        let b = assemble_load(&space, &*problem.source, Some(order));
        let (u_h, pcg_iters) = match (&prev, opts.solver) {
            (Some(coarse), SolverKind::Pcg) if ndof > 0 => {
                let d = two_level(&space, coarse, a.clone())?;
                let (u, info) = galerkin_solve(
                    &space,
                    &a,
                    &b,
                    Solver::Pcg {
                        decomposition: &d,
                        rel_tol: opts.rel_tol,
                        max_iter: opts.max_iter,
                    },
                )?;
                if opts.spectral {
                    solver_verification.rows.push(verification_row(&d, level, opts.identity)?);
                }
                (u, Some(info.iterations))
            }
            _ => {
                let solver = if ndof < 3000 { Solver::DirectDense } else { Solver::DirectSparse };
                (galerkin_solve(&space, &a, &b, solver)?.0, None)
            }
        };
        let rf = ResidualFunctional::new(k, problem.source.clone(), &u_h, order);
        let est = estimate_all(&rf, opts.q)?;
        let (lambda_min, lambda_max) = if opts.spectral && est.decomposition.dim() > 0 {
            let row = verification_row(&est.decomposition, level, opts.identity)?;
            let l = (row.lambda_min, row.lambda_max);
            estimator_verification.rows.push(row);
            (Some(l.0), Some(l.1))
        } else {
            (None, None)
        };
        let energy_error = match (&problem.exact, opts.reference) {
            (Some(_), true) => Some(manufactured_error(problem, &u_h)?),
            _ => None,
        };
        let report = est.report;
        let squares = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<f64>>();
        let marks = match opts.estimator {
            EstimatorKind::ExplicitZeta => dorfler_mark(Indicators::Element(&squares(&report.zeta_element)), opts.theta, &mesh),
            EstimatorKind::BubbleEta => dorfler_mark(Indicators::Vertex(&squares(&report.eta_tilde)), opts.theta, &mesh),
            EstimatorKind::Smoother => dorfler_mark(Indicators::Vertex(&squares(&report.eta_enriched)), opts.theta, &mesh),
        };
        let marked = match marks {
            Ok(m) => Some(m),
            Err(Error::AllZeroIndicators) => None,
            Err(e) => return Err(e),
        };
        records.push(LevelRecord {
            level,
            ndof,
            energy_error,
            eta_tilde_total: report.eta_tilde_sq().sqrt(),
            zeta_total: report.zeta_sq().sqrt(),
            smoother_estimate: report.smoother.sqrt(),
            osc: report.osc,
            pcg_iters,
            lambda_min,
            lambda_max,
            marked_count: marked.as_ref().map_or(0, Vec::len),
        });
        levels.push(LevelState {
            space: space.clone(),
            solution: u_h,
            smoother_sq: report.smoother,
            report,
        });
        let Some(marked) = marked else {
            log::info!("all indicators vanish, stopping");
            break;
        };
        if opts.levels_cap.is_some_and(|cap| level + 1 >= cap) {
            break;
        }
        let next = Arc::new(mesh.refine_bisection(&marked)?);
        if FeSpace::new(next.clone(), p).num_interior() > opts.max_dof {
            break;
        }
        prev = Some(space);
        mesh = next;
    }
    if opts.reference && problem.exact.is_none() {
        let chain: Vec<Arc<TriangleMesh>> = levels.iter().map(|l| l.space.mesh_arc().clone()).collect();
        let reference = ReferenceSolution::new(problem, &chain, p, 2)?;
        for (r, l) in records.iter_mut().zip(&levels) {
            r.energy_error = Some(reference.error(&l.solution)?);
        }
    }
    Ok(AdaptRun {
        trace: AdaptTrace {
            problem: problem.name.clone(),
            estimator: opts.estimator,
            theta: opts.theta,
            records,
        },
        levels,
        solver_verification,
        estimator_verification,
    })
}
