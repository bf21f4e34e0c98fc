//! Manufactured cases, error norms, EoC tables and convergence studies.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::fem::{
    l2_project_vector, norm_lp, CellQuadrature, DofMap, FluxField, LocalBasis, Rt0Cell,
    ScalarField, SingularLine, ASSEMBLY_DEGREE, ERROR_DEGREE,
};
use crate::loads::{
    BoundaryData, LoadError, LoadFunctional, NormalFluxFn, ScalarFn, VectorFn, WeakFormData,
};
use crate::mesh::{Diagonal, Marker, Mesh, MeshError, Point, Rectangle};
use crate::postprocess::{mean_constraint_residual, stenberg, PostprocessError};
use crate::regularizer::{Regularizer, RegularizerError};
use crate::system::{
    advection_smallness_report, apply_bc, assemble, CoefficientSet, ScalarRhs, SystemError,
};

/// Coarse fracture-conforming mesh of the pentagon used by `ex3-line`.
pub const EX3_COARSE_MESH: &str = include_str!("../fixtures/ex3_coarse.msh");

/// Extra uniform refinements of the reference solution beyond the finest
/// reported level.
pub const REFERENCE_EXTRA_LEVELS: usize = 2;

pub const CASE_NAMES: [&str; 6] = [
    "ex1-smooth",
    "ex1-rough",
    "ex2",
    "ex3-line",
    "ex3-line-slow",
    "constant",
];

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("unknown case {0:?}")]
    UnknownCase(String),
    #[error("the div-L^4/3 flux error is undefined for case {0}")]
    UndefinedNorm(String),
    #[error("coarse and reference fields do not live on nested meshes: {0}")]
    MeshMismatch(String),
    #[error("case {0} has no exact solution")]
    NoExactSolution(String),
    #[error("the direct (unregularised) path needs an L² density load")]
    DirectPathNeedsDensity,
    #[error("a convergence study needs at least two levels, got {0}")]
    TooFewLevels(usize),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Regularizer(#[from] RegularizerError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularity {
    Smooth,
    /// The load is only in H⁻¹; `div ζ_ex` is not integrable enough.
    HMinusOne,
    /// L² load with no further Sobolev smoothness.
    L2Rough,
    NoExact,
}

impl fmt::Display for Regularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Regularity::Smooth => "smooth",
            Regularity::HMinusOne => "H^-1 load",
            Regularity::L2Rough => "L2-rough: g in L2 but not in H^s for s >= 1/128",
            Regularity::NoExact => "no exact solution",
        };
        f.write_str(s)
    }
}

#[derive(Clone)]
pub enum Domain {
    Rectangle {
        rect: Rectangle,
        diagonal: Diagonal,
        /// Cells per side of the level-1 mesh.
        start_nx: usize,
    },
    /// Level-1 mesh read from mesh-file text.
    Fixture(&'static str),
}

#[derive(Clone)]
pub struct ExactSolution {
    pub psi: ScalarFn,
    pub grad_psi: VectorFn,
    /// `ζ_ex = ε∇ψ_ex − uψ_ex`.
    pub flux: VectorFn,
    pub div_flux: Option<ScalarFn>,
}

#[derive(Clone)]
pub struct ManufacturedCase {
    pub name: String,
    pub domain: Domain,
    pub marker: fn(Point) -> Marker,
    pub eps: ScalarFn,
    pub eps_bounds: (f64, f64),
    pub kappa: ScalarFn,
    pub velocity: VectorFn,
    pub exact: Option<ExactSolution>,
    pub load: LoadFunctional,
    pub bdata: BoundaryData,
    pub regularity: Regularity,
    /// Line along which load and error integrands are non-smooth.
    pub singular_line: Option<SingularLine>,
}

impl fmt::Debug for ManufacturedCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ManufacturedCase")
            .field("name", &self.name)
            .field("regularity", &self.regularity)
            .field("load", &self.load)
            .finish_non_exhaustive()
    }
}

fn all_dirichlet(_: Point) -> Marker {
    Marker::Dirichlet
}

fn right_edge_neumann(x: Point) -> Marker {
    if (x[0] - 1.0).abs() < 1e-12 {
        Marker::Neumann
    } else {
        Marker::Dirichlet
    }
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Exact data for `ζ = ε∇ψ − uψ` from `ψ`, `∇ψ`, `ε` and `u`.
fn exact_from(
    psi: ScalarFn,
    grad_psi: VectorFn,
    eps: ScalarFn,
    u: VectorFn,
    div_flux: Option<ScalarFn>,
) -> ExactSolution {
    let (p, g, e, v) = (psi.clone(), grad_psi.clone(), eps, u);
    let flux: VectorFn = Arc::new(move |x| {
        let (gp, pv, ev, uv) = (g(x), p(x), e(x), v(x));
        [ev * gp[0] - uv[0] * pv, ev * gp[1] - uv[1] * pv]
    });
    ExactSolution {
        psi,
        grad_psi,
        flux,
        div_flux,
    }
}

fn normal_flux(flux: VectorFn) -> NormalFluxFn {
    Arc::new(move |x, n| dot(flux(x), n))
}

fn ex1_velocity() -> VectorFn {
    Arc::new(|[x, y]| {
        [
            (PI * x).cos() * (PI * y).sin(),
            -(PI * x).sin() * (PI * y).cos(),
        ]
    })
}

fn ex1_smooth() -> ManufacturedCase {
    let u = ex1_velocity();
    let psi: ScalarFn = Arc::new(|[x, y]| (PI * x).sin() * (PI * y).sin());
    let grad: VectorFn = Arc::new(|[x, y]| {
        [
            PI * (PI * x).cos() * (PI * y).sin(),
            PI * (PI * x).sin() * (PI * y).cos(),
        ]
    });
    // ε = κ = 1 and div u = 0: div ζ = Δψ − u·∇ψ
    let div: ScalarFn = {
        let (p, g, u) = (psi.clone(), grad.clone(), u.clone());
        Arc::new(move |x| -2.0 * PI * PI * p(x) - dot(u(x), g(x)))
    };
    let g_ex = {
        let (p, d) = (psi.clone(), div.clone());
        move |x| p(x) - d(x)
    };
    let one: ScalarFn = Arc::new(|_| 1.0);
    let exact = exact_from(psi, grad, one.clone(), u.clone(), Some(div));
    ManufacturedCase {
        name: "ex1-smooth".into(),
        domain: Domain::Rectangle {
            rect: Rectangle::UNIT,
            diagonal: Diagonal::Forward,
            start_nx: 2,
        },
        marker: right_edge_neumann,
        eps: one.clone(),
        eps_bounds: (1.0, 1.0),
        kappa: one,
        velocity: u,
        load: LoadFunctional::density(g_ex),
        bdata: BoundaryData {
            dirichlet: Some(exact.psi.clone()),
            neumann: Some(normal_flux(exact.flux.clone())),
        },
        exact: Some(exact),
        regularity: Regularity::Smooth,
        singular_line: None,
    }
}

fn ex1_rough() -> ManufacturedCase {
    let u = ex1_velocity();
    let psi: ScalarFn =
        Arc::new(|[x, y]| (x - y).abs().powf(0.75) * (PI * x).sin() * (PI * y).sin());
    let grad: VectorFn = Arc::new(|[x, y]| {
        let d = x - y;
        let s = (PI * x).sin() * (PI * y).sin();
        let r = d.abs().powf(0.75);
        let dr = if d == 0.0 {
            0.0
        } else {
            0.75 * d.signum() * d.abs().powf(-0.25)
        };
        [
            dr * s + r * PI * (PI * x).cos() * (PI * y).sin(),
            -dr * s + r * PI * (PI * x).sin() * (PI * y).cos(),
        ]
    });
    let one: ScalarFn = Arc::new(|_| 1.0);
    let exact = exact_from(psi, grad, one.clone(), u.clone(), None);
    let flux_n = normal_flux(exact.flux.clone());
    let load = LoadFunctional::WeakForm(WeakFormData {
        psi: exact.psi.clone(),
        grad_psi: exact.grad_psi.clone(),
        velocity: u.clone(),
        eps: one.clone(),
        kappa: one.clone(),
        flux_n: flux_n.clone(),
    });
    ManufacturedCase {
        name: "ex1-rough".into(),
        domain: Domain::Rectangle {
            rect: Rectangle::UNIT,
            diagonal: Diagonal::Forward,
            start_nx: 2,
        },
        marker: right_edge_neumann,
        eps: one.clone(),
        eps_bounds: (1.0, 1.0),
        kappa: one,
        velocity: u,
        load,
        bdata: BoundaryData {
            dirichlet: Some(exact.psi.clone()),
            neumann: Some(flux_n),
        },
        exact: Some(exact),
        regularity: Regularity::HMinusOne,
        singular_line: Some(SingularLine::DIAGONAL),
    }
}

pub const EX2_EXPONENT: f64 = 65.0 / 128.0;

/// `X(x) = x|x|^a (1 − x²)` and its first two derivatives.
fn ex2_x_factor(x: f64) -> [f64; 3] {
    let a = EX2_EXPONENT;
    let ax = x.abs();
    let p = x * ax.powf(a);
    let p1 = (1.0 + a) * ax.powf(a);
    let p2 = if x == 0.0 {
        0.0
    } else {
        (1.0 + a) * a * ax.powf(a - 1.0) * x.signum()
    };
    let q = 1.0 - x * x;
    [p * q, p1 * q - 2.0 * x * p, p2 * q - 4.0 * x * p1 - 2.0 * p]
}

pub fn ex2_psi(x: Point) -> f64 {
    ex2_x_factor(x[0])[0] * (1.0 - x[1] * x[1])
}

pub fn ex2_grad_psi([x, y]: Point) -> [f64; 2] {
    let [xv, x1, _] = ex2_x_factor(x);
    [x1 * (1.0 - y * y), -2.0 * y * xv]
}

fn ex2_laplace_psi([x, y]: Point) -> f64 {
    let [xv, _, x2] = ex2_x_factor(x);
    x2 * (1.0 - y * y) - 2.0 * xv
}

pub fn ex2_eps([x, y]: Point) -> f64 {
    (-x * y).exp()
}

pub fn ex2_kappa([x, y]: Point) -> f64 {
    0.5 + (x * y).sin().powi(2)
}

pub fn ex2_velocity([x, y]: Point) -> [f64; 2] {
    let (a, b) = (0.5 * PI * x, 0.5 * PI * y);
    [a.cos() * b.sin(), -a.sin() * b.cos()]
}

/// `div ζ_ex = ∇ε·∇ψ + εΔψ − u·∇ψ` (the velocity is divergence-free).
pub fn ex2_div_flux(x: Point) -> f64 {
    let e = ex2_eps(x);
    let g = ex2_grad_psi(x);
    let grad_e = [-x[1] * e, -x[0] * e];
    dot(grad_e, g) + e * ex2_laplace_psi(x) - dot(ex2_velocity(x), g)
}

/// `g_ex = κψ_ex − div ζ_ex`.
pub fn ex2_load(x: Point) -> f64 {
    ex2_kappa(x) * ex2_psi(x) - ex2_div_flux(x)
}

fn ex2() -> ManufacturedCase {
    let eps: ScalarFn = Arc::new(ex2_eps);
    let u: VectorFn = Arc::new(ex2_velocity);
    let exact = exact_from(
        Arc::new(ex2_psi),
        Arc::new(ex2_grad_psi),
        eps.clone(),
        u.clone(),
        Some(Arc::new(ex2_div_flux)),
    );
    ManufacturedCase {
        name: "ex2".into(),
        domain: Domain::Rectangle {
            rect: Rectangle::new([-1.0, -1.0], [1.0, 1.0]),
            diagonal: Diagonal::Forward,
            start_nx: 2,
        },
        marker: all_dirichlet,
        eps,
        eps_bounds: ((-1.0f64).exp(), 1.0f64.exp()),
        kappa: Arc::new(ex2_kappa),
        velocity: u,
        load: LoadFunctional::density(ex2_load),
        bdata: BoundaryData {
            dirichlet: Some(exact.psi.clone()),
            neumann: None,
        },
        exact: Some(exact),
        regularity: Regularity::L2Rough,
        singular_line: Some(SingularLine::Y_AXIS),
    }
}

pub const EX3_SIGMA: f64 = 0.08;
pub const EX3_THETA: f64 = 0.12;
pub const EX3_EPS: f64 = 1e-3;
pub const EX3_FRACTURE: [Point; 2] = [[0.4, 0.25], [0.6, 0.85]];

/// `rot η = (∂_y η, −∂_x η)` for the stream function
/// `η = U₀ σ tanh((y − ½)/σ)(1 + θ sin 2πx)`.
pub fn ex3_velocity(u0: f64, [x, y]: Point) -> [f64; 2] {
    let t = ((y - 0.5) / EX3_SIGMA).tanh();
    let m = 1.0 + EX3_THETA * (2.0 * PI * x).sin();
    [
        u0 * (1.0 - t * t) * m,
        -u0 * EX3_SIGMA * t * EX3_THETA * 2.0 * PI * (2.0 * PI * x).cos(),
    ]
}

fn ex3(name: &str, u0: f64) -> ManufacturedCase {
    let eps = EX3_EPS;
    ManufacturedCase {
        name: name.into(),
        domain: Domain::Fixture(EX3_COARSE_MESH),
        marker: all_dirichlet,
        eps: Arc::new(move |_| eps),
        eps_bounds: (eps, eps),
        kappa: Arc::new(|_| 1.0),
        velocity: Arc::new(move |x| ex3_velocity(u0, x)),
        exact: None,
        load: LoadFunctional::LineDirac {
            start: EX3_FRACTURE[0],
            end: EX3_FRACTURE[1],
            intensity: 1.0,
        },
        bdata: BoundaryData::homogeneous(),
        regularity: Regularity::NoExact,
        singular_line: None,
    }
}

/// `ε = κ = 1`, `u = 0`, `ψ_D = 1`, `g = 1`: the exact solution is `ψ = 1`,
/// `ζ = 0`.
fn constant() -> ManufacturedCase {
    let one: ScalarFn = Arc::new(|_| 1.0);
    ManufacturedCase {
        name: "constant".into(),
        domain: Domain::Rectangle {
            rect: Rectangle::UNIT,
            diagonal: Diagonal::Forward,
            start_nx: 2,
        },
        marker: all_dirichlet,
        eps: one.clone(),
        eps_bounds: (1.0, 1.0),
        kappa: one.clone(),
        velocity: Arc::new(|_| [0.0, 0.0]),
        exact: Some(ExactSolution {
            psi: one.clone(),
            grad_psi: Arc::new(|_| [0.0, 0.0]),
            flux: Arc::new(|_| [0.0, 0.0]),
            div_flux: Some(Arc::new(|_| 0.0)),
        }),
        load: LoadFunctional::density(|_| 1.0),
        bdata: BoundaryData {
            dirichlet: Some(one),
            neumann: None,
        },
        regularity: Regularity::Smooth,
        singular_line: None,
    }
}

pub fn builtin_case(name: &str) -> Result<ManufacturedCase, AnalysisError> {
    match name {
        "ex1-smooth" => Ok(ex1_smooth()),
        "ex1-rough" => Ok(ex1_rough()),
        "ex2" => Ok(ex2()),
        "ex3-line" => Ok(ex3(name, 0.25)),
        "ex3-line-slow" => Ok(ex3(name, 0.0025)),
        "constant" => Ok(constant()),
        _ => Err(AnalysisError::UnknownCase(name.into())),
    }
}

impl ManufacturedCase {
    /// The level-1 mesh.
    pub fn start_mesh(&self) -> Result<Mesh, AnalysisError> {
        match &self.domain {
            Domain::Rectangle {
                rect,
                diagonal,
                start_nx,
            } => Ok(Mesh::structured(*start_nx, *rect, *diagonal, self.marker)),
            Domain::Fixture(text) => Ok(Mesh::from_text(text)?),
        }
    }

    /// Mesh of `level` (1-based) together with the hierarchy leading to it.
    pub fn hierarchy(&self, level: usize) -> Result<Hierarchy, AnalysisError> {
        let mut h = Hierarchy::new(self.start_mesh()?);
        while h.levels() < level {
            h.refine();
        }
        Ok(h)
    }

    pub fn coefficients(&self, mesh: &Mesh) -> CoefficientSet {
        let u = self.velocity.clone();
        let velocity_h =
            l2_project_vector(mesh, &move |x| u(x), &CellQuadrature::new(ERROR_DEGREE));
        CoefficientSet {
            eps: self.eps.clone(),
            kappa: self.kappa.clone(),
            eps_bounds: self.eps_bounds,
            velocity_h,
            velocity: Some(self.velocity.clone()),
        }
    }
}

/// Meshes obtained by repeated uniform refinement with child-to-parent maps.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub meshes: Vec<Mesh>,
    /// `parents[i][c]` is the cell of `meshes[i]` containing cell `c` of
    /// `meshes[i + 1]`.
    pub parents: Vec<Vec<usize>>,
}

impl Hierarchy {
    pub fn new(mesh: Mesh) -> Self {
        Self {
            meshes: vec![mesh],
            parents: Vec::new(),
        }
    }

    pub fn levels(&self) -> usize {
        self.meshes.len()
    }

    pub fn finest(&self) -> &Mesh {
        self.meshes.last().expect("hierarchy is never empty")
    }

    pub fn refine(&mut self) {
        let (m, p) = self.finest().refine_with_parents();
        self.meshes.push(m);
        self.parents.push(p);
    }

    /// Ancestor in `meshes[coarse]` of every cell of `meshes[fine]`.
    pub fn ancestors(&self, coarse: usize, fine: usize) -> Result<Vec<usize>, AnalysisError> {
        if coarse > fine || fine >= self.levels() {
            return Err(AnalysisError::MeshMismatch(format!(
                "level {coarse} is not an ancestor of level {fine} in a hierarchy of {}",
                self.levels()
            )));
        }
        let mut map: Vec<usize> = (0..self.meshes[fine].num_cells()).collect();
        for lvl in (coarse..fine).rev() {
            for c in map.iter_mut() {
                *c = self.parents[lvl][*c];
            }
        }
        Ok(map)
    }
}

/// Quadrature and discretisation settings of a study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyOptions {
    pub k: usize,
    pub use_q: bool,
    pub load_degree: usize,
    /// Graded subdivision levels of the load quadrature near the singular line.
    pub load_levels: usize,
    pub error_degree: usize,
    /// Subdivision levels of the error quadrature near the singular line.
    pub error_levels: usize,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            k: 0,
            use_q: true,
            load_degree: ASSEMBLY_DEGREE + 2,
            load_levels: 4,
            error_degree: ERROR_DEGREE,
            error_levels: 1,
        }
    }
}

impl StudyOptions {
    pub fn load_quadrature(&self, case: &ManufacturedCase) -> CellQuadrature {
        CellQuadrature::new(self.load_degree)
            .with_singular_line(case.singular_line, self.load_levels)
    }

    pub fn error_quadrature(&self, case: &ManufacturedCase) -> CellQuadrature {
        CellQuadrature::new(self.error_degree)
            .with_singular_line(case.singular_line, self.error_levels)
    }
}

/// Discrete fields and diagnostics of one solve.
#[derive(Debug, Clone)]
pub struct LevelSolution {
    pub h: f64,
    pub dofs: usize,
    pub flux: FluxField,
    pub scalar: ScalarField,
    pub post: ScalarField,
    pub residual: f64,
    pub mean_residual: f64,
    pub velocity_l4: f64,
}

/// Regularise (or not), assemble, solve and postprocess on one mesh.
pub fn solve_case(
    case: &ManufacturedCase,
    mesh: &Mesh,
    opts: &StudyOptions,
) -> Result<LevelSolution, AnalysisError> {
    let coeffs = case.coefficients(mesh);
    let ev = case.load.bind(mesh, opts.load_quadrature(case))?;
    let system = if opts.use_q {
        let qg = Regularizer::new(mesh, opts.k)?.apply(&ev);
        assemble(
            mesh,
            &coeffs,
            ScalarRhs::Regularized(&qg),
            &case.bdata,
            opts.k,
        )?
    } else {
        if !case.load.is_density() {
            return Err(AnalysisError::DirectPathNeedsDensity);
        }
        assemble(mesh, &coeffs, ScalarRhs::Direct(&ev), &case.bdata, opts.k)?
    };
    let system = apply_bc(system, mesh, &case.bdata)?;
    let dofs = system.size();
    let sol = system.solve()?;
    let post = stenberg(mesh, &coeffs, &sol.flux, &sol.scalar)?;
    let mean_residual = mean_constraint_residual(mesh, &post, &sol.scalar);
    log::debug!(
        "{}: h = {:.4}, dofs = {dofs}, residual = {:.2e}",
        case.name,
        mesh.h_max(),
        sol.residual
    );
    Ok(LevelSolution {
        h: mesh.h_max(),
        dofs,
        flux: sol.flux,
        scalar: sol.scalar,
        post,
        residual: sol.residual,
        mean_residual,
        velocity_l4: advection_smallness_report(mesh, &coeffs),
    })
}

/// Errors of one level. `e_flux_div43` is `None` when undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRecord {
    pub e_flux_l2: f64,
    pub e_flux_div43: Option<f64>,
    pub e_psi_l4: f64,
    pub e_post_l2: f64,
}

impl ErrorRecord {
    pub fn div43(&self, case: &str) -> Result<f64, AnalysisError> {
        self.e_flux_div43
            .ok_or_else(|| AnalysisError::UndefinedNorm(case.into()))
    }

    /// Flux error used for the flux EoC column: the div norm when defined.
    pub fn flux(&self) -> f64 {
        self.e_flux_div43.unwrap_or(self.e_flux_l2)
    }
}

/// Errors against the exact solution. The div-L^{4/3} error is the sum
/// `‖ζ_h − ζ_ex‖_{0,2} + ‖div(ζ_h − ζ_ex)‖_{0,4/3}`.
pub fn compute_errors(
    case: &ManufacturedCase,
    mesh: &Mesh,
    sol: &LevelSolution,
    quad: &CellQuadrature,
) -> Result<ErrorRecord, AnalysisError> {
    let exact = case
        .exact
        .as_ref()
        .ok_or_else(|| AnalysisError::NoExactSolution(case.name.clone()))?;
    let e_flux_l2 = flux_l2_error(mesh, &sol.flux, &*exact.flux, quad);
    let e_flux_div43 = match (&exact.div_flux, case.regularity) {
        (Some(div), r) if r != Regularity::HMinusOne => Some(
            e_flux_l2
                + norm_lp(mesh, 4.0 / 3.0, quad, &|c, x| {
                    sol.flux.div(mesh, c) - div(x)
                }),
        ),
        _ => None,
    };
    Ok(ErrorRecord {
        e_flux_l2,
        e_flux_div43,
        e_psi_l4: scalar_error(mesh, &sol.scalar, &*exact.psi, 4.0, quad),
        e_post_l2: scalar_error(mesh, &sol.post, &*exact.psi, 2.0, quad),
    })
}

pub fn flux_l2_error(
    mesh: &Mesh,
    flux: &FluxField,
    exact: &(dyn Fn(Point) -> [f64; 2] + Send + Sync),
    quad: &CellQuadrature,
) -> f64 {
    norm_lp(mesh, 2.0, quad, &|c, x| {
        let rt = Rt0Cell::new(mesh, c).expect("valid mesh cell");
        let v = flux.eval_with(&rt, &flux.local(mesh, c), x);
        let e = exact(x);
        (v[0] - e[0]).hypot(v[1] - e[1])
    })
}

pub fn scalar_error(
    mesh: &Mesh,
    field: &ScalarField,
    exact: &(dyn Fn(Point) -> f64 + Send + Sync),
    p: f64,
    quad: &CellQuadrature,
) -> f64 {
    norm_lp(mesh, p, quad, &|c, x| field.eval(mesh, c, x) - exact(x))
}

/// Errors of coarse fields against a reference solution on a descendant
/// mesh. Coarse fields are evaluated on the reference cells through the
/// ancestor map, which represents them exactly.
pub fn compare_to_reference(
    hier: &Hierarchy,
    coarse_level: usize,
    coarse: &LevelSolution,
    reference_level: usize,
    reference: &LevelSolution,
    quad: &CellQuadrature,
) -> Result<ErrorRecord, AnalysisError> {
    let map = hier.ancestors(coarse_level, reference_level)?;
    let cm = &hier.meshes[coarse_level];
    let fm = &hier.meshes[reference_level];
    let check = |what: &str, ok: bool| {
        if ok {
            Ok(())
        } else {
            Err(AnalysisError::MeshMismatch(format!(
                "{what} size does not match its mesh"
            )))
        }
    };
    check("coarse flux", coarse.flux.coeffs.len() == cm.num_facets())?;
    check("coarse scalar", coarse.scalar.num_cells() == cm.num_cells())?;
    check(
        "coarse postprocess",
        coarse.post.num_cells() == cm.num_cells(),
    )?;
    check(
        "reference flux",
        reference.flux.coeffs.len() == fm.num_facets(),
    )?;
    check(
        "reference scalar",
        reference.scalar.num_cells() == fm.num_cells(),
    )?;
    check(
        "reference postprocess",
        reference.post.num_cells() == fm.num_cells(),
    )?;

    let e_flux_l2 = norm_lp(fm, 2.0, quad, &|c, x| {
        let a = coarse.flux.eval(cm, map[c], x);
        let b = reference.flux.eval(fm, c, x);
        (a[0] - b[0]).hypot(a[1] - b[1])
    });
    let diff = |p: f64, a: &ScalarField, b: &ScalarField| {
        norm_lp(fm, p, quad, &|c, x| {
            let ab = LocalBasis::new(cm, map[c], a.degree);
            let bb = LocalBasis::new(fm, c, b.degree);
            a.eval_with(&ab, map[c], x) - b.eval_with(&bb, c, x)
        })
    };
    Ok(ErrorRecord {
        e_flux_l2,
        e_flux_div43: None,
        e_psi_l4: diff(4.0, &coarse.scalar, &reference.scalar),
        e_post_l2: diff(2.0, &coarse.post, &reference.post),
    })
}

/// `log(e_i / e_{i−1}) / log(h_i / h_{i−1})`.
pub fn eoc(e_prev: f64, e: f64, h_prev: f64, h: f64) -> f64 {
    (e / e_prev).ln() / (h / h_prev).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub level: usize,
    pub h: f64,
    pub dofs: usize,
    pub errors: ErrorRecord,
    pub residual: f64,
    pub mean_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub case: String,
    pub use_q: bool,
    pub rows: Vec<ReportRow>,
}

/// EoC columns of one row; `None` on the first row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EocRow {
    pub flux: Option<f64>,
    pub flux_l2: Option<f64>,
    pub psi: Option<f64>,
    pub post: Option<f64>,
}

pub const CSV_HEADER: [&str; 10] = [
    "level",
    "h",
    "dofs",
    "e_flux_l2",
    "e_flux_div43",
    "e_psi_l4",
    "e_post_l2",
    "eoc_flux",
    "eoc_psi",
    "eoc_post",
];

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

impl ConvergenceReport {
    pub fn eoc(&self, i: usize) -> EocRow {
        if i == 0 {
            return EocRow {
                flux: None,
                flux_l2: None,
                psi: None,
                post: None,
            };
        }
        let (a, b) = (&self.rows[i - 1], &self.rows[i]);
        let r = |f: fn(&ErrorRecord) -> f64| Some(eoc(f(&a.errors), f(&b.errors), a.h, b.h));
        EocRow {
            flux: r(ErrorRecord::flux),
            flux_l2: r(|e| e.e_flux_l2),
            psi: r(|e| e.e_psi_l4),
            post: r(|e| e.e_post_l2),
        }
    }

    pub fn last_eoc(&self) -> EocRow {
        self.eoc(self.rows.len() - 1)
    }

    /// Largest postprocess mean-constraint residual over all levels.
    pub fn max_mean_residual(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.mean_residual)
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), AnalysisError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
        for (i, row) in self.rows.iter().enumerate() {
            let e = self.eoc(i);
            w.write_record([
                row.level.to_string(),
                fmt_float(row.h),
                row.dofs.to_string(),
                fmt_float(row.errors.e_flux_l2),
                opt(row.errors.e_flux_div43),
                fmt_float(row.errors.e_psi_l4),
                fmt_float(row.errors.e_post_l2),
                opt(e.flux),
                opt(e.psi),
                opt(e.post),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Human-readable table with 3-significant-digit errors.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{} ({})\n{:>5} {:>8} {:>8} {:>10} {:>10} {:>7} {:>10} {:>7} {:>10} {:>7}\n",
            self.case,
            if self.use_q { "with Q" } else { "without Q" },
            "level",
            "dofs",
            "h",
            "e0(zeta)",
            "ediv(zeta)",
            "eoc",
            "e04(psi)",
            "eoc",
            "e0(post)",
            "eoc"
        );
        let opt = |v: Option<f64>, p: usize| match v {
            Some(x) => format!("{x:.p$}"),
            None => "*".into(),
        };
        for (i, r) in self.rows.iter().enumerate() {
            let e = self.eoc(i);
            s += &format!(
                "{:>5} {:>8} {:>8.4} {:>10.2e} {:>10} {:>7} {:>10.2e} {:>7} {:>10.2e} {:>7}\n",
                r.level,
                r.dofs,
                r.h,
                r.errors.e_flux_l2,
                r.errors
                    .e_flux_div43
                    .map(|v| format!("{v:.2e}"))
                    .unwrap_or_else(|| "-".into()),
                opt(e.flux, 3),
                r.errors.e_psi_l4,
                opt(e.psi, 3),
                r.errors.e_post_l2,
                opt(e.post, 3),
            );
        }
        s
    }
}

/// Convergence study over `levels` uniformly refined meshes. Cases without
/// an exact solution are measured against a reference solution computed
/// [`REFERENCE_EXTRA_LEVELS`] refinements beyond the finest level.
pub fn run_convergence(
    case: &ManufacturedCase,
    levels: usize,
    opts: &StudyOptions,
) -> Result<ConvergenceReport, AnalysisError> {
    if levels < 2 {
        return Err(AnalysisError::TooFewLevels(levels));
    }
    if !opts.use_q && !case.load.is_density() {
        return Err(AnalysisError::DirectPathNeedsDensity);
    }
    let quad = opts.error_quadrature(case);
    let mut rows = Vec::with_capacity(levels);
    if case.exact.is_some() {
        let mut hier = Hierarchy::new(case.start_mesh()?);
        for level in 1..=levels {
            if level > 1 {
                hier.refine();
            }
            let mesh = hier.finest();
            let sol = solve_case(case, mesh, opts)?;
            let errors = compute_errors(case, mesh, &sol, &quad)?;
            rows.push(row(level, &sol, errors));
        }
    } else {
        let reference_level = levels + REFERENCE_EXTRA_LEVELS;
        let hier = case.hierarchy(reference_level)?;
        let reference = solve_case(case, hier.finest(), opts)?;
        let ref_quad = CellQuadrature::new(opts.error_degree.min(2 * opts.k + 4));
        for level in 1..=levels {
            let sol = solve_case(case, &hier.meshes[level - 1], opts)?;
            let errors = compare_to_reference(
                &hier,
                level - 1,
                &sol,
                reference_level - 1,
                &reference,
                &ref_quad,
            )?;
            rows.push(row(level, &sol, errors));
        }
    }
    Ok(ConvergenceReport {
        case: case.name.clone(),
        use_q: opts.use_q,
        rows,
    })
}

fn row(level: usize, sol: &LevelSolution, errors: ErrorRecord) -> ReportRow {
    ReportRow {
        level,
        h: sol.h,
        dofs: sol.dofs,
        errors,
        residual: sol.residual,
        mean_residual: sol.mean_residual,
    }
}

/// DOF count of the lowest-order scheme on `mesh`.
pub fn dof_count(mesh: &Mesh, k: usize) -> usize {
    DofMap::new(mesh, k).total()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::LineRule;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.random_range(lo..hi), rng.random_range(lo..hi)])
            .collect()
    }

    #[test]
    fn unknown_case_is_rejected() {
        assert!(matches!(
            builtin_case("ex4"),
            Err(AnalysisError::UnknownCase(_))
        ));
        for name in CASE_NAMES {
            assert_eq!(builtin_case(name).unwrap().name, name);
        }
    }

    #[test]
    fn ex1_smooth_peak_value() {
        let c = builtin_case("ex1-smooth").unwrap();
        assert!(((c.exact.unwrap().psi)([0.5, 0.5]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn velocities_are_divergence_free() {
        let h = 1e-5;
        let fields: Vec<(VectorFn, f64, f64)> = vec![
            (ex1_velocity(), 0.0, 1.0),
            (Arc::new(ex2_velocity), -1.0, 1.0),
            (Arc::new(|x| ex3_velocity(0.25, x)), -0.25, 1.25),
        ];
        for (u, lo, hi) in fields {
            for p in random_points(1, 20, lo, hi) {
                let div = (u([p[0] + h, p[1]])[0] - u([p[0] - h, p[1]])[0]
                    + u([p[0], p[1] + h])[1]
                    - u([p[0], p[1] - h])[1])
                    / (2.0 * h);
                assert!(div.abs() < 1e-6, "div u = {div} at {p:?}");
            }
        }
    }

    #[test]
    fn exact_fields_are_consistent() {
        for name in ["ex1-smooth", "ex1-rough", "ex2", "constant"] {
            let c = builtin_case(name).unwrap();
            let ex = c.exact.as_ref().unwrap();
            let (lo, hi) = if name == "ex2" {
                (-1.0, 1.0)
            } else {
                (0.0, 1.0)
            };
            for p in random_points(2, 20, lo, hi) {
                let g = (ex.grad_psi)(p);
                let (e, u, psi) = ((c.eps)(p), (c.velocity)(p), (ex.psi)(p));
                let z = (ex.flux)(p);
                assert!((z[0] - (e * g[0] - u[0] * psi)).abs() < 1e-10);
                assert!((z[1] - (e * g[1] - u[1] * psi)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-6;
        for name in ["ex1-smooth", "ex1-rough", "ex2"] {
            let c = builtin_case(name).unwrap();
            let ex = c.exact.as_ref().unwrap();
            let (lo, hi) = if name == "ex2" {
                (-1.0, 1.0)
            } else {
                (0.0, 1.0)
            };
            for p in random_points(3, 20, lo, hi) {
                if (p[0] - p[1]).abs() < 0.05 || p[0].abs() < 0.05 {
                    continue;
                }
                let g = (ex.grad_psi)(p);
                let fx = ((ex.psi)([p[0] + h, p[1]]) - (ex.psi)([p[0] - h, p[1]])) / (2.0 * h);
                let fy = ((ex.psi)([p[0], p[1] + h]) - (ex.psi)([p[0], p[1] - h])) / (2.0 * h);
                assert!(
                    (g[0] - fx).abs() < 1e-6 && (g[1] - fy).abs() < 1e-6,
                    "{name} at {p:?}"
                );
            }
        }
    }

    #[test]
    fn divergences_match_finite_differences() {
        let h = 1e-5;
        for name in ["ex1-smooth", "ex2"] {
            let c = builtin_case(name).unwrap();
            let ex = c.exact.as_ref().unwrap();
            let div = ex.div_flux.as_ref().unwrap();
            let (lo, hi) = if name == "ex2" {
                (-1.0, 1.0)
            } else {
                (0.0, 1.0)
            };
            for p in random_points(4, 20, lo, hi) {
                if p[0].abs() < 0.05 {
                    continue;
                }
                let z = &ex.flux;
                let fd = (z([p[0] + h, p[1]])[0] - z([p[0] - h, p[1]])[0] + z([p[0], p[1] + h])[1]
                    - z([p[0], p[1] - h])[1])
                    / (2.0 * h);
                let v = div(p);
                assert!(
                    (v - fd).abs() < 1e-4 * (1.0 + v.abs()),
                    "{name} at {p:?}: {v} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn ex2_load_matches_finite_differences() {
        // g = κψ − div ζ with div ζ recomputed from the flux by differences
        let h = 1e-5;
        let flux = |p: Point| {
            let g = ex2_grad_psi(p);
            let (e, u, psi) = (ex2_eps(p), ex2_velocity(p), ex2_psi(p));
            [e * g[0] - u[0] * psi, e * g[1] - u[1] * psi]
        };
        for p in random_points(5, 40, -1.0, 1.0)
            .into_iter()
            .filter(|p| p[0].abs() > 0.05)
            .take(20)
        {
            let div = (flux([p[0] + h, p[1]])[0] - flux([p[0] - h, p[1]])[0]
                + flux([p[0], p[1] + h])[1]
                - flux([p[0], p[1] - h])[1])
                / (2.0 * h);
            let fd = ex2_kappa(p) * ex2_psi(p) - div;
            let g = ex2_load(p);
            assert!(
                (g - fd).abs() <= 1e-4 * g.abs().max(1.0),
                "{p:?}: {g} vs {fd}"
            );
        }
    }

    #[test]
    fn regularity_tags() {
        assert_eq!(
            builtin_case("ex1-smooth").unwrap().regularity,
            Regularity::Smooth
        );
        assert_eq!(
            builtin_case("ex1-rough").unwrap().regularity,
            Regularity::HMinusOne
        );
        let ex2 = builtin_case("ex2").unwrap();
        assert_eq!(ex2.regularity, Regularity::L2Rough);
        assert!(ex2.regularity.to_string().contains("1/128"));
        assert_eq!(
            builtin_case("ex3-line").unwrap().regularity,
            Regularity::NoExact
        );
    }

    #[test]
    fn start_meshes() {
        let m = builtin_case("ex1-smooth").unwrap().start_mesh().unwrap();
        assert_eq!(dof_count(&m, 0), 24);
        assert!((m.h_max() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let m = builtin_case("ex2").unwrap().start_mesh().unwrap();
        assert_eq!(dof_count(&m, 0), 24);
        assert!((m.h_max() - std::f64::consts::SQRT_2).abs() < 1e-12);
        let m = builtin_case("ex3-line").unwrap().start_mesh().unwrap();
        assert!((m.domain_area() - 1.3125).abs() < 1e-12);
        assert!(m
            .facets()
            .iter()
            .all(|f| !f.is_boundary() || f.marker == Some(Marker::Dirichlet)));
    }

    #[test]
    fn ex3_fracture_lies_on_mesh_edges() {
        let m = builtin_case("ex3-line").unwrap().start_mesh().unwrap();
        let pieces = crate::loads::clip_segment(&m, EX3_FRACTURE[0], EX3_FRACTURE[1]).unwrap();
        assert!(pieces.iter().all(|p| p.weight == 0.5));
        let len: f64 = pieces
            .iter()
            .map(|p| p.weight * (p.b[0] - p.a[0]).hypot(p.b[1] - p.a[1]))
            .sum();
        assert!((len - 0.2f64.hypot(0.6)).abs() < 1e-12);
    }

    fn unit(nx: usize) -> Mesh {
        Mesh::structured(nx, Rectangle::UNIT, Diagonal::Forward, |_| {
            Marker::Dirichlet
        })
    }

    fn zero_solution(mesh: &Mesh, flux: FluxField) -> LevelSolution {
        LevelSolution {
            h: mesh.h_max(),
            dofs: 0,
            flux,
            scalar: ScalarField::zeros(mesh, 0),
            post: ScalarField::zeros(mesh, 1),
            residual: 0.0,
            mean_residual: 0.0,
            velocity_l4: 0.0,
        }
    }

    #[test]
    fn interpolated_constant_flux_has_no_error() {
        let m = unit(3);
        let mut case = builtin_case("constant").unwrap();
        let ex = case.exact.as_mut().unwrap();
        ex.flux = Arc::new(|_| [0.3, -0.8]);
        let flux = FluxField::interpolate(&m, &|_| [0.3, -0.8], &LineRule::gauss(2));
        let e = compute_errors(
            &case,
            &m,
            &zero_solution(&m, flux),
            &CellQuadrature::new(ERROR_DEGREE),
        )
        .unwrap();
        assert!(e.e_flux_l2 < 1e-12);
    }

    #[test]
    fn zero_flux_against_unit_field() {
        let m = unit(2);
        let mut case = builtin_case("constant").unwrap();
        case.exact.as_mut().unwrap().flux = Arc::new(|_| [1.0, 0.0]);
        let e = compute_errors(
            &case,
            &m,
            &zero_solution(&m, FluxField::zeros(&m)),
            &CellQuadrature::new(ERROR_DEGREE),
        )
        .unwrap();
        assert!((e.e_flux_l2 - 1.0).abs() < 1e-13);
        assert!((e.e_flux_div43.unwrap() - 1.0).abs() < 1e-13);
        assert!((e.e_psi_l4 - 1.0).abs() < 1e-13);
    }

    #[test]
    fn div_norm_is_undefined_for_h_minus_one_case() {
        let m = unit(2);
        let case = builtin_case("ex1-rough").unwrap();
        let e = compute_errors(
            &case,
            &m,
            &zero_solution(&m, FluxField::zeros(&m)),
            &CellQuadrature::new(6),
        )
        .unwrap();
        assert!(e.e_flux_div43.is_none());
        assert!(matches!(
            e.div43(&case.name),
            Err(AnalysisError::UndefinedNorm(_))
        ));
    }

    #[test]
    fn no_exact_solution_is_reported() {
        let case = builtin_case("ex3-line").unwrap();
        let m = case.start_mesh().unwrap();
        let r = compute_errors(
            &case,
            &m,
            &zero_solution(&m, FluxField::zeros(&m)),
            &CellQuadrature::new(4),
        );
        assert!(matches!(r, Err(AnalysisError::NoExactSolution(_))));
    }

    #[test]
    fn eoc_formula() {
        assert!((eoc(1.0, 0.25, 0.2, 0.1) - 2.0).abs() < 1e-14);
        let r = ConvergenceReport {
            case: "t".into(),
            use_q: true,
            rows: [(0.5, 4.0), (0.25, 1.0), (0.125, 0.5)]
                .iter()
                .enumerate()
                .map(|(i, &(h, e))| ReportRow {
                    level: i + 1,
                    h,
                    dofs: 0,
                    errors: ErrorRecord {
                        e_flux_l2: e,
                        e_flux_div43: None,
                        e_psi_l4: e,
                        e_post_l2: e * e,
                    },
                    residual: 0.0,
                    mean_residual: 0.0,
                })
                .collect(),
        };
        assert!(r.eoc(0).psi.is_none());
        assert!((r.eoc(1).psi.unwrap() - 2.0).abs() < 1e-14);
        assert!((r.eoc(2).psi.unwrap() - 1.0).abs() < 1e-14);
        assert!((r.eoc(2).post.unwrap() - 2.0).abs() < 1e-14);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER.join(","));
        assert_eq!(lines.len(), 4);
        let second: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(second[4], "");
        assert_eq!(second[7], "");
        let third: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(third[8].parse::<f64>().unwrap(), r.eoc(1).psi.unwrap());
    }

    #[test]
    fn ancestors_compose_parent_maps() {
        let mut h = Hierarchy::new(unit(1));
        h.refine();
        h.refine();
        let map = h.ancestors(0, 2).unwrap();
        assert_eq!(map.len(), 32);
        for (c, &p) in map.iter().enumerate() {
            let x = h.meshes[2].cell_centroid(c);
            let tri = h.meshes[0].cell_points(p);
            assert!(crate::mesh::barycentric(&tri, x).iter().all(|&l| l > 0.0));
        }
        assert!(matches!(
            h.ancestors(2, 1),
            Err(AnalysisError::MeshMismatch(_))
        ));
        assert!(matches!(
            h.ancestors(0, 3),
            Err(AnalysisError::MeshMismatch(_))
        ));
    }

    #[test]
    fn reference_comparison_basics() {
        let case = builtin_case("constant").unwrap();
        let opts = StudyOptions::default();
        let hier = case.hierarchy(3).unwrap();
        let coarse = solve_case(&case, &hier.meshes[0], &opts).unwrap();
        let fine = solve_case(&case, &hier.meshes[2], &opts).unwrap();
        let q = CellQuadrature::new(6);
        let self_err = compare_to_reference(&hier, 2, &fine, 2, &fine, &q).unwrap();
        assert_eq!(self_err.e_psi_l4, 0.0);
        assert_eq!(self_err.e_flux_l2, 0.0);
        let e = compare_to_reference(&hier, 0, &coarse, 2, &fine, &q).unwrap();
        assert!(e.e_flux_l2 < 1e-10 && e.e_psi_l4 < 1e-10 && e.e_post_l2 < 1e-10);
        assert!(matches!(
            compare_to_reference(&hier, 0, &fine, 2, &fine, &q),
            Err(AnalysisError::MeshMismatch(_))
        ));
    }

    #[test]
    fn transferred_norms_match_coarse_norms() {
        let case = builtin_case("ex1-smooth").unwrap();
        let hier = case.hierarchy(3).unwrap();
        let coarse = solve_case(&case, &hier.meshes[0], &StudyOptions::default()).unwrap();
        let mut zero = zero_solution(&hier.meshes[2], FluxField::zeros(&hier.meshes[2]));
        zero.post = ScalarField::zeros(&hier.meshes[2], 1);
        let q = CellQuadrature::new(8);
        let e = compare_to_reference(&hier, 0, &coarse, 2, &zero, &q).unwrap();
        let cm = &hier.meshes[0];
        let direct_flux = norm_lp(cm, 2.0, &q, &|c, x| {
            let v = coarse.flux.eval(cm, c, x);
            v[0].hypot(v[1])
        });
        let direct_psi = norm_lp(cm, 4.0, &q, &|c, x| coarse.scalar.eval(cm, c, x));
        let direct_post = norm_lp(cm, 2.0, &q, &|c, x| coarse.post.eval(cm, c, x));
        assert!((e.e_flux_l2 - direct_flux).abs() < 1e-12 * direct_flux.max(1.0));
        assert!((e.e_psi_l4 - direct_psi).abs() < 1e-12 * direct_psi.max(1.0));
        assert!((e.e_post_l2 - direct_post).abs() < 1e-12 * direct_post.max(1.0));
    }

    #[test]
    fn constant_case_is_exact_through_the_pipeline() {
        let case = builtin_case("constant").unwrap();
        for use_q in [true, false] {
            let opts = StudyOptions {
                use_q,
                ..StudyOptions::default()
            };
            let r = run_convergence(&case, 3, &opts).unwrap();
            for row in &r.rows {
                let e = row.errors;
                assert!(e.e_flux_l2 <= 1e-10 && e.e_flux_div43.unwrap() <= 1e-10);
                assert!(e.e_psi_l4 <= 1e-10 && e.e_post_l2 <= 1e-10);
                assert!(row.mean_residual <= 1e-12);
            }
        }
    }

    #[test]
    fn direct_path_rejects_non_density_load() {
        let case = builtin_case("ex1-rough").unwrap();
        let opts = StudyOptions {
            use_q: false,
            ..StudyOptions::default()
        };
        assert!(matches!(
            run_convergence(&case, 2, &opts),
            Err(AnalysisError::DirectPathNeedsDensity)
        ));
        assert!(matches!(
            run_convergence(&case, 1, &StudyOptions::default()),
            Err(AnalysisError::TooFewLevels(1))
        ));
    }

    #[test]
    fn ex1_smooth_first_levels_match_table() {
        let case = builtin_case("ex1-smooth").unwrap();
        let r = run_convergence(&case, 3, &StudyOptions::default()).unwrap();
        assert_eq!(r.rows[0].dofs, 24);
        assert_eq!(r.rows[1].dofs, 88);
        assert!((r.rows[1].h - 0.3536).abs() < 1e-4);
        for w in r.rows.windows(2) {
            assert!(w[1].errors.e_psi_l4 < w[0].errors.e_psi_l4);
        }
    }
}
