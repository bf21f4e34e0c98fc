//! Right-hand-side functionals in H⁻¹ and boundary data.
//!
//! A [`LoadFunctional`] is bound to a mesh with [`LoadFunctional::bind`],
//! which precomputes segment clipping and point location. The bound
//! evaluator integrates the functional against any test function that is
//! polynomial on each cell of its support.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::fem::basis::{hat_gradients, hat_value, DualBubbles, LocalBasis};
use crate::fem::fields::ScalarField;
use crate::fem::quadrature::{CellQuadrature, LineRule};
use crate::mesh::{barycentric, Marker, Mesh, Point};

pub type ScalarFn = Arc<dyn Fn(Point) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(Point) -> [f64; 2] + Send + Sync>;
/// Normal flux as a function of position and outward unit normal.
pub type NormalFluxFn = Arc<dyn Fn(Point, [f64; 2]) -> f64 + Send + Sync>;

const GEOMETRY_TOL: f64 = 1e-12;
/// Segment parameters closer than this are merged, which removes slivers
/// produced by cells that only touch the segment at a vertex.
const BREAK_TOL: f64 = 1e-9;
const DIRAC_GAUSS_POINTS: usize = 5;
const BOUNDARY_GAUSS_POINTS: usize = 5;
const NEUMANN_LOAD_GAUSS_POINTS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoadError {
    #[error("point ({0}, {1}) lies on the Dirichlet boundary")]
    PointOnDirichletBoundary(f64, f64),
    #[error("point ({0}, {1}) lies outside the mesh")]
    PointOutsideMesh(f64, f64),
    #[error("line source leaves the mesh")]
    SegmentOutsideMesh,
    #[error("facet {facet} does not carry the {expected:?} marker")]
    MarkerMismatch { facet: usize, expected: Marker },
    #[error("no {0} data supplied")]
    MissingData(&'static str),
}

/// Exact-solution data realising `v ↦ ∫ κψv + (ε∇ψ − uψ)·∇v − ∫_{Γ_N} ζ_N v`.
#[derive(Clone)]
pub struct WeakFormData {
    pub psi: ScalarFn,
    pub grad_psi: VectorFn,
    pub velocity: VectorFn,
    pub eps: ScalarFn,
    pub kappa: ScalarFn,
    pub flux_n: NormalFluxFn,
}

#[derive(Clone)]
pub enum LoadFunctional {
    DensityL2(ScalarFn),
    /// L² density given as a discontinuous piecewise polynomial.
    Piecewise(ScalarField),
    WeakForm(WeakFormData),
    LineDirac {
        start: Point,
        end: Point,
        intensity: f64,
    },
    PointDirac {
        point: Point,
        weight: f64,
    },
}

impl fmt::Debug for LoadFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoadFunctional::DensityL2(_) => write!(f, "DensityL2"),
            LoadFunctional::Piecewise(p) => write!(f, "Piecewise(P{})", p.degree),
            LoadFunctional::WeakForm(_) => write!(f, "WeakForm"),
            LoadFunctional::LineDirac {
                start,
                end,
                intensity,
            } => write!(f, "LineDirac({start:?} -> {end:?}, {intensity})"),
            LoadFunctional::PointDirac { point, weight } => {
                write!(f, "PointDirac({point:?}, {weight})")
            }
        }
    }
}

impl LoadFunctional {
    pub fn density(f: impl Fn(Point) -> f64 + Send + Sync + 'static) -> Self {
        LoadFunctional::DensityL2(Arc::new(f))
    }

    pub fn is_density(&self) -> bool {
        matches!(
            self,
            LoadFunctional::DensityL2(_) | LoadFunctional::Piecewise(_)
        )
    }

    /// Precomputes the mesh-dependent data needed for evaluation.
    pub fn bind<'a>(
        &'a self,
        mesh: &'a Mesh,
        quad: CellQuadrature,
    ) -> Result<LoadEvaluator<'a>, LoadError> {
        let mut attachments = vec![Vec::new(); mesh.num_cells()];
        match self {
            LoadFunctional::LineDirac {
                start,
                end,
                intensity,
            } => {
                for piece in clip_segment(mesh, *start, *end)? {
                    attachments[piece.cell].push(Attachment::Segment {
                        a: piece.a,
                        b: piece.b,
                        weight: piece.weight * intensity,
                    });
                }
            }
            LoadFunctional::PointDirac { point, weight } => {
                let p = *point;
                if on_dirichlet_boundary(mesh, p) {
                    return Err(LoadError::PointOnDirichletBoundary(p[0], p[1]));
                }
                let cells = containing_cells(mesh, p);
                if cells.is_empty() {
                    return Err(LoadError::PointOutsideMesh(p[0], p[1]));
                }
                let share = weight / cells.len() as f64;
                for c in cells {
                    attachments[c].push(Attachment::Point {
                        x: p,
                        weight: share,
                    });
                }
            }
            _ => {}
        }
        Ok(LoadEvaluator {
            mesh,
            load: self,
            quad,
            dirac_rule: LineRule::gauss(DIRAC_GAUSS_POINTS),
            neumann_rule: LineRule::gauss(NEUMANN_LOAD_GAUSS_POINTS),
            attachments,
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum Attachment {
    Segment { a: Point, b: Point, weight: f64 },
    Point { x: Point, weight: f64 },
}

/// A load functional bound to a mesh and a cell quadrature.
pub struct LoadEvaluator<'a> {
    mesh: &'a Mesh,
    load: &'a LoadFunctional,
    quad: CellQuadrature,
    dirac_rule: LineRule,
    neumann_rule: LineRule,
    attachments: Vec<Vec<Attachment>>,
}

/// Fills values and gradients of `n` local test functions at a point.
pub type LocalEval<'f> = dyn Fn(Point, &mut [f64], &mut [[f64; 2]]) + 'f;

impl LoadEvaluator<'_> {
    pub fn mesh(&self) -> &Mesh {
        self.mesh
    }

    pub fn is_density(&self) -> bool {
        self.load.is_density()
    }

    /// Contribution of `cell` to `⟨g, v_i⟩` for `n = out.len()` test
    /// functions whose restriction to `cell` is given by `f`.
    pub fn cell_moments(&self, cell: usize, f: &LocalEval<'_>, out: &mut [f64]) {
        let n = out.len();
        out.fill(0.0);
        let mut vals = vec![0.0; n];
        let mut grads = vec![[0.0; 2]; n];
        let tri = self.mesh.cell_points(cell);
        match self.load {
            LoadFunctional::DensityL2(g) => {
                self.quad.for_each(&tri, &mut |x, w| {
                    let gx = g(x) * w;
                    f(x, &mut vals, &mut grads);
                    for i in 0..n {
                        out[i] += gx * vals[i];
                    }
                });
            }
            LoadFunctional::Piecewise(p) => {
                let basis = LocalBasis::new(self.mesh, cell, p.degree);
                let coeffs = p.cell(cell);
                self.quad.for_each(&tri, &mut |x, w| {
                    let gx = basis.eval(coeffs, x) * w;
                    f(x, &mut vals, &mut grads);
                    for i in 0..n {
                        out[i] += gx * vals[i];
                    }
                });
            }
            LoadFunctional::WeakForm(d) => {
                self.quad.for_each(&tri, &mut |x, w| {
                    let psi = (d.psi)(x);
                    let gp = (d.grad_psi)(x);
                    let u = (d.velocity)(x);
                    let eps = (d.eps)(x);
                    let r = (d.kappa)(x) * psi * w;
                    let z = [
                        (eps * gp[0] - u[0] * psi) * w,
                        (eps * gp[1] - u[1] * psi) * w,
                    ];
                    f(x, &mut vals, &mut grads);
                    for i in 0..n {
                        out[i] += r * vals[i] + z[0] * grads[i][0] + z[1] * grads[i][1];
                    }
                });
                for (local, &facet) in self.mesh.cell_facets(cell).iter().enumerate() {
                    if self.mesh.facets()[facet].marker != Some(Marker::Neumann) {
                        continue;
                    }
                    let normal = self.mesh.facet_normal(facet);
                    let a = tri[(local + 1) % 3];
                    let b = tri[(local + 2) % 3];
                    for i in 0..n {
                        out[i] -= self.neumann_rule.integrate_segment(a, b, |x| {
                            f(x, &mut vals, &mut grads);
                            (d.flux_n)(x, normal) * vals[i]
                        });
                    }
                }
            }
            LoadFunctional::LineDirac { .. } | LoadFunctional::PointDirac { .. } => {
                for att in &self.attachments[cell] {
                    match *att {
                        Attachment::Segment { a, b, weight } => {
                            for i in 0..n {
                                out[i] += weight
                                    * self.dirac_rule.integrate_segment(a, b, |x| {
                                        f(x, &mut vals, &mut grads);
                                        vals[i]
                                    });
                            }
                        }
                        Attachment::Point { x, weight } => {
                            f(x, &mut vals, &mut grads);
                            for i in 0..n {
                                out[i] += weight * vals[i];
                            }
                        }
                    }
                }
            }
        }
    }

    /// `⟨g, v⟩`.
    pub fn eval(&self, v: &dyn TestFunction) -> f64 {
        let mut out = [0.0];
        v.support()
            .into_iter()
            .map(|c| {
                self.cell_moments(
                    c,
                    &|x, val, grad| {
                        let (a, b) = v.eval(c, x);
                        val[0] = a;
                        grad[0] = b;
                    },
                    &mut out,
                );
                out[0]
            })
            .sum()
    }
}

/// A function that is polynomial on each cell of its support.
pub trait TestFunction: Sync {
    fn support(&self) -> Vec<usize>;
    /// Value and gradient at `x` from the restriction to `cell`.
    fn eval(&self, cell: usize, x: Point) -> (f64, [f64; 2]);
}

/// Continuous piecewise linear hat of a vertex.
#[derive(Debug, Clone)]
pub struct Hat<'a> {
    mesh: &'a Mesh,
    vertex: usize,
}

impl<'a> Hat<'a> {
    pub fn new(mesh: &'a Mesh, vertex: usize) -> Self {
        Self { mesh, vertex }
    }
}

impl TestFunction for Hat<'_> {
    fn support(&self) -> Vec<usize> {
        self.mesh.vertex_cells(self.vertex).to_vec()
    }

    fn eval(&self, cell: usize, x: Point) -> (f64, [f64; 2]) {
        let Some(local) = self.mesh.cells()[cell]
            .iter()
            .position(|&v| v == self.vertex)
        else {
            return (0.0, [0.0; 2]);
        };
        let tri = self.mesh.cell_points(cell);
        (hat_value(&tri, local, x), hat_gradients(&tri)[local])
    }
}

/// Dual bubble `χ_{K,j}`.
#[derive(Debug, Clone, Copy)]
pub struct DualBubbleFn<'a> {
    pub bubbles: &'a DualBubbles,
    pub j: usize,
}

impl TestFunction for DualBubbleFn<'_> {
    fn support(&self) -> Vec<usize> {
        vec![self.bubbles.cell]
    }

    fn eval(&self, cell: usize, x: Point) -> (f64, [f64; 2]) {
        if cell != self.bubbles.cell {
            return (0.0, [0.0; 2]);
        }
        self.bubbles.eval(self.j, x)
    }
}

/// A polynomial supported on a single cell.
#[derive(Debug, Clone)]
pub struct CellPolynomial {
    pub cell: usize,
    pub basis: LocalBasis,
    pub coeffs: Vec<f64>,
}

impl TestFunction for CellPolynomial {
    fn support(&self) -> Vec<usize> {
        vec![self.cell]
    }

    fn eval(&self, cell: usize, x: Point) -> (f64, [f64; 2]) {
        if cell != self.cell {
            return (0.0, [0.0; 2]);
        }
        (
            self.basis.eval(&self.coeffs, x),
            self.basis.eval_grad(&self.coeffs, x),
        )
    }
}

/// `Σ_i c_i v_i`.
pub struct Combination<'a> {
    pub terms: Vec<(f64, &'a dyn TestFunction)>,
}

impl TestFunction for Combination<'_> {
    fn support(&self) -> Vec<usize> {
        let mut cells: Vec<usize> = self.terms.iter().flat_map(|(_, v)| v.support()).collect();
        cells.sort_unstable();
        cells.dedup();
        cells
    }

    fn eval(&self, cell: usize, x: Point) -> (f64, [f64; 2]) {
        self.terms.iter().fold((0.0, [0.0; 2]), |(s, g), (c, v)| {
            let (a, b) = v.eval(cell, x);
            (s + c * a, [g[0] + c * b[0], g[1] + c * b[1]])
        })
    }
}

/// Dirichlet trace `ψ_D` and Neumann normal flux `ζ_N`.
#[derive(Clone, Default)]
pub struct BoundaryData {
    pub dirichlet: Option<ScalarFn>,
    pub neumann: Option<NormalFluxFn>,
}

impl fmt::Debug for BoundaryData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BoundaryData")
            .field("dirichlet", &self.dirichlet.is_some())
            .field("neumann", &self.neumann.is_some())
            .finish()
    }
}

impl BoundaryData {
    /// Homogeneous data on both boundary parts.
    pub fn homogeneous() -> Self {
        Self::default()
    }

    /// `∫_F ψ_D ds` on a Dirichlet facet (zero when no trace is given).
    pub fn dirichlet_moment(&self, mesh: &Mesh, facet: usize) -> Result<f64, LoadError> {
        let f = &mesh.facets()[facet];
        if f.marker != Some(Marker::Dirichlet) {
            return Err(LoadError::MarkerMismatch {
                facet,
                expected: Marker::Dirichlet,
            });
        }
        let Some(psi_d) = &self.dirichlet else {
            return Ok(0.0);
        };
        let [a, b] = f.vertices.map(|v| mesh.vertices()[v]);
        Ok(LineRule::gauss(BOUNDARY_GAUSS_POINTS).integrate_segment(a, b, |x| psi_d(x)))
    }

    /// `∫_F ζ_N ds` with the outward normal on a Neumann facet.
    pub fn neumann_moment(&self, mesh: &Mesh, facet: usize) -> Result<f64, LoadError> {
        let f = &mesh.facets()[facet];
        if f.marker != Some(Marker::Neumann) {
            return Err(LoadError::MarkerMismatch {
                facet,
                expected: Marker::Neumann,
            });
        }
        let Some(flux) = &self.neumann else {
            return Ok(0.0);
        };
        let n = mesh.facet_normal(facet);
        let [a, b] = f.vertices.map(|v| mesh.vertices()[v]);
        Ok(LineRule::gauss(BOUNDARY_GAUSS_POINTS).integrate_segment(a, b, |x| flux(x, n)))
    }
}

/// Portion of a segment inside one cell, with the weight it receives when
/// it runs along a facet shared by several cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentPiece {
    pub cell: usize,
    pub a: Point,
    pub b: Point,
    pub weight: f64,
}

fn cell_parameter_interval(tri: &[Point; 3], a: Point, d: Point) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for i in 0..3 {
        let p = tri[i];
        let q = tri[(i + 1) % 3];
        let e = [q[0] - p[0], q[1] - p[1]];
        let len = e[0].hypot(e[1]);
        // signed distance to the edge line, positive inside: c0 + c1 t
        let c0 = (e[0] * (a[1] - p[1]) - e[1] * (a[0] - p[0])) / len + GEOMETRY_TOL;
        let c1 = (e[0] * d[1] - e[1] * d[0]) / len;
        if c1.abs() < GEOMETRY_TOL * 1e-3 {
            if c0 < 0.0 {
                return None;
            }
        } else if c1 > 0.0 {
            lo = lo.max(-c0 / c1);
        } else {
            hi = hi.min(-c0 / c1);
        }
    }
    (hi - lo > GEOMETRY_TOL).then_some((lo, hi))
}

/// Splits the segment `start → end` into per-cell pieces. Pieces lying on a
/// facet shared by two cells are split evenly between them, so the weighted
/// lengths add up to the segment length.
pub fn clip_segment(mesh: &Mesh, start: Point, end: Point) -> Result<Vec<SegmentPiece>, LoadError> {
    let d = [end[0] - start[0], end[1] - start[1]];
    let intervals: Vec<(usize, f64, f64)> = (0..mesh.num_cells())
        .filter_map(|c| {
            cell_parameter_interval(&mesh.cell_points(c), start, d).map(|(lo, hi)| (c, lo, hi))
        })
        .collect();
    let mut breaks: Vec<f64> = vec![0.0, 1.0];
    for &(_, lo, hi) in &intervals {
        breaks.push(lo.clamp(0.0, 1.0));
        breaks.push(hi.clamp(0.0, 1.0));
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|a, b| (*a - *b).abs() <= BREAK_TOL);
    if let Some(last) = breaks.last_mut() {
        *last = 1.0;
    }
    let at = |t: f64| [start[0] + t * d[0], start[1] + t * d[1]];
    let mut pieces = Vec::new();
    for w in breaks.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t1 - t0 <= BREAK_TOL {
            continue;
        }
        let mid = 0.5 * (t0 + t1);
        let owners: Vec<usize> = intervals
            .iter()
            .filter(|&&(_, lo, hi)| lo <= mid && mid <= hi)
            .map(|&(c, _, _)| c)
            .collect();
        if owners.is_empty() {
            return Err(LoadError::SegmentOutsideMesh);
        }
        let weight = 1.0 / owners.len() as f64;
        for c in owners {
            pieces.push(SegmentPiece {
                cell: c,
                a: at(t0),
                b: at(t1),
                weight,
            });
        }
    }
    Ok(pieces)
}

fn containing_cells(mesh: &Mesh, p: Point) -> Vec<usize> {
    (0..mesh.num_cells())
        .filter(|&c| {
            barycentric(&mesh.cell_points(c), p)
                .iter()
                .all(|&l| l >= -GEOMETRY_TOL)
        })
        .collect()
}

fn on_dirichlet_boundary(mesh: &Mesh, p: Point) -> bool {
    mesh.facets()
        .iter()
        .filter(|f| f.marker == Some(Marker::Dirichlet))
        .any(|f| {
            let [a, b] = f.vertices.map(|v| mesh.vertices()[v]);
            let e = [b[0] - a[0], b[1] - a[1]];
            let len2 = e[0] * e[0] + e[1] * e[1];
            let t = (((p[0] - a[0]) * e[0] + (p[1] - a[1]) * e[1]) / len2).clamp(0.0, 1.0);
            let q = [a[0] + t * e[0] - p[0], a[1] + t * e[1] - p[1]];
            q[0].hypot(q[1]) <= GEOMETRY_TOL * len2.sqrt().max(1.0)
        })
}
