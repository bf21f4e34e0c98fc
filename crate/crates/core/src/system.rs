//! Assembly and direct solution of the discrete saddle-point problem
//!
//! ```text
//! a(ζ, ξ) + b(ξ, ψ) + d(ξ, ψ) = F(ξ)
//! b(ζ, φ) − c(ψ, φ)           = G(φ)
//! ```
//!
//! with `a = ∫ ε⁻¹ ζ·ξ`, `b = ∫ φ div ξ`, `c = ∫ κ ψ φ`,
//! `d = ∫ ε⁻¹ (u_h·ξ) φ`, `F(ξ) = ⟨ξ·n, ψ_D⟩_{Γ_D}` and `G(φ) = −∫ Qg φ`.

use std::fmt;

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use rayon::prelude::*;
use thiserror::Error;

use crate::fem::{
    norm_lp, pk_dim, CellQuadrature, DofMap, FluxField, LocalBasis, Rt0Cell, ScalarField,
    VectorField, ASSEMBLY_DEGREE,
};
use crate::loads::{BoundaryData, LoadError, LoadEvaluator, ScalarFn, VectorFn};
use crate::mesh::{Marker, Mesh, Point};

const RESIDUAL_TOL: f64 = 1e-10;
const MAX_REFINEMENT_STEPS: usize = 3;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("{name} = {value} at ({x}, {y}) violates its bounds")]
    CoefficientBoundViolation {
        name: &'static str,
        value: f64,
        x: f64,
        y: f64,
    },
    #[error("the flux space is lowest-order Raviart-Thomas; degree {0} is not supported")]
    UnsupportedDegree(usize),
    #[error("an unregularised load must be an L² density")]
    NotADensity,
    #[error("sparse factorisation failed: {0}")]
    SingularSystem(String),
    #[error("relative residual {0:e} above tolerance after refinement")]
    ResidualTooLarge(f64),
    #[error(transparent)]
    Load(#[from] LoadError),
}

/// `ε`, `κ` and the discrete velocity `u_h`.
#[derive(Clone)]
pub struct CoefficientSet {
    pub eps: ScalarFn,
    pub kappa: ScalarFn,
    pub eps_bounds: (f64, f64),
    pub velocity_h: VectorField,
    pub velocity: Option<VectorFn>,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("eps_bounds", &self.eps_bounds)
            .finish_non_exhaustive()
    }
}

impl CoefficientSet {
    fn check(&self, x: Point) -> Result<(f64, f64), SystemError> {
        let e = (self.eps)(x);
        let k = (self.kappa)(x);
        let (lo, hi) = self.eps_bounds;
        if !(e >= lo && e <= hi && lo > 0.0) {
            return Err(SystemError::CoefficientBoundViolation {
                name: "eps",
                value: e,
                x: x[0],
                y: x[1],
            });
        }
        if !(k >= 0.0) {
            return Err(SystemError::CoefficientBoundViolation {
                name: "kappa",
                value: k,
                x: x[0],
                y: x[1],
            });
        }
        Ok((e, k))
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Sums duplicate entries in the order given.
    pub fn from_triplets(nrows: usize, ncols: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        t.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0; nrows + 1];
        let mut indices = Vec::with_capacity(t.len());
        let mut values: Vec<f64> = Vec::with_capacity(t.len());
        let mut last = None;
        for (r, c, v) in t {
            assert!(r < nrows && c < ncols);
            if last == Some((r, c)) {
                *values.last_mut().expect("entry exists") += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[r]..self.indptr[r + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.nrows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (r, c, v) in self.triplets() {
            d[r][c] = v;
        }
        d
    }
}

/// Right-hand side of the scalar equation.
pub enum ScalarRhs<'a> {
    /// `G(φ) = −∫ Qg φ`.
    Regularized(&'a ScalarField),
    /// `G(φ) = −⟨g, φ⟩` for an L² density `g`.
    Direct(&'a LoadEvaluator<'a>),
}

/// The assembled blocks, right-hand sides and Neumann constraints.
#[derive(Debug, Clone)]
pub struct SaddleSystem {
    pub dofs: DofMap,
    pub a: CsrMatrix,
    pub b: CsrMatrix,
    pub d: CsrMatrix,
    pub c: CsrMatrix,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    /// Neumann flux DOFs and their prescribed values.
    pub constrained: Vec<(usize, f64)>,
}

struct CellBlocks {
    a: [[f64; 3]; 3],
    b: Vec<[f64; 3]>,
    d: Vec<[f64; 3]>,
    c: Vec<Vec<f64>>,
}

fn cell_blocks(
    mesh: &Mesh,
    cell: usize,
    coeffs: &CoefficientSet,
    degree: usize,
    quad: &CellQuadrature,
) -> Result<CellBlocks, SystemError> {
    let dim = pk_dim(degree);
    let rt = Rt0Cell::new(mesh, cell)
        .map_err(|_| SystemError::SingularSystem(format!("degenerate cell {cell}")))?;
    let basis = LocalBasis::new(mesh, cell, degree);
    let ubasis = LocalBasis::new(mesh, cell, 1);
    let tri = mesh.cell_points(cell);
    let mut blocks = CellBlocks {
        a: [[0.0; 3]; 3],
        b: vec![[0.0; 3]; dim],
        d: vec![[0.0; 3]; dim],
        c: vec![vec![0.0; dim]; dim],
    };
    let div = rt.divergences();
    let mut q = vec![0.0; dim];
    let mut err = None;
    quad.for_each(&tri, &mut |x, w| {
        if err.is_some() {
            return;
        }
        let (eps, kappa) = match coeffs.check(x) {
            Ok(v) => v,
            Err(e) => {
                err = Some(e);
                return;
            }
        };
        let phi = rt.values(x);
        let u = coeffs.velocity_h.eval_with(&ubasis, cell, x);
        basis.values(x, &mut q);
        let we = w / eps;
        for i in 0..3 {
            for j in 0..3 {
                blocks.a[i][j] += we * (phi[i][0] * phi[j][0] + phi[i][1] * phi[j][1]);
            }
        }
        for m in 0..dim {
            for i in 0..3 {
                blocks.b[m][i] += w * q[m] * div[i];
                blocks.d[m][i] += we * (u[0] * phi[i][0] + u[1] * phi[i][1]) * q[m];
            }
            for n in 0..dim {
                blocks.c[m][n] += w * kappa * q[m] * q[n];
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(blocks),
    }
}

/// Assembles all blocks and both right-hand sides.
pub fn assemble(
    mesh: &Mesh,
    coeffs: &CoefficientSet,
    rhs: ScalarRhs<'_>,
    bdata: &BoundaryData,
    degree: usize,
) -> Result<SaddleSystem, SystemError> {
    assemble_with(
        mesh,
        coeffs,
        rhs,
        bdata,
        degree,
        &CellQuadrature::new(ASSEMBLY_DEGREE),
    )
}

pub fn assemble_with(
    mesh: &Mesh,
    coeffs: &CoefficientSet,
    rhs: ScalarRhs<'_>,
    bdata: &BoundaryData,
    degree: usize,
    quad: &CellQuadrature,
) -> Result<SaddleSystem, SystemError> {
    if degree != 0 {
        return Err(SystemError::UnsupportedDegree(degree));
    }
    if let ScalarRhs::Direct(load) = &rhs {
        if !load.is_density() {
            return Err(SystemError::NotADensity);
        }
    }
    let dofs = DofMap::new(mesh, degree);
    let dim = dofs.scalar_dim();
    let blocks = (0..mesh.num_cells())
        .into_par_iter()
        .map(|c| cell_blocks(mesh, c, coeffs, degree, quad))
        .collect::<Result<Vec<_>, _>>()?;

    let (mut ta, mut tb, mut td, mut tc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (cell, bl) in blocks.iter().enumerate() {
        let facets = mesh.cell_facets(cell);
        for i in 0..3 {
            for j in 0..3 {
                ta.push((facets[i], facets[j], bl.a[i][j]));
            }
        }
        for m in 0..dim {
            let row = dofs.scalar_dof(cell, m);
            for (i, &f) in facets.iter().enumerate() {
                tb.push((row, f, bl.b[m][i]));
                td.push((f, row, bl.d[m][i]));
            }
            for n in 0..dim {
                tc.push((row, dofs.scalar_dof(cell, n), bl.c[m][n]));
            }
        }
    }
    let nf = dofs.num_flux();
    let ns = dofs.num_scalar();

    let mut f = vec![0.0; nf];
    for (i, facet) in mesh.facets().iter().enumerate() {
        if facet.marker == Some(Marker::Dirichlet) {
            f[i] = bdata.dirichlet_moment(mesh, i)? / mesh.facet_length(i);
        }
    }

    let g = match rhs {
        ScalarRhs::Regularized(qg) => {
            let per_cell: Vec<Vec<f64>> = (0..mesh.num_cells())
                .into_par_iter()
                .map(|c| {
                    let basis = LocalBasis::new(mesh, c, degree);
                    let m = basis.mass_matrix(&mesh.cell_points(c));
                    let local = &m * nalgebra::DVector::from_column_slice(qg.cell(c));
                    local.iter().map(|v| -v).collect()
                })
                .collect();
            per_cell.concat()
        }
        ScalarRhs::Direct(load) => {
            let per_cell: Vec<Vec<f64>> = (0..mesh.num_cells())
                .into_par_iter()
                .map(|c| {
                    let basis = LocalBasis::new(mesh, c, degree);
                    let mut out = vec![0.0; dim];
                    load.cell_moments(
                        c,
                        &|x, val, grad| {
                            basis.values(x, val);
                            basis.gradients(x, grad);
                        },
                        &mut out,
                    );
                    out.iter().map(|v| -v).collect()
                })
                .collect();
            per_cell.concat()
        }
    };
    Ok(SaddleSystem {
        a: CsrMatrix::from_triplets(nf, nf, ta),
        b: CsrMatrix::from_triplets(ns, nf, tb),
        d: CsrMatrix::from_triplets(nf, ns, td),
        c: CsrMatrix::from_triplets(ns, ns, tc),
        dofs,
        f,
        g,
        constrained: Vec::new(),
    })
}

/// Records the essential flux condition `ζ·n = ζ_N` on every Neumann facet.
pub fn apply_bc(
    mut system: SaddleSystem,
    mesh: &Mesh,
    bdata: &BoundaryData,
) -> Result<SaddleSystem, SystemError> {
    system.constrained.clear();
    for (i, facet) in mesh.facets().iter().enumerate() {
        if facet.marker == Some(Marker::Neumann) {
            system.constrained.push((i, bdata.neumann_moment(mesh, i)?));
        }
    }
    Ok(system)
}

/// Discrete solution with the achieved relative residual.
#[derive(Debug, Clone)]
pub struct Solution {
    pub flux: FluxField,
    pub scalar: ScalarField,
    pub residual: f64,
}

impl SaddleSystem {
    pub fn size(&self) -> usize {
        self.dofs.total()
    }

    /// `[[A, Bᵀ+D],[B, −C]]` without constraints, and `(F, G)`.
    pub fn global(&self) -> (CsrMatrix, Vec<f64>) {
        let nf = self.dofs.num_flux();
        let n = self.size();
        let mut t: Vec<(usize, usize, f64)> =
            Vec::with_capacity(self.a.nnz() + 2 * self.b.nnz() + self.d.nnz() + self.c.nnz());
        t.extend(self.a.triplets());
        t.extend(self.b.triplets().map(|(r, c, v)| (c, nf + r, v)));
        t.extend(self.d.triplets().map(|(r, c, v)| (r, nf + c, v)));
        t.extend(self.b.triplets().map(|(r, c, v)| (nf + r, c, v)));
        t.extend(self.c.triplets().map(|(r, c, v)| (nf + r, nf + c, -v)));
        let mut rhs = self.f.clone();
        rhs.extend_from_slice(&self.g);
        (CsrMatrix::from_triplets(n, n, t), rhs)
    }

    /// Global matrix and right-hand side with constrained flux DOFs
    /// eliminated: identity rows, zero columns, values lifted into the rhs.
    pub fn constrained_global(&self) -> (CsrMatrix, Vec<f64>) {
        let (m, mut rhs) = self.global();
        if self.constrained.is_empty() {
            return (m, rhs);
        }
        let n = self.size();
        let mut fixed = vec![None; n];
        for &(i, v) in &self.constrained {
            fixed[i] = Some(v);
        }
        let mut t = Vec::with_capacity(m.nnz());
        for (r, c, v) in m.triplets() {
            match (fixed[r], fixed[c]) {
                (Some(_), _) => {}
                (None, Some(val)) => rhs[r] -= v * val,
                (None, None) => t.push((r, c, v)),
            }
        }
        for &(i, v) in &self.constrained {
            t.push((i, i, 1.0));
            rhs[i] = v;
        }
        (CsrMatrix::from_triplets(n, n, t), rhs)
    }

    /// Sparse LU with row pivoting, then iterative refinement until the
    /// relative residual is at most `1e-10`.
    pub fn solve(&self) -> Result<Solution, SystemError> {
        let (m, rhs) = self.constrained_global();
        let n = self.size();
        let triplets: Vec<Triplet<usize, usize, f64>> = m
            .triplets()
            .map(|(r, c, v)| Triplet::new(r, c, v))
            .collect();
        let sparse = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets)
            .map_err(|e| SystemError::SingularSystem(format!("{e:?}")))?;
        let lu = sparse
            .sp_lu()
            .map_err(|e| SystemError::SingularSystem(format!("{e:?}")))?;
        let bnorm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        let solve = |b: &[f64]| -> Vec<f64> {
            let col = Mat::from_fn(n, 1, |i, _| b[i]);
            let x = lu.solve(&col);
            (0..n).map(|i| x[(i, 0)]).collect()
        };
        let mut x = solve(&rhs);
        let residual_of = |x: &[f64]| -> (Vec<f64>, f64) {
            let mx = m.mul_vec(x);
            let r: Vec<f64> = rhs.iter().zip(&mx).map(|(b, y)| b - y).collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            (r, if bnorm > 0.0 { norm / bnorm } else { norm })
        };
        let (mut r, mut rel) = residual_of(&x);
        let mut steps = 0;
        while rel > RESIDUAL_TOL && steps < MAX_REFINEMENT_STEPS {
            let dx = solve(&r);
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
            (r, rel) = residual_of(&x);
            steps += 1;
        }
        if !rel.is_finite() {
            return Err(SystemError::SingularSystem("non-finite solution".into()));
        }
        if rel > RESIDUAL_TOL {
            return Err(SystemError::ResidualTooLarge(rel));
        }
        let nf = self.dofs.num_flux();
        Ok(Solution {
            flux: FluxField::new(x[..nf].to_vec()),
            scalar: ScalarField::new(self.dofs.degree, x[nf..].to_vec()),
            residual: rel,
        })
    }
}

/// `‖u_h‖_{0,4}`, reported and never enforced.
pub fn advection_smallness_report(mesh: &Mesh, coeffs: &CoefficientSet) -> f64 {
    let quad = CellQuadrature::new(ASSEMBLY_DEGREE);
    norm_lp(mesh, 4.0, &quad, &|c, x| {
        let u = coeffs.velocity_h.eval(mesh, c, x);
        u[0].hypot(u[1])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{l2_project_vector, ERROR_DEGREE};
    use crate::loads::LoadFunctional;
    use crate::mesh::{Diagonal, Rectangle};
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn unit(nx: usize) -> Mesh {
        Mesh::structured(nx, Rectangle::UNIT, Diagonal::Forward, |_| {
            Marker::Dirichlet
        })
    }

    fn simple_coeffs(mesh: &Mesh, u: [f64; 2]) -> CoefficientSet {
        let q = CellQuadrature::new(ERROR_DEGREE);
        CoefficientSet {
            eps: Arc::new(|_| 1.0),
            kappa: Arc::new(|_| 1.0),
            eps_bounds: (1.0, 1.0),
            velocity_h: l2_project_vector(mesh, &move |_| u, &q),
            velocity: None,
        }
    }

    fn ones(mesh: &Mesh) -> ScalarField {
        ScalarField::from_cell_values(&vec![1.0; mesh.num_cells()], 0)
    }

    #[test]
    fn single_square_system_size() {
        let m = unit(1);
        let s = assemble(
            &m,
            &simple_coeffs(&m, [0.0, 0.0]),
            ScalarRhs::Regularized(&ones(&m)),
            &BoundaryData::homogeneous(),
            0,
        )
        .unwrap();
        assert_eq!(s.size(), 7);
    }

    #[test]
    fn blocks_without_advection() {
        let m = unit(2);
        let s = assemble(
            &m,
            &simple_coeffs(&m, [0.0, 0.0]),
            ScalarRhs::Regularized(&ones(&m)),
            &BoundaryData {
                dirichlet: Some(Arc::new(|_| 1.0)),
                neumann: None,
            },
            0,
        )
        .unwrap();
        assert!(s.d.values.iter().all(|v| v.abs() < 1e-15));
        // RT0 mass matrix: symmetric, positive diagonal
        for (r, c, v) in s.a.triplets() {
            assert!((v - s.a.get(c, r)).abs() < 1e-14);
            if r == c {
                assert!(v > 0.0);
            }
        }
        for (i, facet) in m.facets().iter().enumerate() {
            let expect = if facet.is_boundary() { 1.0 } else { 0.0 };
            assert!((s.f[i] - expect).abs() < 1e-14);
        }
        // b(φ_F, 1_K) = ±1 on each of the cell's facets
        for c in 0..m.num_cells() {
            let row: Vec<f64> = s.b.row(c).map(|(_, v)| v).collect();
            assert_eq!(row.len(), 3);
            assert!(row.iter().all(|v| (v.abs() - 1.0).abs() < 1e-14));
        }
    }

    #[test]
    fn constant_solution_is_reproduced() {
        let m = unit(4);
        let s = assemble(
            &m,
            &simple_coeffs(&m, [0.0, 0.0]),
            ScalarRhs::Regularized(&ones(&m)),
            &BoundaryData {
                dirichlet: Some(Arc::new(|_| 1.0)),
                neumann: None,
            },
            0,
        )
        .unwrap();
        let sol = s.solve().unwrap();
        assert!(sol.flux.coeffs.iter().all(|v| v.abs() < 1e-10));
        assert!(sol.scalar.coeffs.iter().all(|v| (v - 1.0).abs() < 1e-10));
        assert!(sol.residual <= 1e-10);
    }

    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))
                .unwrap();
            a.swap(k, p);
            b.swap(k, p);
            for i in k + 1..n {
                let f = a[i][k] / a[k][k];
                let (top, bottom) = a.split_at_mut(i);
                for (x, y) in bottom[0][k..n].iter_mut().zip(&top[k][k..n]) {
                    *x -= f * y;
                }
                b[i] -= f * b[k];
            }
        }
        let mut x = vec![0.0; n];
        for k in (0..n).rev() {
            let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
            x[k] = (b[k] - s) / a[k][k];
        }
        x
    }

    #[test]
    fn sparse_solve_matches_dense_elimination() {
        let m = unit(1);
        let coeffs = CoefficientSet {
            eps: Arc::new(|x: Point| 1.0 + 0.5 * x[0]),
            kappa: Arc::new(|x: Point| 2.0 + x[1]),
            eps_bounds: (1.0, 1.5),
            velocity_h: l2_project_vector(
                &m,
                &|x| [0.3 + x[1], -0.2 * x[0]],
                &CellQuadrature::new(ERROR_DEGREE),
            ),
            velocity: None,
        };
        let qg = ScalarField::from_cell_values(&[0.7, -1.1], 0);
        let s = assemble(
            &m,
            &coeffs,
            ScalarRhs::Regularized(&qg),
            &BoundaryData {
                dirichlet: Some(Arc::new(|x: Point| x[0] - 2.0 * x[1])),
                neumann: None,
            },
            0,
        )
        .unwrap();
        let sol = s.solve().unwrap();
        let (a, b) = s.global();
        let x = dense_solve(a.to_dense(), b);
        let sparse: Vec<f64> = sol
            .flux
            .coeffs
            .iter()
            .chain(&sol.scalar.coeffs)
            .copied()
            .collect();
        for (p, q) in sparse.iter().zip(&x) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn neumann_constraints_are_imposed() {
        let m = Mesh::structured(3, Rectangle::UNIT, Diagonal::Forward, |p| {
            if p[0] > 1.0 - 1e-9 {
                Marker::Neumann
            } else {
                Marker::Dirichlet
            }
        });
        let zeta_n = |x: Point, n: [f64; 2]| (PI * x[1]).sin() * n[0];
        let bdata = BoundaryData {
            dirichlet: None,
            neumann: Some(Arc::new(zeta_n)),
        };
        let s = assemble(
            &m,
            &simple_coeffs(&m, [0.5, 0.25]),
            ScalarRhs::Regularized(&ones(&m)),
            &bdata,
            0,
        )
        .unwrap();
        let s = apply_bc(s, &m, &bdata).unwrap();
        assert_eq!(s.constrained.len(), 3);
        let sol = s.solve().unwrap();
        for &(i, v) in &s.constrained {
            let [a, b] = m.facets()[i].vertices.map(|v| m.vertices()[v]);
            let oracle =
                crate::fem::LineRule::gauss(20).integrate_segment(a, b, |x| (PI * x[1]).sin());
            assert!((v - oracle).abs() < 1e-10);
            assert!((sol.flux.coeffs[i] - v).abs() < 1e-12);
        }
        let hom = apply_bc(
            assemble(
                &m,
                &simple_coeffs(&m, [0.0, 0.0]),
                ScalarRhs::Regularized(&ones(&m)),
                &BoundaryData::homogeneous(),
                0,
            )
            .unwrap(),
            &m,
            &BoundaryData::homogeneous(),
        )
        .unwrap();
        assert!(hom.constrained.iter().all(|&(_, v)| v == 0.0));
        let none = apply_bc(
            assemble(
                &unit(2),
                &simple_coeffs(&unit(2), [0.0, 0.0]),
                ScalarRhs::Regularized(&ones(&unit(2))),
                &BoundaryData::homogeneous(),
                0,
            )
            .unwrap(),
            &unit(2),
            &BoundaryData::homogeneous(),
        )
        .unwrap();
        assert!(none.constrained.is_empty());
    }

    #[test]
    fn discrete_equations_hold_by_independent_quadrature() {
        let m = Mesh::structured(4, Rectangle::UNIT, Diagonal::Backward, |p| {
            if p[1] > 1.0 - 1e-9 {
                Marker::Neumann
            } else {
                Marker::Dirichlet
            }
        });
        let q = CellQuadrature::new(ERROR_DEGREE);
        let u = |x: Point| [(PI * x[1]).sin(), x[0] * x[0]];
        let coeffs = CoefficientSet {
            // 1/ε polynomial so the assembly quadrature is exact
            eps: Arc::new(|x: Point| 1.0 / (1.0 + x[0] * x[1])),
            kappa: Arc::new(|x: Point| 1.0 + x[0]),
            eps_bounds: (0.5, 1.0),
            velocity_h: l2_project_vector(&m, &u, &q),
            velocity: None,
        };
        let qg = crate::fem::l2_project_scalar(&m, &|x| (3.0 * x[0]).cos(), 0, &q);
        let psi_d = |x: Point| x[0] + x[1];
        let bdata = BoundaryData {
            dirichlet: Some(Arc::new(psi_d)),
            neumann: Some(Arc::new(|x: Point, _| x[0])),
        };
        let s = apply_bc(
            assemble(&m, &coeffs, ScalarRhs::Regularized(&qg), &bdata, 0).unwrap(),
            &m,
            &bdata,
        )
        .unwrap();
        let sol = s.solve().unwrap();
        // scalar equation: ∫_K div ζ_h − κ ψ_h + Qg = 0
        for c in 0..m.num_cells() {
            let tri = m.cell_points(c);
            let div = sol.flux.div(&m, c);
            let r = q.integrate(&tri, |x| {
                div - (1.0 + x[0]) * sol.scalar.cell(c)[0] + qg.cell(c)[0]
            });
            assert!(r.abs() < 1e-9, "cell {c}: {r}");
        }
        // flux equation for free facets
        let fixed: Vec<usize> = s.constrained.iter().map(|&(i, _)| i).collect();
        for f in 0..m.num_facets() {
            if fixed.contains(&f) {
                continue;
            }
            let facet = &m.facets()[f];
            let mut r = 0.0;
            for c in [Some(facet.cells.0), facet.cells.1].into_iter().flatten() {
                let rt = Rt0Cell::new(&m, c).unwrap();
                let local = m.cell_facets(c).iter().position(|&g| g == f).unwrap();
                let psi = sol.scalar.cell(c)[0];
                r += q.integrate(&m.cell_points(c), |x| {
                    let phi = rt.values(x)[local];
                    let z = sol.flux.eval(&m, c, x);
                    let uh = coeffs.velocity_h.eval(&m, c, x);
                    let e = 1.0 / (1.0 + x[0] * x[1]);
                    (z[0] * phi[0] + z[1] * phi[1]) / e
                        + psi * rt.divergences()[local]
                        + (uh[0] * phi[0] + uh[1] * phi[1]) * psi / e
                });
            }
            if facet.marker == Some(Marker::Dirichlet) {
                let [a, b] = facet.vertices.map(|v| m.vertices()[v]);
                r -= crate::fem::LineRule::gauss(8).integrate_segment(a, b, psi_d)
                    / m.facet_length(f);
            }
            assert!(r.abs() < 1e-9, "facet {f}: {r}");
        }
    }

    #[test]
    fn coefficient_bounds_are_checked() {
        let m = unit(1);
        let mut coeffs = simple_coeffs(&m, [0.0, 0.0]);
        coeffs.kappa = Arc::new(|x: Point| x[0] - 0.5);
        let err = assemble(
            &m,
            &coeffs,
            ScalarRhs::Regularized(&ones(&m)),
            &BoundaryData::homogeneous(),
            0,
        );
        assert!(matches!(
            err,
            Err(SystemError::CoefficientBoundViolation { name: "kappa", .. })
        ));
    }

    #[test]
    fn direct_rhs_requires_a_density() {
        let m = unit(2);
        let g = LoadFunctional::PointDirac {
            point: [0.5, 0.5],
            weight: 1.0,
        };
        let ev = g.bind(&m, CellQuadrature::new(ERROR_DEGREE)).unwrap();
        let r = assemble(
            &m,
            &simple_coeffs(&m, [0.0, 0.0]),
            ScalarRhs::Direct(&ev),
            &BoundaryData::homogeneous(),
            0,
        );
        assert!(matches!(r, Err(SystemError::NotADensity)));
    }

    #[test]
    fn assembly_is_independent_of_cell_order() {
        // reversing the cell list permutes facets and cells but not entries
        let m = unit(3);
        let cells: Vec<[usize; 3]> = m.cells().iter().rev().copied().collect();
        let m2 = Mesh::new(m.vertices().to_vec(), cells, &m.boundary_facets()).unwrap();
        let build = |mesh: &Mesh| {
            assemble(
                mesh,
                &simple_coeffs(mesh, [0.4, -0.3]),
                ScalarRhs::Regularized(&ones(mesh)),
                &BoundaryData::homogeneous(),
                0,
            )
            .unwrap()
        };
        let (s1, s2) = (build(&m), build(&m2));
        let key = |mesh: &Mesh, f: usize| mesh.facets()[f].vertices;
        for (r, c, v) in s1.a.triplets() {
            let r2 = (0..m2.num_facets())
                .find(|&g| key(&m2, g) == key(&m, r))
                .unwrap();
            let c2 = (0..m2.num_facets())
                .find(|&g| key(&m2, g) == key(&m, c))
                .unwrap();
            // orientation may flip with the cell order
            let sign = m.facet_normal(r)[0] * m2.facet_normal(r2)[0]
                + m.facet_normal(r)[1] * m2.facet_normal(r2)[1];
            let sign2 = m.facet_normal(c)[0] * m2.facet_normal(c2)[0]
                + m.facet_normal(c)[1] * m2.facet_normal(c2)[1];
            assert!((v - sign * sign2 * s2.a.get(r2, c2)).abs() < 1e-13);
        }
    }

    #[test]
    fn velocity_norm_report() {
        let m = unit(4);
        assert_eq!(
            advection_smallness_report(&m, &simple_coeffs(&m, [0.0, 0.0])),
            0.0
        );
        assert!(
            (advection_smallness_report(&m, &simple_coeffs(&m, [1.0, 0.0])) - 1.0).abs() < 1e-12
        );
        let u = |x: Point| {
            [
                (PI * x[0]).cos() * (PI * x[1]).sin(),
                -(PI * x[0]).sin() * (PI * x[1]).cos(),
            ]
        };
        let report = |nx: usize| {
            let m = unit(nx);
            let mut c = simple_coeffs(&m, [0.0, 0.0]);
            c.velocity_h = l2_project_vector(&m, &u, &CellQuadrature::new(ERROR_DEGREE));
            advection_smallness_report(&m, &c)
        };
        let r = report(32) / report(16);
        assert!((0.95..=1.05).contains(&r));
    }
}
