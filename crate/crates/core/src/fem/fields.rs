//! Coefficient vectors over the discrete spaces.

use super::basis::{pk_dim, LocalBasis, Rt0Cell};
use super::quadrature::LineRule;
use crate::mesh::{Mesh, Point};

/// Discontinuous P_k field, cell-major coefficients in the local scaled
/// monomial basis.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub degree: usize,
    pub coeffs: Vec<f64>,
}

impl ScalarField {
    pub fn new(degree: usize, coeffs: Vec<f64>) -> Self {
        assert_eq!(coeffs.len() % pk_dim(degree), 0);
        Self { degree, coeffs }
    }

    pub fn zeros(mesh: &Mesh, degree: usize) -> Self {
        Self::new(degree, vec![0.0; mesh.num_cells() * pk_dim(degree)])
    }

    /// Piecewise constant field embedded into P_k.
    pub fn from_cell_values(values: &[f64], degree: usize) -> Self {
        let dim = pk_dim(degree);
        let mut coeffs = vec![0.0; values.len() * dim];
        for (c, &v) in values.iter().enumerate() {
            coeffs[c * dim] = v;
        }
        Self::new(degree, coeffs)
    }

    pub fn dim(&self) -> usize {
        pk_dim(self.degree)
    }

    pub fn num_cells(&self) -> usize {
        self.coeffs.len() / self.dim()
    }

    pub fn cell(&self, c: usize) -> &[f64] {
        let d = self.dim();
        &self.coeffs[c * d..(c + 1) * d]
    }

    pub fn cell_mut(&mut self, c: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.coeffs[c * d..(c + 1) * d]
    }

    pub fn eval(&self, mesh: &Mesh, cell: usize, x: Point) -> f64 {
        LocalBasis::new(mesh, cell, self.degree).eval(self.cell(cell), x)
    }

    pub fn eval_with(&self, basis: &LocalBasis, cell: usize, x: Point) -> f64 {
        basis.eval(self.cell(cell), x)
    }

    pub fn grad(&self, mesh: &Mesh, cell: usize, x: Point) -> [f64; 2] {
        LocalBasis::new(mesh, cell, self.degree).eval_grad(self.cell(cell), x)
    }

    /// `∫_K v` for every cell.
    pub fn cell_integrals(&self, mesh: &Mesh) -> Vec<f64> {
        (0..self.num_cells())
            .map(|c| {
                let basis = LocalBasis::new(mesh, c, self.degree);
                let tri = mesh.cell_points(c);
                super::TriangleRule::get(self.degree)
                    .integrate(&tri, |x| basis.eval(self.cell(c), x))
            })
            .collect()
    }
}

/// RT0 field: one normal-flux moment per facet in its global orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxField {
    pub coeffs: Vec<f64>,
}

impl FluxField {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn zeros(mesh: &Mesh) -> Self {
        Self::new(vec![0.0; mesh.num_facets()])
    }

    /// Canonical interpolant: `∫_F v·n ds` per facet.
    pub fn interpolate(mesh: &Mesh, v: &dyn Fn(Point) -> [f64; 2], line: &LineRule) -> Self {
        let coeffs = (0..mesh.num_facets())
            .map(|f| {
                let n = mesh.facet_normal(f);
                let [a, b] = mesh.facets()[f].vertices.map(|i| mesh.vertices()[i]);
                line.integrate_segment(a, b, |x| {
                    let val = v(x);
                    val[0] * n[0] + val[1] * n[1]
                })
            })
            .collect();
        Self::new(coeffs)
    }

    pub fn local(&self, mesh: &Mesh, cell: usize) -> [f64; 3] {
        mesh.cell_facets(cell).map(|f| self.coeffs[f])
    }

    pub fn eval_with(&self, rt: &Rt0Cell, local: &[f64; 3], x: Point) -> [f64; 2] {
        let phi = rt.values(x);
        (0..3).fold([0.0, 0.0], |acc, i| {
            [acc[0] + local[i] * phi[i][0], acc[1] + local[i] * phi[i][1]]
        })
    }

    pub fn eval(&self, mesh: &Mesh, cell: usize, x: Point) -> [f64; 2] {
        let rt = Rt0Cell::new(mesh, cell).expect("valid mesh cell");
        self.eval_with(&rt, &self.local(mesh, cell), x)
    }

    /// Constant divergence on `cell`.
    pub fn div(&self, mesh: &Mesh, cell: usize) -> f64 {
        let rt = Rt0Cell::new(mesh, cell).expect("valid mesh cell");
        let local = self.local(mesh, cell);
        rt.divergences().iter().zip(local).map(|(d, c)| d * c).sum()
    }
}

/// Discontinuous `[P1]²` field: per cell, three x-coefficients then three
/// y-coefficients in the local degree-1 basis.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub coeffs: Vec<f64>,
}

impl VectorField {
    pub fn from_components(ux: ScalarField, uy: ScalarField) -> Self {
        assert_eq!(ux.degree, 1);
        assert_eq!(uy.degree, 1);
        let n = ux.num_cells();
        let mut coeffs = Vec::with_capacity(6 * n);
        for c in 0..n {
            coeffs.extend_from_slice(ux.cell(c));
            coeffs.extend_from_slice(uy.cell(c));
        }
        Self { coeffs }
    }

    pub fn zeros(mesh: &Mesh) -> Self {
        Self {
            coeffs: vec![0.0; 6 * mesh.num_cells()],
        }
    }

    pub fn eval_with(&self, basis: &LocalBasis, cell: usize, x: Point) -> [f64; 2] {
        let c = &self.coeffs[6 * cell..6 * cell + 6];
        [basis.eval(&c[..3], x), basis.eval(&c[3..], x)]
    }

    pub fn eval(&self, mesh: &Mesh, cell: usize, x: Point) -> [f64; 2] {
        self.eval_with(&LocalBasis::new(mesh, cell, 1), cell, x)
    }
}
