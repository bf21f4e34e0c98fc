//! Reference-element machinery, DOF bookkeeping, discrete fields, L²
//! projections and Lebesgue norms.

pub mod basis;
pub mod fields;
pub mod quadrature;

use rayon::prelude::*;
use thiserror::Error;

pub use basis::{pk_dim, DualBubbles, LocalBasis, Rt0Cell};
pub use fields::{FluxField, ScalarField, VectorField};
pub use quadrature::{CellQuadrature, LineRule, SingularLine, TriangleRule};

use crate::mesh::{Mesh, Point, VertexClass};

/// Quadrature degree for bilinear-form assembly.
pub const ASSEMBLY_DEGREE: usize = 6;
/// Quadrature degree for error norms and manufactured loads.
pub const ERROR_DEGREE: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("cell {cell} has non-positive area")]
    DegenerateCell { cell: usize },
    #[error("local bubble Gram matrix of cell {cell} is numerically singular")]
    SingularGram { cell: usize },
}

/// Global numbering: one RT0 flux DOF per facet, `dim P_k` scalar DOFs per
/// cell (cell-major) and one hat per interior or Neumann vertex.
#[derive(Debug, Clone)]
pub struct DofMap {
    pub num_facets: usize,
    pub num_cells: usize,
    pub degree: usize,
    pub hats: Vec<Option<usize>>,
    pub num_hats: usize,
}

impl DofMap {
    pub fn new(mesh: &Mesh, degree: usize) -> Self {
        let mut num_hats = 0;
        let hats = mesh
            .vertex_classes()
            .into_iter()
            .map(|c| {
                (c != VertexClass::Dirichlet).then(|| {
                    num_hats += 1;
                    num_hats - 1
                })
            })
            .collect();
        Self {
            num_facets: mesh.num_facets(),
            num_cells: mesh.num_cells(),
            degree,
            hats,
            num_hats,
        }
    }

    pub fn scalar_dim(&self) -> usize {
        pk_dim(self.degree)
    }

    pub fn num_flux(&self) -> usize {
        self.num_facets
    }

    pub fn num_scalar(&self) -> usize {
        self.num_cells * self.scalar_dim()
    }

    pub fn total(&self) -> usize {
        self.num_flux() + self.num_scalar()
    }

    pub fn scalar_dof(&self, cell: usize, j: usize) -> usize {
        cell * self.scalar_dim() + j
    }
}

/// Cellwise L² projection of `f` onto discontinuous P_k.
pub fn l2_project_scalar(
    mesh: &Mesh,
    f: &(dyn Fn(Point) -> f64 + Sync),
    k: usize,
    quad: &CellQuadrature,
) -> ScalarField {
    let dim = pk_dim(k);
    let blocks: Vec<Vec<f64>> = (0..mesh.num_cells())
        .into_par_iter()
        .map(|c| {
            let basis = LocalBasis::new(mesh, c, k);
            let tri = mesh.cell_points(c);
            let mass = basis.mass_matrix(&tri);
            let mut rhs = nalgebra::DVector::zeros(dim);
            let mut q = vec![0.0; dim];
            quad.for_each(&tri, &mut |x, w| {
                let fx = f(x);
                basis.values(x, &mut q);
                for i in 0..dim {
                    rhs[i] += w * fx * q[i];
                }
            });
            mass.lu()
                .solve(&rhs)
                .expect("local mass matrix of a valid cell is invertible")
                .as_slice()
                .to_vec()
        })
        .collect();
    ScalarField::new(k, blocks.concat())
}

/// Componentwise L² projection of `u` onto discontinuous `[P1]²`.
pub fn l2_project_vector(
    mesh: &Mesh,
    u: &(dyn Fn(Point) -> [f64; 2] + Sync),
    quad: &CellQuadrature,
) -> VectorField {
    let ux = l2_project_scalar(mesh, &|x| u(x)[0], 1, quad);
    let uy = l2_project_scalar(mesh, &|x| u(x)[1], 1, quad);
    VectorField::from_components(ux, uy)
}

/// `(Σ_K ∫_K |v|^p)^{1/p}` where `value(cell, x)` returns `|v(x)|` (or the
/// signed scalar value).
pub fn norm_lp(
    mesh: &Mesh,
    p: f64,
    quad: &CellQuadrature,
    value: &(dyn Fn(usize, Point) -> f64 + Sync),
) -> f64 {
    let parts: Vec<f64> = (0..mesh.num_cells())
        .into_par_iter()
        .map(|c| quad.integrate(&mesh.cell_points(c), |x| value(c, x).abs().powf(p)))
        .collect();
    parts.iter().sum::<f64>().powf(1.0 / p)
}
