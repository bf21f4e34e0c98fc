//! Element-local Stenberg-type postprocess.
//!
//! On each cell, find `ψ♯ ∈ P_{k+1}(K)` with
//! `∫ ε∇ψ♯·∇v = ∫ ζ_h·∇v + ∫ (u_h·∇v) ψ_h` for all `v ∈ P_{k+1}(K)` and
//! `∫_K ψ♯ = ∫_K ψ_h`, using one Lagrange multiplier for the mean.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::fem::{
    pk_dim, CellQuadrature, FluxField, LocalBasis, Rt0Cell, ScalarField, ASSEMBLY_DEGREE,
};
use crate::mesh::Mesh;
use crate::system::CoefficientSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PostprocessError {
    #[error("local postprocess matrix of cell {cell} is singular")]
    LocalSingular { cell: usize },
}

/// Solves the local problem on one cell; returns the P_{k+1} coefficients.
pub fn stenberg_cell(
    mesh: &Mesh,
    cell: usize,
    coeffs: &CoefficientSet,
    flux: &FluxField,
    scalar: &ScalarField,
    quad: &CellQuadrature,
) -> Result<Vec<f64>, PostprocessError> {
    let k = scalar.degree;
    let n = pk_dim(k + 1);
    let singular = PostprocessError::LocalSingular { cell };
    let rt = Rt0Cell::new(mesh, cell).map_err(|_| singular.clone())?;
    let local_flux = flux.local(mesh, cell);
    let basis = LocalBasis::new(mesh, cell, k + 1);
    let sbasis = LocalBasis::new(mesh, cell, k);
    let ubasis = LocalBasis::new(mesh, cell, 1);
    let tri = mesh.cell_points(cell);

    let mut mat = DMatrix::<f64>::zeros(n + 1, n + 1);
    let mut rhs = DVector::<f64>::zeros(n + 1);
    let mut q = vec![0.0; n];
    let mut dq = vec![[0.0; 2]; n];
    let mut bad_eps = false;
    quad.for_each(&tri, &mut |x, w| {
        let eps = (coeffs.eps)(x);
        bad_eps |= !(eps > 0.0);
        basis.values(x, &mut q);
        basis.gradients(x, &mut dq);
        let z = flux.eval_with(&rt, &local_flux, x);
        let u = coeffs.velocity_h.eval_with(&ubasis, cell, x);
        let psi = scalar.eval_with(&sbasis, cell, x);
        let t = [z[0] + u[0] * psi, z[1] + u[1] * psi];
        for i in 0..n {
            for j in 0..n {
                mat[(i, j)] += w * eps * (dq[i][0] * dq[j][0] + dq[i][1] * dq[j][1]);
            }
            mat[(i, n)] += w * q[i];
            mat[(n, i)] += w * q[i];
            rhs[i] += w * (t[0] * dq[i][0] + t[1] * dq[i][1]);
        }
        rhs[n] += w * psi;
    });
    if bad_eps {
        return Err(singular);
    }
    let sol = mat.lu().solve(&rhs).ok_or(singular.clone())?;
    if !sol.iter().all(|v| v.is_finite()) {
        return Err(singular);
    }
    Ok(sol.as_slice()[..n].to_vec())
}

/// `ψ♯_h` on every cell.
pub fn stenberg(
    mesh: &Mesh,
    coeffs: &CoefficientSet,
    flux: &FluxField,
    scalar: &ScalarField,
) -> Result<ScalarField, PostprocessError> {
    let quad = CellQuadrature::new(ASSEMBLY_DEGREE.max(2 * scalar.degree + 2));
    let blocks = (0..mesh.num_cells())
        .into_par_iter()
        .map(|c| stenberg_cell(mesh, c, coeffs, flux, scalar, &quad))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ScalarField::new(scalar.degree + 1, blocks.concat()))
}

/// Largest difference of cell means, relative to `max(1, |mean ψ_h|)`.
pub fn mean_constraint_residual(mesh: &Mesh, post: &ScalarField, scalar: &ScalarField) -> f64 {
    let a = post.cell_integrals(mesh);
    let b = scalar.cell_integrals(mesh);
    a.iter()
        .zip(&b)
        .enumerate()
        .map(|(c, (x, y))| {
            let area = mesh.cell_area(c);
            ((x - y) / area).abs() / (y / area).abs().max(1.0)
        })
        .fold(0.0, f64::max)
}
