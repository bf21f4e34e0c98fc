//! Load regularisation `Q = J_h′ + (1 − J_h)′ B_h′` onto discontinuous P_k.
//!
//! `J_h` is a weighted Clément quasi-interpolator into continuous P1 (zero on
//! the Dirichlet boundary) and `B_h` a bubble projector built from the dual
//! bubbles of each cell.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::fem::basis::{hat_gradients, DualBubbles, LocalBasis};
use crate::fem::quadrature::{CellQuadrature, TriangleRule};
use crate::fem::{pk_dim, FemError, ScalarField};
use crate::loads::LoadEvaluator;
use crate::mesh::{barycentric, vertex_patches, Mesh, MeshError, PatchKind, Point};

#[derive(Debug, Error)]
pub enum RegularizerError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("cell centroids in the patch of vertex {vertex} are collinear")]
    CollinearCentroids { vertex: usize },
}

/// Weights `α_{z,K}` of one vertex; `ψ_z = α_{z,K} / |K|` on `K ∈ T_z`.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexWeights {
    pub vertex: usize,
    pub kind: PatchKind,
    pub cells: Vec<usize>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClementWeights {
    pub weights: Vec<VertexWeights>,
    /// Position of each vertex in `weights`, `None` for Dirichlet vertices.
    pub index: Vec<Option<usize>>,
}

impl ClementWeights {
    /// `ψ_z` as `(cell, value)` pairs.
    pub fn psi(&self, mesh: &Mesh, vertex: usize) -> Vec<(usize, f64)> {
        let Some(i) = self.index[vertex] else {
            return Vec::new();
        };
        let w = &self.weights[i];
        w.cells
            .iter()
            .zip(&w.alpha)
            .map(|(&c, &a)| (c, a / mesh.cell_area(c)))
            .collect()
    }
}

/// Minimum-norm `α` with `Σ α_K s_K = z` and `Σ α_K = 1`.
///
/// Solved in coordinates centred at `z` and scaled by the patch size, which
/// leaves the affine solution set (and hence the minimum-norm point)
/// unchanged.
pub fn min_norm_weights(centroids: &[Point], z: Point) -> Option<Vec<f64>> {
    let scale = centroids
        .iter()
        .map(|s| (s[0] - z[0]).hypot(s[1] - z[1]))
        .fold(0.0, f64::max);
    if !(scale > 0.0) || centroids.len() < 3 {
        return None;
    }
    let rows: Vec<Vector3<f64>> = centroids
        .iter()
        .map(|s| Vector3::new((s[0] - z[0]) / scale, (s[1] - z[1]) / scale, 1.0))
        .collect();
    let mut gram = Matrix3::zeros();
    for r in &rows {
        gram += r * r.transpose();
    }
    let sv = gram.singular_values();
    if sv.min() <= 1e-12 * sv.max() {
        return None;
    }
    let y = gram.lu().solve(&Vector3::new(0.0, 0.0, 1.0))?;
    Some(rows.iter().map(|r| r.dot(&y)).collect())
}

pub fn compute_weights(mesh: &Mesh) -> Result<ClementWeights, RegularizerError> {
    let patches = vertex_patches(mesh)?;
    let weights = patches
        .into_par_iter()
        .map(|p| {
            let z = mesh.vertices()[p.vertex];
            let centroids: Vec<Point> = p.cells.iter().map(|&c| mesh.cell_centroid(c)).collect();
            let alpha = min_norm_weights(&centroids, z)
                .ok_or(RegularizerError::CollinearCentroids { vertex: p.vertex })?;
            Ok(VertexWeights {
                vertex: p.vertex,
                kind: p.kind,
                cells: p.cells,
                alpha,
            })
        })
        .collect::<Result<Vec<_>, RegularizerError>>()?;
    let mut index = vec![None; mesh.num_vertices()];
    for (i, w) in weights.iter().enumerate() {
        index[w.vertex] = Some(i);
    }
    for w in weights.iter().filter(|w| w.kind != PatchKind::Interior) {
        let sup = w.alpha.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let area: f64 = w.cells.iter().map(|&c| mesh.cell_area(c)).sum();
        let cell = w.cells[0];
        log::debug!(
            "Neumann vertex {}: max |psi_z| * |patch| = {:.3}",
            w.vertex,
            sup / mesh.cell_area(cell) * area
        );
    }
    Ok(ClementWeights { weights, index })
}

/// `Q′v` represented as `J_h v + B_h (v − J_h v)`.
#[derive(Debug, Clone)]
pub struct AdjointImage {
    /// Nodal values of `J_h v` (zero at Dirichlet vertices).
    pub nodal: Vec<f64>,
    /// Per cell, coefficients of the dual bubbles `χ_{K,j}`.
    pub bubble: Vec<f64>,
}

/// The assembled operator for one mesh and polynomial degree.
pub struct Regularizer<'a> {
    mesh: &'a Mesh,
    degree: usize,
    weights: ClementWeights,
    bubbles: Vec<DualBubbles>,
}

impl<'a> Regularizer<'a> {
    pub fn new(mesh: &'a Mesh, degree: usize) -> Result<Self, RegularizerError> {
        let weights = compute_weights(mesh)?;
        let bubbles = (0..mesh.num_cells())
            .into_par_iter()
            .map(|c| DualBubbles::new(mesh, c, degree))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            mesh,
            degree,
            weights,
            bubbles,
        })
    }

    pub fn weights(&self) -> &ClementWeights {
        &self.weights
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn bubbles(&self, cell: usize) -> &DualBubbles {
        &self.bubbles[cell]
    }

    /// `Qg` as a discontinuous P_k field.
    pub fn apply(&self, g: &LoadEvaluator<'_>) -> ScalarField {
        let mesh = self.mesh;
        let dim = pk_dim(self.degree);
        // per cell: ⟨g, λ_i⟩ for the three local hats, then ⟨g, χ_j⟩
        let moments: Vec<Vec<f64>> = (0..mesh.num_cells())
            .into_par_iter()
            .map(|c| {
                let tri = mesh.cell_points(c);
                let grads = hat_gradients(&tri);
                let bub = &self.bubbles[c];
                let mut out = vec![0.0; 3 + dim];
                g.cell_moments(
                    c,
                    &|x, val, grad| {
                        let l = barycentric(&tri, x);
                        val[..3].copy_from_slice(&l);
                        grad[..3].copy_from_slice(&grads);
                        for j in 0..dim {
                            let (v, d) = bub.eval(j, x);
                            val[3 + j] = v;
                            grad[3 + j] = d;
                        }
                    },
                    &mut out,
                );
                out
            })
            .collect();

        let w = ScalarField::new(
            self.degree,
            moments
                .iter()
                .flat_map(|m| m[3..].iter().copied())
                .collect(),
        );

        // ∫_K w λ_i, exact at degree k + 1
        let w_hat: Vec<[f64; 3]> = (0..mesh.num_cells())
            .into_par_iter()
            .map(|c| {
                let tri = mesh.cell_points(c);
                let basis = LocalBasis::new(mesh, c, self.degree);
                let mut acc = [0.0; 3];
                TriangleRule::get(self.degree + 1).for_each(&tri, |x, wt| {
                    let v = basis.eval(w.cell(c), x) * wt;
                    let l = barycentric(&tri, x);
                    for i in 0..3 {
                        acc[i] += v * l[i];
                    }
                });
                acc
            })
            .collect();

        let mut nodal = vec![0.0; mesh.num_vertices()];
        for c in 0..mesh.num_cells() {
            for (i, &v) in mesh.cells()[c].iter().enumerate() {
                nodal[v] += moments[c][i] - w_hat[c][i];
            }
        }

        let mut q = w;
        for vw in &self.weights.weights {
            let s = nodal[vw.vertex];
            for (&c, &a) in vw.cells.iter().zip(&vw.alpha) {
                q.cell_mut(c)[0] += s * a / mesh.cell_area(c);
            }
        }
        q
    }

    /// `Q′v` for a function `v` vanishing on the Dirichlet boundary.
    pub fn apply_adjoint(
        &self,
        v: &(dyn Fn(Point) -> f64 + Sync),
        quad: &CellQuadrature,
    ) -> AdjointImage {
        let mesh = self.mesh;
        let dim = pk_dim(self.degree);
        let integrals: Vec<f64> = (0..mesh.num_cells())
            .into_par_iter()
            .map(|c| quad.integrate(&mesh.cell_points(c), v))
            .collect();
        let mut nodal = vec![0.0; mesh.num_vertices()];
        for vw in &self.weights.weights {
            nodal[vw.vertex] = vw
                .cells
                .iter()
                .zip(&vw.alpha)
                .map(|(&c, &a)| a / mesh.cell_area(c) * integrals[c])
                .sum();
        }
        let bubble: Vec<f64> = (0..mesh.num_cells())
            .into_par_iter()
            .flat_map_iter(|c| {
                let tri = mesh.cell_points(c);
                let basis = LocalBasis::new(mesh, c, self.degree);
                let local = mesh.cells()[c].map(|z| nodal[z]);
                let mut q = vec![0.0; dim];
                let mut acc = vec![0.0; dim];
                quad.for_each(&tri, &mut |x, w| {
                    let l = barycentric(&tri, x);
                    let r = v(x) - (l[0] * local[0] + l[1] * local[1] + l[2] * local[2]);
                    basis.values(x, &mut q);
                    for j in 0..dim {
                        acc[j] += w * r * q[j];
                    }
                });
                acc
            })
            .collect();
        AdjointImage { nodal, bubble }
    }

    /// Pointwise value of an adjoint image on `cell`.
    pub fn eval_adjoint(&self, image: &AdjointImage, cell: usize, x: Point) -> f64 {
        let tri = self.mesh.cell_points(cell);
        let l = barycentric(&tri, x);
        let dim = pk_dim(self.degree);
        let hats: f64 = self.mesh.cells()[cell]
            .iter()
            .zip(l)
            .map(|(&z, li)| image.nodal[z] * li)
            .sum();
        let bub = &self.bubbles[cell];
        let b: f64 = (0..dim)
            .map(|j| image.bubble[cell * dim + j] * bub.eval(j, x).0)
            .sum();
        hats + b
    }

    /// Dense `dim × dim` local mass matrix, for callers needing `∫ Qg q`.
    pub fn local_mass(&self, cell: usize) -> DMatrix<f64> {
        LocalBasis::new(self.mesh, cell, self.degree).mass_matrix(&self.mesh.cell_points(cell))
    }
}

/// `∫_K f q_j` for every cell and local basis function, as one vector.
pub fn cell_moments_of(mesh: &Mesh, field: &ScalarField) -> DVector<f64> {
    let dim = field.dim();
    let mut out = DVector::zeros(field.coeffs.len());
    for c in 0..mesh.num_cells() {
        let basis = LocalBasis::new(mesh, c, field.degree);
        let m = basis.mass_matrix(&mesh.cell_points(c));
        let local = m * DVector::from_column_slice(field.cell(c));
        out.rows_mut(c * dim, dim).copy_from(&local);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{l2_project_scalar, norm_lp, ERROR_DEGREE};
    use crate::loads::LoadFunctional;
    use crate::mesh::{Diagonal, Marker, Rectangle};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn dirichlet(nx: usize) -> Mesh {
        Mesh::structured(nx, Rectangle::UNIT, Diagonal::Forward, |_| {
            Marker::Dirichlet
        })
    }

    fn mixed(nx: usize) -> Mesh {
        Mesh::structured(nx, Rectangle::UNIT, Diagonal::Forward, |p| {
            if p[0] > 1.0 - 1e-9 {
                Marker::Neumann
            } else {
                Marker::Dirichlet
            }
        })
    }

    fn quad() -> CellQuadrature {
        CellQuadrature::new(ERROR_DEGREE)
    }

    #[test]
    fn symmetric_patch_has_uniform_weights() {
        let m = dirichlet(2);
        let w = compute_weights(&m).unwrap();
        assert_eq!(w.weights.len(), 1);
        for a in &w.weights[0].alpha {
            assert!((a - 1.0 / 6.0).abs() < 1e-14);
        }
    }

    #[test]
    fn weight_constraints_hold_and_target_own_vertex() {
        let m = mixed(4);
        let w = compute_weights(&m).unwrap();
        let mut redirected = 0;
        for vw in &w.weights {
            let z = m.vertices()[vw.vertex];
            let mut s = [0.0, 0.0];
            let mut total = 0.0;
            for (&c, &a) in vw.cells.iter().zip(&vw.alpha) {
                let g = m.cell_centroid(c);
                s[0] += a * g[0];
                s[1] += a * g[1];
                total += a;
            }
            assert!((total - 1.0).abs() < 1e-12);
            assert!((s[0] - z[0]).abs().max((s[1] - z[1]).abs()) < 1e-12 * m.h_max());
            if let PatchKind::Redirected { .. } = vw.kind {
                redirected += 1;
                assert!(vw.alpha.iter().any(|&a| a < 0.0));
            }
        }
        assert_eq!(redirected, 3);
    }

    #[test]
    fn collinear_centroids_are_rejected() {
        let s = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        assert!(min_norm_weights(&s, [0.5, 0.5]).is_none());
        assert!(min_norm_weights(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [0.2, 0.2]).is_some());
    }

    fn random_field(m: &Mesh, k: usize, rng: &mut ChaCha8Rng) -> ScalarField {
        let n = m.num_cells() * pk_dim(k);
        ScalarField::new(k, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn q_is_a_projection_onto_the_discrete_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for m in [dirichlet(2), mixed(3), dirichlet(4).uniform_refine()] {
            for k in 0..2 {
                let reg = Regularizer::new(&m, k).unwrap();
                for _ in 0..3 {
                    let phi = random_field(&m, k, &mut rng);
                    let g = LoadFunctional::Piecewise(phi.clone());
                    let q = reg.apply(&g.bind(&m, quad()).unwrap());
                    for (a, b) in q.coeffs.iter().zip(&phi.coeffs) {
                        assert!((a - b).abs() < 1e-11, "k={k}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn q_reproduces_constants() {
        let m = mixed(3);
        let reg = Regularizer::new(&m, 0).unwrap();
        let g = LoadFunctional::density(|_| 1.0);
        let q = reg.apply(&g.bind(&m, quad()).unwrap());
        assert!(q.coeffs.iter().all(|c| (c - 1.0).abs() < 1e-12));
    }

    #[test]
    fn point_dirac_at_vertex_maps_to_its_weight_function() {
        let m = dirichlet(4);
        let reg = Regularizer::new(&m, 0).unwrap();
        let z = m.vertices().iter().position(|&p| p == [0.5, 0.25]).unwrap();
        let g = LoadFunctional::PointDirac {
            point: [0.5, 0.25],
            weight: 1.0,
        };
        let q = reg.apply(&g.bind(&m, quad()).unwrap());
        let mut expected = vec![0.0; m.num_cells()];
        for (c, v) in reg.weights().psi(&m, z) {
            expected[c] = v;
        }
        for (a, b) in q.coeffs.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        // supported on the patch only
        let patch = m.vertex_cells(z);
        for (c, a) in q.coeffs.iter().enumerate() {
            if !patch.contains(&c) {
                assert_eq!(*a, 0.0);
            }
        }
    }

    #[test]
    fn adjoint_duality() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = mixed(3);
        for k in 0..2 {
            let reg = Regularizer::new(&m, k).unwrap();
            let f = random_field(&m, k, &mut rng);
            let v = |x: Point| (PI * x[0]).sin() * (2.0 + x[1]) * (x[1] * (1.0 - x[1]));
            let q = reg.apply(
                &LoadFunctional::Piecewise(f.clone())
                    .bind(&m, quad())
                    .unwrap(),
            );
            let adj = reg.apply_adjoint(&v, &quad());
            let mut lhs = 0.0;
            let mut rhs = 0.0;
            for c in 0..m.num_cells() {
                let tri = m.cell_points(c);
                lhs += quad().integrate(&tri, |x| reg.eval_adjoint(&adj, c, x) * f.eval(&m, c, x));
                rhs += quad().integrate(&tri, |x| v(x) * q.eval(&m, c, x));
            }
            assert!((lhs - rhs).abs() < 1e-10, "k={k}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn adjoint_of_zero_is_zero() {
        let m = dirichlet(2);
        let reg = Regularizer::new(&m, 0).unwrap();
        let adj = reg.apply_adjoint(&|_| 0.0, &quad());
        assert!(adj.nodal.iter().chain(&adj.bubble).all(|&x| x == 0.0));
    }

    #[test]
    fn adjoint_approximates_identity_at_first_order() {
        let phi = |x: Point| (PI * x[0]).sin() * (PI * x[1]).sin();
        let errs: Vec<(f64, f64)> = [4, 8, 16]
            .into_iter()
            .map(|nx| {
                let m = dirichlet(nx);
                let reg = Regularizer::new(&m, 0).unwrap();
                let adj = reg.apply_adjoint(&phi, &quad());
                let e = norm_lp(&m, 2.0, &quad(), &|c, x| {
                    phi(x) - reg.eval_adjoint(&adj, c, x)
                });
                (m.h_max(), e)
            })
            .collect();
        for w in errs.windows(2) {
            // J_h keeps affine functions, so smooth φ converges faster than
            // the first-order bound
            let eoc = (w[1].1 / w[0].1).ln() / (w[1].0 / w[0].0).ln();
            assert!(eoc >= 0.9, "eoc {eoc}");
        }
    }

    #[test]
    fn q_is_l2_bounded_uniformly() {
        let mut worst: f64 = 0.0;
        let fs: [fn(Point) -> f64; 3] = [
            |x| (3.0 * x[0]).sin() * x[1],
            |x| (x[0] - 0.3).abs().sqrt() + x[1] * x[1],
            |x| (7.0 * x[0] * x[1]).cos(),
        ];
        for nx in [2, 4, 8, 16] {
            let m = mixed(nx);
            let reg = Regularizer::new(&m, 0).unwrap();
            for f in fs {
                let g = LoadFunctional::density(f);
                let q = reg.apply(&g.bind(&m, quad()).unwrap());
                let nq = norm_lp(&m, 2.0, &quad(), &|c, x| q.eval(&m, c, x));
                let nf = norm_lp(&m, 2.0, &quad(), &|_, x| f(x));
                worst = worst.max(nq / nf);
            }
        }
        assert!(worst < 3.0, "{worst}");
    }

    #[test]
    fn projection_of_smooth_density_is_close_to_l2_projection() {
        let m = dirichlet(16);
        let reg = Regularizer::new(&m, 0).unwrap();
        let f = |x: Point| (PI * x[0]).cos() + x[1];
        let q = reg.apply(&LoadFunctional::density(f).bind(&m, quad()).unwrap());
        let p = l2_project_scalar(&m, &f, 0, &quad());
        let d = norm_lp(&m, 2.0, &quad(), &|c, x| {
            q.eval(&m, c, x) - p.eval(&m, c, x)
        });
        assert!(d < 0.2, "{d}");
    }
}
