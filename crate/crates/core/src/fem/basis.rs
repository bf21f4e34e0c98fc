//! Local shape functions: lowest-order Raviart-Thomas, scaled monomials for
//! discontinuous P_k, P1 hats and element bubbles.

use nalgebra::{DMatrix, DVector};

use super::quadrature::TriangleRule;
use super::FemError;
use crate::mesh::{barycentric, Mesh, Point};

/// Dimension of P_k in two variables.
pub fn pk_dim(k: usize) -> usize {
    (k + 1) * (k + 2) / 2
}

/// Exponents `(a, b)` of the local monomial basis, ordered by total degree.
pub fn monomial_exponents(k: usize) -> impl Iterator<Item = (i32, i32)> {
    (0..=k as i32).flat_map(|d| (0..=d).map(move |b| (d - b, b)))
}

/// Scaled monomials `((x - c_K) / h_K)^a ((y - c_K) / h_K)^b` on one cell.
///
/// The first function is the constant `1`, so cell means and P0 embedding
/// live in coefficient 0.
#[derive(Debug, Clone, Copy)]
pub struct LocalBasis {
    pub degree: usize,
    pub centre: Point,
    pub scale: f64,
}

impl LocalBasis {
    pub fn new(mesh: &Mesh, cell: usize, degree: usize) -> Self {
        Self {
            degree,
            centre: mesh.cell_centroid(cell),
            scale: mesh.cell_diameter(cell),
        }
    }

    pub fn dim(&self) -> usize {
        pk_dim(self.degree)
    }

    fn local(&self, x: Point) -> (f64, f64) {
        (
            (x[0] - self.centre[0]) / self.scale,
            (x[1] - self.centre[1]) / self.scale,
        )
    }

    pub fn values(&self, x: Point, out: &mut [f64]) {
        let (s, t) = self.local(x);
        for (slot, (a, b)) in out.iter_mut().zip(monomial_exponents(self.degree)) {
            *slot = s.powi(a) * t.powi(b);
        }
    }

    pub fn gradients(&self, x: Point, out: &mut [[f64; 2]]) {
        let (s, t) = self.local(x);
        let inv = 1.0 / self.scale;
        for (slot, (a, b)) in out.iter_mut().zip(monomial_exponents(self.degree)) {
            let dx = if a > 0 {
                a as f64 * s.powi(a - 1) * t.powi(b)
            } else {
                0.0
            };
            let dy = if b > 0 {
                b as f64 * s.powi(a) * t.powi(b - 1)
            } else {
                0.0
            };
            *slot = [dx * inv, dy * inv];
        }
    }

    pub fn eval(&self, coeffs: &[f64], x: Point) -> f64 {
        let (s, t) = self.local(x);
        coeffs
            .iter()
            .zip(monomial_exponents(self.degree))
            .map(|(c, (a, b))| c * s.powi(a) * t.powi(b))
            .sum()
    }

    pub fn eval_grad(&self, coeffs: &[f64], x: Point) -> [f64; 2] {
        let mut g = vec![[0.0; 2]; self.dim()];
        self.gradients(x, &mut g);
        coeffs.iter().zip(&g).fold([0.0; 2], |acc, (c, d)| {
            [acc[0] + c * d[0], acc[1] + c * d[1]]
        })
    }

    /// `∫_K q_i q_j`, exact.
    pub fn mass_matrix(&self, tri: &[Point; 3]) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        let mut q = vec![0.0; n];
        TriangleRule::get(2 * self.degree).for_each(tri, |x, w| {
            self.values(x, &mut q);
            for i in 0..n {
                for j in 0..n {
                    m[(i, j)] += w * q[i] * q[j];
                }
            }
        });
        m
    }
}

/// Lowest-order Raviart-Thomas basis on one cell.
///
/// Local function `i` belongs to the facet opposite local vertex `i`:
/// `φ_i(x) = σ_i (x − p_i) / (2|K|)`, with `σ_i` the global orientation sign,
/// so its normal flux through that facet (global normal) is exactly 1.
#[derive(Debug, Clone, Copy)]
pub struct Rt0Cell {
    pub points: [Point; 3],
    pub signs: [f64; 3],
    pub area: f64,
}

impl Rt0Cell {
    pub fn new(mesh: &Mesh, cell: usize) -> Result<Self, FemError> {
        let area = mesh.cell_area(cell);
        if !(area > 0.0) {
            return Err(FemError::DegenerateCell { cell });
        }
        Ok(Self {
            points: mesh.cell_points(cell),
            signs: [0, 1, 2].map(|i| mesh.facet_sign(cell, i)),
            area,
        })
    }

    pub fn values(&self, x: Point) -> [[f64; 2]; 3] {
        let s = 0.5 / self.area;
        [0, 1, 2].map(|i| {
            let p = self.points[i];
            [
                self.signs[i] * s * (x[0] - p[0]),
                self.signs[i] * s * (x[1] - p[1]),
            ]
        })
    }

    /// Constant divergences `σ_i / |K|`.
    pub fn divergences(&self) -> [f64; 3] {
        self.signs.map(|s| s / self.area)
    }
}

/// Value of the P1 hat of local vertex `i` (a barycentric coordinate).
pub fn hat_value(tri: &[Point; 3], local: usize, x: Point) -> f64 {
    barycentric(tri, x)[local]
}

/// Gradients of the three barycentric coordinates.
pub fn hat_gradients(tri: &[Point; 3]) -> [[f64; 2]; 3] {
    let area2 = (tri[1][0] - tri[0][0]) * (tri[2][1] - tri[0][1])
        - (tri[2][0] - tri[0][0]) * (tri[1][1] - tri[0][1]);
    [0, 1, 2].map(|i| {
        let b = tri[(i + 1) % 3];
        let c = tri[(i + 2) % 3];
        [(b[1] - c[1]) / area2, (c[0] - b[0]) / area2]
    })
}

/// Element bubble `λ0 λ1 λ2` and its gradient.
pub fn bubble(tri: &[Point; 3], x: Point) -> (f64, [f64; 2]) {
    let l = barycentric(tri, x);
    let g = hat_gradients(tri);
    let v = l[0] * l[1] * l[2];
    let d = |k: usize| l[1] * l[2] * g[0][k] + l[0] * l[2] * g[1][k] + l[0] * l[1] * g[2][k];
    (v, [d(0), d(1)])
}

/// Bubble functions `χ_j = η_K Σ_l C_jl q_l` biorthogonal to the local
/// P_k basis: `∫_K χ_j q_i = δ_ij`.
#[derive(Debug, Clone)]
pub struct DualBubbles {
    pub cell: usize,
    pub basis: LocalBasis,
    pub points: [Point; 3],
    /// Row `j` holds the P_k coefficients of `χ_j / η_K`.
    pub coeffs: DMatrix<f64>,
}

impl DualBubbles {
    pub fn new(mesh: &Mesh, cell: usize, k: usize) -> Result<Self, FemError> {
        if !(mesh.cell_area(cell) > 0.0) {
            return Err(FemError::DegenerateCell { cell });
        }
        let basis = LocalBasis::new(mesh, cell, k);
        let tri = mesh.cell_points(cell);
        let n = basis.dim();
        let mut gram = DMatrix::<f64>::zeros(n, n);
        let mut q = vec![0.0; n];
        TriangleRule::get(2 * k + 3).for_each(&tri, |x, w| {
            let (b, _) = bubble(&tri, x);
            basis.values(x, &mut q);
            for i in 0..n {
                for j in 0..n {
                    gram[(i, j)] += w * b * q[i] * q[j];
                }
            }
        });
        let lu = gram.lu();
        let diag = lu.u().diagonal();
        let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), d| {
            (lo.min(d.abs()), hi.max(d.abs()))
        });
        if !(lo > 1e-13 * hi) {
            return Err(FemError::SingularGram { cell });
        }
        // Gram symmetric: C = G^{-1}
        let coeffs = lu.try_inverse().ok_or(FemError::SingularGram { cell })?;
        Ok(Self {
            cell,
            basis,
            points: tri,
            coeffs,
        })
    }

    pub fn len(&self) -> usize {
        self.basis.dim()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Value and gradient of `χ_j` at `x`.
    pub fn eval(&self, j: usize, x: Point) -> (f64, [f64; 2]) {
        let row: DVector<f64> = self.coeffs.row(j).transpose();
        let p = self.basis.eval(row.as_slice(), x);
        let dp = self.basis.eval_grad(row.as_slice(), x);
        let (b, db) = bubble(&self.points, x);
        (b * p, [db[0] * p + b * dp[0], db[1] * p + b * dp[1]])
    }
}
