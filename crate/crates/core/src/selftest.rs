//! Property checks shared by the `selftest` command and the acceptance
//! suite. Each check measures a defect and compares it with a tolerance.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{builtin_case, eoc, run_convergence, StudyOptions};
use crate::fem::{
    l2_project_vector, norm_lp, pk_dim, CellQuadrature, FluxField, LineRule, LocalBasis,
    ScalarField, TriangleRule, ERROR_DEGREE,
};
use crate::loads::{BoundaryData, LoadFunctional};
use crate::mesh::{signed_area, Diagonal, Marker, Mesh, Point, Rectangle};
use crate::postprocess::stenberg;
use crate::regularizer::Regularizer;
use crate::system::{assemble, CoefficientSet, ScalarRhs};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
    /// `true` when `value` must be at least `tolerance` instead of at most.
    pub lower_bound: bool,
}

impl Check {
    pub fn at_most(name: &'static str, value: f64, tolerance: f64) -> Self {
        Self {
            name,
            value,
            tolerance,
            lower_bound: false,
        }
    }

    pub fn at_least(name: &'static str, value: f64, tolerance: f64) -> Self {
        Self {
            name,
            value,
            tolerance,
            lower_bound: true,
        }
    }

    pub fn passed(&self) -> bool {
        if self.lower_bound {
            self.value >= self.tolerance
        } else {
            self.value <= self.tolerance
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {:.3e} ({} {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            if self.lower_bound { ">=" } else { "<=" },
            self.tolerance
        )
    }
}

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

fn random_field(m: &Mesh, k: usize, rng: &mut ChaCha8Rng) -> ScalarField {
    let n = m.num_cells() * pk_dim(k);
    ScalarField::new(k, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest coefficient defect of `Qφ_h − φ_h` over `samples` random fields
/// per mesh and degree, on three meshes and `k ∈ {0, 1}`.
pub fn projection_defect(seed: u64, samples: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for m in [dirichlet(2), mixed(3), dirichlet(4).uniform_refine()] {
        for k in 0..2 {
            let reg = Regularizer::new(&m, k).expect("structured meshes have valid patches");
            for _ in 0..samples {
                let phi = random_field(&m, k, &mut rng);
                let g = LoadFunctional::Piecewise(phi.clone());
                let q = reg.apply(&g.bind(&m, quad()).expect("density loads bind"));
                worst = worst.max(max_abs_diff(&q.coeffs, &phi.coeffs));
            }
        }
    }
    worst
}

/// `max |Q(1) − 1|` on a mixed-boundary mesh.
pub fn constant_defect() -> f64 {
    let m = mixed(3);
    let reg = Regularizer::new(&m, 0).expect("valid patches");
    let g = LoadFunctional::density(|_| 1.0);
    let q = reg.apply(&g.bind(&m, quad()).expect("density loads bind"));
    q.coeffs.iter().map(|c| (c - 1.0).abs()).fold(0.0, f64::max)
}

/// Coefficient defect of `Q(δ_z)` against the weight function `ψ_z`.
pub fn point_dirac_defect() -> f64 {
    let m = dirichlet(4);
    let reg = Regularizer::new(&m, 0).expect("valid patches");
    let p = [0.5, 0.25];
    let z = m
        .vertices()
        .iter()
        .position(|&v| v == p)
        .expect("vertex of the structured mesh");
    let g = LoadFunctional::PointDirac {
        point: p,
        weight: 1.0,
    };
    let q = reg.apply(&g.bind(&m, quad()).expect("interior point binds"));
    let mut expected = vec![0.0; m.num_cells()];
    for (c, v) in reg.weights().psi(&m, z) {
        expected[c] = v;
    }
    max_abs_diff(&q.coeffs, &expected)
}

/// `|∫ Q′v · f − ∫ v · Qf|` for random `f ∈ Q_h`, `k ∈ {0, 1}`.
pub fn duality_defect(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = mixed(3);
    let v = |x: Point| (PI * x[0]).sin() * (2.0 + x[1]) * (x[1] * (1.0 - x[1]));
    let mut worst: f64 = 0.0;
    for k in 0..2 {
        let reg = Regularizer::new(&m, k).expect("valid patches");
        let f = random_field(&m, k, &mut rng);
        let q = reg.apply(
            &LoadFunctional::Piecewise(f.clone())
                .bind(&m, quad())
                .expect("binds"),
        );
        let adj = reg.apply_adjoint(&v, &quad());
        let (mut lhs, mut rhs) = (0.0, 0.0);
        for c in 0..m.num_cells() {
            let tri = m.cell_points(c);
            lhs += quad().integrate(&tri, |x| reg.eval_adjoint(&adj, c, x) * f.eval(&m, c, x));
            rhs += quad().integrate(&tri, |x| v(x) * q.eval(&m, c, x));
        }
        worst = worst.max((lhs - rhs).abs());
    }
    worst
}

/// Observed orders of `‖(1 − Q′)φ‖_{0,2}` over three refinements.
pub fn adjoint_eocs() -> Vec<f64> {
    let phi = |x: Point| (PI * x[0]).sin() * (PI * x[1]).sin();
    let errs: Vec<(f64, f64)> = [4, 8, 16]
        .into_iter()
        .map(|nx| {
            let m = dirichlet(nx);
            let reg = Regularizer::new(&m, 0).expect("valid patches");
            let adj = reg.apply_adjoint(&phi, &quad());
            let e = norm_lp(&m, 2.0, &quad(), &|c, x| {
                phi(x) - reg.eval_adjoint(&adj, c, x)
            });
            (m.h_max(), e)
        })
        .collect();
    errs.windows(2)
        .map(|w| eoc(w[0].1, w[1].1, w[0].0, w[1].0))
        .collect()
}

/// Sparse solve against dense Gaussian elimination on the nx = 1
/// all-Dirichlet mesh with variable coefficients and advection.
pub fn dense_oracle_defect() -> f64 {
    let m = dirichlet(1);
    let coeffs = CoefficientSet {
        eps: Arc::new(|x: Point| 1.0 + 0.5 * x[0]),
        kappa: Arc::new(|x: Point| 2.0 + x[1]),
        eps_bounds: (1.0, 1.5),
        velocity_h: l2_project_vector(&m, &|x| [0.3 + x[1], -0.2 * x[0]], &quad()),
        velocity: None,
    };
    let qg = ScalarField::from_cell_values(&[0.7, -1.1], 0);
    let bdata = BoundaryData {
        dirichlet: Some(Arc::new(|x: Point| x[0] - 2.0 * x[1])),
        neumann: None,
    };
    let s = assemble(&m, &coeffs, ScalarRhs::Regularized(&qg), &bdata, 0).expect("assembles");
    let sol = s.solve().expect("solves");
    let (a, b) = s.global();
    let n = b.len();
    let dense = DMatrix::from_fn(n, n, |i, j| a.get(i, j));
    let x = dense
        .lu()
        .solve(&DVector::from_vec(b))
        .expect("oracle matrix is regular");
    let sparse: Vec<f64> = sol
        .flux
        .coeffs
        .iter()
        .chain(&sol.scalar.coeffs)
        .copied()
        .collect();
    max_abs_diff(&sparse, x.as_slice())
}

/// Postprocess on random single cells against the closed-form local
/// solution `ε∇ψ♯ = mean(ζ_h + u_h ψ_h)`, `mean ψ♯ = ψ_h`.
pub fn stenberg_oracle_defect(seed: u64, cells: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cells {
        let mut pts: Vec<Point> = (0..3)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        if signed_area(pts[0], pts[1], pts[2]) < 0.0 {
            pts.swap(1, 2);
        }
        let m = Mesh::new(
            pts,
            vec![[0, 1, 2]],
            &[
                ([0, 1], Marker::Dirichlet),
                ([1, 2], Marker::Dirichlet),
                ([2, 0], Marker::Dirichlet),
            ],
        )
        .expect("random triangles are non-degenerate with probability one");
        let eps = rng.random_range(0.1..3.0);
        let flux = FluxField::new((0..3).map(|_| rng.random_range(-1.0..1.0)).collect());
        let psi_val = rng.random_range(-2.0..2.0);
        let psi = ScalarField::from_cell_values(&[psi_val], 0);
        let a: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let u = l2_project_vector(
            &m,
            &move |x| {
                [
                    a[0] + a[1] * x[0] + a[2] * x[1],
                    a[3] + a[4] * x[0] + a[5] * x[1],
                ]
            },
            &quad(),
        );
        let co = CoefficientSet {
            eps: Arc::new(move |_| eps),
            kappa: Arc::new(|_| 1.0),
            eps_bounds: (eps, eps),
            velocity_h: u.clone(),
            velocity: None,
        };
        let post = stenberg(&m, &co, &flux, &psi).expect("local problem is regular");
        let tri = m.cell_points(0);
        let area = m.cell_area(0);
        let gx = quad().integrate(&tri, |x| {
            flux.eval(&m, 0, x)[0] + u.eval(&m, 0, x)[0] * psi_val
        }) / (eps * area);
        let gy = quad().integrate(&tri, |x| {
            flux.eval(&m, 0, x)[1] + u.eval(&m, 0, x)[1] * psi_val
        }) / (eps * area);
        let s = m.cell_centroid(0);
        for p in tri {
            let oracle = psi_val + gx * (p[0] - s[0]) + gy * (p[1] - s[1]);
            worst = worst.max((post.eval(&m, 0, p) - oracle).abs() / (1.0 + oracle.abs()));
        }
    }
    worst
}

/// Largest error of the constant-solution case through regularisation,
/// assembly, solve and postprocess, with and without `Q`.
pub fn constant_pipeline_error() -> f64 {
    let case = builtin_case("constant").expect("built-in case");
    let mut worst: f64 = 0.0;
    for use_q in [true, false] {
        let opts = StudyOptions {
            use_q,
            ..StudyOptions::default()
        };
        let r = run_convergence(&case, 3, &opts).expect("constant case solves");
        for row in &r.rows {
            let e = row.errors;
            for v in [
                e.e_flux_l2,
                e.e_flux_div43.unwrap_or(0.0),
                e.e_psi_l4,
                e.e_post_l2,
            ] {
                worst = worst.max(v);
            }
        }
    }
    worst
}

/// Largest relative error of the triangle rules on monomials up to their
/// degree, against `∫_T x^a y^b = a! b! / (a + b + 2)!` on the unit simplex.
pub fn quadrature_defect() -> f64 {
    let fact = |n: u32| (1..=n).map(f64::from).product::<f64>();
    let tri = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    let mut worst: f64 = 0.0;
    for deg in [2, 6, 12] {
        let rule = TriangleRule::get(deg);
        for a in 0..=deg as u32 {
            for b in 0..=(deg as u32 - a) {
                let exact = fact(a) * fact(b) / fact(a + b + 2);
                let got = rule.integrate(&tri, |x| x[0].powi(a as i32) * x[1].powi(b as i32));
                worst = worst.max((got - exact).abs() / exact);
            }
        }
    }
    worst
}

/// Counting and round-trip defects of structured meshes and refinement;
/// zero when every identity holds.
pub fn mesh_defect() -> f64 {
    let m = dirichlet(2);
    let mut bad = 0usize;
    bad += usize::from(m.num_vertices() != 9 || m.num_cells() != 8 || m.num_facets() != 16);
    let r = m.uniform_refine();
    bad += usize::from(r.num_cells() != 32);
    bad += usize::from((r.domain_area() - 1.0).abs() > 1e-14);
    bad += usize::from(Mesh::from_text(&mixed(3).to_text()).ok().as_ref() != Some(&mixed(3)));
    bad as f64
}

/// `div ζ_h` of the interpolant of an affine field against its exact
/// constant divergence: every RT0 divergence lies in P0.
pub fn divergence_defect() -> f64 {
    let m = dirichlet(3);
    let z = FluxField::interpolate(
        &m,
        &|x| [2.0 * x[0] - x[1], 0.5 * x[1] + x[0]],
        &LineRule::gauss(3),
    );
    (0..m.num_cells())
        .map(|c| (z.div(&m, c) - 2.5).abs())
        .fold(0.0, f64::max)
}

/// Largest violation of the scalar equation
/// `∫_K div ζ_h − κψ_h q = −∫_K Qg q`, re-evaluated cell by cell.
pub fn scalar_equation_residual() -> f64 {
    let m = mixed(4);
    let q = quad();
    let coeffs = CoefficientSet {
        eps: Arc::new(|x: Point| 1.0 / (1.0 + x[0] * x[1])),
        kappa: Arc::new(|x: Point| 1.0 + x[0]),
        eps_bounds: (0.5, 1.0),
        velocity_h: l2_project_vector(&m, &|x| [(PI * x[1]).sin(), x[0] * x[0]], &q),
        velocity: None,
    };
    let qg = crate::fem::l2_project_scalar(&m, &|x| (3.0 * x[0]).cos(), 0, &q);
    let bdata = BoundaryData {
        dirichlet: Some(Arc::new(|x: Point| x[0] + x[1])),
        neumann: Some(Arc::new(|x: Point, _| x[0])),
    };
    let s = crate::system::apply_bc(
        assemble(&m, &coeffs, ScalarRhs::Regularized(&qg), &bdata, 0).expect("assembles"),
        &m,
        &bdata,
    )
    .expect("Neumann data present");
    let sol = s.solve().expect("solves");
    (0..m.num_cells())
        .map(|c| {
            let tri = m.cell_points(c);
            let basis = LocalBasis::new(&m, c, 0);
            let div = sol.flux.div(&m, c);
            q.integrate(&tri, |x| {
                div - (coeffs.kappa)(x) * sol.scalar.eval_with(&basis, c, x)
                    + qg.eval_with(&basis, c, x)
            })
            .abs()
        })
        .fold(0.0, f64::max)
}

/// All checks with their contract tolerances.
pub fn run_all(seed: u64) -> Vec<Check> {
    let adj = adjoint_eocs();
    vec![
        Check::at_most(
            "mesh: counting, refinement and text round trip",
            mesh_defect(),
            0.0,
        ),
        Check::at_most("quadrature: monomial exactness", quadrature_defect(), 1e-12),
        Check::at_most("RT0: divergence lies in P0", divergence_defect(), 1e-12),
        Check::at_most(
            "regulariser: Q is a projection onto Q_h",
            projection_defect(seed, 20),
            1e-11,
        ),
        Check::at_most("regulariser: Q(1) = 1", constant_defect(), 1e-12),
        Check::at_most(
            "regulariser: Q(point Dirac) = psi_z",
            point_dirac_defect(),
            1e-12,
        ),
        Check::at_most("regulariser: adjoint duality", duality_defect(seed), 1e-10),
        Check::at_least(
            "regulariser: (1 - Q') phi observed order",
            adj.iter().copied().fold(f64::INFINITY, f64::min),
            0.9,
        ),
        Check::at_most(
            "system: sparse solve vs dense oracle",
            dense_oracle_defect(),
            1e-10,
        ),
        Check::at_most(
            "system: scalar equation residual",
            scalar_equation_residual(),
            1e-9,
        ),
        Check::at_most(
            "postprocess: single-cell oracle",
            stenberg_oracle_defect(seed, 10),
            1e-11,
        ),
        Check::at_most(
            "pipeline: constant solution errors",
            constant_pipeline_error(),
            1e-10,
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_all(5) {
            assert!(c.passed(), "{}", c.line());
        }
    }

    #[test]
    fn check_direction() {
        assert!(Check::at_most("a", 1.0, 1.0).passed());
        assert!(!Check::at_most("a", 1.1, 1.0).passed());
        assert!(Check::at_least("a", 1.0, 0.9).passed());
        assert!(!Check::at_least("a", 0.8, 0.9).passed());
        assert!(Check::at_least("a", 0.8, 0.9).line().starts_with("FAIL"));
    }
}
