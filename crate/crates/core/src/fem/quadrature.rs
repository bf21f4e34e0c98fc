//! Gauss rules on the unit interval and collapsed (Duffy) Gauss rules on the
//! reference triangle.

use std::sync::OnceLock;

use crate::mesh::{signed_area, Point};

const MAX_CACHED_DEGREE: usize = 40;

/// Gauss-Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton on P_n
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = 0.5 * (1.0 - x);
        nodes[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    (nodes, weights)
}

/// Rule on the unit interval.
#[derive(Debug, Clone)]
pub struct LineRule {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LineRule {
    pub fn gauss(n: usize) -> Self {
        let (points, weights) = gauss_legendre(n);
        Self { points, weights }
    }

    /// `∫_a^b f ds` along the straight segment from `a` to `b`.
    pub fn integrate_segment(&self, a: Point, b: Point, mut f: impl FnMut(Point) -> f64) -> f64 {
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let mut sum = 0.0;
        for (&t, &w) in self.points.iter().zip(&self.weights) {
            sum += w * f([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
        sum * len
    }
}

/// Quadrature on the reference triangle `(0,0), (1,0), (0,1)`.
///
/// Points are barycentric `(λ0, λ1, λ2)`, weights sum to the reference area
/// `1/2`.
#[derive(Debug, Clone)]
pub struct TriangleRule {
    pub degree: usize,
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl TriangleRule {
    /// Collapsed Gauss product rule exact for polynomials of total degree
    /// `degree`.
    pub fn collapsed(degree: usize) -> Self {
        let (xs, wx) = gauss_legendre((degree + 1).div_ceil(2).max(1));
        let (ys, wy) = gauss_legendre((degree + 2).div_ceil(2));
        let mut points = Vec::with_capacity(xs.len() * ys.len());
        let mut weights = Vec::with_capacity(xs.len() * ys.len());
        for (&eta, &we) in ys.iter().zip(&wy) {
            for (&xi, &wxi) in xs.iter().zip(&wx) {
                let x = xi * (1.0 - eta);
                let y = eta;
                points.push([1.0 - x - y, x, y]);
                weights.push(wxi * we * (1.0 - eta));
            }
        }
        Self {
            degree,
            points,
            weights,
        }
    }

    /// Shared rule for `degree`.
    pub fn get(degree: usize) -> &'static TriangleRule {
        static RULES: OnceLock<Vec<TriangleRule>> = OnceLock::new();
        let rules = RULES.get_or_init(|| {
            (0..=MAX_CACHED_DEGREE)
                .map(TriangleRule::collapsed)
                .collect()
        });
        &rules[degree.min(MAX_CACHED_DEGREE)]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Visits physical points and weights (scaled by the triangle's area).
    pub fn for_each(&self, tri: &[Point; 3], mut f: impl FnMut(Point, f64)) {
        let scale = 2.0 * signed_area(tri[0], tri[1], tri[2]).abs();
        for (l, &w) in self.points.iter().zip(&self.weights) {
            f(map_barycentric(tri, *l), w * scale);
        }
    }

    pub fn integrate(&self, tri: &[Point; 3], mut f: impl FnMut(Point) -> f64) -> f64 {
        let mut sum = 0.0;
        self.for_each(tri, |x, w| sum += w * f(x));
        sum
    }
}

pub fn map_barycentric(tri: &[Point; 3], l: [f64; 3]) -> Point {
    [
        l[0] * tri[0][0] + l[1] * tri[1][0] + l[2] * tri[2][0],
        l[0] * tri[0][1] + l[1] * tri[1][1] + l[2] * tri[2][1],
    ]
}

/// The straight line `normal · x = offset` along which an integrand may be
/// non-smooth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularLine {
    pub normal: [f64; 2],
    pub offset: f64,
}

impl SingularLine {
    pub const DIAGONAL: SingularLine = SingularLine {
        normal: [
            std::f64::consts::FRAC_1_SQRT_2,
            -std::f64::consts::FRAC_1_SQRT_2,
        ],
        offset: 0.0,
    };

    pub const Y_AXIS: SingularLine = SingularLine {
        normal: [1.0, 0.0],
        offset: 0.0,
    };

    fn distance(&self, p: Point) -> f64 {
        self.normal[0] * p[0] + self.normal[1] * p[1] - self.offset
    }

    /// Whether the closed triangle meets the line.
    pub fn touches(&self, tri: &[Point; 3]) -> bool {
        let d = tri.map(|p| self.distance(p));
        let scale = tri
            .iter()
            .map(|p| p[0].abs().max(p[1].abs()))
            .fold(1.0, f64::max);
        let tol = 1e-12 * scale;
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lo <= tol && hi >= -tol
    }
}

/// Cell integration with optional graded subdivision towards a singular
/// line: sub-triangles meeting the line are split into four, `levels` times.
#[derive(Debug, Clone, Copy)]
pub struct CellQuadrature {
    pub rule: &'static TriangleRule,
    pub singular: Option<SingularLine>,
    pub levels: usize,
}

impl CellQuadrature {
    pub fn new(degree: usize) -> Self {
        Self {
            rule: TriangleRule::get(degree),
            singular: None,
            levels: 0,
        }
    }

    pub fn with_singular_line(mut self, line: Option<SingularLine>, levels: usize) -> Self {
        self.singular = line;
        self.levels = if line.is_some() { levels } else { 0 };
        self
    }

    pub fn degree(&self) -> usize {
        self.rule.degree
    }

    pub fn for_each(&self, tri: &[Point; 3], f: &mut impl FnMut(Point, f64)) {
        self.visit(tri, self.levels, f);
    }

    fn visit(&self, tri: &[Point; 3], levels: usize, f: &mut impl FnMut(Point, f64)) {
        let split = levels > 0 && self.singular.is_some_and(|l| l.touches(tri));
        if !split {
            self.rule.for_each(tri, f);
            return;
        }
        let mid = |a: Point, b: Point| [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
        let [a, b, c] = *tri;
        let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
        for child in [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]] {
            self.visit(&child, levels - 1, f);
        }
    }

    pub fn integrate(&self, tri: &[Point; 3], mut f: impl FnMut(Point) -> f64) -> f64 {
        let mut sum = 0.0;
        self.for_each(tri, &mut |x, w| sum += w * f(x));
        sum
    }
}
