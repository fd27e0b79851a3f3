//! Quadrature on the reference triangle and on edges.
//!
//! Triangle rules are stored in barycentric coordinates with weights that sum
//! to one, so `∫_T g ≈ |T| Σ w_i g(x_i)`.

use std::f64::consts::PI;

#[derive(Debug, Clone)]
pub struct TriangleRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub order: usize,
}

#[derive(Debug, Clone)]
pub struct LineRule {
    /// Nodes on `[0, 1]`.
    pub points: Vec<f64>,
    /// Weights summing to one.
    pub weights: Vec<f64>,
}

/// Gauss-Legendre nodes and weights on `[0, 1]`, `n` points, exact for degree `2n - 1`.
pub fn gauss_legendre(n: usize) -> LineRule {
    assert!(n >= 1);
    let mut points = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        // map [-1, 1] -> [0, 1], weights normalized to sum one
        points[n - 1 - i] = 0.5 * (x + 1.0);
        weights[n - 1 - i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    LineRule { points, weights }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Edge rule exact for polynomials of the given degree.
pub fn line_rule(order: usize) -> LineRule {
    gauss_legendre(order / 2 + 1)
}

/// Triangle rule exact for polynomials of total degree `order`.
pub fn triangle_rule(order: usize) -> TriangleRule {
    match order {
        0 | 1 => TriangleRule {
            points: vec![[1.0 / 3.0; 3]],
            weights: vec![1.0],
            order: 1,
        },
        2 => {
            let a = 2.0 / 3.0;
            let b = 1.0 / 6.0;
            TriangleRule {
                points: vec![[a, b, b], [b, a, b], [b, b, a]],
                weights: vec![1.0 / 3.0; 3],
                order: 2,
            }
        }
        3 | 4 => {
            let mut rule = TriangleRule {
                points: Vec::new(),
                weights: Vec::new(),
                order: 4,
            };
            push_orbit3(&mut rule, 0.445_948_490_915_964_886_32, 0.223_381_589_678_011_465_70);
            push_orbit3(&mut rule, 0.091_576_213_509_770_743_46, 0.109_951_743_655_321_867_64);
            rule
        }
        5 => {
            let mut rule = TriangleRule {
                points: vec![[1.0 / 3.0; 3]],
                weights: vec![0.225],
                order: 5,
            };
            push_orbit3(&mut rule, 0.470_142_064_105_115_089_77, 0.132_394_152_788_506_180_74);
            push_orbit3(&mut rule, 0.101_286_507_323_456_338_80, 0.125_939_180_544_827_152_60);
            rule
        }
        _ => collapsed_gauss(order),
    }
}

// points (a, a, 1-2a) and permutations
fn push_orbit3(rule: &mut TriangleRule, a: f64, w: f64) {
    let b = 1.0 - 2.0 * a;
    for p in [[b, a, a], [a, b, a], [a, a, b]] {
        rule.points.push(p);
        rule.weights.push(w);
    }
}

/// Duffy-collapsed tensor Gauss rule; `m` points per direction with
/// `2m - 1 >= order + 1` to absorb the collapse Jacobian.
fn collapsed_gauss(order: usize) -> TriangleRule {
    let m = (order + 2).div_ceil(2);
    let g = gauss_legendre(m);
    let mut points = Vec::with_capacity(m * m);
    let mut weights = Vec::with_capacity(m * m);
    for (&u, &wu) in g.points.iter().zip(&g.weights) {
        for (&v, &wv) in g.points.iter().zip(&g.weights) {
            let x = u;
            let y = v * (1.0 - u);
            points.push([1.0 - x - y, x, y]);
            weights.push(2.0 * wu * wv * (1.0 - u));
        }
    }
    TriangleRule {
        points,
        weights,
        order,
    }
}
