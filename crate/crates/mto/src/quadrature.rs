//! Gauss-Legendre quadrature on the reference square.
//!
//! Tensor-product rules are built from 1D Gauss-Legendre nodes on `[-1, 1]`.
//! A rule with `n` points per axis integrates any monomial of per-axis degree
//! up to `2n - 1` exactly. Two constructions are provided:
//!
//! - [`gauss_rule`]: the plain `n x n` tensor rule over the whole square.
//! - [`composite_rule`]: an `m x m` subdivision of the square with a small
//!   Gauss rule per sub-cell, exact for piecewise-constant coefficient fields
//!   times polynomial basis products on the sub-cell grid.
//!
//! [`select_rule`] picks the per-axis point count needed to integrate an
//! element stiffness whose density factor is a polynomial projection of a
//! given design-point count `d` at element order `p`.

use crate::error::{Error, Result};
use std::sync::OnceLock;

/// Points and weights on the bi-unit reference square `[-1, 1]^2`.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub const MAX_GAUSS_N: usize = 12;

/// 1D Gauss-Legendre nodes and weights on `[-1, 1]`, cached for `n` in `1..=12`.
pub fn gauss_points_1d(n: usize) -> Result<&'static (Vec<f64>, Vec<f64>)> {
    static TABLES: OnceLock<Vec<(Vec<f64>, Vec<f64>)>> = OnceLock::new();
    if n < 1 || n > MAX_GAUSS_N {
        return Err(Error::InvalidConfig(format!(
            "gauss rule with {n} points per axis unsupported (1..={MAX_GAUSS_N})"
        )));
    }
    let tables = TABLES.get_or_init(|| (1..=MAX_GAUSS_N).map(compute_gauss_1d).collect());
    Ok(&tables[n - 1])
}

/// Newton iteration on the Legendre polynomial; nodes symmetrized so that
/// mirrored pairs are exact negatives and odd rules contain exactly 0.
fn compute_gauss_1d(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = n.div_ceil(2);
    for i in 0..half {
        // Initial guess: Chebyshev-like estimate for the i-th root.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                let (_, d2) = legendre_and_derivative(n, x);
                dp = d2;
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // The initial guesses enumerate roots in descending order.
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = w;
        nodes[i] = -x;
        weights[i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
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

/// Shared cached tensor rule, one allocation per point count per process.
pub fn shared_rule(n_per_axis: usize) -> Result<std::sync::Arc<QuadratureRule>> {
    static CACHE: OnceLock<Vec<std::sync::Arc<QuadratureRule>>> = OnceLock::new();
    if n_per_axis < 1 || n_per_axis > MAX_GAUSS_N {
        return Err(Error::InvalidConfig(format!(
            "gauss rule with {n_per_axis} points per axis unsupported (1..={MAX_GAUSS_N})"
        )));
    }
    let cache = CACHE.get_or_init(|| {
        (1..=MAX_GAUSS_N)
            .map(|n| std::sync::Arc::new(gauss_rule(n).expect("in-range rule")))
            .collect()
    });
    Ok(cache[n_per_axis - 1].clone())
}

/// Tensor-product Gauss-Legendre rule with `n_per_axis^2` points.
///
/// Point ordering is row-major in (xi, eta): the eta index varies slowest.
pub fn gauss_rule(n_per_axis: usize) -> Result<QuadratureRule> {
    let (nodes, weights) = gauss_points_1d(n_per_axis)?;
    let mut points = Vec::with_capacity(n_per_axis * n_per_axis);
    let mut w = Vec::with_capacity(n_per_axis * n_per_axis);
    for (j, &eta) in nodes.iter().enumerate() {
        for (i, &xi) in nodes.iter().enumerate() {
            points.push([xi, eta]);
            w.push(weights[i] * weights[j]);
        }
    }
    Ok(QuadratureRule { points, weights: w })
}

/// Tabulated minimal rules per (design-point count, element order) pair.
/// Columns: d, total order of the projected density field, p, points per axis.
const RULE_TABLE: [(usize, usize, usize, usize); 8] = [
    (1, 0, 1, 2),
    (4, 2, 1, 3),
    (9, 3, 2, 4),
    (16, 5, 3, 6),
    (25, 6, 3, 7),
    (36, 7, 4, 8),
    (49, 9, 5, 10),
    (64, 10, 5, 11),
];

/// Polynomial order attributed to a density field built from `d` design
/// points: the tabulated value for the nearest tabulated `d' >= d`, else the
/// smallest total order whose 2D polynomial space has at least `d` monomials.
pub fn design_field_order(d: usize) -> usize {
    for &(td, order, _, _) in &RULE_TABLE {
        if td >= d {
            return order;
        }
    }
    let mut t = 0usize;
    while (t + 1) * (t + 2) / 2 < d {
        t += 1;
    }
    t
}

/// Points per axis of the minimal Gauss rule that integrates an element
/// stiffness with a degree-`design_field_order(d)` density factor at element
/// order `p` exactly: the integrand's total per-axis degree is
/// `2p + design_field_order(d)`.
pub fn select_rule(d: usize, p: usize) -> usize {
    for &(td, _, tp, n) in &RULE_TABLE {
        if td == d && tp == p {
            return n;
        }
    }
    let pbar = design_field_order(d);
    (p + (pbar + 2) / 2).min(MAX_GAUSS_N)
}

/// Composite rule: the square subdivided into `m x m` equal cells, each
/// integrated with an `n_per_cell` point Gauss rule. Cells are enumerated
/// row-major, points row-major within each cell; weights sum to 4.
pub fn composite_rule_with(m: usize, n_per_cell: usize) -> Result<QuadratureRule> {
    if m < 1 {
        return Err(Error::InvalidConfig(format!(
            "composite rule requires at least one cell per axis, got {m}"
        )));
    }
    let (nodes, weights) = gauss_points_1d(n_per_cell)?;
    let cell = 2.0 / m as f64;
    let npts = m * m * n_per_cell * n_per_cell;
    let mut points = Vec::with_capacity(npts);
    let mut w = Vec::with_capacity(npts);
    for cy in 0..m {
        for cx in 0..m {
            let x0 = -1.0 + cx as f64 * cell;
            let y0 = -1.0 + cy as f64 * cell;
            for (j, &eta) in nodes.iter().enumerate() {
                for (i, &xi) in nodes.iter().enumerate() {
                    points.push([
                        x0 + 0.5 * (xi + 1.0) * cell,
                        y0 + 0.5 * (eta + 1.0) * cell,
                    ]);
                    w.push(weights[i] * weights[j] * 0.25 * cell * cell);
                }
            }
        }
    }
    Ok(QuadratureRule { points, weights: w })
}

/// Per-cell rule of order `p + 1` per axis on an `m x m` subdivision, exact
/// for piecewise-constant density times order-`p` basis gradient products.
pub fn composite_rule(background_m: usize, p: usize) -> Result<QuadratureRule> {
    composite_rule_with(background_m, p + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Integral of x^k over [-1, 1].
    fn monomial_1d(k: usize) -> f64 {
        if k % 2 == 1 {
            0.0
        } else {
            2.0 / (k as f64 + 1.0)
        }
    }

    #[test]
    fn one_point_rule_is_midpoint() {
        let r = gauss_rule(1).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.points[0], [0.0, 0.0]);
        assert!((r.weights[0] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn rules_integrate_monomials_to_machine_precision() {
        for n in 1..=MAX_GAUSS_N {
            let r = gauss_rule(n).unwrap();
            let wsum: f64 = r.weights.iter().sum();
            assert!((wsum - 4.0).abs() < 1e-13, "n={n} weight sum {wsum}");
            assert!(r.weights.iter().all(|&w| w > 0.0));
            for kx in 0..=(2 * n - 1) {
                for ky in 0..=(2 * n - 1) {
                    let num: f64 = r
                        .points
                        .iter()
                        .zip(&r.weights)
                        .map(|(p, w)| p[0].powi(kx as i32) * p[1].powi(ky as i32) * w)
                        .sum();
                    let exact = monomial_1d(kx) * monomial_1d(ky);
                    assert!(
                        (num - exact).abs() < 1e-13,
                        "n={n} x^{kx} y^{ky}: {num} vs {exact}"
                    );
                }
            }
        }
    }

    #[test]
    fn two_point_rule_kills_odd_cubics() {
        let r = gauss_rule(2).unwrap();
        let num: f64 = r
            .points
            .iter()
            .zip(&r.weights)
            .map(|(p, w)| p[0].powi(3) * p[1].powi(3) * w)
            .sum();
        assert!(num.abs() < 1e-15);
    }

    #[test]
    fn three_point_rule_integrates_quartics() {
        let r = gauss_rule(3).unwrap();
        let num: f64 = r
            .points
            .iter()
            .zip(&r.weights)
            .map(|(p, w)| p[0].powi(4) * w)
            .sum();
        assert!((num - 0.8).abs() < 1e-13);
    }

    #[test]
    fn nodes_are_symmetric() {
        for n in 1..=MAX_GAUSS_N {
            let (nodes, weights) = gauss_points_1d(n).unwrap();
            for i in 0..n {
                assert_eq!(nodes[i], -nodes[n - 1 - i], "n={n}");
                assert_eq!(weights[i], weights[n - 1 - i], "n={n}");
            }
        }
    }

    #[test]
    fn unsupported_sizes_are_rejected() {
        assert!(gauss_rule(0).is_err());
        assert!(gauss_rule(13).is_err());
    }

    #[test]
    fn tabulated_rules() {
        assert_eq!(select_rule(1, 1), 2);
        assert_eq!(select_rule(4, 1), 3);
        assert_eq!(select_rule(9, 2), 4);
        assert_eq!(select_rule(16, 3), 6);
        assert_eq!(select_rule(25, 3), 7);
        assert_eq!(select_rule(36, 4), 8);
        assert_eq!(select_rule(49, 5), 10);
        assert_eq!(select_rule(64, 5), 11);
    }

    #[test]
    fn off_table_pairs_use_interpolated_policy() {
        // Nearest tabulated d' >= d supplies the density-field order.
        assert_eq!(select_rule(5, 1), 3);
        assert_eq!(select_rule(15, 2), 5);
        assert_eq!(select_rule(16, 2), 5);
        assert_eq!(select_rule(29, 3), 7);
        assert_eq!(select_rule(47, 4), 9);
        // Order elevation probes one order above the tabulated pairs.
        assert_eq!(select_rule(64, 6), 12);
    }

    #[test]
    fn design_field_orders_match_table() {
        for &(d, order, _, _) in &RULE_TABLE {
            assert_eq!(design_field_order(d), order, "d={d}");
        }
        // Beyond the table: smallest t with (t+1)(t+2)/2 >= d.
        assert_eq!(design_field_order(65), 10);
        assert_eq!(design_field_order(67), 11);
    }

    #[test]
    fn composite_degenerates_to_plain_rule() {
        let c = composite_rule(1, 1).unwrap();
        let g = gauss_rule(2).unwrap();
        assert_eq!(c.len(), g.len());
        for i in 0..c.len() {
            assert!((c.points[i][0] - g.points[i][0]).abs() < 1e-15);
            assert!((c.points[i][1] - g.points[i][1]).abs() < 1e-15);
            assert!((c.weights[i] - g.weights[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn composite_conserves_weight() {
        let c = composite_rule(4, 2).unwrap();
        assert_eq!(c.len(), 144);
        let wsum: f64 = c.weights.iter().sum();
        assert!((wsum - 4.0).abs() < 1e-13);
    }

    #[test]
    fn composite_integrates_piecewise_constant_density() {
        // 2x2 cells with densities {1, 0, 0, 1}: integral over the square is
        // the covered area, 2 of 4.
        let c = composite_rule(2, 1).unwrap();
        let density = |x: f64, y: f64| -> f64 {
            let cx = usize::from(x >= 0.0);
            let cy = usize::from(y >= 0.0);
            [[1.0, 0.0], [0.0, 1.0]][cy][cx]
        };
        let num: f64 = c
            .points
            .iter()
            .zip(&c.weights)
            .map(|(p, w)| density(p[0], p[1]) * w)
            .sum();
        assert!((num - 2.0).abs() < 1e-13);
    }
}
