//! Tensor-product Lagrange shape functions on the reference square.
//!
//! Support points are the equispaced `(p + 1)^2` tensor grid of `[-1, 1]^2`.
//! Node ordering is row-major: node `j (p + 1) + i` sits at
//! `(xi_i, eta_j)` with `xi_i = -1 + 2 i / p`. The basis satisfies the
//! Kronecker property at its support points and forms a partition of unity
//! everywhere on the square.

use crate::error::{Error, Result};

/// Orders above the adaptive cap are still constructible: the order-elevation
/// error test evaluates elements one order above the running maximum.
pub const MAX_BASIS_ORDER: usize = 6;

#[derive(Debug, Clone)]
pub struct ShapeBasis {
    p: usize,
    /// 1D support abscissae, equispaced on [-1, 1].
    nodes: Vec<f64>,
}

impl ShapeBasis {
    pub fn new(p: usize) -> Result<Self> {
        if p < 1 || p > MAX_BASIS_ORDER {
            return Err(Error::InvalidConfig(format!(
                "shape basis order {p} unsupported (1..={MAX_BASIS_ORDER})"
            )));
        }
        let nodes = (0..=p).map(|k| -1.0 + 2.0 * k as f64 / p as f64).collect();
        Ok(Self { p, nodes })
    }

    pub fn order(&self) -> usize {
        self.p
    }

    /// Number of scalar support points, `(p + 1)^2`.
    pub fn n_sup(&self) -> usize {
        (self.p + 1) * (self.p + 1)
    }

    pub fn nodes_1d(&self) -> &[f64] {
        &self.nodes
    }

    /// Reference coordinates of scalar support point `k` in tensor order.
    pub fn support_point(&self, k: usize) -> [f64; 2] {
        let m = self.p + 1;
        [self.nodes[k % m], self.nodes[k / m]]
    }

    /// 1D Lagrange values and derivatives at `x` in `[-1, 1]`.
    pub fn eval_1d(&self, x: f64) -> (Vec<f64>, Vec<f64>) {
        lagrange_1d(&self.nodes, x)
    }

    /// All `(p + 1)^2` basis values and reference gradients at a point of the
    /// closed reference square.
    pub fn eval(&self, point: [f64; 2]) -> (Vec<f64>, Vec<[f64; 2]>) {
        let (lx, dx) = lagrange_1d(&self.nodes, point[0]);
        let (ly, dy) = lagrange_1d(&self.nodes, point[1]);
        let m = self.p + 1;
        let mut values = Vec::with_capacity(m * m);
        let mut grads = Vec::with_capacity(m * m);
        for j in 0..m {
            for i in 0..m {
                values.push(lx[i] * ly[j]);
                grads.push([dx[i] * ly[j], lx[i] * dy[j]]);
            }
        }
        (values, grads)
    }
}

/// Values and first derivatives of the Lagrange cardinal functions for the
/// given abscissae. Direct product evaluation; O(n^2) per call, fine for the
/// orders used here.
pub fn lagrange_1d(nodes: &[f64], x: f64) -> (Vec<f64>, Vec<f64>) {
    let n = nodes.len();
    let mut values = vec![0.0; n];
    let mut derivs = vec![0.0; n];
    for k in 0..n {
        let mut v = 1.0;
        for j in 0..n {
            if j != k {
                v *= (x - nodes[j]) / (nodes[k] - nodes[j]);
            }
        }
        values[k] = v;
        let mut dsum = 0.0;
        for i in 0..n {
            if i == k {
                continue;
            }
            let mut term = 1.0 / (nodes[k] - nodes[i]);
            for j in 0..n {
                if j != k && j != i {
                    term *= (x - nodes[j]) / (nodes[k] - nodes[j]);
                }
            }
            dsum += term;
        }
        derivs[k] = dsum;
    }
    (values, derivs)
}
