//! The three per-element refinement indicators.
//!
//! - Gradient-jump (Kelly) error: squared jumps of the displacement normal
//!   derivative across shared edges, weighted by `h_F / (2 p_F)`. Ranks
//!   elements for order refinement and coarsening by analysis error.
//! - Density indicator: classifies each background cell of an element as
//!   near-intermediate (wants resolution) or near-solid/void (can coarsen)
//!   against cycle-dependent bounds that widen the refinement zone and shrink
//!   the coarsening zones exponentially over cycles.
//! - Local order-elevation (QR) error: per element, re-solve at order `p + 1`
//!   with a mass-projected copy of the element's internal load and three
//!   pinned dofs; report the relative strain-energy change. Large values mean
//!   the current order under-resolves the element.

use crate::analysis::{element_stiffness, scalar_mass, DofMap, Simp, StiffnessCache};
use crate::basis::ShapeBasis;
use crate::design::{filtered_density_at, BackgroundGrid};
use crate::error::{Error, Result};
use crate::mesh::{MtoMesh, Theta};
use crate::quadrature::{gauss_points_1d, select_rule};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Cycle bounds for the density indicator, all in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityBounds {
    pub r_l: f64,
    pub r_u: f64,
    pub c_l: f64,
    pub c_u: f64,
    pub rho_avg: f64,
}

/// All indicator values for one adaptive cycle.
#[derive(Debug, Clone)]
pub struct IndicatorReport {
    pub gamma_a: Vec<f64>,
    pub gamma_d: Vec<f64>,
    pub qr_error: Vec<f64>,
    pub bounds: DensityBounds,
}

/// Density-indicator bounds for adaptive cycle `k` (1-based): the refinement
/// band `[r_l, r_u]` grows toward `[0, 1]` and the coarsening zones
/// `[0, c_l]`, `[c_u, 1]` shrink to nothing as `exp(-beta (k - 1))` decays.
pub fn density_bounds(cycle: usize, alpha: f64, beta: f64) -> DensityBounds {
    let rho_avg = 0.5;
    let decay = (-beta * (cycle as f64 - 1.0)).exp();
    let r_l = (1.0 - alpha) * rho_avg * decay;
    let c_l = alpha * rho_avg * decay;
    DensityBounds {
        r_l,
        r_u: 1.0 - r_l,
        c_l,
        c_u: 1.0 - c_l,
        rho_avg,
    }
}

/// Mean per-cell contribution over the element's background cells: positive
/// inside the refinement band (peaked at `rho_avg`), negative in the
/// coarsening zones, zero in the dead zones between.
pub fn density_indicator(
    mesh: &MtoMesh,
    element: usize,
    grid: &BackgroundGrid,
    bounds: &DensityBounds,
) -> f64 {
    let m = mesh.background_m;
    let (ex, ey) = mesh.grid_coords(element);
    let mut sum = 0.0;
    for cy in ey * m..(ey + 1) * m {
        for cx in ex * m..(ex + 1) * m {
            let rho = grid.values[grid.index(cx, cy)];
            sum += if rho >= bounds.r_l && rho <= bounds.rho_avg {
                rho - bounds.r_l
            } else if rho > bounds.rho_avg && rho <= bounds.r_u {
                bounds.r_u - rho
            } else if rho <= bounds.c_l {
                -(bounds.c_l - rho)
            } else if rho >= bounds.c_u {
                -(rho - bounds.c_u)
            } else {
                0.0
            };
        }
    }
    sum / (m * m) as f64
}

pub fn density_indicators(mesh: &MtoMesh, grid: &BackgroundGrid, bounds: &DensityBounds) -> Vec<f64> {
    (0..mesh.n_elements())
        .map(|e| density_indicator(mesh, e, grid, bounds))
        .collect()
}

/// Gradient-jump error per element: for every interior edge, the edge
/// integral of the squared jump of both displacement components' normal
/// derivatives, weighted by `h_F / (2 p_F)` with `h_F` the element diagonal
/// and `p_F` the larger adjacent order. Boundary edges contribute nothing.
pub fn kelly(mesh: &MtoMesh, dof_map: &DofMap, u: &[f64]) -> Result<Vec<f64>> {
    let l = mesh.element_size;
    let locals: Vec<Vec<f64>> = (0..mesh.n_elements())
        .map(|e| dof_map.gather_element(e, u))
        .collect();
    (0..mesh.n_elements())
        .into_par_iter()
        .map(|e| {
            let (ex, ey) = mesh.grid_coords(e);
            let p_i = mesh.elements[e].p;
            let mut total = 0.0;
            // (neighbor coords, this side's fixed ref coordinate, axis of the
            // edge normal)
            let sides: [(Option<(usize, usize)>, f64, usize); 4] = [
                (ex.checked_sub(1).map(|x| (x, ey)), -1.0, 0),
                ((ex + 1 < mesh.nx).then_some((ex + 1, ey)), 1.0, 0),
                (ey.checked_sub(1).map(|y| (ex, y)), -1.0, 1),
                ((ey + 1 < mesh.ny).then_some((ex, ey + 1)), 1.0, 1),
            ];
            for (neighbor, fixed, normal_axis) in sides {
                let Some((nx_, ny_)) = neighbor else { continue };
                let j = mesh.element_index(nx_, ny_);
                let p_j = mesh.elements[j].p;
                let p_f = p_i.max(p_j);
                let (nodes, weights) = gauss_points_1d(p_f + 1)?;
                let basis_i = ShapeBasis::new(p_i)?;
                let basis_j = ShapeBasis::new(p_j)?;
                let mut integral = 0.0;
                for (&t, &w) in nodes.iter().zip(weights) {
                    // Same physical point seen from both elements.
                    let pt_i = if normal_axis == 0 { [fixed, t] } else { [t, fixed] };
                    let pt_j = if normal_axis == 0 { [-fixed, t] } else { [t, -fixed] };
                    let gi = normal_gradients(&basis_i, pt_i, &locals[e], normal_axis, l);
                    let gj = normal_gradients(&basis_j, pt_j, &locals[j], normal_axis, l);
                    let jump_x = gi[0] - gj[0];
                    let jump_y = gi[1] - gj[1];
                    integral += (jump_x * jump_x + jump_y * jump_y) * w;
                }
                // ds = (edge length / 2) dt.
                integral *= 0.5 * l;
                let h_f = l * std::f64::consts::SQRT_2;
                total += h_f / (2.0 * p_f as f64) * integral;
            }
            Ok(total)
        })
        .collect()
}

/// Normal derivative of both displacement components at a reference point,
/// physical scaling `2 / l` applied.
fn normal_gradients(basis: &ShapeBasis, pt: [f64; 2], u_local: &[f64], axis: usize, l: f64) -> [f64; 2] {
    let (_, grads) = basis.eval(pt);
    let mut out = [0.0; 2];
    for (a, g) in grads.iter().enumerate() {
        let gn = g[axis] * 2.0 / l;
        out[0] += gn * u_local[2 * a];
        out[1] += gn * u_local[2 * a + 1];
    }
    out
}

/// Order-flag updates from ranked analysis error: the lowest `coarsen_frac`
/// of elements get -1, the highest `refine_frac` get +1, ties broken toward
/// lower element indices, counts floored.
pub fn rank_and_flag_analysis(
    gamma_a: &[f64],
    refine_frac: f64,
    coarsen_frac: f64,
) -> Vec<Theta> {
    let n = gamma_a.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        gamma_a[a]
            .partial_cmp(&gamma_a[b])
            .expect("indicator values are finite")
            .then(a.cmp(&b))
    });
    let n_coarsen = (coarsen_frac * n as f64).floor() as usize;
    let n_refine = (refine_frac * n as f64).floor() as usize;
    let mut theta = vec![0 as Theta; n];
    for &e in &order[..n_coarsen] {
        theta[e] = -1;
    }
    for &e in &order[n - n_refine..] {
        theta[e] = 1;
    }
    theta
}

/// Relative strain-energy change of an element re-solved at order `p + 1`
/// under a mass-projected copy of its own internal load, rigid modes removed
/// by pinning three dofs to the order-`p` solution at coinciding corners.
#[allow(clippy::too_many_arguments)]
pub fn qr_errors(
    mesh: &MtoMesh,
    dof_map: &DofMap,
    u: &[f64],
    k_elems: &[DMatrix<f64>],
    grid: &BackgroundGrid,
    radius: f64,
    simp: &Simp,
    cache: &StiffnessCache,
) -> Result<Vec<f64>> {
    (0..mesh.n_elements())
        .into_par_iter()
        .map(|e| qr_error_element(mesh, dof_map, u, &k_elems[e], grid, radius, simp, cache, e))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn qr_error_element(
    mesh: &MtoMesh,
    dof_map: &DofMap,
    u: &[f64],
    k_e: &DMatrix<f64>,
    grid: &BackgroundGrid,
    radius: f64,
    simp: &Simp,
    cache: &StiffnessCache,
    e: usize,
) -> Result<f64> {
    let el = &mesh.elements[e];
    let p = el.p;
    let p1 = p + 1;
    let l = mesh.element_size;

    let u_e = DVector::from_vec(dof_map.gather_element(e, u));
    let j_p = 0.5 * (u_e.transpose() * k_e * &u_e)[(0, 0)];

    // Elevated stiffness on the same density field, re-filtered at the
    // points of the (p + 1)-sized rule.
    let n1 = select_rule(el.d, p1);
    let rule = crate::quadrature::shared_rule(n1)?;
    let origin = mesh.element_origin(e);
    let moduli: Vec<f64> = rule
        .points
        .iter()
        .map(|pt| {
            let phys = [
                origin[0] + 0.5 * (pt[0] + 1.0) * l,
                origin[1] + 0.5 * (pt[1] + 1.0) * l,
            ];
            filtered_density_at(grid, phys, radius).map(|r| simp.modulus(r))
        })
        .collect::<Result<_>>()?;
    let data1 = cache.get(p1, n1)?;
    let k1 = element_stiffness(&data1, &moduli);

    // Load transfer: reconstruct the order-p load field through the inverse
    // mass, then integrate it against the order-(p + 1) basis. Componentwise
    // with scalar mass matrices; the area factor cancels in the ratio.
    let f_p = k_e * &u_e;
    let scale = l * l / 4.0;
    let m_p = scalar_mass(p, p, p + 2, scale)?;
    let m_cross = scalar_mass(p1, p, p + 2, scale)?;
    let np = (p + 1) * (p + 1);
    let np1 = (p1 + 1) * (p1 + 1);
    let m_p_chol = m_p
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("element {e}: singular mass matrix")))?;
    let mut f1 = DVector::zeros(2 * np1);
    for comp in 0..2 {
        let fc = DVector::from_fn(np, |a, _| f_p[2 * a + comp]);
        let phi = m_p_chol.solve(&fc);
        let fc1 = &m_cross * phi;
        for b in 0..np1 {
            f1[2 * b + comp] = fc1[b];
        }
    }

    // Pin both components at the bottom-left corner and the x component at
    // the top-left corner: exactly the three rigid modes, values copied from
    // the order-p solution at the coinciding corner support points.
    let bl_p1 = 0;
    let tl_p1 = p1 * (p1 + 1);
    let tl_p = p * (p + 1);
    let pinned: [(usize, f64); 3] = [
        (2 * bl_p1, u_e[0]),
        (2 * bl_p1 + 1, u_e[1]),
        (2 * tl_p1, u_e[2 * tl_p]),
    ];
    let mut is_pinned = vec![false; 2 * np1];
    for &(dof, _) in &pinned {
        is_pinned[dof] = true;
    }
    let free: Vec<usize> = (0..2 * np1).filter(|&d| !is_pinned[d]).collect();
    let nf = free.len();
    let mut kff = DMatrix::zeros(nf, nf);
    let mut rhs = DVector::zeros(nf);
    for (i, &di) in free.iter().enumerate() {
        rhs[i] = f1[di];
        for &(dj, v) in &pinned {
            rhs[i] -= k1[(di, dj)] * v;
        }
        for (jf, &dj) in free.iter().enumerate() {
            kff[(i, jf)] = k1[(di, dj)];
        }
    }
    let chol = kff.cholesky().ok_or_else(|| {
        Error::Numerical(format!("element {e}: pinned order-{p1} system not positive definite"))
    })?;
    let uf = chol.solve(&rhs);
    let mut u1 = DVector::zeros(2 * np1);
    for &(dof, v) in &pinned {
        u1[dof] = v;
    }
    for (i, &dof) in free.iter().enumerate() {
        u1[dof] = uf[i];
    }
    let j_p1 = 0.5 * (u1.transpose() * &k1 * &u1)[(0, 0)];
    if j_p1.abs() < 1e-300 {
        return Ok(0.0);
    }
    Ok(1.0 - j_p / j_p1)
}

/// Elements whose elevation error exceeds the threshold and whose order can
/// still grow; each flagged element gets a single +1 order increment.
pub fn qr_flag(qr_error: &[f64], orders: &[usize], threshold: f64, p_max: usize) -> Vec<bool> {
    qr_error
        .iter()
        .zip(orders)
        .map(|(&eps, &p)| eps > threshold && p < p_max)
        .collect()
}
