//! One adaptation cycle: analysis-driven order flags, density-driven order
//! and flag updates, order smoothing, per-element design-point reassignment,
//! background-grid rebuild, and the order-elevation check on the adapted
//! mesh.

use crate::analysis::{
    assemble_stiffnesses, volume_rules, DofMap, Simp, StiffnessCache,
};
use crate::design::{
    transfer_design, BackgroundGrid, DesignVector, PlacementTable, ProjectionOps,
};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::indicators::{qr_errors, qr_flag, rank_and_flag_analysis};
use crate::mesh::{max_design_points, MtoMesh};
use crate::problem::{Benchmark, ProblemKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptivityConfig {
    /// Fraction of elements refined by the analysis indicator (top of the
    /// ascending order).
    pub analysis_refine_fraction: f64,
    /// Fraction coarsened by it (bottom of the ascending order).
    pub analysis_coarsen_fraction: f64,
    /// Relative energy gap above which the order-elevation check raises p.
    pub qr_threshold: f64,
    pub p_max: usize,
    pub d_max: usize,
}

impl Default for AdaptivityConfig {
    fn default() -> Self {
        Self {
            analysis_refine_fraction: 0.10,
            analysis_coarsen_fraction: 0.05,
            qr_threshold: 0.9,
            p_max: 5,
            d_max: 64,
        }
    }
}

/// Clear all element flags, as at the start of an adaptation cycle.
pub fn reset_flags(mesh: &mut MtoMesh) {
    for el in &mut mesh.elements {
        el.theta = 0;
    }
}

/// Rank the analysis indicator, set the -1/+1 flags, and move p one step in
/// the flagged direction within `[1, p_max]`.
pub fn apply_analysis_step(mesh: &mut MtoMesh, gamma_a: &[f64], cfg: &AdaptivityConfig) {
    let flags = rank_and_flag_analysis(
        gamma_a,
        cfg.analysis_refine_fraction,
        cfg.analysis_coarsen_fraction,
    );
    for (el, &theta) in mesh.elements.iter_mut().zip(&flags) {
        el.theta = theta;
        match theta {
            -1 => el.p = el.p.max(2) - 1,
            1 => el.p = (el.p + 1).min(cfg.p_max),
            _ => {}
        }
    }
}

/// Density-driven update. Negative indicator coarsens: order-1 elements are
/// flagged -2 for design-point collapse, higher orders not already coarsened
/// by the analysis step drop one order. Positive indicator refines elements
/// the analysis step left alone or coarsened.
pub fn apply_density_step(mesh: &mut MtoMesh, gamma_d: &[f64], cfg: &AdaptivityConfig) {
    for (el, &gd) in mesh.elements.iter_mut().zip(gamma_d) {
        if gd < 0.0 {
            if el.p == 1 {
                el.theta = -2;
            } else if el.theta == 0 {
                el.p -= 1;
            }
        } else if gd > 0.0 && (el.theta == 0 || el.theta == -1) {
            el.p = (el.p + 1).min(cfg.p_max);
        }
    }
}

/// Raise-only smoothing: sweeps until every adjacent pair of orders differs
/// by at most 2. Returns the number of raises applied.
pub fn smooth_p(mesh: &mut MtoMesh) -> usize {
    let mut raises = 0;
    loop {
        let mut changed = false;
        for e in 0..mesh.n_elements() {
            let need = mesh
                .neighbors(e)
                .into_iter()
                .flatten()
                .map(|n| mesh.elements[n].p)
                .max()
                .unwrap_or(1)
                .saturating_sub(2);
            if mesh.elements[e].p < need {
                mesh.elements[e].p = need;
                raises += 1;
                changed = true;
            }
        }
        if !changed {
            return raises;
        }
    }
}

/// Design-point budget for an element: collapsed to a single point when
/// flagged -2, otherwise the DOF-derived bound capped at `d_max`.
pub fn design_point_budget(p: usize, theta: i8, d_max: usize) -> usize {
    if theta == -2 {
        1
    } else {
        max_design_points(p).min(d_max)
    }
}

/// Reassign d on every element the cycle's flags or order changes touched;
/// untouched elements keep their current layout.
pub fn assign_d(
    mesh: &mut MtoMesh,
    p_before: &[usize],
    cfg: &AdaptivityConfig,
    placements: &PlacementTable,
) {
    for e in 0..mesh.n_elements() {
        let el = &mesh.elements[e];
        if el.theta == 0 && el.p == p_before[e] {
            continue;
        }
        let d = design_point_budget(el.p, el.theta, cfg.d_max);
        if d != el.d {
            mesh.set_element_d(e, d, placements);
        }
    }
}

/// Rebuild the background grid at the smallest per-axis subdivision whose
/// square covers the largest element budget, carrying densities by
/// nearest-cell resampling.
pub fn update_background(mesh: &mut MtoMesh, grid: &BackgroundGrid) -> BackgroundGrid {
    let max_d = mesh.elements.iter().map(|el| el.d).max().unwrap_or(1);
    let m = crate::mesh::background_cells_per_axis(max_d);
    mesh.background_m = m;
    let (ncx, ncy) = mesh.background_dims();
    grid.resample(ncx, ncy, mesh.element_size / m as f64)
}

/// Raise p on flagged elements (single increment, capped), re-smoothing if
/// any raise broke the adjacent-order bound. Returns the number of raises.
pub fn apply_qr_flags(mesh: &mut MtoMesh, flags: &[bool], cfg: &AdaptivityConfig) -> usize {
    let mut raised = 0;
    for (el, &flag) in mesh.elements.iter_mut().zip(flags) {
        if flag && el.p < cfg.p_max {
            el.p += 1;
            raised += 1;
        }
    }
    if raised > 0 {
        smooth_p(mesh);
    }
    raised
}

/// Everything a finished adaptation cycle hands back to the driver.
pub struct CycleOutcome {
    pub rho: DesignVector,
    pub grid: BackgroundGrid,
    pub qr_error: Vec<f64>,
    pub qr_raised: usize,
}

/// One full adaptation pass over a converged state: order flags from the
/// analysis indicator, density-driven updates, smoothing, design-point and
/// background reassignment, then the order-elevation check on a fresh solve
/// of the adapted mesh, and finally the design transfer onto the new point
/// layouts.
#[allow(clippy::too_many_arguments)]
pub fn run_adaptive_cycle(
    mesh: &mut MtoMesh,
    grid: &BackgroundGrid,
    gamma_a: &[f64],
    gamma_d: &[f64],
    kind: ProblemKind,
    simp: &Simp,
    cache: &StiffnessCache,
    placements: &PlacementTable,
    cfg: &AdaptivityConfig,
    filter_factor: f64,
) -> Result<CycleOutcome> {
    let p_before: Vec<usize> = mesh.elements.iter().map(|el| el.p).collect();
    reset_flags(mesh);
    apply_analysis_step(mesh, gamma_a, cfg);
    apply_density_step(mesh, gamma_d, cfg);
    smooth_p(mesh);
    assign_d(mesh, &p_before, cfg, placements);
    let new_grid = update_background(mesh, grid);

    // The order-elevation check needs stiffnesses and a displacement field on
    // the adapted mesh, driven by the resampled densities.
    let radius = filter_factor * mesh.element_size;
    let dof_map = DofMap::build(mesh)?;
    let rules = volume_rules(mesh)?;
    let ops = ProjectionOps::build(mesh, &rules, radius)?;
    let field = ops.project_grid(&new_grid);
    let k_elems = assemble_stiffnesses(mesh, cache, simp, &field, &rules)?;
    let mut bench = Benchmark::build(kind, mesh, &dof_map)?;
    let sol = bench.model.solve(&k_elems)?;
    let qr_error = qr_errors(
        mesh, &dof_map, &sol.u, &k_elems, &new_grid, radius, simp, cache,
    )?;
    let orders: Vec<usize> = mesh.elements.iter().map(|el| el.p).collect();
    let flags = qr_flag(&qr_error, &orders, cfg.qr_threshold, cfg.p_max);
    let qr_raised = apply_qr_flags(mesh, &flags, cfg);

    let new_rho = transfer_design(mesh, grid);
    Ok(CycleOutcome {
        rho: new_rho,
        grid: new_grid,
        qr_error,
        qr_raised,
    })
}
