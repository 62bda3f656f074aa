//! The fixed structured grid of MTO elements and their adaptive state.
//!
//! The mesh never h-refines: elements are identical squares for the whole
//! run. What adapts is the per-element shape-function order `p`, the design
//! point count `d` (with the point layout pulled from the placement cache),
//! and the global background subdivision `m`.

use crate::design::{projection_radius, PlacementTable};
use crate::error::{Error, Result};
use std::sync::Arc;

pub const DIM: usize = 2;

/// Refinement flag: -2 full coarsening, -1 analysis coarsening,
/// 0 untouched, +1 analysis refinement.
pub type Theta = i8;

#[derive(Debug, Clone)]
pub struct MtoElement {
    pub index: usize,
    /// Shape-function order, within `[1, p_max]`.
    pub p: usize,
    /// Design-point count, within `[1, d_max]`.
    pub d: usize,
    /// Design point layout in the unit reference square, shared per `d`.
    pub design_points: Arc<Vec<[f64; 2]>>,
    /// Projection radius for the element-local design-to-cell map (meters).
    pub r_p: f64,
    pub theta: Theta,
}

#[derive(Debug, Clone)]
pub struct MtoMesh {
    pub nx: usize,
    pub ny: usize,
    /// Element edge length (meters); identical for every element.
    pub element_size: f64,
    /// Background cells per element per axis, global and uniform.
    pub background_m: usize,
    pub elements: Vec<MtoElement>,
}

/// Element deformation modes: DOFs minus the 3 rigid-body modes in 2D. The
/// element-level upper bound on `d`.
pub fn max_design_points(p: usize) -> usize {
    2 * (p + 1) * (p + 1) - 3
}

/// Smallest integer `m` with `m^2 >= d`.
pub fn background_cells_per_axis(d: usize) -> usize {
    let mut m = (d as f64).sqrt().floor() as usize;
    while m * m < d {
        m += 1;
    }
    m
}

impl MtoMesh {
    /// Uniform initial mesh: every element gets order `p0`, `d0` design
    /// points from the placement cache, flag 0. The background subdivision is
    /// the smallest per-axis count whose square covers `d0`.
    pub fn build(
        nx: usize,
        ny: usize,
        domain_width: f64,
        p0: usize,
        d0: usize,
        placements: &PlacementTable,
    ) -> Result<Self> {
        if nx < 1 || ny < 1 {
            return Err(Error::InvalidConfig(format!(
                "mesh needs at least one element per axis, got {nx} x {ny}"
            )));
        }
        if domain_width <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "nonpositive domain width {domain_width}"
            )));
        }
        if p0 < 1 {
            return Err(Error::InvalidConfig("element order must be >= 1".into()));
        }
        if d0 < 1 {
            return Err(Error::InvalidConfig(
                "design point count must be >= 1".into(),
            ));
        }
        let element_size = domain_width / nx as f64;
        let points = placements.points(d0);
        let r_p = projection_radius(d0, element_size);
        let elements = (0..nx * ny)
            .map(|index| MtoElement {
                index,
                p: p0,
                d: d0,
                design_points: points.clone(),
                r_p,
                theta: 0,
            })
            .collect();
        Ok(Self {
            nx,
            ny,
            element_size,
            background_m: background_cells_per_axis(d0),
            elements,
        })
    }

    pub fn n_elements(&self) -> usize {
        self.nx * self.ny
    }

    /// Row-major element index from grid coordinates.
    pub fn element_index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    /// Grid coordinates of an element, inverse of `element_index`.
    pub fn grid_coords(&self, index: usize) -> (usize, usize) {
        (index % self.nx, index / self.nx)
    }

    /// Physical coordinates of the element's lower-left corner.
    pub fn element_origin(&self, index: usize) -> [f64; 2] {
        let (ix, iy) = self.grid_coords(index);
        [ix as f64 * self.element_size, iy as f64 * self.element_size]
    }

    /// Edge-adjacent elements (no diagonals), in the order left, right,
    /// below, above; absent sides skipped.
    pub fn neighbors(&self, index: usize) -> Result<Vec<usize>> {
        let n = self.n_elements();
        if index >= n {
            return Err(Error::IndexOutOfRange {
                what: "elements",
                index,
                len: n,
            });
        }
        let (ix, iy) = self.grid_coords(index);
        let mut out = Vec::with_capacity(4);
        if ix > 0 {
            out.push(self.element_index(ix - 1, iy));
        }
        if ix + 1 < self.nx {
            out.push(self.element_index(ix + 1, iy));
        }
        if iy > 0 {
            out.push(self.element_index(ix, iy - 1));
        }
        if iy + 1 < self.ny {
            out.push(self.element_index(ix, iy + 1));
        }
        Ok(out)
    }

    /// Replace an element's design-point count, pulling the shared layout and
    /// recomputing the projection radius.
    pub fn set_element_d(&mut self, index: usize, d: usize, placements: &PlacementTable) {
        let l = self.element_size;
        let el = &mut self.elements[index];
        el.d = d;
        el.design_points = placements.points(d);
        el.r_p = projection_radius(d, l);
    }

    /// Offsets of each element's design points within the global design
    /// vector (element-major ordering), plus the total count.
    pub fn design_offsets(&self) -> (Vec<usize>, usize) {
        let mut offsets = Vec::with_capacity(self.n_elements());
        let mut total = 0;
        for el in &self.elements {
            offsets.push(total);
            total += el.d;
        }
        (offsets, total)
    }

    pub fn total_design_points(&self) -> usize {
        self.elements.iter().map(|e| e.d).sum()
    }

    /// Background grid dimensions `(cells_x, cells_y)`.
    pub fn background_dims(&self) -> (usize, usize) {
        (self.nx * self.background_m, self.ny * self.background_m)
    }
}
