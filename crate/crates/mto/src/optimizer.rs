//! Design sensitivities, the asymptote-based design update, the stopping
//! rule, and the penalization continuation schedule.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{point_energy_derivatives, DofMap, PointData, Simp, StiffnessCache};
use crate::design::{DesignVector, ProjectedDensityField, ProjectionOps};
use crate::error::{Error, Result};
use crate::mesh::MtoMesh;
use crate::quadrature::QuadratureRule;

/// Penalization continuation across adaptive cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum QSchedule {
    #[default]
    #[serde(rename = "off")]
    Off,
    #[serde(rename = "+1")]
    PlusOne,
    #[serde(rename = "+2")]
    PlusTwo,
}

/// Penalization exponent for a 1-based cycle index.
pub fn continuation_q(cycle: usize, schedule: QSchedule) -> f64 {
    let k = cycle.max(1) as f64;
    match schedule {
        QSchedule::Off => 3.0,
        QSchedule::PlusOne => 3.0 + (k - 1.0),
        QSchedule::PlusTwo => 3.0 + 2.0 * (k - 1.0),
    }
}

/// Objective-change stopping rule. The threshold tightens geometrically with
/// the cycle index; the change is measured absolutely by default and relative
/// to the previous objective when `relative` is set.
#[derive(Debug, Clone)]
pub struct StoppingRule {
    pub delta_j1: f64,
    pub gamma: f64,
    pub relative: bool,
    pub max_iterations: usize,
}

impl Default for StoppingRule {
    fn default() -> Self {
        Self {
            delta_j1: 0.04,
            gamma: 0.6,
            relative: false,
            max_iterations: 300,
        }
    }
}

impl StoppingRule {
    pub fn threshold(&self, cycle: usize) -> f64 {
        self.delta_j1 * self.gamma.powi(cycle.max(1) as i32 - 1)
    }

    /// True once the objective change falls below the cycle threshold or the
    /// iteration cap is hit. Change needs at least two recorded objectives.
    pub fn should_stop(&self, history: &[f64], cycle: usize, iteration: usize) -> bool {
        if iteration >= self.max_iterations {
            return true;
        }
        if history.len() < 2 {
            return false;
        }
        let prev = history[history.len() - 2];
        let last = history[history.len() - 1];
        let mut threshold = self.threshold(cycle);
        if self.relative {
            threshold *= prev.abs().max(f64::MIN_POSITIVE);
        }
        (last - prev).abs() < threshold
    }
}

/// `dJ/drho_tilde` at every integration point, element-major:
/// `-E'(rho_tilde_i) lambda_e^T C_i u_e` with `C_i` the unit-modulus point
/// stiffness. Compliance is self-adjoint: pass the primal solution as both
/// `u` and `lambda`.
pub fn point_gradient(
    mesh: &MtoMesh,
    dof_map: &DofMap,
    u: &[f64],
    lambda: &[f64],
    field: &ProjectedDensityField,
    cache: &StiffnessCache,
    rules: &[Arc<QuadratureRule>],
    simp: &Simp,
) -> Result<Vec<f64>> {
    let data: Vec<Arc<PointData>> = mesh
        .elements
        .iter()
        .enumerate()
        .map(|(e, el)| cache.get(el.p, isqrt_exact(rules[e].len())))
        .collect::<Result<_>>()?;
    let per_element: Vec<Vec<f64>> = (0..mesh.n_elements())
        .into_par_iter()
        .map(|e| {
            let ue = dof_map.gather_element(e, u);
            let le = dof_map.gather_element(e, lambda);
            let energies = point_energy_derivatives(&data[e], &ue, &le);
            field
                .element(e)
                .iter()
                .zip(energies)
                .map(|(&r, en)| -simp.dmodulus(r) * en)
                .collect()
        })
        .collect();
    Ok(per_element.into_iter().flatten().collect())
}

/// Objective gradient with respect to the design variables: the point
/// gradient pulled back through both projections.
#[allow(clippy::too_many_arguments)]
pub fn design_gradient(
    mesh: &MtoMesh,
    dof_map: &DofMap,
    u: &[f64],
    lambda: &[f64],
    field: &ProjectedDensityField,
    cache: &StiffnessCache,
    rules: &[Arc<QuadratureRule>],
    simp: &Simp,
    ops: &ProjectionOps,
) -> Result<Vec<f64>> {
    let g_int = point_gradient(mesh, dof_map, u, lambda, field, cache, rules, simp)?;
    Ok(ops.chain_gradient(&g_int))
}

fn isqrt_exact(n: usize) -> usize {
    let s = (n as f64).sqrt().round() as usize;
    debug_assert_eq!(s * s, n);
    s
}

const ASYMPTOTE_INIT: f64 = 0.5;
const ASYMPTOTE_SHRINK: f64 = 0.7;
const ASYMPTOTE_GROW: f64 = 1.2;
const ASYMPTOTE_MIN_SPAN: f64 = 0.01;
const ASYMPTOTE_MAX_SPAN: f64 = 10.0;
const MOVE_LIMIT: f64 = 0.2;
const CURVATURE_FLOOR: f64 = 1e-5;
// 64 halvings shrink any bracket below one ulp of its endpoints, so the
// bisection is saturated; more iterations cannot move the result.
const DUAL_BISECTIONS: usize = 64;
const FEASIBILITY_SLACK: f64 = 1e-6;

/// Asymptote and iterate memory carried between design updates. Reset when
/// the mesh state, and with it the design vector length, changes.
#[derive(Debug, Clone, Default)]
pub struct UpdateState {
    low: Option<Vec<f64>>,
    upp: Option<Vec<f64>>,
    x_prev: Option<Vec<f64>>,
    x_prev2: Option<Vec<f64>>,
}

impl UpdateState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// One design step: a separable convex approximation around the current
/// design, solved by bisection on the dual of the volume constraint.
///
/// The returned design lies in `[0, 1]`, moves no component by more than the
/// move limit, and keeps the background-grid volume fraction at or below
/// `v0`. A bound that cannot be met inside the step box is an error.
pub fn design_update(
    rho: &DesignVector,
    gradient: &[f64],
    volume_gradient: &[f64],
    v0: f64,
    state: &mut UpdateState,
) -> Result<DesignVector> {
    let n = rho.values.len();
    if gradient.len() != n || volume_gradient.len() != n {
        return Err(Error::InvalidConfig(format!(
            "gradient lengths {} / {} do not match design length {n}",
            gradient.len(),
            volume_gradient.len()
        )));
    }
    let x = &rho.values;

    // Asymptotes: fixed span on the first step, then widened under monotone
    // progress and tightened under oscillation, componentwise.
    let (low, upp) = match (&state.low, &state.upp, &state.x_prev, &state.x_prev2) {
        (Some(l0), Some(u0), Some(x1), Some(x2)) if l0.len() == n => {
            let mut l = vec![0.0; n];
            let mut u = vec![0.0; n];
            for s in 0..n {
                let osc = (x[s] - x1[s]) * (x1[s] - x2[s]);
                let g = if osc < 0.0 {
                    ASYMPTOTE_SHRINK
                } else if osc > 0.0 {
                    ASYMPTOTE_GROW
                } else {
                    1.0
                };
                l[s] = (x[s] - g * (x1[s] - l0[s]))
                    .clamp(x[s] - ASYMPTOTE_MAX_SPAN, x[s] - ASYMPTOTE_MIN_SPAN);
                u[s] = (x[s] + g * (u0[s] - x1[s]))
                    .clamp(x[s] + ASYMPTOTE_MIN_SPAN, x[s] + ASYMPTOTE_MAX_SPAN);
            }
            (l, u)
        }
        _ => (
            x.iter().map(|&v| v - ASYMPTOTE_INIT).collect::<Vec<_>>(),
            x.iter().map(|&v| v + ASYMPTOTE_INIT).collect::<Vec<_>>(),
        ),
    };

    // Step box: variable bounds, move limit, and a margin keeping iterates
    // strictly inside the asymptotes.
    let mut alpha = vec![0.0; n];
    let mut beta = vec![0.0; n];
    for s in 0..n {
        alpha[s] = (x[s] - MOVE_LIMIT)
            .max(low[s] + 0.1 * (x[s] - low[s]))
            .max(0.0);
        beta[s] = (x[s] + MOVE_LIMIT)
            .min(upp[s] - 0.1 * (upp[s] - x[s]))
            .min(1.0)
            .max(alpha[s]);
    }

    // Separable coefficients with a curvature floor so the subproblem stays
    // strictly convex even where the gradient vanishes.
    let mut p0 = vec![0.0; n];
    let mut q0 = vec![0.0; n];
    let mut p1 = vec![0.0; n];
    for s in 0..n {
        let gp = gradient[s].max(0.0);
        let gm = (-gradient[s]).max(0.0);
        let du = upp[s] - x[s];
        let dl = x[s] - low[s];
        p0[s] = du * du * (1.001 * gp + 0.001 * gm + CURVATURE_FLOOR);
        q0[s] = dl * dl * (1.001 * gm + 0.001 * gp + CURVATURE_FLOOR);
        // Volume weights are nonnegative, so the constraint only needs the
        // upper-asymptote branch. Its approximation touches the exact linear
        // volume at x from above, which makes the accepted step feasible for
        // the exact constraint as well.
        p1[s] = du * du * volume_gradient[s];
    }

    let volume_of = |values: &[f64]| -> f64 {
        values
            .iter()
            .zip(volume_gradient)
            .map(|(a, w)| a * w)
            .sum::<f64>()
    };
    let approx_base: f64 =
        volume_of(x) - (0..n).map(|s| p1[s] / (upp[s] - x[s])).sum::<f64>();
    let approx_volume = |values: &[f64]| -> f64 {
        approx_base
            + (0..n)
                .map(|s| p1[s] / (upp[s] - values[s]))
                .sum::<f64>()
    };
    let sq: Vec<f64> = q0.iter().map(|&v| v.sqrt()).collect();
    let primal = |lambda: f64, out: &mut [f64]| {
        for s in 0..n {
            let sp = (p0[s] + lambda * p1[s]).sqrt();
            out[s] = ((low[s] * sp + upp[s] * sq[s]) / (sp + sq[s])).clamp(alpha[s], beta[s]);
        }
    };

    let mut cand = vec![0.0; n];
    primal(0.0, &mut cand);
    if approx_volume(&cand) > v0 {
        if volume_of(&alpha) > v0 + FEASIBILITY_SLACK {
            return Err(Error::Infeasible(format!(
                "volume bound {v0:.6} is below the attainable minimum {:.6} for this step",
                volume_of(&alpha)
            )));
        }
        let mut lo = 0.0_f64;
        let mut hi = 1.0_f64;
        let mut bracketed = false;
        for _ in 0..64 {
            primal(hi, &mut cand);
            if approx_volume(&cand) <= v0 {
                bracketed = true;
                break;
            }
            lo = hi;
            hi *= 2.0;
        }
        if bracketed {
            for _ in 0..DUAL_BISECTIONS {
                let mid = 0.5 * (lo + hi);
                primal(mid, &mut cand);
                if approx_volume(&cand) <= v0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            primal(hi, &mut cand);
        } else {
            // The approximated volume overestimates the exact one; when even
            // an unbounded multiplier cannot satisfy it, the box corner is
            // still exactly feasible.
            cand.copy_from_slice(&alpha);
        }
    }

    state.x_prev2 = state.x_prev.take();
    state.x_prev = Some(x.clone());
    state.low = Some(low);
    state.upp = Some(upp);
    Ok(DesignVector { values: cand })
}
