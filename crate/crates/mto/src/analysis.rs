//! Finite-element analysis on meshes with per-element polynomial order.
//!
//! Plane stress, unit thickness, square elements. Continuity across an edge
//! shared by elements of different order is enforced by constraining the
//! higher-order side to the trace of the lower-order side: every element edge
//! has an owner order `q` (the minimum of the adjacent element orders), the
//! edge carries `q - 1` interior scalar nodes, and local nodes of a
//! higher-order side interpolate the owner's 1D trace. Element matrices are
//! reduced through that map, so the assembled system only ever sees conforming
//! unknowns.
//!
//! Element stiffness integration uses cached per-point matrices. On a square,
//! the reference-gradient form of the stiffness is independent of element
//! size (the Jacobian powers cancel in 2D), so one cache entry serves every
//! element sharing a (order, rule) pair, scaled pointwise by the material
//! modulus.

use crate::basis::{lagrange_1d, ShapeBasis, MAX_BASIS_ORDER};
use crate::design::ProjectedDensityField;
use crate::error::{Error, Result};
use crate::mesh::MtoMesh;
use crate::quadrature::{select_rule, shared_rule, QuadratureRule};
use faer::linalg::solvers::Solve;
use faer::prelude::Reborrow;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{Argsort, Pair, SparseColMat, SymbolicSparseColMat};
use nalgebra::{DMatrix, DVector, Matrix3};
use rayon::prelude::*;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, Once};

/// Weighted references into the global scalar-node vector. A conforming local
/// node carries one unit entry; a constrained one interpolates its edge owner.
pub type NodeWeights = Vec<(usize, f64)>;

/// Global scalar-node numbering plus per-element local-to-global maps.
///
/// Scalar nodes are numbered vertices first, then horizontal-edge interiors
/// (row-major, left to right within an edge), then vertical-edge interiors
/// (row-major, bottom to top within an edge), then element interiors
/// (row-major elements, tensor order within). Each scalar node carries two
/// dofs, interleaved: `2 * node` is the x component.
#[derive(Debug, Clone)]
pub struct DofMap {
    pub nx: usize,
    pub ny: usize,
    pub n_scalar: usize,
    pub node_pos: Vec<[f64; 2]>,
    /// Per element, per local scalar node in tensor order.
    pub entries: Vec<Vec<NodeWeights>>,
}

impl DofMap {
    pub fn build(mesh: &MtoMesh) -> Result<DofMap> {
        let (nx, ny) = (mesh.nx, mesh.ny);
        let l = mesh.element_size;
        for el in &mesh.elements {
            if el.p < 1 || el.p > MAX_BASIS_ORDER {
                return Err(Error::InvalidConfig(format!(
                    "element {} has order {}, outside 1..={MAX_BASIS_ORDER}",
                    el.index, el.p
                )));
            }
        }
        let p_of = |ix: usize, iy: usize| mesh.elements[iy * nx + ix].p;

        let n_vertices = (nx + 1) * (ny + 1);
        let mut node_pos: Vec<[f64; 2]> = Vec::new();
        for vy in 0..=ny {
            for vx in 0..=nx {
                node_pos.push([vx as f64 * l, vy as f64 * l]);
            }
        }

        // Horizontal edges: between vertex (ex, ey) and (ex + 1, ey).
        let mut h_offset = vec![0usize; nx * (ny + 1)];
        let mut h_q = vec![0usize; nx * (ny + 1)];
        let mut next = n_vertices;
        for ey in 0..=ny {
            for ex in 0..nx {
                let mut q = usize::MAX;
                if ey > 0 {
                    q = q.min(p_of(ex, ey - 1));
                }
                if ey < ny {
                    q = q.min(p_of(ex, ey));
                }
                let idx = ey * nx + ex;
                h_q[idx] = q;
                h_offset[idx] = next;
                for k in 1..q {
                    node_pos.push([(ex as f64 + k as f64 / q as f64) * l, ey as f64 * l]);
                }
                next += q - 1;
            }
        }

        // Vertical edges: between vertex (ex, ey) and (ex, ey + 1).
        let mut v_offset = vec![0usize; (nx + 1) * ny];
        let mut v_q = vec![0usize; (nx + 1) * ny];
        for ey in 0..ny {
            for ex in 0..=nx {
                let mut q = usize::MAX;
                if ex > 0 {
                    q = q.min(p_of(ex - 1, ey));
                }
                if ex < nx {
                    q = q.min(p_of(ex, ey));
                }
                let idx = ey * (nx + 1) + ex;
                v_q[idx] = q;
                v_offset[idx] = next;
                for k in 1..q {
                    node_pos.push([ex as f64 * l, (ey as f64 + k as f64 / q as f64) * l]);
                }
                next += q - 1;
            }
        }

        let mut int_offset = vec![0usize; nx * ny];
        for e in 0..nx * ny {
            let p = mesh.elements[e].p;
            int_offset[e] = next;
            let (ex, ey) = mesh.grid_coords(e);
            for j in 1..p {
                for i in 1..p {
                    node_pos.push([
                        (ex as f64 + i as f64 / p as f64) * l,
                        (ey as f64 + j as f64 / p as f64) * l,
                    ]);
                }
            }
            next += (p - 1) * (p - 1);
        }
        let n_scalar = next;

        let vertex = |vx: usize, vy: usize| vy * (nx + 1) + vx;
        // Global ids along an edge in its canonical direction, endpoints
        // included, for trace interpolation.
        let h_edge_ids = |ex: usize, ey: usize| -> Vec<usize> {
            let idx = ey * nx + ex;
            let mut ids = vec![vertex(ex, ey)];
            ids.extend((0..h_q[idx] - 1).map(|k| h_offset[idx] + k));
            ids.push(vertex(ex + 1, ey));
            ids
        };
        let v_edge_ids = |ex: usize, ey: usize| -> Vec<usize> {
            let idx = ey * (nx + 1) + ex;
            let mut ids = vec![vertex(ex, ey)];
            ids.extend((0..v_q[idx] - 1).map(|k| v_offset[idx] + k));
            ids.push(vertex(ex, ey + 1));
            ids
        };
        // Trace weights for a local node at parameter t in [0, 1] along an
        // edge owned at order q. Exact zeros are pruned so nodes landing on
        // an owner node reduce to a direct reference.
        let trace = |t: f64, q: usize, ids: &[usize]| -> NodeWeights {
            let nodes: Vec<f64> = (0..=q).map(|k| 2.0 * k as f64 / q as f64 - 1.0).collect();
            let (vals, _) = lagrange_1d(&nodes, 2.0 * t - 1.0);
            ids.iter()
                .zip(vals)
                .filter(|&(_, w)| w != 0.0)
                .map(|(&g, w)| (g, w))
                .collect()
        };

        let mut entries = Vec::with_capacity(nx * ny);
        for e in 0..nx * ny {
            let p = mesh.elements[e].p;
            let (ex, ey) = mesh.grid_coords(e);
            let mut local = Vec::with_capacity((p + 1) * (p + 1));
            for j in 0..=p {
                for i in 0..=p {
                    let corner_x = i == 0 || i == p;
                    let corner_y = j == 0 || j == p;
                    let entry: NodeWeights = if corner_x && corner_y {
                        vec![(vertex(ex + i / p, ey + j / p), 1.0)]
                    } else if corner_y {
                        // Bottom or top edge, horizontal.
                        let edge_ey = ey + j / p;
                        let idx = edge_ey * nx + ex;
                        let q = h_q[idx];
                        if q == p {
                            vec![(h_offset[idx] + i - 1, 1.0)]
                        } else {
                            trace(i as f64 / p as f64, q, &h_edge_ids(ex, edge_ey))
                        }
                    } else if corner_x {
                        // Left or right edge, vertical.
                        let edge_ex = ex + i / p;
                        let idx = ey * (nx + 1) + edge_ex;
                        let q = v_q[idx];
                        if q == p {
                            vec![(v_offset[idx] + j - 1, 1.0)]
                        } else {
                            trace(j as f64 / p as f64, q, &v_edge_ids(edge_ex, ey))
                        }
                    } else {
                        vec![(int_offset[e] + (j - 1) * (p - 1) + (i - 1), 1.0)]
                    };
                    local.push(entry);
                }
            }
            entries.push(local);
        }

        Ok(DofMap {
            nx,
            ny,
            n_scalar,
            node_pos,
            entries,
        })
    }

    pub fn n_dofs(&self) -> usize {
        2 * self.n_scalar
    }

    pub fn vertex_node(&self, vx: usize, vy: usize) -> usize {
        vy * (self.nx + 1) + vx
    }

    /// Scalar node at a physical position, if any lies within `tol`.
    pub fn node_at(&self, pos: [f64; 2], tol: f64) -> Option<usize> {
        self.node_pos
            .iter()
            .position(|n| (n[0] - pos[0]).abs() <= tol && (n[1] - pos[1]).abs() <= tol)
    }

    /// Accumulate a local nodal value into the global load vector, applying
    /// the transpose of the conformity map.
    pub fn scatter_local(&self, e: usize, local: usize, comp: usize, value: f64, f: &mut [f64]) {
        for &(g, w) in &self.entries[e][local] {
            f[2 * g + comp] += w * value;
        }
    }

    /// Local displacement vector of an element, interleaved components,
    /// constrained nodes evaluated through their trace weights.
    pub fn gather_element(&self, e: usize, u: &[f64]) -> Vec<f64> {
        let ent = &self.entries[e];
        let mut out = vec![0.0; 2 * ent.len()];
        for (a, targets) in ent.iter().enumerate() {
            for &(g, w) in targets {
                out[2 * a] += w * u[2 * g];
                out[2 * a + 1] += w * u[2 * g + 1];
            }
        }
        out
    }
}

/// Power-law interpolation between a void and a solid modulus.
#[derive(Debug, Clone, Copy)]
pub struct Simp {
    pub e0: f64,
    pub e_min: f64,
    pub exponent: f64,
    pub nu: f64,
}

impl Simp {
    /// Unit solid modulus, near-zero void floor, nu = 0.3.
    pub fn standard(exponent: f64) -> Self {
        Self {
            e0: 1.0,
            e_min: 1e-9,
            exponent,
            nu: 0.3,
        }
    }

    pub fn modulus(&self, rho: f64) -> f64 {
        self.e_min + rho.powf(self.exponent) * (self.e0 - self.e_min)
    }

    /// Derivative of the modulus with respect to the density value.
    pub fn dmodulus(&self, rho: f64) -> f64 {
        self.exponent * rho.powf(self.exponent - 1.0) * (self.e0 - self.e_min)
    }
}

/// Plane-stress elasticity matrix for unit modulus.
pub fn elasticity_unit(nu: f64) -> Matrix3<f64> {
    let c = 1.0 / (1.0 - nu * nu);
    Matrix3::new(
        c,
        c * nu,
        0.0,
        c * nu,
        c,
        0.0,
        0.0,
        0.0,
        c * (1.0 - nu) / 2.0,
    )
}

/// Cached per-integration-point element matrices for one (order, rule) pair.
#[derive(Debug)]
pub struct PointData {
    /// Local dof count, `2 (p + 1)^2`.
    pub m: usize,
    /// Reference-gradient components, one column per integration point.
    gx: DMatrix<f64>,
    gy: DMatrix<f64>,
    /// Elasticity matrix times quadrature weight per point.
    pub dw: Vec<Matrix3<f64>>,
    /// Row i holds the lower triangle of point i's stiffness contribution,
    /// column-by-column, so the element stiffness is the modulus vector
    /// contracted against this and mirrored. Halving the width halves the
    /// work of the hottest product in assembly.
    flat: DMatrix<f64>,
}

/// Process-wide cache of [`PointData`] keyed by (order, points per axis).
#[derive(Debug)]
pub struct StiffnessCache {
    nu: f64,
    map: Mutex<HashMap<(usize, usize), Arc<PointData>>>,
}

impl StiffnessCache {
    pub fn new(nu: f64) -> Self {
        Self {
            nu,
            map: Mutex::new(HashMap::new()),
        }
    }

    pub fn get(&self, p: usize, n_per_axis: usize) -> Result<Arc<PointData>> {
        if let Some(hit) = self.map.lock().expect("cache poisoned").get(&(p, n_per_axis)) {
            return Ok(hit.clone());
        }
        let built = Arc::new(build_point_data(p, n_per_axis, self.nu)?);
        self.map
            .lock()
            .expect("cache poisoned")
            .insert((p, n_per_axis), built.clone());
        Ok(built)
    }
}

fn build_point_data(p: usize, n_per_axis: usize, nu: f64) -> Result<PointData> {
    let basis = ShapeBasis::new(p)?;
    let rule = shared_rule(n_per_axis)?;
    let nl = basis.n_sup();
    let m = 2 * nl;
    let d_unit = elasticity_unit(nu);
    let mut gx = DMatrix::zeros(nl, rule.len());
    let mut gy = DMatrix::zeros(nl, rule.len());
    let mut dw_all = Vec::with_capacity(rule.len());
    let mut flat = DMatrix::zeros(rule.len(), m * (m + 1) / 2);
    for (i, (&pt, &w)) in rule.points.iter().zip(&rule.weights).enumerate() {
        let (_, grads) = basis.eval(pt);
        let mut b = DMatrix::zeros(3, m);
        for a in 0..nl {
            b[(0, 2 * a)] = grads[a][0];
            b[(2, 2 * a)] = grads[a][1];
            b[(1, 2 * a + 1)] = grads[a][1];
            b[(2, 2 * a + 1)] = grads[a][0];
            gx[(a, i)] = grads[a][0];
            gy[(a, i)] = grads[a][1];
        }
        let dw = d_unit * w;
        let c = b.transpose() * dw * &b;
        let mut col = 0;
        for s in 0..m {
            for r in s..m {
                flat[(i, col)] = c[(r, s)];
                col += 1;
            }
        }
        dw_all.push(dw);
    }
    Ok(PointData {
        m,
        gx,
        gy,
        dw: dw_all,
        flat,
    })
}

/// Element stiffness for pointwise moduli: the modulus-weighted sum of the
/// cached per-point matrices. Valid for any element size; the square-element
/// Jacobian factors cancel in plane problems.
pub fn element_stiffness(data: &PointData, moduli: &[f64]) -> DMatrix<f64> {
    debug_assert_eq!(moduli.len(), data.flat.nrows());
    let e = DVector::from_column_slice(moduli);
    let low = data.flat.tr_mul(&e);
    let m = data.m;
    let mut k = DMatrix::zeros(m, m);
    let mut col = 0;
    for s in 0..m {
        for r in s..m {
            let v = low[col];
            col += 1;
            k[(r, s)] = v;
            k[(s, r)] = v;
        }
    }
    k
}

/// Per-point contraction `(B lambda) . (D w) (B u)`, the derivative of the
/// element energy with respect to each point's modulus.
pub fn point_energy_derivatives(data: &PointData, u_e: &[f64], lambda_e: &[f64]) -> Vec<f64> {
    let nl = data.m / 2;
    debug_assert_eq!(u_e.len(), data.m);
    debug_assert_eq!(lambda_e.len(), data.m);
    (0..data.dw.len())
        .map(|i| {
            let mut su = [0.0f64; 3];
            let mut sl = [0.0f64; 3];
            for a in 0..nl {
                let gxa = data.gx[(a, i)];
                let gya = data.gy[(a, i)];
                su[0] += gxa * u_e[2 * a];
                su[1] += gya * u_e[2 * a + 1];
                su[2] += gya * u_e[2 * a] + gxa * u_e[2 * a + 1];
                sl[0] += gxa * lambda_e[2 * a];
                sl[1] += gya * lambda_e[2 * a + 1];
                sl[2] += gya * lambda_e[2 * a] + gxa * lambda_e[2 * a + 1];
            }
            let dw = &data.dw[i];
            let r0 = dw[(0, 0)] * su[0] + dw[(0, 1)] * su[1] + dw[(0, 2)] * su[2];
            let r1 = dw[(1, 0)] * su[0] + dw[(1, 1)] * su[1] + dw[(1, 2)] * su[2];
            let r2 = dw[(2, 0)] * su[0] + dw[(2, 1)] * su[1] + dw[(2, 2)] * su[2];
            sl[0] * r0 + sl[1] * r1 + sl[2] * r2
        })
        .collect()
}

/// Integration rule per element for stiffness assembly, sized to the
/// element's design-point count and order.
pub fn volume_rules(mesh: &MtoMesh) -> Result<Vec<Arc<QuadratureRule>>> {
    mesh.elements
        .iter()
        .map(|el| shared_rule(select_rule(el.d, el.p)))
        .collect()
}

/// Element stiffness matrices for a projected density field.
pub fn assemble_stiffnesses(
    mesh: &MtoMesh,
    cache: &StiffnessCache,
    simp: &Simp,
    field: &ProjectedDensityField,
    rules: &[Arc<QuadratureRule>],
) -> Result<Vec<DMatrix<f64>>> {
    let data: Vec<Arc<PointData>> = mesh
        .elements
        .iter()
        .enumerate()
        .map(|(e, el)| cache.get(el.p, isqrt_exact(rules[e].len())))
        .collect::<Result<_>>()?;
    Ok((0..mesh.n_elements())
        .into_par_iter()
        .map(|e| {
            let moduli: Vec<f64> = field.element(e).iter().map(|&r| simp.modulus(r)).collect();
            element_stiffness(&data[e], &moduli)
        })
        .collect())
}

fn isqrt_exact(n: usize) -> usize {
    let s = (n as f64).sqrt().round() as usize;
    debug_assert_eq!(s * s, n);
    s
}

/// Scalar mass matrix between bases of two orders on the same element,
/// `M_ab = scale * sum_i N_a(x_i) N_b(x_i) w_i`.
pub fn scalar_mass(p_row: usize, p_col: usize, n_per_axis: usize, scale: f64) -> Result<DMatrix<f64>> {
    let row_basis = ShapeBasis::new(p_row)?;
    let col_basis = ShapeBasis::new(p_col)?;
    let rule = shared_rule(n_per_axis)?;
    let mut m = DMatrix::zeros(row_basis.n_sup(), col_basis.n_sup());
    for (&pt, &w) in rule.points.iter().zip(&rule.weights) {
        let (nr, _) = row_basis.eval(pt);
        let (nc, _) = col_basis.eval(pt);
        for a in 0..nr.len() {
            for b in 0..nc.len() {
                m[(a, b)] += scale * nr[a] * nc[b] * w;
            }
        }
    }
    Ok(m)
}

/// Dirichlet data: `Some(value)` pins a dof.
#[derive(Debug, Clone)]
pub struct Constraints {
    pub value: Vec<Option<f64>>,
}

impl Constraints {
    pub fn none(n_dofs: usize) -> Self {
        Self {
            value: vec![None; n_dofs],
        }
    }

    pub fn fix(&mut self, dof: usize, value: f64) {
        self.value[dof] = Some(value);
    }

    pub fn is_fixed(&self, dof: usize) -> bool {
        self.value[dof].is_some()
    }

    pub fn n_free(&self) -> usize {
        self.value.iter().filter(|v| v.is_none()).count()
    }
}

/// One discretized boundary-value problem: dof numbering, supports, springs,
/// and the external load vector. Reusable across repeated solves with
/// updated stiffness values; the index sort and the symbolic factorization
/// are computed once.
#[derive(Debug)]
pub struct Model {
    pub dof_map: DofMap,
    pub constraints: Constraints,
    /// Diagonal stiffness additions, `(dof, stiffness)`.
    pub springs: Vec<(usize, f64)>,
    pub loads: Vec<f64>,
    plan: Option<AssemblyPlan>,
}

/// Where every element stiffness entry lands in the assembled free block.
/// The index pairs depend only on the mesh and the constraint set, so the
/// duplicate-merging sort and both symbolic analyses happen once; each
/// density update just refills values in the recorded order.
struct AssemblyPlan {
    free: Vec<usize>,
    /// Entry span per element into `ke_idx` and `weight`.
    spans: Vec<(usize, usize)>,
    /// Column-major index into the element stiffness, per entry.
    ke_idx: Vec<u32>,
    /// Product of the two conformity weights, per entry.
    weight: Vec<f64>,
    /// Spring values appended after the element entries.
    spring_values: Vec<f64>,
    /// Load-correction span per element into the `corr_*` arrays; entries
    /// arise from columns held at a nonzero prescribed displacement.
    corr_spans: Vec<(usize, usize)>,
    corr_row: Vec<u32>,
    corr_ke_idx: Vec<u32>,
    corr_weight: Vec<f64>,
    matrix: SymbolicSparseColMat<u32>,
    order: Argsort<u32>,
    llt: SymbolicLlt<u32>,
    /// Constraint and spring state the plan was built for; a change in
    /// either invalidates it.
    constraint_values: Vec<Option<f64>>,
    spring_state: Vec<(usize, f64)>,
}

impl std::fmt::Debug for AssemblyPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AssemblyPlan")
            .field("free", &self.free.len())
            .field("entries", &self.ke_idx.len())
            .finish_non_exhaustive()
    }
}

/// Factorized constrained stiffness, reusable across load vectors.
pub struct Factorized {
    llt: Llt<u32, f64>,
    free: Vec<usize>,
    prescribed: Vec<Option<f64>>,
    corrections: Vec<f64>,
}

impl Factorized {
    /// Solve with prescribed values honored and folded into the right side.
    pub fn solve_primal(&self, loads: &[f64]) -> Solution {
        self.solve_inner(loads, true)
    }

    /// Solve with homogeneous constraints, as adjoint systems require.
    pub fn solve_adjoint(&self, loads: &[f64]) -> Solution {
        self.solve_inner(loads, false)
    }

    fn solve_inner(&self, loads: &[f64], honor_prescribed: bool) -> Solution {
        let nf = self.free.len();
        let rhs = faer::Mat::from_fn(nf, 1, |i, _| {
            let base = loads[self.free[i]];
            if honor_prescribed {
                base + self.corrections[i]
            } else {
                base
            }
        });
        let sol = self.llt.solve(rhs);
        let mut u = vec![0.0; self.prescribed.len()];
        if honor_prescribed {
            for (dof, value) in self.prescribed.iter().enumerate() {
                if let Some(v) = value {
                    u[dof] = *v;
                }
            }
        }
        for (fi, &dof) in self.free.iter().enumerate() {
            u[dof] = sol[(fi, 0)];
        }
        Solution { u }
    }
}

/// Full displacement vector, prescribed dofs included.
#[derive(Debug, Clone)]
pub struct Solution {
    pub u: Vec<f64>,
}

fn seq_solver_setup() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        // Deterministic factorization: single-threaded inside the solver.
        faer::set_global_parallelism(faer::Par::Seq);
    });
}

impl Model {
    pub fn new(dof_map: DofMap) -> Self {
        let n = dof_map.n_dofs();
        Self {
            dof_map,
            constraints: Constraints::none(n),
            springs: Vec::new(),
            loads: vec![0.0; n],
            plan: None,
        }
    }

    /// Point load at a scalar node located by physical position.
    pub fn add_point_load(&mut self, pos: [f64; 2], comp: usize, value: f64, tol: f64) -> Result<()> {
        let node = self.dof_map.node_at(pos, tol).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "no node at load position ({}, {})",
                pos[0], pos[1]
            ))
        })?;
        self.loads[2 * node + comp] += value;
        Ok(())
    }

    /// Fix every dof of scalar nodes selected by a position predicate.
    /// Returns how many nodes matched.
    pub fn fix_nodes_where(&mut self, pred: impl Fn(&[f64; 2]) -> bool, comps: &[usize]) -> usize {
        let mut hit = 0;
        for (n, pos) in self.dof_map.node_pos.iter().enumerate() {
            if pred(pos) {
                for &c in comps {
                    self.constraints.fix(2 * n + c, 0.0);
                }
                hit += 1;
            }
        }
        hit
    }

    fn build_plan(&self) -> Result<AssemblyPlan> {
        let n_dofs = self.dof_map.n_dofs();
        let mut free_index = vec![u32::MAX; n_dofs];
        let mut free = Vec::with_capacity(n_dofs);
        for dof in 0..n_dofs {
            if !self.constraints.is_fixed(dof) {
                free_index[dof] = free.len() as u32;
                free.push(dof);
            }
        }
        let nf = free.len();
        if nf == 0 {
            return Err(Error::InvalidConfig("every dof is constrained".into()));
        }

        // Per-element scatter through the conformity maps, reduced to the
        // free block; prescribed columns fold into load corrections. Only
        // the lower triangle is recorded: the factorization reads nothing
        // else, and the upper half would double the assembly footprint.
        // Exact zeros stay in: the sparsity pattern must depend on the mesh
        // only, or the cached symbolic analyses go stale across updates.
        struct ElemPlan {
            pairs: Vec<Pair<u32, u32>>,
            ke_idx: Vec<u32>,
            weight: Vec<f64>,
            corr: Vec<(u32, u32, f64)>,
        }
        let per_elem: Vec<ElemPlan> = (0..self.dof_map.entries.len())
            .into_par_iter()
            .map(|e| {
                let ent = &self.dof_map.entries[e];
                let m = 2 * ent.len();
                let mut ep = ElemPlan {
                    pairs: Vec::new(),
                    ke_idx: Vec::new(),
                    weight: Vec::new(),
                    corr: Vec::new(),
                };
                for (a, ta) in ent.iter().enumerate() {
                    for ca in 0..2 {
                        for &(ga, wa) in ta {
                            let row = 2 * ga + ca;
                            let fr = free_index[row];
                            if fr == u32::MAX {
                                continue;
                            }
                            for (b, tb) in ent.iter().enumerate() {
                                for cb in 0..2 {
                                    let ke_flat = ((2 * b + cb) * m + (2 * a + ca)) as u32;
                                    for &(gb, wb) in tb {
                                        let col = 2 * gb + cb;
                                        match self.constraints.value[col] {
                                            None => {
                                                let fc = free_index[col];
                                                if fr >= fc {
                                                    ep.pairs.push(Pair { row: fr, col: fc });
                                                    ep.ke_idx.push(ke_flat);
                                                    ep.weight.push(wa * wb);
                                                }
                                            }
                                            Some(pv) => {
                                                if pv != 0.0 {
                                                    ep.corr.push((fr, ke_flat, -(wa * wb) * pv));
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                ep
            })
            .collect();

        let total: usize = per_elem.iter().map(|ep| ep.ke_idx.len()).sum();
        let mut pairs = Vec::with_capacity(total + self.springs.len());
        let mut ke_idx = Vec::with_capacity(total);
        let mut weight = Vec::with_capacity(total);
        let mut spans = Vec::with_capacity(per_elem.len());
        let mut corr_spans = Vec::with_capacity(per_elem.len());
        let mut corr_row = Vec::new();
        let mut corr_ke_idx = Vec::new();
        let mut corr_weight = Vec::new();
        for ep in per_elem {
            spans.push((ke_idx.len(), ke_idx.len() + ep.ke_idx.len()));
            pairs.extend_from_slice(&ep.pairs);
            ke_idx.extend_from_slice(&ep.ke_idx);
            weight.extend_from_slice(&ep.weight);
            corr_spans.push((corr_row.len(), corr_row.len() + ep.corr.len()));
            for (row, idx, w) in ep.corr {
                corr_row.push(row);
                corr_ke_idx.push(idx);
                corr_weight.push(w);
            }
        }
        let mut spring_values = Vec::new();
        for &(dof, k) in &self.springs {
            let fr = free_index[dof];
            if fr != u32::MAX {
                pairs.push(Pair { row: fr, col: fr });
                spring_values.push(k);
            }
        }

        let (matrix, order) = SymbolicSparseColMat::try_new_from_indices(nf, nf, &pairs)
            .map_err(|e| Error::Numerical(format!("stiffness assembly failed: {e:?}")))?;
        let llt = SymbolicLlt::try_new(matrix.rb(), faer::Side::Lower)
            .map_err(|e| Error::Numerical(format!("symbolic factorization: {e:?}")))?;
        Ok(AssemblyPlan {
            free,
            spans,
            ke_idx,
            weight,
            spring_values,
            corr_spans,
            corr_row,
            corr_ke_idx,
            corr_weight,
            matrix,
            order,
            llt,
            constraint_values: self.constraints.value.clone(),
            spring_state: self.springs.clone(),
        })
    }

    /// Assemble and factorize the constrained stiffness for the given element
    /// matrices. The result can back-substitute any number of load vectors.
    pub fn factorize(&mut self, k_elems: &[DMatrix<f64>]) -> Result<Factorized> {
        seq_solver_setup();
        let stale = self.plan.as_ref().is_none_or(|plan| {
            plan.constraint_values != self.constraints.value || plan.spring_state != self.springs
        });
        if stale {
            self.plan = Some(self.build_plan()?);
        }
        let plan = self.plan.as_ref().expect("just built");
        debug_assert_eq!(plan.spans.len(), k_elems.len());

        let n_entries = plan.ke_idx.len();
        let mut values = vec![0.0; n_entries + plan.spring_values.len()];
        let mut corrections = vec![0.0; plan.free.len()];
        for (e, ke) in k_elems.iter().enumerate() {
            let ks = ke.as_slice();
            let (s, t) = plan.spans[e];
            for i in s..t {
                values[i] = plan.weight[i] * ks[plan.ke_idx[i] as usize];
            }
            let (s, t) = plan.corr_spans[e];
            for i in s..t {
                corrections[plan.corr_row[i] as usize] +=
                    plan.corr_weight[i] * ks[plan.corr_ke_idx[i] as usize];
            }
        }
        values[n_entries..].copy_from_slice(&plan.spring_values);

        let mat = SparseColMat::new_from_argsort(plan.matrix.clone(), &plan.order, &values)
            .map_err(|e| Error::Numerical(format!("stiffness assembly failed: {e:?}")))?;
        let llt = Llt::try_new_with_symbolic(plan.llt.clone(), mat.rb(), faer::Side::Lower)
            .map_err(|e| Error::Numerical(format!("matrix not positive definite: {e:?}")))?;
        Ok(Factorized {
            llt,
            free: plan.free.clone(),
            prescribed: self.constraints.value.clone(),
            corrections,
        })
    }

    /// Factorize and solve under the model's own load vector.
    pub fn solve(&mut self, k_elems: &[DMatrix<f64>]) -> Result<Solution> {
        let loads = self.loads.clone();
        Ok(self.factorize(k_elems)?.solve_primal(&loads))
    }

    /// Work done by the external loads, `f . u`.
    pub fn compliance(&self, solution: &Solution) -> f64 {
        self.loads
            .iter()
            .zip(&solution.u)
            .map(|(f, u)| f * u)
            .sum()
    }
}

/// Strain energy of one element, `u_e^T K_e u_e / 2`, with `u_e` gathered
/// through the conformity map.
pub fn element_strain_energy(dof_map: &DofMap, e: usize, k_e: &DMatrix<f64>, u: &[f64]) -> f64 {
    let ue = DVector::from_vec(dof_map.gather_element(e, u));
    0.5 * (ue.transpose() * k_e * &ue)[(0, 0)]
}
