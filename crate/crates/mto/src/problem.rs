//! Benchmark problem definitions: supports, loads, springs, and the
//! objective each one minimizes.

use serde::{Deserialize, Serialize};

use crate::analysis::{DofMap, Factorized, Model, Solution};
use crate::basis::ShapeBasis;
use crate::error::{Error, Result};
use crate::mesh::MtoMesh;
use crate::quadrature::gauss_points_1d;

/// The three benchmark layouts on the 2:1 rectangular domain of height L.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    /// Left edge clamped, unit downward point force at right-edge mid-height.
    CantileverPoint,
    /// Left edge clamped, uniform downward traction on the whole top edge.
    CantileverDistributed,
    /// Compliant mechanism: horizontal input force and spring at left-edge
    /// mid-height, output spring at right-edge mid-height, corner support
    /// pads; minimizes the output displacement.
    ForceInverter,
}

pub const POINT_FORCE: f64 = 1.0;
pub const TRACTION: f64 = 0.5;
pub const INPUT_FORCE: f64 = 1.0;
pub const INPUT_SPRING: f64 = 1.0;
pub const OUTPUT_SPRING: f64 = 0.001;
/// Support pad height on the inverter's left edge, as a fraction of L.
pub const PAD_FRACTION: f64 = 0.01;

/// What the optimizer minimizes and how its adjoint is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// J = f.u; self-adjoint, the primal solution is its own adjoint.
    Compliance,
    /// J = u at one DOF; adjoint right-hand side is that unit vector.
    OutputDisplacement(usize),
}

/// Analysis model plus objective for one benchmark on the current mesh
/// state. Rebuilt each cycle: consistent tractions and node lookups depend
/// on the per-element orders.
pub struct Benchmark {
    pub model: Model,
    pub objective: Objective,
}

impl Benchmark {
    pub fn build(kind: ProblemKind, mesh: &MtoMesh, dof_map: &DofMap) -> Result<Benchmark> {
        let l = mesh.element_size;
        let width = mesh.nx as f64 * l;
        let height = mesh.ny as f64 * l;
        let tol = 1e-9 * l;
        let mut model = Model::new(dof_map.clone());
        match kind {
            ProblemKind::CantileverPoint => {
                model.fix_nodes_where(|pos| pos[0] <= tol, &[0, 1]);
                model.add_point_load([width, 0.5 * height], 1, -POINT_FORCE, tol)?;
                Ok(Benchmark {
                    model,
                    objective: Objective::Compliance,
                })
            }
            ProblemKind::CantileverDistributed => {
                model.fix_nodes_where(|pos| pos[0] <= tol, &[0, 1]);
                apply_top_traction(mesh, dof_map, -TRACTION, &mut model.loads)?;
                Ok(Benchmark {
                    model,
                    objective: Objective::Compliance,
                })
            }
            ProblemKind::ForceInverter => {
                let pad = PAD_FRACTION * height;
                model.fix_nodes_where(
                    |pos| pos[0] <= tol && (pos[1] <= pad + tol || pos[1] >= height - pad - tol),
                    &[0, 1],
                );
                let input = dof_map.node_at([0.0, 0.5 * height], tol).ok_or_else(|| {
                    Error::InvalidConfig("no node at the input location".into())
                })?;
                let output = dof_map
                    .node_at([width, 0.5 * height], tol)
                    .ok_or_else(|| {
                        Error::InvalidConfig("no node at the output location".into())
                    })?;
                let in_dof = 2 * input;
                let out_dof = 2 * output;
                if model.constraints.is_fixed(in_dof) || model.constraints.is_fixed(out_dof) {
                    return Err(Error::InvalidConfig(
                        "input or output DOF landed on a support pad".into(),
                    ));
                }
                model.loads[in_dof] = INPUT_FORCE;
                model.springs.push((in_dof, INPUT_SPRING));
                model.springs.push((out_dof, OUTPUT_SPRING));
                Ok(Benchmark {
                    model,
                    objective: Objective::OutputDisplacement(out_dof),
                })
            }
        }
    }

    /// Objective value for a solved state.
    pub fn objective_value(&self, solution: &Solution) -> f64 {
        match self.objective {
            Objective::Compliance => self.model.compliance(solution),
            Objective::OutputDisplacement(dof) => solution.u[dof],
        }
    }

    /// Adjoint solution for the objective; the factorization must come from
    /// this benchmark's model.
    pub fn adjoint(&self, factorized: &Factorized, primal: &Solution) -> Solution {
        match self.objective {
            Objective::Compliance => primal.clone(),
            Objective::OutputDisplacement(dof) => {
                let mut z = vec![0.0; self.model.loads.len()];
                z[dof] = 1.0;
                factorized.solve_adjoint(&z)
            }
        }
    }
}

/// Consistent nodal loads for a uniform vertical traction on the top edge,
/// integrated with each top-row element's own edge basis.
fn apply_top_traction(
    mesh: &MtoMesh,
    dof_map: &DofMap,
    traction: f64,
    loads: &mut [f64],
) -> Result<()> {
    let l = mesh.element_size;
    let iy = mesh.ny - 1;
    for ix in 0..mesh.nx {
        let e = mesh.element_index(ix, iy);
        let p = mesh.elements[e].p;
        let basis = ShapeBasis::new(p)?;
        let (nodes, weights) = gauss_points_1d(p + 1)?;
        let mut edge = vec![0.0; p + 1];
        for (&x, &w) in nodes.iter().zip(weights) {
            let (values, _) = basis.eval_1d(x);
            for (a, v) in values.iter().enumerate() {
                edge[a] += v * w;
            }
        }
        for (a, v) in edge.iter().enumerate() {
            let local = p * (p + 1) + a;
            dof_map.scatter_local(e, local, 1, traction * 0.5 * l * v, loads);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{assemble_stiffnesses, volume_rules, Simp, StiffnessCache};
    use crate::design::{DesignVector, PlacementTable, ProjectionOps};

    fn mesh_with(nx: usize, ny: usize, p0: usize) -> (MtoMesh, DofMap) {
        let placements = PlacementTable::new(9);
        let mesh = MtoMesh::build(nx, ny, 2.0, p0, 9, &placements).unwrap();
        let dof_map = DofMap::build(&mesh).unwrap();
        (mesh, dof_map)
    }

    fn solve_uniform(kind: ProblemKind, rho: f64) -> (Benchmark, Solution) {
        let (mesh, dof_map) = mesh_with(4, 2, 2);
        let rules = volume_rules(&mesh).unwrap();
        let ops = ProjectionOps::build(&mesh, &rules, 0.3 * mesh.element_size).unwrap();
        let (_, n_design) = mesh.design_offsets();
        let design = DesignVector::uniform(rho, n_design);
        let field = ops.project_grid(&ops.project_design(&mesh, &design));
        let simp = Simp::standard(3.0);
        let cache = StiffnessCache::new(simp.nu);
        let ks = assemble_stiffnesses(&mesh, &cache, &simp, &field, &rules).unwrap();
        let mut bench = Benchmark::build(kind, &mesh, &dof_map).unwrap();
        let sol = bench.model.solve(&ks).unwrap();
        (bench, sol)
    }

    #[test]
    fn point_load_totals_one_newton_downward() {
        let (mesh, dof_map) = mesh_with(4, 2, 2);
        let bench = Benchmark::build(ProblemKind::CantileverPoint, &mesh, &dof_map).unwrap();
        let fy: f64 = bench.model.loads.iter().skip(1).step_by(2).sum();
        let fx: f64 = bench.model.loads.iter().step_by(2).sum();
        assert!((fy + POINT_FORCE).abs() < 1e-12);
        assert!(fx.abs() < 1e-12);
        assert_eq!(bench.objective, Objective::Compliance);
    }

    #[test]
    fn point_cantilever_deflects_down_and_left_edge_stays_fixed() {
        let (bench, sol) = solve_uniform(ProblemKind::CantileverPoint, 1.0);
        let j = bench.objective_value(&sol);
        assert!(j > 0.0, "compliance must be positive, got {j}");
        let tip = bench.model.dof_map.node_at([2.0, 0.5], 1e-9).unwrap();
        assert!(sol.u[2 * tip + 1] < 0.0);
        for (n, pos) in bench.model.dof_map.node_pos.iter().enumerate() {
            if pos[0].abs() < 1e-12 {
                assert_eq!(sol.u[2 * n], 0.0);
                assert_eq!(sol.u[2 * n + 1], 0.0);
            }
        }
    }

    #[test]
    fn traction_resultant_is_width_times_intensity() {
        for p0 in [1, 2, 3] {
            let (mesh, dof_map) = mesh_with(4, 2, p0);
            let bench =
                Benchmark::build(ProblemKind::CantileverDistributed, &mesh, &dof_map).unwrap();
            let fy: f64 = bench.model.loads.iter().skip(1).step_by(2).sum();
            assert!(
                (fy + TRACTION * 2.0).abs() < 1e-12,
                "p0 = {p0}: resultant {fy}"
            );
            let fx: f64 = bench.model.loads.iter().step_by(2).sum();
            assert!(fx.abs() < 1e-12);
        }
    }

    #[test]
    fn traction_loads_follow_per_element_orders() {
        // Mixed top-row orders still integrate the traction consistently.
        let placements = PlacementTable::new(9);
        let mut mesh = MtoMesh::build(4, 2, 2.0, 2, 9, &placements).unwrap();
        for (e, p) in [(4usize, 3usize), (5, 2), (6, 4), (7, 2)] {
            mesh.elements[e].p = p;
        }
        let dof_map = DofMap::build(&mesh).unwrap();
        let bench = Benchmark::build(ProblemKind::CantileverDistributed, &mesh, &dof_map).unwrap();
        let fy: f64 = bench.model.loads.iter().skip(1).step_by(2).sum();
        assert!((fy + TRACTION * 2.0).abs() < 1e-12, "resultant {fy}");
        // Top-edge moment about x = 0 matches the uniform traction's value.
        let mut moment = 0.0;
        for (n, pos) in dof_map.node_pos.iter().enumerate() {
            moment += bench.model.loads[2 * n + 1] * pos[0];
        }
        assert!((moment + TRACTION * 2.0 * 1.0).abs() < 1e-12, "moment {moment}");
    }

    #[test]
    fn traction_only_loads_the_top_edge() {
        let (mesh, dof_map) = mesh_with(5, 3, 3);
        let bench = Benchmark::build(ProblemKind::CantileverDistributed, &mesh, &dof_map).unwrap();
        let height = mesh.ny as f64 * mesh.element_size;
        for (n, pos) in dof_map.node_pos.iter().enumerate() {
            if (pos[1] - height).abs() > 1e-12 {
                assert_eq!(bench.model.loads[2 * n + 1], 0.0, "node at {pos:?}");
            }
            assert_eq!(bench.model.loads[2 * n], 0.0);
        }
    }

    #[test]
    fn inverter_wiring_matches_definition() {
        let (mesh, dof_map) = mesh_with(4, 2, 2);
        let bench = Benchmark::build(ProblemKind::ForceInverter, &mesh, &dof_map).unwrap();
        let in_node = dof_map.node_at([0.0, 0.5], 1e-9).unwrap();
        let out_node = dof_map.node_at([2.0, 0.5], 1e-9).unwrap();
        assert_eq!(bench.model.loads[2 * in_node], INPUT_FORCE);
        assert_eq!(
            bench.model.loads.iter().filter(|v| **v != 0.0).count(),
            1
        );
        assert_eq!(
            bench.model.springs,
            vec![(2 * in_node, INPUT_SPRING), (2 * out_node, OUTPUT_SPRING)]
        );
        assert_eq!(bench.objective, Objective::OutputDisplacement(2 * out_node));
        // Corner pads only: mid-edge input node stays free, corners are fixed.
        assert!(!bench.model.constraints.is_fixed(2 * in_node));
        let bl = dof_map.node_at([0.0, 0.0], 1e-9).unwrap();
        let tl = dof_map.node_at([0.0, 1.0], 1e-9).unwrap();
        assert!(bench.model.constraints.is_fixed(2 * bl));
        assert!(bench.model.constraints.is_fixed(2 * bl + 1));
        assert!(bench.model.constraints.is_fixed(2 * tl));
        assert!(bench.model.constraints.is_fixed(2 * tl + 1));
    }

    #[test]
    fn inverter_solves_and_reports_the_output_displacement() {
        let (bench, sol) = solve_uniform(ProblemKind::ForceInverter, 0.5);
        let j = bench.objective_value(&sol);
        let Objective::OutputDisplacement(dof) = bench.objective else {
            panic!("wrong objective kind");
        };
        assert_eq!(j, sol.u[dof]);
        // The input spring bounds the input displacement from above.
        let in_node = bench.model.dof_map.node_at([0.0, 0.5], 1e-9).unwrap();
        let u_in = sol.u[2 * in_node];
        assert!(u_in > 0.0 && u_in < INPUT_FORCE / INPUT_SPRING, "u_in = {u_in}");
    }

    #[test]
    fn compliance_adjoint_is_the_primal_solution() {
        let (mesh, dof_map) = mesh_with(4, 2, 2);
        let rules = volume_rules(&mesh).unwrap();
        let ops = ProjectionOps::build(&mesh, &rules, 0.3 * mesh.element_size).unwrap();
        let (_, n_design) = mesh.design_offsets();
        let design = DesignVector::uniform(0.6, n_design);
        let field = ops.project_grid(&ops.project_design(&mesh, &design));
        let simp = Simp::standard(3.0);
        let cache = StiffnessCache::new(simp.nu);
        let ks = assemble_stiffnesses(&mesh, &cache, &simp, &field, &rules).unwrap();
        let mut bench = Benchmark::build(ProblemKind::CantileverPoint, &mesh, &dof_map).unwrap();
        let fact = bench.model.factorize(&ks).unwrap();
        let loads = bench.model.loads.clone();
        let sol = fact.solve_primal(&loads);
        let adj = bench.adjoint(&fact, &sol);
        assert_eq!(adj.u, sol.u);
    }

    #[test]
    fn inverter_adjoint_solves_the_unit_output_system() {
        let (mesh, dof_map) = mesh_with(4, 2, 2);
        let rules = volume_rules(&mesh).unwrap();
        let ops = ProjectionOps::build(&mesh, &rules, 0.3 * mesh.element_size).unwrap();
        let (_, n_design) = mesh.design_offsets();
        let design = DesignVector::uniform(0.5, n_design);
        let field = ops.project_grid(&ops.project_design(&mesh, &design));
        let simp = Simp::standard(3.0);
        let cache = StiffnessCache::new(simp.nu);
        let ks = assemble_stiffnesses(&mesh, &cache, &simp, &field, &rules).unwrap();
        let mut bench = Benchmark::build(ProblemKind::ForceInverter, &mesh, &dof_map).unwrap();
        let fact = bench.model.factorize(&ks).unwrap();
        let loads = bench.model.loads.clone();
        let sol = fact.solve_primal(&loads);
        let adj = bench.adjoint(&fact, &sol);
        // Reciprocity: z.u_primal = f.u_adjoint for the symmetric system.
        let Objective::OutputDisplacement(dof) = bench.objective else {
            panic!("wrong objective kind");
        };
        let f_dot_adj: f64 = loads.iter().zip(&adj.u).map(|(a, b)| a * b).sum();
        assert!(
            (sol.u[dof] - f_dot_adj).abs() <= 1e-10 * sol.u[dof].abs().max(1e-12),
            "{} vs {}",
            sol.u[dof],
            f_dot_adj
        );
    }
}
