// Temporary profiling harness; not part of the deliverable.
use std::time::Instant;

use mto::analysis::{assemble_stiffnesses, volume_rules, DofMap, Simp, StiffnessCache};
use mto::design::{DesignVector, PlacementTable, ProjectionOps};
use mto::mesh::MtoMesh;
use mto::optimizer::{design_gradient, design_update, UpdateState};
use mto::problem::{Benchmark, ProblemKind};

fn main() {
    let placements = PlacementTable::new(0);
    let t = Instant::now();
    let _ = placements.points(64);
    println!("kmeans d=64: {:.3}s", t.elapsed().as_secs_f64());

    let cache = StiffnessCache::new(0.3);
    let simp = Simp::standard(3.0);
    let mesh = MtoMesh::build(40, 20, 2.0, 5, 64, &placements).unwrap();
    let n: usize = mesh.elements.iter().map(|el| el.d).sum();
    let mut rho = DesignVector::uniform(0.45, n);

    let t0 = Instant::now();
    let dof_map = DofMap::build(&mesh).unwrap();
    let rules = volume_rules(&mesh).unwrap();
    let radius = 0.3 * mesh.element_size;
    let ops = ProjectionOps::build(&mesh, &rules, radius).unwrap();
    let mut bench = Benchmark::build(ProblemKind::CantileverPoint, &mesh, &dof_map).unwrap();
    println!("setup: {:.3}s", t0.elapsed().as_secs_f64());

    let mut t_proj = 0.0;
    let mut t_asm = 0.0;
    let mut t_fact = 0.0;
    let mut t_solve = 0.0;
    let mut t_grad = 0.0;
    let mut t_upd = 0.0;
    let mut state = UpdateState::new();
    let iters = 6;
    for it in 0..iters {
        let t = Instant::now();
        let grid = ops.project_design(&mesh, &rho);
        let field = ops.project_grid(&grid);
        t_proj += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let k_elems = assemble_stiffnesses(&mesh, &cache, &simp, &field, &rules).unwrap();
        t_asm += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let f = bench.model.factorize(&k_elems).unwrap();
        t_fact += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let loads = bench.model.loads.clone();
        let primal = f.solve_primal(&loads);
        t_solve += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let g = design_gradient(
            &mesh, &dof_map, &primal.u, &primal.u, &field, &cache, &rules, &simp, &ops,
        )
        .unwrap();
        t_grad += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let vg = ops.volume_gradient();
        rho = design_update(&rho, &g, &vg, 0.45, &mut state).unwrap();
        t_upd += t.elapsed().as_secs_f64();
        if it == 0 {
            println!("first iter (symbolic incl.): fact {:.3}s", t_fact);
        }
    }
    let n = iters as f64;
    println!(
        "baseline per-iter: proj {:.4} asm {:.4} fact {:.4} solve {:.4} grad {:.4} upd {:.4} | total {:.4}",
        t_proj / n,
        t_asm / n,
        t_fact / n,
        t_solve / n,
        t_grad / n,
        t_upd / n,
        (t_proj + t_asm + t_fact + t_solve + t_grad + t_upd) / n
    );
}
