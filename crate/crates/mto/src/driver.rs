//! Whole-run orchestration: repeated optimize-to-stop stages with an
//! adaptation pass between them, a uniform-mesh mode that shares the same
//! stage loop, fine-mesh re-analysis of a finished design, and artifact
//! export. The uniform mode differs from the adaptive one in exactly one
//! way: it skips the adaptation pass, so the two modes stay comparable
//! kernel for kernel.

use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::adaptivity::{design_point_budget, run_adaptive_cycle};
use crate::analysis::{assemble_stiffnesses, volume_rules, DofMap, Simp, StiffnessCache};
use crate::config::{Config, RunMode};
use crate::design::{
    volume_fraction, BackgroundGrid, DesignVector, PlacementTable, ProjectedDensityField,
    ProjectionOps,
};
use crate::error::{Error, Result};
use crate::export::{
    indicators_csv, log_csv, mesh_csv, write_design_pgm, write_summary, CycleSummary, LogRow,
    RunSummary,
};
use crate::indicators::{density_bounds, density_indicators, kelly};
use crate::mesh::{MtoMesh, Theta};
use crate::optimizer::{
    continuation_q, design_gradient, design_update, StoppingRule, UpdateState,
};
use crate::problem::Benchmark;

/// Density-indicator bound parameters: spread around the mean and per-cycle
/// tightening rate.
const DENSITY_ALPHA: f64 = 0.2;
const DENSITY_BETA: f64 = 0.8;

/// Per-cycle statistics of one finished optimization stage.
#[derive(Debug, Clone)]
pub struct CycleStats {
    pub cycle: usize,
    /// Unconstrained dofs of the analysis mesh the stage ran on.
    pub free_dofs: usize,
    /// Total design variables across all elements.
    pub design_points: usize,
    pub iterations: usize,
    pub objective: f64,
    pub volume: f64,
    pub threshold: f64,
}

/// Everything a finished run produced, ready for export or comparison.
pub struct RunReport {
    pub cycles: Vec<CycleStats>,
    pub log: Vec<LogRow>,
    pub final_objective: f64,
    /// Filtered density field of the final design on its background grid.
    pub final_grid: BackgroundGrid,
    /// Optimization wall time; excludes export and any reference solve.
    pub wall_seconds: f64,
    /// Converged design raster per cycle, at that cycle's resolution.
    pub design_snapshots: Vec<(usize, BackgroundGrid)>,
    /// Mesh state each cycle optimized on, preformatted.
    pub mesh_snapshots: Vec<(usize, String)>,
    /// Indicator table per adaptation pass (absent for the last cycle,
    /// which none follows).
    pub indicator_snapshots: Vec<(usize, String)>,
}

impl RunReport {
    /// Condense into the serializable summary, attaching whichever
    /// comparison values the caller computed.
    pub fn summary(
        &self,
        baseline_objective: Option<f64>,
        reference_objective: Option<f64>,
    ) -> RunSummary {
        RunSummary {
            final_objective: self.final_objective,
            objective_ratio_to_baseline: baseline_objective
                .map(|j0| self.final_objective / j0),
            objective_ratio_to_reference: reference_objective
                .map(|js| self.final_objective / js),
            wall_seconds: self.wall_seconds,
            cycles: self
                .cycles
                .iter()
                .map(|c| CycleSummary {
                    cycle: c.cycle,
                    free_dofs: c.free_dofs,
                    design_points: c.design_points,
                    iterations: c.iterations,
                    objective: c.objective,
                    volume: c.volume,
                })
                .collect(),
        }
    }
}

struct StageResult {
    iterations: usize,
    objective: f64,
    volume: f64,
    grid: BackgroundGrid,
    solution: crate::analysis::Solution,
    dof_map: DofMap,
    rho: DesignVector,
    free_dofs: usize,
}

/// One optimization stage on a frozen mesh: iterate analyze, log, update
/// until the stopping rule fires. The returned state belongs to the logged
/// final iterate; the design is not updated past it.
fn optimize_stage(
    mesh: &MtoMesh,
    rho0: DesignVector,
    config: &Config,
    simp: &Simp,
    cache: &StiffnessCache,
    stopping: &StoppingRule,
    cycle: usize,
    log: &mut Vec<LogRow>,
) -> Result<StageResult> {
    let dof_map = DofMap::build(mesh)?;
    let rules = volume_rules(mesh)?;
    let radius = config.filter_radius_factor * mesh.element_size;
    let ops = ProjectionOps::build(mesh, &rules, radius)?;
    let mut bench = Benchmark::build(config.problem.kind, mesh, &dof_map)?;
    let v0 = config.problem.volume_fraction;
    let threshold = stopping.threshold(cycle);
    let volume_grad = ops.volume_gradient();

    let mut rho = rho0;
    let mut state = UpdateState::new();
    let mut history = Vec::new();
    let mut iteration = 0;
    loop {
        iteration += 1;
        let grid = ops.project_design(mesh, &rho);
        let field = ops.project_grid(&grid);
        let k_elems = assemble_stiffnesses(mesh, cache, simp, &field, &rules)?;
        let factorized = bench.model.factorize(&k_elems)?;
        let loads = bench.model.loads.clone();
        let primal = factorized.solve_primal(&loads);
        let objective = bench.objective_value(&primal);
        let volume = volume_fraction(&grid);
        history.push(objective);
        let stopped = stopping.should_stop(&history, cycle, iteration);
        log.push(LogRow {
            cycle,
            iteration,
            objective,
            volume,
            threshold,
            stopped,
        });
        if stopped {
            return Ok(StageResult {
                iterations: iteration,
                objective,
                volume,
                grid,
                solution: primal,
                free_dofs: bench.model.constraints.n_free(),
                dof_map: bench.model.dof_map,
                rho,
            });
        }
        let lambda = bench.adjoint(&factorized, &primal);
        let gradient = design_gradient(
            mesh, &dof_map, &primal.u, &lambda.u, &field, cache, &rules, simp, &ops,
        )?;
        rho = design_update(&rho, &gradient, &volume_grad, v0, &mut state)?;
    }
}

/// Execute the configured run: `n_cycles` stages with adaptation between
/// them in adaptive mode, the identical stage loop without adaptation in
/// uniform mode.
pub fn run(config: &Config) -> Result<RunReport> {
    config.validate()?;
    let placements = PlacementTable::new(config.seed);
    let (p0, d0) = match config.mode {
        RunMode::Adaptive => (config.initial_order, config.initial_design_points),
        RunMode::UniformBaseline => (config.baseline_order, config.baseline_design_points),
    };
    let mut mesh = MtoMesh::build(
        config.nx,
        config.ny,
        config.domain_width(),
        p0,
        d0,
        &placements,
    )?;
    // Point layouts are deterministic per count and generated once up front:
    // the reachable counts are the initial one, the void floor, and the
    // order-derived budgets. Clustering is then a fixed startup cost instead
    // of a stall inside the first adaptation pass that reaches a new count.
    for p in 1..=config.adaptivity.p_max {
        placements.points(design_point_budget(p, 0, config.adaptivity.d_max));
    }
    placements.points(1);
    let stopping = config.stopping_rule();
    let n_points: usize = mesh.elements.iter().map(|el| el.d).sum();
    let mut rho = DesignVector::uniform(config.problem.volume_fraction, n_points);
    let cache = StiffnessCache::new(Simp::standard(3.0).nu);

    let mut cycles = Vec::new();
    let mut log = Vec::new();
    let mut design_snapshots = Vec::new();
    let mut mesh_snapshots = Vec::new();
    let mut indicator_snapshots = Vec::new();

    let started = Instant::now();
    for cycle in 1..=config.n_cycles {
        let simp = Simp::standard(continuation_q(cycle, config.q_schedule));
        mesh_snapshots.push((cycle, mesh_csv(&mesh, cycle)));
        let stage = optimize_stage(
            &mesh, rho, config, &simp, &cache, &stopping, cycle, &mut log,
        )?;
        cycles.push(CycleStats {
            cycle,
            free_dofs: stage.free_dofs,
            design_points: mesh.elements.iter().map(|el| el.d).sum(),
            iterations: stage.iterations,
            objective: stage.objective,
            volume: stage.volume,
            threshold: stopping.threshold(cycle),
        });
        design_snapshots.push((cycle, stage.grid.clone()));
        rho = stage.rho;

        let adapt = config.mode == RunMode::Adaptive && cycle < config.n_cycles;
        if adapt {
            let gamma_a = kelly(&mesh, &stage.dof_map, &stage.solution.u)?;
            let bounds = density_bounds(cycle, DENSITY_ALPHA, DENSITY_BETA);
            let gamma_d = density_indicators(&mesh, &stage.grid, &bounds);
            let outcome = run_adaptive_cycle(
                &mut mesh,
                &stage.grid,
                &gamma_a,
                &gamma_d,
                config.problem.kind,
                &simp,
                &cache,
                &placements,
                &config.adaptivity,
                config.filter_radius_factor,
            )?;
            let thetas: Vec<Theta> = mesh.elements.iter().map(|el| el.theta).collect();
            indicator_snapshots.push((
                cycle,
                indicators_csv(cycle, &gamma_a, &gamma_d, &outcome.qr_error, &thetas),
            ));
            rho = outcome.rho;
        }
    }
    let wall_seconds = started.elapsed().as_secs_f64();

    let last = cycles.last().expect("n_cycles >= 1 is validated");
    Ok(RunReport {
        final_objective: last.objective,
        final_grid: design_snapshots
            .last()
            .map(|(_, g)| g.clone())
            .expect("one snapshot per cycle"),
        wall_seconds,
        cycles,
        log,
        design_snapshots,
        mesh_snapshots,
        indicator_snapshots,
    })
}

/// Re-analyze a finished design on a uniform mesh `scale` times the
/// configured base mesh, at the given element order, with the raster taken
/// as elementwise-constant density. Each element carries the exact
/// area-weighted mean of the raster cells it overlaps, so any pair of
/// resolutions over the same domain works; nested grids reduce to plain
/// lookups and block means.
pub fn reanalysis_objective(
    grid: &BackgroundGrid,
    config: &Config,
    scale: usize,
    order: usize,
) -> Result<f64> {
    let nx = config.nx * scale;
    let ny = config.ny * scale;
    let placements = PlacementTable::new(config.seed);
    let mesh = MtoMesh::build(nx, ny, config.domain_width(), order, 1, &placements)?;
    let dof_map = DofMap::build(&mesh)?;
    let rules = volume_rules(&mesh)?;

    // Overlap lengths on the common refinement: along x, element ex spans
    // [ex nc, (ex+1) nc) and cell cx spans [cx n, (cx+1) n) in units of
    // 1/(n nc) of the domain width, so intersections are exact integers.
    let axis_overlap = |e: usize, n: usize, c: usize, nc: usize| -> usize {
        let lo = (e * nc).max(c * n);
        let hi = ((e + 1) * nc).min((c + 1) * n);
        hi.saturating_sub(lo)
    };
    let element_value = |ex: usize, ey: usize| -> f64 {
        let mut acc = 0.0;
        for cy in (ey * grid.ncy) / ny..=((ey + 1) * grid.ncy - 1) / ny {
            let oy = axis_overlap(ey, ny, cy, grid.ncy);
            for cx in (ex * grid.ncx) / nx..=((ex + 1) * grid.ncx - 1) / nx {
                let ox = axis_overlap(ex, nx, cx, grid.ncx);
                acc += (ox * oy) as f64 * grid.values[grid.index(cx, cy)];
            }
        }
        acc / (grid.ncx * grid.ncy) as f64
    };
    // Elementwise-constant field: every integration point of an element
    // carries its cell's (or cell block's) value.
    let mut values = Vec::new();
    let mut offsets = vec![0];
    for ey in 0..ny {
        for ex in 0..nx {
            let e = ey * nx + ex;
            values.resize(values.len() + rules[e].len(), element_value(ex, ey));
            offsets.push(values.len());
        }
    }
    let field = ProjectedDensityField { values, offsets };

    let simp = Simp::standard(continuation_q(config.n_cycles, config.q_schedule));
    let cache = StiffnessCache::new(simp.nu);
    let k_elems = assemble_stiffnesses(&mesh, &cache, &simp, &field, &rules)?;
    let mut bench = Benchmark::build(config.problem.kind, &mesh, &dof_map)?;
    let solution = bench.model.solve(&k_elems)?;
    Ok(bench.objective_value(&solution))
}

/// The configured reference re-analysis of a finished design.
pub fn reference_objective(grid: &BackgroundGrid, config: &Config) -> Result<f64> {
    reanalysis_objective(grid, config, config.reference_scale, config.reference_order)
}

/// Write every artifact of a finished run into `out_dir` (created if
/// missing): per-cycle rasters and tables, the iteration log, and the
/// summary.
pub fn export_report(report: &RunReport, summary: &RunSummary, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    for (cycle, grid) in &report.design_snapshots {
        write_design_pgm(&out_dir.join(format!("design_cycle{cycle}.pgm")), grid)?;
    }
    for (cycle, text) in &report.mesh_snapshots {
        fs::write(out_dir.join(format!("mesh_cycle{cycle}.csv")), text)?;
    }
    for (cycle, text) in &report.indicator_snapshots {
        fs::write(out_dir.join(format!("indicators_cycle{cycle}.csv")), text)?;
    }
    fs::write(out_dir.join("log.csv"), log_csv(&report.log))?;
    write_summary(&out_dir.join("summary.json"), summary)?;
    Ok(())
}
