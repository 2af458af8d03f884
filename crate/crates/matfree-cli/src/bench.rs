//! Timing sweeps over mesh sizes, application strategies, and partition
//! counts on the reference two-layer plate. Per-iteration time is total
//! solve time over total iterations; operator construction is reported
//! separately in the phase breakdown, never inside the per-iteration figure.

use std::path::Path;
use std::time::Instant;

use matfree::materials::{FieldKind, MaterialCoefficients, MaterialField};
use matfree::mesh::GridSpec;
use matfree::operator::{Mode, Strategy, SystemOperator};
use matfree::partition::{simulate_partitioned, PartitionedSystem};
use matfree::scalar::Scalar;
use matfree::solver::{boundary_load, simulate, StepRecord, TransientProblem};

use crate::config::Precision;
use crate::error::CliError;

pub struct SweepConfig {
    pub sizes: Vec<[u32; 3]>,
    pub strategies: Vec<Strategy>,
    pub partitions: Vec<usize>,
    pub precision: Precision,
    pub dt: f64,
    pub n_steps: usize,
    pub tol: f64,
    pub split_fraction: f64,
    /// Cells above this vertex count are recorded as skipped, not run.
    pub max_dof: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            sizes: vec![[12, 12, 4], [16, 16, 6], [26, 26, 10], [43, 43, 16]],
            strategies: Strategy::ALL.to_vec(),
            partitions: vec![1, 2],
            precision: Precision::F64,
            dt: 0.01,
            n_steps: 50,
            tol: 1e-6,
            split_fraction: 0.5,
            max_dof: usize::MAX,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchRecord {
    pub dof: usize,
    pub strategy: Strategy,
    pub precision: Precision,
    pub partitions: usize,
    pub iterations: usize,
    pub time_per_iter: f64,
    pub total_seconds: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct PhaseRecord {
    pub dof: usize,
    pub strategy: Strategy,
    pub precision: Precision,
    pub partitions: usize,
    /// Operator construction: work-group planning and element coefficients.
    pub prep_seconds: f64,
    /// Time inside the linear solves.
    pub pcg_seconds: f64,
    /// Everything else: load build, right-hand sides, guess bookkeeping.
    pub other_seconds: f64,
}

/// The benchmark plate: fixed box, varying resolution, altered upper half.
pub fn laminate_grid(divisions: [u32; 3]) -> GridSpec {
    GridSpec::new([-15.0, -15.0, 0.0], [15.0, 15.0, 10.0], divisions).unwrap()
}

fn laminate_field() -> MaterialField {
    MaterialField::new(
        FieldKind::TwoLayer { z_threshold: 5.0 },
        MaterialCoefficients::steel_and_corrosion(),
    )
}

struct CellTiming {
    iterations: usize,
    pcg_seconds: f64,
    prep_seconds: f64,
    total_seconds: f64,
}

fn tally(records: &[StepRecord]) -> (usize, f64) {
    let iterations = records.iter().map(|r| r.iterations).sum();
    let seconds = records.iter().map(|r| r.seconds).sum();
    (iterations, seconds)
}

fn run_cell<S: Scalar>(
    spec: &GridSpec,
    strategy: Strategy,
    sweep: &SweepConfig,
) -> Result<CellTiming, CliError> {
    let field = laminate_field();
    let started = Instant::now();
    let op_a = SystemOperator::<S>::new(spec, &field, 0.5, sweep.dt, Mode::A, strategy);
    let op_l = SystemOperator::<S>::new(spec, &field, 0.5, sweep.dt, Mode::L, strategy);
    let prep_seconds = started.elapsed().as_secs_f64();
    let cfg = matfree::solver::PcgConfig::for_n(spec.vertex_count()).with_tol(sweep.tol);
    let problem = TransientProblem {
        op_a,
        op_l,
        f_dt: boundary_load(spec, |_| 1.0, sweep.dt),
        t_ambient: 0.0,
        n_steps: sweep.n_steps,
        cfg,
    };
    let sim = simulate(&problem, false)?;
    let total_seconds = started.elapsed().as_secs_f64();
    let (iterations, pcg_seconds) = tally(&sim.records);
    Ok(CellTiming { iterations, pcg_seconds, prep_seconds, total_seconds })
}

fn run_cell_partitioned(
    spec: &GridSpec,
    strategy: Strategy,
    sweep: &SweepConfig,
) -> Result<CellTiming, CliError> {
    let field = laminate_field();
    let started = Instant::now();
    let op_a = SystemOperator::<f64>::new(spec, &field, 0.5, sweep.dt, Mode::A, strategy);
    let op_l = SystemOperator::<f64>::new(spec, &field, 0.5, sweep.dt, Mode::L, strategy);
    let sys = PartitionedSystem::new(spec, &field, 0.5, sweep.dt, strategy);
    let prep_seconds = started.elapsed().as_secs_f64();
    let cfg = matfree::solver::PcgConfig::for_n(spec.vertex_count()).with_tol(sweep.tol);
    let problem = TransientProblem {
        op_a,
        op_l,
        f_dt: boundary_load(spec, |_| 1.0, sweep.dt),
        t_ambient: 0.0,
        n_steps: sweep.n_steps,
        cfg,
    };
    let sim = simulate_partitioned(&problem, &sys, sweep.split_fraction, false)?;
    let total_seconds = started.elapsed().as_secs_f64();
    let (iterations, pcg_seconds) = tally(&sim.result.records);
    Ok(CellTiming { iterations, pcg_seconds, prep_seconds, total_seconds })
}

pub fn run_sweep(sweep: &SweepConfig) -> Result<(Vec<BenchRecord>, Vec<PhaseRecord>), CliError> {
    if sweep.precision == Precision::F32 && sweep.partitions.contains(&2) {
        return Err(CliError::Invalid("the partitioned solver runs in f64 only".into()));
    }
    let mut records = Vec::new();
    let mut phases = Vec::new();
    for &divisions in &sweep.sizes {
        let spec = laminate_grid(divisions);
        let dof = spec.vertex_count();
        for &strategy in &sweep.strategies {
            for &partitions in &sweep.partitions {
                if dof > sweep.max_dof {
                    records.push(BenchRecord {
                        dof,
                        strategy,
                        precision: sweep.precision,
                        partitions,
                        iterations: 0,
                        time_per_iter: 0.0,
                        total_seconds: 0.0,
                        skipped: true,
                    });
                    continue;
                }
                let cell = match (partitions, sweep.precision) {
                    (1, Precision::F64) => run_cell::<f64>(&spec, strategy, sweep)?,
                    (1, Precision::F32) => run_cell::<f32>(&spec, strategy, sweep)?,
                    (2, _) => run_cell_partitioned(&spec, strategy, sweep)?,
                    (p, _) => {
                        return Err(CliError::Invalid(format!("partitions must be 1 or 2, got {p}")))
                    }
                };
                records.push(BenchRecord {
                    dof,
                    strategy,
                    precision: sweep.precision,
                    partitions,
                    iterations: cell.iterations,
                    time_per_iter: cell.pcg_seconds / cell.iterations.max(1) as f64,
                    total_seconds: cell.total_seconds,
                    skipped: false,
                });
                phases.push(PhaseRecord {
                    dof,
                    strategy,
                    precision: sweep.precision,
                    partitions,
                    prep_seconds: cell.prep_seconds,
                    pcg_seconds: cell.pcg_seconds,
                    other_seconds: cell.total_seconds - cell.prep_seconds - cell.pcg_seconds,
                });
            }
        }
    }
    Ok((records, phases))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|source| CliError::Write { path: path.into(), source })?;
        }
    }
    std::fs::write(path, text).map_err(|source| CliError::Write { path: path.into(), source })
}

pub fn write_bench_csv(path: &Path, records: &[BenchRecord]) -> Result<(), CliError> {
    let mut text =
        String::from("dof,strategy,precision,partitions,iterations,time_per_iter_s,total_s,skipped\n");
    for r in records {
        text.push_str(&format!(
            "{},{},{},{},{},{:.9e},{:.9e},{}\n",
            r.dof,
            r.strategy.name(),
            r.precision.name(),
            r.partitions,
            r.iterations,
            r.time_per_iter,
            r.total_seconds,
            r.skipped
        ));
    }
    write_text(path, &text)
}

pub fn write_phase_csv(path: &Path, phases: &[PhaseRecord]) -> Result<(), CliError> {
    let mut text = String::from("dof,strategy,precision,partitions,prep_s,pcg_s,other_s\n");
    for p in phases {
        text.push_str(&format!(
            "{},{},{},{},{:.9e},{:.9e},{:.9e}\n",
            p.dof,
            p.strategy.name(),
            p.precision.name(),
            p.partitions,
            p.prep_seconds,
            p.pcg_seconds,
            p.other_seconds
        ));
    }
    write_text(path, &text)
}

/// Least-squares slope of ln(y) against ln(x).
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    assert!(points.len() >= 2, "a slope needs at least two points");
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Slope of time-per-iteration against unknown count for one strategy,
/// fitted over that strategy's largest unskipped single-partition records.
pub fn strategy_slope(records: &[BenchRecord], strategy: Strategy, take_largest: usize) -> f64 {
    let mut pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.strategy == strategy && r.partitions == 1 && !r.skipped)
        .map(|r| (r.dof as f64, r.time_per_iter))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let tail = pts.len().saturating_sub(take_largest);
    loglog_slope(&pts[tail..])
}
