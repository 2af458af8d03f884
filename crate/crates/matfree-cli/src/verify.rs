//! Built-in correctness suites behind the `verify` subcommand: operator
//! oracle equivalence, stiffness nullspace, discrete energy balance,
//! partition reassembly, and reduction-order determinism. Each suite names
//! the module it checks so a failure points somewhere actionable.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use matfree::baseline::CsrMatrix;
use matfree::materials::{FieldKind, MaterialCoefficients, MaterialField};
use matfree::mesh::GridSpec;
use matfree::operator::{Mode, OperatorWorkspace, Strategy, SystemOperator};
use matfree::partition::{merged_dot, pcg_partitioned, split_domain, PartitionedSystem};
use matfree::solver::{
    boundary_load, pcg, simulate, tree_dot, JacobiMatrixFree, PcgConfig, TransientProblem,
};

pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn suite(name: &'static str, run: impl FnOnce() -> Result<String, String>) -> SuiteResult {
    let started = Instant::now();
    let (passed, detail) = match run() {
        Ok(detail) => (true, detail),
        Err(detail) => (false, detail),
    };
    SuiteResult { name, passed, detail, seconds: started.elapsed().as_secs_f64() }
}

pub fn run_all() -> Vec<SuiteResult> {
    vec![
        suite("operator-oracle", || operator_oracle(false)),
        suite("stiffness-nullspace", stiffness_nullspace),
        suite("energy-balance", energy_balance),
        suite("partition-reassembly", partition_reassembly),
        suite("reduction-order", reduction_order),
    ]
}

/// Prints the report table; true when everything passed. Warns when the
/// run blows the soft five-minute budget.
pub fn report(results: &[SuiteResult]) -> bool {
    let mut all = true;
    for r in results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status}  {:<22} {:>7.2}s  {}", r.name, r.seconds, r.detail);
        all &= r.passed;
    }
    let total: f64 = results.iter().map(|r| r.seconds).sum();
    if total > 300.0 {
        eprintln!("warning: verification took {total:.0}s, over the 300s budget");
    }
    all
}

fn test_fields() -> Vec<(&'static str, FieldKind)> {
    vec![
        ("two_layer", FieldKind::TwoLayer { z_threshold: 0.5 }),
        ("smoothed", FieldKind::SmoothedLayer { z_center: 0.5, width: 0.4 }),
        ("functional", FieldKind::Functional),
        ("corrosion", FieldKind::Corrosion { depth: 0.4, half_height: 0.8 }),
    ]
}

/// Reference assembly from the operator's own element matrices; `flip`
/// corrupts one off-diagonal entry per element (a test hook proving the
/// suite can catch a broken operator).
pub fn assemble_reference(op: &SystemOperator<f64>, flip: bool) -> CsrMatrix {
    let spec = op.spec();
    let mut triplets = Vec::with_capacity(16 * spec.element_count());
    for e in 0..spec.element_count() {
        let verts = spec.element_vertices(e);
        let mut mat = op.element_matrix(e);
        if flip {
            mat[0][1] = -mat[0][1];
        }
        for a in 0..4 {
            for b in 0..4 {
                triplets.push((verts[a], verts[b], mat[a][b]));
            }
        }
    }
    CsrMatrix::from_triplets(spec.vertex_count(), &mut triplets)
}

/// Every strategy times mode times material kind against the sparse oracle.
pub fn operator_oracle(flip: bool) -> Result<String, String> {
    let coefficients = MaterialCoefficients::steel_and_corrosion();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for divisions in [[2, 2, 2], [3, 3, 3]] {
        let spec = GridSpec::new([-1.0, -1.0, 0.0], [1.0, 1.0, 1.0], divisions).unwrap();
        let n = spec.vertex_count();
        for (kind_name, kind) in test_fields() {
            let field = MaterialField::new(kind, coefficients);
            for mode in [Mode::A, Mode::L] {
                for strategy in Strategy::ALL {
                    let op = SystemOperator::<f64>::new(&spec, &field, 0.5, 0.01, mode, strategy);
                    let csr = assemble_reference(&op, flip);
                    for _ in 0..3 {
                        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        let got = op.apply(&x);
                        let mut want = vec![0.0; n];
                        csr.spmv(&x, &mut want);
                        let scale = want.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-300);
                        let rel = got
                            .iter()
                            .zip(&want)
                            .fold(0.0f64, |m, (&g, &w)| m.max((g - w).abs()))
                            / scale;
                        worst = worst.max(rel);
                        if rel > 1e-12 {
                            return Err(format!(
                                "operator module: {} {mode:?} {kind_name} C={divisions:?} rel {rel:.3e}",
                                strategy.name()
                            ));
                        }
                    }
                }
            }
        }
    }
    Ok(format!("48 operator/oracle cells, worst rel {worst:.3e}"))
}

/// The stiffness part must annihilate constants: K x 1 = 0 at operator
/// level, and a uniform field under zero load must not drift.
fn stiffness_nullspace() -> Result<String, String> {
    let spec = GridSpec::new([-1.0, -1.0, 0.0], [1.0, 1.0, 1.0], [4, 4, 4]).unwrap();
    let field = MaterialField::new(
        FieldKind::SmoothedLayer { z_center: 0.5, width: 0.4 },
        MaterialCoefficients::steel_and_corrosion(),
    );
    let n = spec.vertex_count();
    // theta = 1 gives M + dt K; theta = 0 gives plain M; the difference
    // applied to ones is dt K 1.
    let full = SystemOperator::<f64>::new(&spec, &field, 1.0, 1.0, Mode::A, Strategy::Coalesced);
    let mass = SystemOperator::<f64>::new(&spec, &field, 0.0, 1.0, Mode::A, Strategy::Coalesced);
    let ones = vec![1.0; n];
    let k_ones: Vec<f64> =
        full.apply(&ones).iter().zip(mass.apply(&ones)).map(|(&a, m)| a - m).collect();
    let scale = full.jacobi_diagonal().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let drift = k_ones.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if drift > 1e-12 * scale {
        return Err(format!("operator module: |K 1| = {drift:.3e} vs scale {scale:.3e}"));
    }

    let op_a = SystemOperator::<f64>::new(&spec, &field, 0.5, 0.01, Mode::A, Strategy::Coalesced);
    let op_l = SystemOperator::<f64>::new(&spec, &field, 0.5, 0.01, Mode::L, Strategy::Coalesced);
    let problem = TransientProblem {
        op_a,
        op_l,
        f_dt: vec![0.0; n],
        t_ambient: 7.0,
        n_steps: 20,
        cfg: PcgConfig::for_n(n),
    };
    let sim = simulate(&problem, false).map_err(|e| format!("solver module: {e}"))?;
    let wander = sim.field.iter().fold(0.0f64, |m, &v| m.max((v - 7.0).abs()));
    if wander > 1e-10 {
        return Err(format!("solver module: uniform field drifted {wander:.3e}"));
    }
    Ok(format!("|K 1| rel {:.3e}, 20-step drift {wander:.3e}", drift / scale))
}

/// Each implicit step must bank exactly the injected heat: summing the mass
/// update against ones equals the summed load within solver tolerance.
fn energy_balance() -> Result<String, String> {
    let spec = GridSpec::new([-15.0, -15.0, 0.0], [15.0, 15.0, 10.0], [10, 10, 5]).unwrap();
    let field = MaterialField::new(
        FieldKind::TwoLayer { z_threshold: 5.0 },
        MaterialCoefficients::steel_and_corrosion(),
    );
    let n = spec.vertex_count();
    let dt = 0.01;
    let tol = 1e-6;
    let op_a = SystemOperator::<f64>::new(&spec, &field, 0.5, dt, Mode::A, Strategy::Coalesced);
    let op_l = SystemOperator::<f64>::new(&spec, &field, 0.5, dt, Mode::L, Strategy::Coalesced);
    let mass = SystemOperator::<f64>::new(&spec, &field, 0.0, dt, Mode::A, Strategy::Coalesced);
    let f_dt = boundary_load(&spec, |_| 1.0, dt);
    let problem = TransientProblem {
        op_a,
        op_l,
        f_dt: f_dt.clone(),
        t_ambient: 0.0,
        n_steps: 50,
        cfg: PcgConfig::for_n(n).with_tol(tol),
    };
    let sim = simulate(&problem, true).map_err(|e| format!("solver module: {e}"))?;
    let snaps = sim.snapshots.expect("requested snapshots");
    let ones = vec![1.0; n];
    let injected = tree_dot(&f_dt, &ones);
    let mut prev = vec![0.0; n];
    let mut worst = 0.0f64;
    for (step, u) in snaps.iter().enumerate() {
        let delta: Vec<f64> = u.iter().zip(&prev).map(|(&a, &b)| a - b).collect();
        let banked = tree_dot(&mass.apply(&delta), &ones);
        let b = problem.op_l.apply_fused(1.0, &f_dt, &prev);
        let b_norm = tree_dot(&b, &b).sqrt();
        let err = (banked - injected).abs();
        worst = worst.max(err / (10.0 * tol * b_norm));
        if err > 10.0 * tol * b_norm {
            return Err(format!(
                "solver module: step {step} banked {banked:.6e} vs injected {injected:.6e} \
                 (bound {:.3e})",
                10.0 * tol * b_norm
            ));
        }
        prev = u.clone();
    }
    Ok(format!("50 steps, worst error at {:.1}% of the bound", 100.0 * worst))
}

/// One solve split across two workers must reassemble to the monolithic
/// answer with identical iteration counts and exactly one halo layer per
/// direction per iteration.
fn partition_reassembly() -> Result<String, String> {
    let spec = GridSpec::new([-3.0, -3.0, 0.0], [3.0, 3.0, 6.0], [6, 6, 6]).unwrap();
    let field = MaterialField::new(
        FieldKind::TwoLayer { z_threshold: 3.0 },
        MaterialCoefficients::steel_and_corrosion(),
    );
    let n = spec.vertex_count();
    let dt = 0.01;
    let op = SystemOperator::<f64>::new(&spec, &field, 0.5, dt, Mode::A, Strategy::Coalesced);
    let b: Vec<f64> = boundary_load(&spec, |_| 1.0, dt);
    let cfg = PcgConfig::for_n(n);

    let mut mono = vec![0.0; n];
    let diag = op.jacobi_diagonal();
    let mut ws = OperatorWorkspace::for_operator(&op);
    let mut mono_sys = JacobiMatrixFree { op: &op, diag: &diag, ws: &mut ws };
    let mono_stats =
        pcg(&mut mono_sys, &b, &mut mono, &cfg).map_err(|e| format!("solver module: {e}"))?;
    let sys = PartitionedSystem::new(&spec, &field, 0.5, dt, Strategy::Coalesced);
    let plan = split_domain(&spec, 0.5).map_err(|e| format!("partition module: {e}"))?;
    let mut split = vec![0.0; n];
    let stats = pcg_partitioned(&sys, &plan, &b, &mut split, &cfg)
        .map_err(|e| format!("partition module: {e}"))?;

    if stats.iterations != mono_stats.iterations {
        return Err(format!(
            "partition module: {} iterations split vs {} monolithic",
            stats.iterations, mono_stats.iterations
        ));
    }
    let scale = mono.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let gap = mono.iter().zip(&split).fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs()));
    if gap > 1e-10 * scale.max(1.0) {
        return Err(format!("partition module: reassembled field off by {gap:.3e}"));
    }
    if stats.layers_sent != [stats.iterations; 2] {
        return Err(format!(
            "partition module: {:?} layers sent over {} iterations",
            stats.layers_sent, stats.iterations
        ));
    }
    Ok(format!(
        "{} iterations, field gap {gap:.3e}, one layer per direction per iteration",
        stats.iterations
    ))
}

/// Reductions must be order-fixed: bitwise repeatable, split-invariant
/// across partition fractions, and near the naive sum.
fn reduction_order() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(67);
    let n = 10_001;
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let first = tree_dot(&x, &y);
    if first.to_bits() != tree_dot(&x, &y).to_bits() {
        return Err("solver module: tree_dot is not repeatable".into());
    }
    let naive: f64 = x.iter().zip(&y).map(|(&a, &b)| a * b).sum();
    if (first - naive).abs() > 1e-10 * naive.abs().max(1.0) {
        return Err(format!("solver module: tree {first} vs naive {naive}"));
    }
    let spec = GridSpec::new([0.0, 0.0, 0.0], [4.0, 4.0, 10.0], [4, 4, 10]).unwrap();
    let nv = spec.vertex_count();
    let gx: Vec<f64> = (0..nv).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let gy: Vec<f64> = (0..nv).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let global = tree_dot(&gx, &gy);
    let mut worst = 0.0f64;
    for m in [0.3, 0.5, 0.7] {
        let plan = split_domain(&spec, m).map_err(|e| format!("partition module: {e}"))?;
        let r1 = &plan.regions[0];
        let r2 = &plan.regions[1];
        let merged = merged_dot(
            &plan,
            [&gx[plan.stored_global_span(r1)], &gx[plan.stored_global_span(r2)]],
            [&gy[plan.stored_global_span(r1)], &gy[plan.stored_global_span(r2)]],
        );
        let rel = (merged - global).abs() / global.abs().max(1.0);
        worst = worst.max(rel);
        if rel > 1e-13 {
            return Err(format!("partition module: merged dot off by {rel:.3e} at m={m}"));
        }
    }
    Ok(format!("tree dot repeatable, merged dot within {worst:.3e} across splits"))
}
