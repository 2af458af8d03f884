//! Jacobi-preconditioned conjugate gradients and the theta-scheme stepper.
//!
//! The PCG loop follows one fixed recipe: residual and search direction from
//! the preconditioned residual, curvature check, x and r updates with the
//! residual recomputed exactly on iterations divisible by the recompute
//! period, then the beta update. Convergence means delta = r'P^{-1}r has
//! fallen to tol^2 times its starting value. Dot products use a fixed-shape
//! tree reduction (blocks of 256, pairwise halving, recursive levels), so a
//! solve is bitwise reproducible for any thread count. Each transient step
//! solves A U = L U_prev + F from a guess linearly extrapolated out of the
//! previous step's guess and solution.

use crate::error::SolverError;
use crate::operator::{Mode, OperatorWorkspace, SystemOperator};
use crate::pool::{self, configured_threads, PAR_THRESHOLD};
use crate::scalar::Scalar;
use crate::mesh::GridSpec;
use std::time::Instant;

/// Work-group size of the reduction tree; also the block the recursion
/// applies at every level.
pub const REDUCTION_GROUP: usize = 256;

fn block_reduce<S: Scalar>(vals: &[S]) -> S {
    let mut buf = [S::zero(); REDUCTION_GROUP];
    buf[..vals.len()].copy_from_slice(vals);
    let mut stride = REDUCTION_GROUP / 2;
    while stride > 0 {
        for i in 0..stride {
            buf[i] = buf[i] + buf[i + stride];
        }
        stride /= 2;
    }
    buf[0]
}

/// Dot product via the fixed tree schedule: per 256-block products reduced
/// pairwise (zero padded), partial sums reduced the same way until one value
/// remains. The shape depends only on the length, never the thread count.
pub fn tree_dot<S: Scalar>(x: &[S], y: &[S]) -> S {
    assert_eq!(x.len(), y.len(), "dot operands must match");
    if x.is_empty() {
        return S::zero();
    }
    let n_blocks = x.len().div_ceil(REDUCTION_GROUP);
    let mut partials = vec![S::zero(); n_blocks];
    {
        let sink = pool::ExclusiveSlots::new(&mut partials);
        pool::for_each_range_weighted(n_blocks, REDUCTION_GROUP, 8, |bs, be| {
            for b in bs..be {
                let start = b * REDUCTION_GROUP;
                let end = (start + REDUCTION_GROUP).min(x.len());
                let mut buf = [S::zero(); REDUCTION_GROUP];
                for i in start..end {
                    buf[i - start] = x[i] * y[i];
                }
                // SAFETY: one block per partial slot.
                unsafe { sink.write(b, block_reduce(&buf[..end - start])) };
            }
        });
    }
    while partials.len() > 1 {
        partials = partials
            .chunks(REDUCTION_GROUP)
            .map(block_reduce)
            .collect();
    }
    partials[0]
}

fn elementwise<S, F>(n: usize, f: F)
where
    S: Scalar,
    F: Fn(usize) + Send + Sync,
{
    let _ = std::marker::PhantomData::<S>;
    pool::for_each_range(n, PAR_THRESHOLD, move |s, e| {
        for i in s..e {
            f(i);
        }
    });
}

/// x += a*y.
pub fn axpy<S: Scalar>(x: &mut [S], a: S, y: &[S]) {
    assert_eq!(x.len(), y.len(), "axpy operands must match");
    if x.len() < PAR_THRESHOLD || configured_threads() == 1 {
        for i in 0..x.len() {
            x[i] = x[i] + a * y[i];
        }
    } else {
        use rayon::prelude::*;
        pool::pool().install(|| {
            x.par_chunks_mut(PAR_THRESHOLD)
                .zip(y.par_chunks(PAR_THRESHOLD))
                .for_each(|(xc, yc)| {
                    for i in 0..xc.len() {
                        xc[i] = xc[i] + a * yc[i];
                    }
                });
        });
    }
}

/// x = a*x + y; the direction update d = s + beta*d.
pub fn scale_add<S: Scalar>(x: &mut [S], a: S, y: &[S]) {
    assert_eq!(x.len(), y.len(), "scale_add operands must match");
    if x.len() < PAR_THRESHOLD || configured_threads() == 1 {
        for i in 0..x.len() {
            x[i] = a * x[i] + y[i];
        }
    } else {
        use rayon::prelude::*;
        pool::pool().install(|| {
            x.par_chunks_mut(PAR_THRESHOLD)
                .zip(y.par_chunks(PAR_THRESHOLD))
                .for_each(|(xc, yc)| {
                    for i in 0..xc.len() {
                        xc[i] = a * xc[i] + yc[i];
                    }
                });
        });
    }
}

/// out = x / p entrywise; the diagonal-inverse product of the Jacobi
/// preconditioner.
pub fn dimvm<S: Scalar>(p_diag: &[S], x: &[S], out: &mut [S]) {
    assert_eq!(p_diag.len(), x.len(), "dimvm operands must match");
    assert_eq!(out.len(), x.len(), "dimvm output must match");
    let sink = pool::ExclusiveSlots::new(out);
    elementwise::<S, _>(x.len(), move |i| {
        // SAFETY: disjoint index ranges.
        unsafe { sink.write(i, x[i] / p_diag[i]) };
    });
}

/// beta = delta_new / delta_old, advancing the stored delta.
pub fn beta_update<S: Scalar>(delta_new: S, delta_old: &mut S) -> S {
    let beta = delta_new / *delta_old;
    *delta_old = delta_new;
    beta
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PcgConfig {
    pub i_max: usize,
    pub tol: f64,
    pub recompute_period: usize,
}

impl PcgConfig {
    /// Defaults for an n-unknown system: relative tolerance 1e-6, exact
    /// residual every 50 iterations, iteration cap 10*sqrt(n).
    pub fn for_n(n: usize) -> Self {
        PcgConfig {
            i_max: (10.0 * (n.max(1) as f64).sqrt()).ceil() as usize,
            tol: 1e-6,
            recompute_period: 50,
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn validate(&self) {
        assert!(self.tol > 0.0, "tolerance must be positive");
        assert!(self.recompute_period >= 1, "recompute period must be at least 1");
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PcgStats {
    pub iterations: usize,
    pub delta_first: f64,
    pub delta_final: f64,
}

/// Everything the PCG loop needs from a linear system: the operator action,
/// a fused exact residual, and the preconditioner application.
pub trait PcgOperator<S: Scalar> {
    /// out = A x.
    fn apply(&mut self, x: &[S], out: &mut [S]);
    /// out = b - A x.
    fn residual(&mut self, b: &[S], x: &[S], out: &mut [S]);
    /// out = P^{-1} r.
    fn precondition(&mut self, r: &[S], out: &mut [S]);
}

/// Matrix-free system with Jacobi preconditioning.
pub struct JacobiMatrixFree<'a, S: Scalar> {
    pub op: &'a SystemOperator<S>,
    pub diag: &'a [S],
    pub ws: &'a mut OperatorWorkspace<S>,
}

impl<S: Scalar> PcgOperator<S> for JacobiMatrixFree<'_, S> {
    fn apply(&mut self, x: &[S], out: &mut [S]) {
        self.op.apply_into(x, out, self.ws);
    }

    fn residual(&mut self, b: &[S], x: &[S], out: &mut [S]) {
        self.op.apply_fused_into(-S::one(), b, x, out, self.ws);
    }

    fn precondition(&mut self, r: &[S], out: &mut [S]) {
        dimvm(self.diag, r, out);
    }
}

/// One iteration's state, handed to the observer after the updates.
pub struct PcgIterate<'a, S: Scalar> {
    pub iteration: usize,
    pub x: &'a [S],
    pub r: &'a [S],
    pub d: &'a [S],
    pub delta: f64,
    pub recomputed: bool,
}

pub fn pcg<S: Scalar, O: PcgOperator<S>>(
    op: &mut O,
    b: &[S],
    x: &mut [S],
    cfg: &PcgConfig,
) -> Result<PcgStats, SolverError> {
    pcg_with(op, b, x, cfg, |_| {})
}

/// The conjugate gradient loop. `x` enters as the initial guess and leaves
/// as the solution; the observer sees every completed iteration. Converged
/// means delta has fallen to tol^2 times its first value, or to the rounding
/// floor of the right-hand side (32 eps, squared), whichever is larger; the
/// floor keeps nearly exact warm starts from spinning on roundoff noise.
pub fn pcg_with<S, O, F>(
    op: &mut O,
    b: &[S],
    x: &mut [S],
    cfg: &PcgConfig,
    mut observe: F,
) -> Result<PcgStats, SolverError>
where
    S: Scalar,
    O: PcgOperator<S>,
    F: FnMut(&PcgIterate<S>),
{
    cfg.validate();
    let n = b.len();
    if x.len() != n {
        return Err(SolverError::DimensionMismatch { expected: n, got: x.len() });
    }

    let mut r = vec![S::zero(); n];
    let mut d = vec![S::zero(); n];
    let mut s = vec![S::zero(); n];
    let mut q = vec![S::zero(); n];

    // Rounding floor: a guess whose residual already sits at machine noise
    // relative to b counts as converged, since no iteration can shrink the
    // preconditioned residual by tol^2 from there.
    op.precondition(b, &mut s);
    let delta_b = tree_dot(b, &s);
    let floor = S::from_f64(32.0) * S::epsilon();

    op.residual(b, x, &mut r);
    op.precondition(&r, &mut d);
    let mut delta_new = tree_dot(&r, &d);
    let delta_first = delta_new;
    if delta_new < S::zero() {
        return Err(SolverError::Breakdown { iteration: 0, curvature: delta_new.to_f64() });
    }
    let threshold =
        (S::from_f64(cfg.tol * cfg.tol) * delta_first).max(floor * floor * delta_b);

    let mut i = 0usize;
    while i < cfg.i_max && delta_new > threshold {
        op.apply(&d, &mut q);
        let dq = tree_dot(&d, &q);
        if !(dq > S::zero()) {
            return Err(SolverError::Breakdown { iteration: i, curvature: dq.to_f64() });
        }
        let alpha = delta_new / dq;
        axpy(x, alpha, &d);
        let recomputed = i % cfg.recompute_period == 0;
        if recomputed {
            op.residual(b, x, &mut r);
        } else {
            axpy(&mut r, -alpha, &q);
        }
        op.precondition(&r, &mut s);
        let mut delta_old = delta_new;
        delta_new = tree_dot(&r, &s);
        let beta = beta_update(delta_new, &mut delta_old);
        scale_add(&mut d, beta, &s);
        i += 1;
        observe(&PcgIterate {
            iteration: i,
            x,
            r: &r,
            d: &d,
            delta: delta_new.to_f64(),
            recomputed,
        });
        if !delta_new.to_f64().is_finite() || delta_new < S::zero() {
            return Err(SolverError::Breakdown { iteration: i, curvature: delta_new.to_f64() });
        }
    }

    if delta_new > threshold {
        return Err(SolverError::NonConvergence {
            iterations: i,
            delta: delta_new.to_f64(),
            threshold: threshold.to_f64(),
        });
    }
    Ok(PcgStats {
        iterations: i,
        delta_first: delta_first.to_f64(),
        delta_final: delta_new.to_f64(),
    })
}

/// Consistent flux load on the heated bottom face (z = min): each boundary
/// triangle adds area/3 * dt * f(centroid) to its three vertices. The two
/// triangles per cell face are the bottom faces of tets 0 and 2, sharing
/// the cell diagonal.
pub fn boundary_load<S: Scalar>(
    spec: &GridSpec,
    f: impl Fn([f64; 3]) -> f64,
    dt: f64,
) -> Vec<S> {
    let nd = spec.divisions();
    let (c0, c1) = (nd[0] as usize, nd[1] as usize);
    let h = spec.spacing();
    let tri_area = 0.5 * h[0] * h[1];
    let mut load = vec![0.0f64; spec.vertex_count()];
    // Offsets within the face quad, per triangle, in (i, j).
    let tris = [[(0, 0), (1, 0), (1, 1)], [(0, 0), (0, 1), (1, 1)]];
    for cj in 0..c1 {
        for ci in 0..c0 {
            for tri in &tris {
                let verts = tri.map(|(di, dj)| spec.vertex_index(ci + di, cj + dj, 0));
                let mut centroid = [0.0f64; 3];
                for &v in &verts {
                    let p = spec.vertex_position(v);
                    for a in 0..3 {
                        centroid[a] += p[a] / 3.0;
                    }
                }
                let w = tri_area / 3.0 * dt * f(centroid);
                for &v in &verts {
                    load[v] += w;
                }
            }
        }
    }
    load.into_iter().map(S::from_f64).collect()
}

/// next guess = solved + (solved - guess used this step).
pub fn extrapolate_guess<S: Scalar>(prev_guess: &[S], solved: &[S]) -> Vec<S> {
    assert_eq!(prev_guess.len(), solved.len(), "extrapolation operands must match");
    solved
        .iter()
        .zip(prev_guess)
        .map(|(&u, &g)| u + (u - g))
        .collect()
}

/// The full transient setup: both operator sides, the dt-scaled load, and
/// the stepping plan.
pub struct TransientProblem<S: Scalar> {
    pub op_a: SystemOperator<S>,
    pub op_l: SystemOperator<S>,
    pub f_dt: Vec<S>,
    pub t_ambient: f64,
    pub n_steps: usize,
    pub cfg: PcgConfig,
}

impl<S: Scalar> TransientProblem<S> {
    pub fn new(
        op_a: SystemOperator<S>,
        op_l: SystemOperator<S>,
        f_dt: Vec<S>,
        t_ambient: f64,
        n_steps: usize,
        cfg: PcgConfig,
    ) -> Self {
        assert_eq!(op_a.mode(), Mode::A, "first operator must be the solved side");
        assert_eq!(op_l.mode(), Mode::L, "second operator must be the explicit side");
        assert_eq!(op_a.theta(), op_l.theta(), "operators must share theta");
        assert_eq!(op_a.dt(), op_l.dt(), "operators must share the time step");
        assert_eq!(f_dt.len(), op_a.vertex_count(), "load length");
        cfg.validate();
        TransientProblem { op_a, op_l, f_dt, t_ambient, n_steps, cfg }
    }

    pub fn dt(&self) -> f64 {
        self.op_a.dt()
    }

    pub fn theta(&self) -> f64 {
        self.op_a.theta()
    }

    pub fn vertex_count(&self) -> usize {
        self.op_a.vertex_count()
    }
}

/// Reusable per-problem buffers: the Jacobi diagonal is built once, then
/// every step runs one fused right-hand side and one PCG solve.
pub struct Stepper<'a, S: Scalar> {
    problem: &'a TransientProblem<S>,
    diag: Vec<S>,
    ws_a: OperatorWorkspace<S>,
    ws_l: OperatorWorkspace<S>,
    b: Vec<S>,
}

impl<'a, S: Scalar> Stepper<'a, S> {
    pub fn new(problem: &'a TransientProblem<S>) -> Self {
        Stepper {
            problem,
            diag: problem.op_a.jacobi_diagonal(),
            ws_a: OperatorWorkspace::for_operator(&problem.op_a),
            ws_l: OperatorWorkspace::for_operator(&problem.op_l),
            b: vec![S::zero(); problem.vertex_count()],
        }
    }

    /// One theta step: b = L u_prev + F, then solve A x = b. `x` enters as
    /// the guess and leaves as the new field.
    pub fn advance(&mut self, u_prev: &[S], x: &mut [S]) -> Result<PcgStats, SolverError> {
        self.problem.op_l.apply_fused_into(
            S::one(),
            &self.problem.f_dt,
            u_prev,
            &mut self.b,
            &mut self.ws_l,
        );
        let mut system = JacobiMatrixFree {
            op: &self.problem.op_a,
            diag: &self.diag,
            ws: &mut self.ws_a,
        };
        pcg(&mut system, &self.b, x, &self.problem.cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub iterations: usize,
    pub seconds: f64,
    pub delta_final: f64,
}

pub struct SimulationResult<S> {
    pub field: Vec<S>,
    pub records: Vec<StepRecord>,
    pub snapshots: Option<Vec<Vec<S>>>,
}

/// Runs the whole transient: ambient start, extrapolated guesses, one PCG
/// solve per step, per-step iteration and timing records.
pub fn simulate<S: Scalar>(
    problem: &TransientProblem<S>,
    keep_snapshots: bool,
) -> Result<SimulationResult<S>, SolverError> {
    let n = problem.vertex_count();
    let mut u = vec![S::from_f64(problem.t_ambient); n];
    let mut guess = u.clone();
    let mut stepper = Stepper::new(problem);
    let mut records = Vec::with_capacity(problem.n_steps);
    let mut snapshots = keep_snapshots.then(Vec::new);

    for step in 1..=problem.n_steps {
        let mut x = guess.clone();
        let started = Instant::now();
        let stats = stepper.advance(&u, &mut x)?;
        let seconds = started.elapsed().as_secs_f64();
        let next_guess = extrapolate_guess(&guess, &x);
        u = x;
        guess = next_guess;
        records.push(StepRecord {
            step,
            iterations: stats.iterations,
            seconds,
            delta_final: stats.delta_final,
        });
        if let Some(snaps) = snapshots.as_mut() {
            snaps.push(u.clone());
        }
    }
    Ok(SimulationResult { field: u, records, snapshots })
}
