//! Two-worker overlapping z-split of the PCG solve.
//!
//! The grid is cut into two z-slabs mimicking a dual-device run: worker 1
//! takes the bottom layers plus one halo layer above, worker 2 the rest
//! plus two overlap layers below. Each worker drives the shared PCG loop on
//! its slab with a local matrix-free operator; the direction vector's
//! boundary layer crosses between workers once per iteration and every dot
//! product merges owned-only partials, so both workers make bit-identical
//! scalar decisions and the reassembled iterates track a monolithic run to
//! reduction-order accuracy. Workers are plain threads with channels; the
//! blocking receive at each exchange is the rendezvous barrier.

use std::ops::Range;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::Instant;

use crate::error::{PartitionError, SolverError};
use crate::materials::MaterialField;
use crate::mesh::GridSpec;
use crate::operator::{Mode, OperatorWorkspace, Strategy, SystemOperator};
use crate::solver::{
    axpy, beta_update, dimvm, extrapolate_guess, scale_add, tree_dot, PcgConfig,
    SimulationResult, StepRecord, TransientProblem,
};

/// One worker's slab: stored and owned global z-layer ranges, inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub worker: usize,
    pub stored_lo: usize,
    pub stored_hi: usize,
    pub owned_lo: usize,
    pub owned_hi: usize,
    /// Cube layers this worker answers for; load-balance reporting only.
    pub owned_cubes: usize,
}

impl Region {
    pub fn stored_layers(&self) -> usize {
        self.stored_hi - self.stored_lo + 1
    }

    pub fn owned_layers(&self) -> usize {
        self.owned_hi - self.owned_lo + 1
    }
}

#[derive(Clone, Debug)]
pub struct PartitionPlan {
    pub fraction: f64,
    /// Vertices per z layer.
    pub layer_len: usize,
    /// Total vertex layers in the grid.
    pub layers: usize,
    pub regions: Vec<Region>,
}

impl PartitionPlan {
    /// Local vertex span of one global layer within a region's storage.
    pub fn local_layer_span(&self, region: &Region, layer: usize) -> Range<usize> {
        debug_assert!((region.stored_lo..=region.stored_hi).contains(&layer));
        let base = (layer - region.stored_lo) * self.layer_len;
        base..base + self.layer_len
    }

    /// Local vertex span of a region's owned layers.
    pub fn owned_local_span(&self, region: &Region) -> Range<usize> {
        let lo = (region.owned_lo - region.stored_lo) * self.layer_len;
        lo..lo + region.owned_layers() * self.layer_len
    }

    /// Global vertex span a region stores.
    pub fn stored_global_span(&self, region: &Region) -> Range<usize> {
        region.stored_lo * self.layer_len..(region.stored_hi + 1) * self.layer_len
    }

    /// Global vertex span a region owns.
    pub fn owned_global_span(&self, region: &Region) -> Range<usize> {
        region.owned_lo * self.layer_len..(region.owned_hi + 1) * self.layer_len
    }
}

/// Splits the grid between two workers at fraction m of the vertex layers.
/// Worker 1 owns the bottom ceil(m * layers) and stores one halo layer
/// above; worker 2 owns the rest and stores two extra layers below, per the
/// asymmetric storage rule. Each worker must own at least two layers.
pub fn split_domain(spec: &GridSpec, m: f64) -> Result<PartitionPlan, PartitionError> {
    let nv = spec.nv_axis();
    let layers = nv[2];
    if layers < 4 {
        return Err(PartitionError::GridTooShallow(layers));
    }
    if !(m > 0.0) {
        return Err(PartitionError::TooFewLayers { fraction: m, worker: 1, layers: 0 });
    }
    if !(m < 1.0) {
        return Err(PartitionError::TooFewLayers { fraction: m, worker: 2, layers: 0 });
    }
    let o1 = (m * layers as f64).ceil() as usize;
    if o1 < 2 {
        return Err(PartitionError::TooFewLayers { fraction: m, worker: 1, layers: o1 });
    }
    if layers - o1 < 2 {
        return Err(PartitionError::TooFewLayers {
            fraction: m,
            worker: 2,
            layers: layers - o1,
        });
    }
    let top = layers - 1;
    let cube_layers = spec.divisions()[2] as usize;
    let regions = vec![
        Region {
            worker: 1,
            stored_lo: 0,
            stored_hi: o1,
            owned_lo: 0,
            owned_hi: o1 - 1,
            owned_cubes: o1 - 1,
        },
        Region {
            worker: 2,
            stored_lo: o1 - 2,
            stored_hi: top,
            owned_lo: o1,
            owned_hi: top,
            owned_cubes: cube_layers - (o1 - 1),
        },
    ];
    Ok(PartitionPlan { fraction: m, layer_len: nv[0] * nv[1], layers, regions })
}

/// The per-iteration halo copy, in-place form: worker 1's top owned layer
/// lands in worker 2's halo and worker 2's bottom owned layer lands in
/// worker 1's. Exactly one layer crosses in each direction.
pub fn exchange_halos(plan: &PartitionPlan, d1: &mut [f64], d2: &mut [f64]) {
    let r1 = &plan.regions[0];
    let r2 = &plan.regions[1];
    let down = plan.local_layer_span(r1, r1.owned_hi);
    let down_dst = plan.local_layer_span(r2, r1.owned_hi);
    d2[down_dst].copy_from_slice(&d1[down]);
    let up = plan.local_layer_span(r2, r2.owned_lo);
    let up_dst = plan.local_layer_span(r1, r2.owned_lo);
    d1[up_dst].copy_from_slice(&d2[up]);
}

/// Dot product over the whole domain from per-worker stored vectors: each
/// worker contributes its owned span only, and the partials always add in
/// worker order so every participant computes the same bits.
pub fn merged_dot(plan: &PartitionPlan, xs: [&[f64]; 2], ys: [&[f64]; 2]) -> f64 {
    let mut total = 0.0;
    for (w, (xw, yw)) in xs.iter().zip(ys.iter()).enumerate() {
        let span = plan.owned_local_span(&plan.regions[w]);
        total += tree_dot(&xw[span.clone()], &yw[span]);
    }
    total
}

/// Everything a worker needs to rebuild its slab operator: the global grid,
/// globally evaluated per-element coefficients, and the discretization.
pub struct PartitionedSystem {
    pub spec: GridSpec,
    pub coefs: Vec<(f64, f64)>,
    pub theta: f64,
    pub dt: f64,
    pub strategy: Strategy,
}

impl PartitionedSystem {
    pub fn new(
        spec: &GridSpec,
        field: &MaterialField,
        theta: f64,
        dt: f64,
        strategy: Strategy,
    ) -> Self {
        let coefs =
            (0..spec.element_count()).map(|e| field.element_coefficients(spec, e)).collect();
        PartitionedSystem { spec: *spec, coefs, theta, dt, strategy }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PartitionStats {
    pub iterations: usize,
    pub delta_first: f64,
    pub delta_final: f64,
    /// Vertices per exchanged layer.
    pub layer_len: usize,
    /// d-layers each worker pushed to its peer.
    pub layers_sent: [usize; 2],
    /// Scalar partials each worker pushed (setup dots included).
    pub scalars_sent: [usize; 2],
}

impl PartitionStats {
    /// Bytes on the wire per halo exchange, both directions.
    pub fn bytes_per_exchange(&self) -> usize {
        2 * self.layer_len * std::mem::size_of::<f64>()
    }
}

enum Msg {
    Layer(Vec<f64>),
    Scalar(f64),
}

struct Link {
    tx: Sender<Msg>,
    rx: Receiver<Msg>,
    layers_sent: usize,
    scalars_sent: usize,
}

impl Link {
    /// Simultaneous send/receive of one vertex layer; the blocking receive
    /// is the rendezvous.
    fn swap_layer(&mut self, v: &mut [f64], send: Range<usize>, recv: Range<usize>) {
        self.tx.send(Msg::Layer(v[send].to_vec())).expect("peer hung up");
        match self.rx.recv().expect("peer hung up") {
            Msg::Layer(got) => v[recv].copy_from_slice(&got),
            Msg::Scalar(_) => panic!("protocol desync: expected a layer"),
        }
        self.layers_sent += 1;
    }

    /// Exchanges dot-product partials and sums them in worker order, so
    /// both sides hold bit-identical totals.
    fn merge(&mut self, worker: usize, partial: f64) -> f64 {
        self.tx.send(Msg::Scalar(partial)).expect("peer hung up");
        let other = match self.rx.recv().expect("peer hung up") {
            Msg::Scalar(got) => got,
            Msg::Layer(_) => panic!("protocol desync: expected a scalar"),
        };
        self.scalars_sent += 1;
        let (first, second) = if worker == 1 { (partial, other) } else { (other, partial) };
        first + second
    }
}

/// Owned-range per-iteration state captured when tracing a worker.
pub struct IterSnap {
    pub x: Vec<f64>,
    pub r: Vec<f64>,
    pub d: Vec<f64>,
}

struct WorkerDone {
    x_owned: Vec<f64>,
    iterations: usize,
    delta_first: f64,
    delta_final: f64,
    layers_sent: usize,
    scalars_sent: usize,
    trace: Option<Vec<IterSnap>>,
}

fn slab_spec(spec: &GridSpec, lo: usize, hi: usize) -> GridSpec {
    let bmin = spec.bounds_min();
    let bmax = spec.bounds_max();
    let hz = spec.spacing()[2];
    let d = spec.divisions();
    GridSpec::new(
        [bmin[0], bmin[1], bmin[2] + lo as f64 * hz],
        [bmax[0], bmax[1], bmin[2] + hi as f64 * hz],
        [d[0], d[1], (hi - lo) as u32],
    )
    .expect("a stored slab always spans at least one cell per axis")
}

/// One worker's full PCG run; mirrors the monolithic loop operation for
/// operation so merged scalars reproduce its decisions.
#[allow(clippy::too_many_arguments)]
fn worker_pcg(
    sys: &PartitionedSystem,
    plan: &PartitionPlan,
    region: &Region,
    b: &[f64],
    x0: &[f64],
    cfg: &PcgConfig,
    mut link: Link,
    trace: bool,
) -> Result<WorkerDone, SolverError> {
    let w = region.worker;
    let slab = slab_spec(&sys.spec, region.stored_lo, region.stored_hi);
    let dims = sys.spec.divisions();
    let elems_per_layer = 6 * dims[0] as usize * dims[1] as usize;
    let coefs =
        sys.coefs[region.stored_lo * elems_per_layer..region.stored_hi * elems_per_layer].to_vec();
    let op = SystemOperator::<f64>::with_element_coefficients(
        &slab,
        coefs,
        sys.theta,
        sys.dt,
        Mode::A,
        sys.strategy,
    );
    let mut ws = OperatorWorkspace::for_operator(&op);
    let n_local = slab.vertex_count();
    let diag = op.jacobi_diagonal();

    let gspan = plan.stored_global_span(region);
    let bl = b[gspan.clone()].to_vec();
    let mut xl = x0[gspan].to_vec();
    let owned = plan.owned_local_span(region);
    let send = if w == 1 {
        plan.local_layer_span(region, region.owned_hi)
    } else {
        plan.local_layer_span(region, region.owned_lo)
    };
    let recv = if w == 1 {
        plan.local_layer_span(region, region.owned_hi + 1)
    } else {
        plan.local_layer_span(region, region.owned_lo - 1)
    };

    let mut r = vec![0.0f64; n_local];
    let mut d = vec![0.0f64; n_local];
    let mut s = vec![0.0f64; n_local];
    let mut q = vec![0.0f64; n_local];
    let mut snaps = trace.then(Vec::new);

    // Same rounding floor as the monolithic loop; merged, so both workers
    // hold the identical threshold.
    dimvm(&diag[owned.clone()], &bl[owned.clone()], &mut s[owned.clone()]);
    let delta_b = link.merge(w, tree_dot(&bl[owned.clone()], &s[owned.clone()]));
    let floor = 32.0 * f64::EPSILON;

    op.apply_fused_into(-1.0, &bl, &xl, &mut r, &mut ws);
    dimvm(&diag[owned.clone()], &r[owned.clone()], &mut d[owned.clone()]);
    let mut delta_new = link.merge(w, tree_dot(&r[owned.clone()], &d[owned.clone()]));
    let delta_first = delta_new;
    if delta_new < 0.0 {
        return Err(SolverError::Breakdown { iteration: 0, curvature: delta_new });
    }
    let threshold = (cfg.tol * cfg.tol * delta_first).max(floor * floor * delta_b);

    let mut i = 0usize;
    while i < cfg.i_max && delta_new > threshold {
        // Fresh halo before the operator touches d.
        link.swap_layer(&mut d, send.clone(), recv.clone());
        op.apply_into(&d, &mut q, &mut ws);
        let dq = link.merge(w, tree_dot(&d[owned.clone()], &q[owned.clone()]));
        if !(dq > 0.0) {
            return Err(SolverError::Breakdown { iteration: i, curvature: dq });
        }
        let alpha = delta_new / dq;
        // Full stored range: halo x stays exact because halo d is fresh,
        // which the periodic residual recompute depends on.
        axpy(&mut xl, alpha, &d);
        let recomputed = i % cfg.recompute_period == 0;
        if recomputed {
            op.apply_fused_into(-1.0, &bl, &xl, &mut r, &mut ws);
        } else {
            axpy(&mut r[owned.clone()], -alpha, &q[owned.clone()]);
        }
        dimvm(&diag[owned.clone()], &r[owned.clone()], &mut s[owned.clone()]);
        let mut delta_old = delta_new;
        delta_new = link.merge(w, tree_dot(&r[owned.clone()], &s[owned.clone()]));
        let beta = beta_update(delta_new, &mut delta_old);
        scale_add(&mut d[owned.clone()], beta, &s[owned.clone()]);
        i += 1;
        if let Some(snaps) = snaps.as_mut() {
            snaps.push(IterSnap {
                x: xl[owned.clone()].to_vec(),
                r: r[owned.clone()].to_vec(),
                d: d[owned.clone()].to_vec(),
            });
        }
        if !delta_new.is_finite() || delta_new < 0.0 {
            return Err(SolverError::Breakdown { iteration: i, curvature: delta_new });
        }
    }

    if delta_new > threshold {
        return Err(SolverError::NonConvergence { iterations: i, delta: delta_new, threshold });
    }
    Ok(WorkerDone {
        x_owned: xl[owned].to_vec(),
        iterations: i,
        delta_first,
        delta_final: delta_new,
        layers_sent: link.layers_sent,
        scalars_sent: link.scalars_sent,
        trace: snaps,
    })
}

/// Solve stats plus per-worker iterate histories when tracing is on.
type TracedStats = (PartitionStats, Option<[Vec<IterSnap>; 2]>);

fn run_partitioned(
    sys: &PartitionedSystem,
    plan: &PartitionPlan,
    b: &[f64],
    x: &mut [f64],
    cfg: &PcgConfig,
    trace: bool,
) -> Result<TracedStats, PartitionError> {
    cfg.validate();
    let n = sys.spec.vertex_count();
    if b.len() != n {
        return Err(SolverError::DimensionMismatch { expected: n, got: b.len() }.into());
    }
    if x.len() != n {
        return Err(SolverError::DimensionMismatch { expected: n, got: x.len() }.into());
    }

    let (tx12, rx2) = channel();
    let (tx21, rx1) = channel();
    let link1 = Link { tx: tx12, rx: rx1, layers_sent: 0, scalars_sent: 0 };
    let link2 = Link { tx: tx21, rx: rx2, layers_sent: 0, scalars_sent: 0 };
    let x0: &[f64] = x;

    let (out1, out2) = std::thread::scope(|scope| {
        let h1 = scope.spawn(|| worker_pcg(sys, plan, &plan.regions[0], b, x0, cfg, link1, trace));
        let h2 = scope.spawn(|| worker_pcg(sys, plan, &plan.regions[1], b, x0, cfg, link2, trace));
        let out1 = h1.join().map_err(|_| PartitionError::WorkerPanic { worker: 1 });
        let out2 = h2.join().map_err(|_| PartitionError::WorkerPanic { worker: 2 });
        (out1, out2)
    });
    let out1 = out1?;
    let out2 = out2?;

    match (out1, out2) {
        (Ok(w1), Ok(w2)) => {
            assert_eq!(
                w1.iterations, w2.iterations,
                "workers made different convergence decisions"
            );
            x[plan.owned_global_span(&plan.regions[0])].copy_from_slice(&w1.x_owned);
            x[plan.owned_global_span(&plan.regions[1])].copy_from_slice(&w2.x_owned);
            let stats = PartitionStats {
                iterations: w1.iterations,
                delta_first: w1.delta_first,
                delta_final: w1.delta_final,
                layer_len: plan.layer_len,
                layers_sent: [w1.layers_sent, w2.layers_sent],
                scalars_sent: [w1.scalars_sent, w2.scalars_sent],
            };
            let traces = match (w1.trace, w2.trace) {
                (Some(t1), Some(t2)) => Some([t1, t2]),
                _ => None,
            };
            Ok((stats, traces))
        }
        // Merged scalars force identical error decisions, so surface
        // whichever worker's error arrives first.
        (Err(e), _) | (_, Err(e)) => Err(e.into()),
    }
}

/// Lockstep PCG across the two workers: per-iteration halo exchange of d,
/// merged dots, identical stopping decisions. x enters as the global guess
/// and leaves with both owned slabs reassembled.
pub fn pcg_partitioned(
    sys: &PartitionedSystem,
    plan: &PartitionPlan,
    b: &[f64],
    x: &mut [f64],
    cfg: &PcgConfig,
) -> Result<PartitionStats, PartitionError> {
    run_partitioned(sys, plan, b, x, cfg, false).map(|(stats, _)| stats)
}

pub struct PartitionedSimulation {
    pub result: SimulationResult<f64>,
    pub per_step: Vec<PartitionStats>,
    pub plan: PartitionPlan,
}

/// The transient loop with every linear solve split across the two
/// workers; the explicit half-step and guess extrapolation match the
/// monolithic driver, so per-step iteration counts line up.
pub fn simulate_partitioned(
    problem: &TransientProblem<f64>,
    sys: &PartitionedSystem,
    m: f64,
    keep_snapshots: bool,
) -> Result<PartitionedSimulation, PartitionError> {
    assert_eq!(
        problem.vertex_count(),
        sys.spec.vertex_count(),
        "partition description must match the problem grid"
    );
    let plan = split_domain(&sys.spec, m)?;
    let n = problem.vertex_count();
    let mut ws_l = OperatorWorkspace::for_operator(&problem.op_l);
    let mut u = vec![problem.t_ambient; n];
    let mut guess = u.clone();
    let mut records = Vec::with_capacity(problem.n_steps);
    let mut per_step = Vec::with_capacity(problem.n_steps);
    let mut snapshots = keep_snapshots.then(Vec::new);

    for step in 0..problem.n_steps {
        let started = Instant::now();
        let mut b = vec![0.0f64; n];
        problem.op_l.apply_fused_into(1.0, &problem.f_dt, &u, &mut b, &mut ws_l);
        let mut x = guess.clone();
        let stats = pcg_partitioned(sys, &plan, &b, &mut x, &problem.cfg)?;
        let next_guess = extrapolate_guess(&guess, &x);
        u = x;
        guess = next_guess;
        records.push(StepRecord {
            step,
            iterations: stats.iterations,
            seconds: started.elapsed().as_secs_f64(),
            delta_final: stats.delta_final,
        });
        per_step.push(stats);
        if let Some(snaps) = snapshots.as_mut() {
            snaps.push(u.clone());
        }
    }
    Ok(PartitionedSimulation {
        result: SimulationResult { field: u, records, snapshots },
        per_step,
        plan,
    })
}
