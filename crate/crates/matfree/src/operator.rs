//! Assembly-free application of the time-stepping system matrices.
//!
//! Both matrices share one elemental structure: A = M + theta*dt*K and
//! L = M - (1-theta)*dt*K, so a single operator type applies either side by
//! scaling elemental stiffness with +theta*dt or -(1-theta)*dt. No global
//! matrix is ever formed. Three interchangeable schedules compute the same
//! product: `Flexible` prescales and stores one 4x4 matrix per element, then
//! scatters one (element, dof) row product per work item into 24 private
//! slots per vertex; `SinglePass` gives each vertex one work item that walks
//! its up-to-24 contributions in a fixed octant order, scaling shape
//! matrices by material coefficients in flight; `Coalesced` slides
//! overlapping 31-cube windows along the padded cube line so every window
//! touches four x-aligned strips of 32 consecutive vertices, reducing into
//! 12-entry scratch per strip position and emitting 4 quadrant slots per
//! vertex. Every pass assigns each output slot from exactly one work item,
//! so results are bitwise identical for any thread count.

use crate::elements::{fixed_grid_matrices, Mat4};
use crate::materials::MaterialField;
use crate::mesh::{corner_offset, GridSpec, PaddedSpec, CORNER_CONTRIBS, TETS};
use crate::pool::{self, ExclusiveSlots};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Which elemental schedule applies the operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Flexible,
    SinglePass,
    Coalesced,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Flexible, Strategy::SinglePass, Strategy::Coalesced];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Flexible => "flexible",
            Strategy::SinglePass => "singlepass",
            Strategy::Coalesced => "coalesced",
        }
    }
}

/// Which side of the update the operator applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// M + theta*dt*K, the solved (left-hand) matrix. Symmetric positive
    /// definite for theta, dt >= 0.
    A,
    /// M - (1-theta)*dt*K, the explicit (right-hand) matrix.
    L,
}

/// Cumulative starts of each octant's span in a vertex's 24 slots.
/// Octant o holds `CORNER_CONTRIBS[o].len()` slots: 6,2,2,2,2,2,2,6.
pub const SLOT_OFFSET: [usize; 9] = [0, 6, 8, 10, 12, 14, 16, 18, 24];

/// Cubes advanced per coalesced work group.
pub const COALESCED_ADVANCE: usize = 30;
/// Cubes read per coalesced work group (one overlap with the next group so
/// both x-side contributions of every owned strip position are in scratch).
pub const COALESCED_READ: usize = 31;

/// Geometry of one schedule's work groups: how many items per group, how
/// long each group's block is (cubes or strip length), how many partial-sum
/// slots per vertex the scatter pass produces, and how many groups tile the
/// index space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorkGroupPlan {
    pub strategy: Strategy,
    pub group_size: usize,
    pub block_len: usize,
    pub split_slots: usize,
    pub group_count: usize,
}

impl WorkGroupPlan {
    pub fn new(strategy: Strategy, spec: &GridSpec) -> Self {
        match strategy {
            // One cube per group: 6 tets x 4 dofs = 24 items.
            Strategy::Flexible => WorkGroupPlan {
                strategy,
                group_size: 24,
                block_len: 1,
                split_slots: 24,
                group_count: spec.cube_count(),
            },
            // 3x3 vertex strips as long as fits 64 items: 3*3*7 = 63.
            Strategy::SinglePass => WorkGroupPlan {
                strategy,
                group_size: 64,
                block_len: 7,
                split_slots: 0,
                group_count: spec.vertex_count().div_ceil(64),
            },
            // 31 cubes x 6 tets = 186 items, advancing 30 cubes per group.
            Strategy::Coalesced => WorkGroupPlan {
                strategy,
                group_size: 186,
                block_len: COALESCED_READ,
                split_slots: 4,
                group_count: PaddedSpec::of(spec).cube_count().div_ceil(COALESCED_ADVANCE),
            },
        }
    }
}

/// Strip (y-z quadrant) a cube corner contributes to: dj + 2*dk.
#[inline(always)]
pub(crate) fn quadrant_of(corner: u8) -> usize {
    let d = corner_offset(corner);
    d[1] + 2 * d[2]
}

/// Strip positions a coalesced group writes, as global x-line coordinates
/// W = position. Interior rule: group g owns [30g+1, 30g+30]; group 0 also
/// owns 0; the range is clipped to the one-past-the-end position n_pad.
pub(crate) fn owned_positions(group: usize, n_pad: usize) -> std::ops::RangeInclusive<usize> {
    let q0 = group * COALESCED_ADVANCE;
    let lo = if group == 0 { 0 } else { q0 + 1 };
    let hi = (q0 + COALESCED_ADVANCE).min(n_pad);
    lo..=hi
}

/// Per-vertex slot of a (tet, dof) contribution: the octant span of the
/// corner the dof sits on, plus its rank within that octant's fixed list.
fn slot_table() -> [[usize; 4]; 6] {
    let mut table = [[0usize; 4]; 6];
    for (corner, contribs) in CORNER_CONTRIBS.iter().enumerate() {
        for (rank, &(t, dof)) in contribs.iter().enumerate() {
            table[t as usize][dof as usize] = SLOT_OFFSET[corner] + rank;
        }
    }
    table
}

/// Scratch is reused across applications of one operator; both buffers are
/// zero-filled at the start of each scatter pass because boundary and
/// padding slots are never written.
pub struct OperatorWorkspace<S> {
    slots: Vec<S>,
}

impl<S: Scalar> OperatorWorkspace<S> {
    pub fn new() -> Self {
        OperatorWorkspace { slots: Vec::new() }
    }

    pub fn for_operator(op: &SystemOperator<S>) -> Self {
        OperatorWorkspace { slots: vec![S::zero(); op.workspace_len()] }
    }
}

impl<S: Scalar> Default for OperatorWorkspace<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// The matrix-free operator: grid geometry, material scaling, and one of
/// the three schedules. Immutable during application and safe to share;
/// concurrent applications need distinct outputs and workspaces.
pub struct SystemOperator<S: Scalar> {
    spec: GridSpec,
    padded: PaddedSpec,
    strategy: Strategy,
    mode: Mode,
    theta: f64,
    dt: f64,
    /// +theta*dt (A) or -(1-theta)*dt (L); multiplies every stiffness term.
    k_scale: S,
    /// Unscaled shape matrices per tet position, cast once to S.
    shapes_m: [[[S; 4]; 4]; 6],
    shapes_k: [[[S; 4]; 4]; 6],
    /// Per-element (rho*C, k) material pairs; in-flight strategies only.
    coefs: Vec<(S, S)>,
    /// Per-element prescaled combined matrices; Flexible only.
    elem_mats: Vec<[[S; 4]; 4]>,
    slot_of: [[usize; 4]; 6],
}

impl<S: Scalar> SystemOperator<S> {
    pub fn new(
        spec: &GridSpec,
        field: &MaterialField,
        theta: f64,
        dt: f64,
        mode: Mode,
        strategy: Strategy,
    ) -> Self {
        let coefs = (0..spec.element_count())
            .map(|e| field.element_coefficients(spec, e))
            .collect();
        Self::with_element_coefficients(spec, coefs, theta, dt, mode, strategy)
    }

    /// Builds from explicit per-element (rho*C, k) pairs. The domain split
    /// path uses this so slab operators keep coefficients evaluated against
    /// the full domain.
    pub fn with_element_coefficients(
        spec: &GridSpec,
        coefs: Vec<(f64, f64)>,
        theta: f64,
        dt: f64,
        mode: Mode,
        strategy: Strategy,
    ) -> Self {
        assert!((0.0..=1.0).contains(&theta), "theta must lie in [0, 1]");
        assert!(dt > 0.0, "time step must be positive");
        assert_eq!(coefs.len(), spec.element_count(), "one coefficient pair per element");

        let fg = fixed_grid_matrices(spec);
        let k_scale_f = match mode {
            Mode::A => theta * dt,
            Mode::L => -(1.0 - theta) * dt,
        };

        let cast = |m: &Mat4| {
            let mut out = [[S::zero(); 4]; 4];
            for a in 0..4 {
                for b in 0..4 {
                    out[a][b] = S::from_f64(m[a][b]);
                }
            }
            out
        };
        let mut shapes_m = [[[S::zero(); 4]; 4]; 6];
        let mut shapes_k = [[[S::zero(); 4]; 4]; 6];
        for t in 0..6 {
            shapes_m[t] = cast(&fg.per_shape[t].m);
            shapes_k[t] = cast(&fg.per_shape[t].k);
        }

        let elem_mats = if strategy == Strategy::Flexible {
            coefs
                .iter()
                .enumerate()
                .map(|(e, &(rc, kk))| {
                    let shape = &fg.per_shape[e % 6];
                    let mut m = [[S::zero(); 4]; 4];
                    for a in 0..4 {
                        for b in 0..4 {
                            m[a][b] =
                                S::from_f64(rc * shape.m[a][b] + k_scale_f * kk * shape.k[a][b]);
                        }
                    }
                    m
                })
                .collect()
        } else {
            Vec::new()
        };
        let coefs_s = if strategy == Strategy::Flexible {
            Vec::new()
        } else {
            coefs.iter().map(|&(rc, kk)| (S::from_f64(rc), S::from_f64(kk))).collect()
        };

        SystemOperator {
            spec: *spec,
            padded: PaddedSpec::of(spec),
            strategy,
            mode,
            theta,
            dt,
            k_scale: S::from_f64(k_scale_f),
            shapes_m,
            shapes_k,
            coefs: coefs_s,
            elem_mats,
            slot_of: slot_table(),
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn vertex_count(&self) -> usize {
        self.spec.vertex_count()
    }

    pub fn plan(&self) -> WorkGroupPlan {
        WorkGroupPlan::new(self.strategy, &self.spec)
    }

    /// The scaled element matrix (rho C)_e M_t + k_scale k_e K_t, the exact
    /// 4x4 block every schedule scatters. Assembly-based comparators build
    /// their matrix from these.
    pub fn element_matrix(&self, e: usize) -> [[S; 4]; 4] {
        if self.strategy == Strategy::Flexible {
            return self.elem_mats[e];
        }
        let (rc, kk) = self.coefs[e];
        let t = e % 6;
        let mut m = [[S::zero(); 4]; 4];
        for a in 0..4 {
            for b in 0..4 {
                m[a][b] =
                    rc * self.shapes_m[t][a][b] + self.k_scale * kk * self.shapes_k[t][a][b];
            }
        }
        m
    }

    fn workspace_len(&self) -> usize {
        match self.strategy {
            Strategy::Flexible => 24 * self.spec.vertex_count(),
            Strategy::SinglePass => 0,
            Strategy::Coalesced => 4 * self.spec.vertex_count(),
        }
    }

    /// out = (A or L) x.
    pub fn apply_into(&self, x: &[S], out: &mut [S], ws: &mut OperatorWorkspace<S>) {
        self.run(x, None, out, ws);
    }

    /// out = c * (A or L) x + b, one fused traversal.
    pub fn apply_fused_into(
        &self,
        c: S,
        b: &[S],
        x: &[S],
        out: &mut [S],
        ws: &mut OperatorWorkspace<S>,
    ) {
        assert_eq!(b.len(), self.vertex_count(), "fused addend length");
        self.run(x, Some((c, b)), out, ws);
    }

    /// Allocating convenience for tests and one-shot callers.
    pub fn apply(&self, x: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.vertex_count()];
        let mut ws = OperatorWorkspace::for_operator(self);
        self.apply_into(x, &mut out, &mut ws);
        out
    }

    pub fn apply_fused(&self, c: S, b: &[S], x: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.vertex_count()];
        let mut ws = OperatorWorkspace::for_operator(self);
        self.apply_fused_into(c, b, x, &mut out, &mut ws);
        out
    }

    fn run(&self, x: &[S], fuse: Option<(S, &[S])>, out: &mut [S], ws: &mut OperatorWorkspace<S>) {
        let n = self.vertex_count();
        assert_eq!(x.len(), n, "input length");
        assert_eq!(out.len(), n, "output length");
        ws.slots.resize(self.workspace_len(), S::zero());
        match self.strategy {
            Strategy::Flexible => {
                self.flexible_scatter(x, &mut ws.slots);
                self.gather(&ws.slots, 24, fuse, out);
            }
            Strategy::SinglePass => self.single_pass(x, fuse, out),
            Strategy::Coalesced => {
                self.coalesced_scatter(x, &mut ws.slots);
                self.gather(&ws.slots, 4, fuse, out);
            }
        }
    }

    /// Diagonal of A for Jacobi preconditioning, via the same traversal the
    /// selected strategy uses for products.
    pub fn jacobi_diagonal(&self) -> Vec<S> {
        assert_eq!(self.mode, Mode::A, "the preconditioner diagonal comes from the solved matrix");
        let n = self.vertex_count();
        let mut out = vec![S::zero(); n];
        let mut ws = OperatorWorkspace::for_operator(self);
        match self.strategy {
            Strategy::Flexible => {
                self.flexible_scatter_diag(&mut ws.slots);
                self.gather(&ws.slots, 24, None, &mut out);
            }
            Strategy::SinglePass => self.single_pass_diag(&mut out),
            Strategy::Coalesced => {
                self.coalesced_scatter_diag(&mut ws.slots);
                self.gather(&ws.slots, 4, None, &mut out);
            }
        }
        out
    }

    /// Vertex ids of a cube's 8 corners in corner-id order, from its v000.
    #[inline(always)]
    fn cube_corners(&self, v000: usize) -> [usize; 8] {
        let [nvx, nvy, _] = self.spec.nv_axis();
        let sy = nvx;
        let sz = nvx * nvy;
        [
            v000,
            v000 + 1,
            v000 + sy,
            v000 + 1 + sy,
            v000 + sz,
            v000 + 1 + sz,
            v000 + sy + sz,
            v000 + 1 + sy + sz,
        ]
    }

    fn flexible_scatter(&self, x: &[S], slots_buf: &mut [S]) {
        slots_buf.fill(S::zero());
        let slots = ExclusiveSlots::new(slots_buf);
        let spec = &self.spec;
        pool::for_each_range_weighted(spec.cube_count(), 24, 256, |cs, ce| {
            for cube in cs..ce {
                let [ci, cj, ck] = spec.cube_coords(cube);
                let vc = self.cube_corners(spec.vertex_index(ci, cj, ck));
                for t in 0..6 {
                    let mat = &self.elem_mats[cube * 6 + t];
                    let vids = [
                        vc[TETS[t][0] as usize],
                        vc[TETS[t][1] as usize],
                        vc[TETS[t][2] as usize],
                        vc[TETS[t][3] as usize],
                    ];
                    let xs = [x[vids[0]], x[vids[1]], x[vids[2]], x[vids[3]]];
                    for dof in 0..4 {
                        let row = &mat[dof];
                        let val =
                            row[0] * xs[0] + row[1] * xs[1] + row[2] * xs[2] + row[3] * xs[3];
                        // SAFETY: (cube, t, dof) is the unique writer of this
                        // vertex/slot pair; see the flexible write audit.
                        unsafe { slots.write(vids[dof] * 24 + self.slot_of[t][dof], val) };
                    }
                }
            }
        });
    }

    fn flexible_scatter_diag(&self, slots_buf: &mut [S]) {
        slots_buf.fill(S::zero());
        let slots = ExclusiveSlots::new(slots_buf);
        let spec = &self.spec;
        pool::for_each_range_weighted(spec.cube_count(), 24, 256, |cs, ce| {
            for cube in cs..ce {
                let [ci, cj, ck] = spec.cube_coords(cube);
                let vc = self.cube_corners(spec.vertex_index(ci, cj, ck));
                for t in 0..6 {
                    let mat = &self.elem_mats[cube * 6 + t];
                    for dof in 0..4 {
                        let v = vc[TETS[t][dof] as usize];
                        // SAFETY: same unique writer as the product scatter.
                        unsafe { slots.write(v * 24 + self.slot_of[t][dof], mat[dof][dof]) };
                    }
                }
            }
        });
    }

    /// Second pass shared by the scatter strategies: per vertex, sum its
    /// `width` slots in ascending order, optionally fusing c*sum + b.
    fn gather(&self, slots: &[S], width: usize, fuse: Option<(S, &[S])>, out: &mut [S]) {
        let n = self.vertex_count();
        let sink = ExclusiveSlots::new(out);
        pool::for_each_range(n, 4096, |vs, ve| {
            for v in vs..ve {
                let base = v * width;
                let mut acc = S::zero();
                for s in 0..width {
                    acc = acc + slots[base + s];
                }
                let val = match fuse {
                    Some((c, b)) => c * acc + b[v],
                    None => acc,
                };
                // SAFETY: vertex ranges are disjoint chunks.
                unsafe { sink.write(v, val) };
            }
        });
    }

    fn single_pass(&self, x: &[S], fuse: Option<(S, &[S])>, out: &mut [S]) {
        let spec = &self.spec;
        let [nvx, nvy, _] = spec.nv_axis();
        let (sy, sz) = (nvx, nvx * nvy);
        let nd = spec.divisions();
        let (c0, c1, c2) = (nd[0] as usize, nd[1] as usize, nd[2] as usize);
        let sink = ExclusiveSlots::new(out);
        pool::for_each_range_weighted(spec.vertex_count(), 24, 1024, |vs, ve| {
            for v in vs..ve {
                let [i, j, k] = spec.vertex_coords(v);
                let mut acc = S::zero();
                for o in 0..8usize {
                    let (di, dj, dk) = (o & 1, (o >> 1) & 1, o >> 2);
                    if i < di || j < dj || k < dk {
                        continue;
                    }
                    let (ci, cj, ck) = (i - di, j - dj, k - dk);
                    if ci >= c0 || cj >= c1 || ck >= c2 {
                        continue;
                    }
                    let cube = spec.cube_index(ci, cj, ck);
                    let vc = self.cube_corners(v - di - dj * sy - dk * sz);
                    for &(t, dof) in CORNER_CONTRIBS[o] {
                        let (t, dof) = (t as usize, dof as usize);
                        let (rc, kk) = self.coefs[cube * 6 + t];
                        let ks = kk * self.k_scale;
                        let rm = &self.shapes_m[t][dof];
                        let rk = &self.shapes_k[t][dof];
                        for nn in 0..4 {
                            acc = acc
                                + (rc * rm[nn] + ks * rk[nn]) * x[vc[TETS[t][nn] as usize]];
                        }
                    }
                }
                let val = match fuse {
                    Some((c, b)) => c * acc + b[v],
                    None => acc,
                };
                // SAFETY: one work item per vertex.
                unsafe { sink.write(v, val) };
            }
        });
    }

    fn single_pass_diag(&self, out: &mut [S]) {
        let spec = &self.spec;
        let nd = spec.divisions();
        let (c0, c1, c2) = (nd[0] as usize, nd[1] as usize, nd[2] as usize);
        let sink = ExclusiveSlots::new(out);
        pool::for_each_range_weighted(spec.vertex_count(), 24, 1024, |vs, ve| {
            for v in vs..ve {
                let [i, j, k] = spec.vertex_coords(v);
                let mut acc = S::zero();
                for o in 0..8usize {
                    let (di, dj, dk) = (o & 1, (o >> 1) & 1, o >> 2);
                    if i < di || j < dj || k < dk {
                        continue;
                    }
                    let (ci, cj, ck) = (i - di, j - dj, k - dk);
                    if ci >= c0 || cj >= c1 || ck >= c2 {
                        continue;
                    }
                    let cube = spec.cube_index(ci, cj, ck);
                    for &(t, dof) in CORNER_CONTRIBS[o] {
                        let (t, dof) = (t as usize, dof as usize);
                        let (rc, kk) = self.coefs[cube * 6 + t];
                        acc = acc
                            + rc * self.shapes_m[t][dof][dof]
                            + kk * self.k_scale * self.shapes_k[t][dof][dof];
                    }
                }
                // SAFETY: one work item per vertex.
                unsafe { sink.write(v, acc) };
            }
        });
    }

    fn coalesced_scatter(&self, x: &[S], split_buf: &mut [S]) {
        split_buf.fill(S::zero());
        let split = ExclusiveSlots::new(split_buf);
        let padded = &self.padded;
        let n_pad = padded.cube_count();
        let n_vert = self.vertex_count();
        let [nvx, nvy, _] = self.spec.nv_axis();
        let (sy, sz) = (nvx, nvx * nvy);
        let groups = n_pad.div_ceil(COALESCED_ADVANCE);
        pool::for_each_range_weighted(groups, 186 * 8, 1, |gs, ge| {
            for g in gs..ge {
                let q0 = g * COALESCED_ADVANCE;
                // scratch[strip][position][side*6 + tet]; the 12 slots are
                // the two x-side cubes' six tets each.
                let mut scratch = [[[S::zero(); 12]; COALESCED_READ + 1]; 4];
                for p in 0..COALESCED_READ {
                    let q = q0 + p;
                    if q >= n_pad || padded.is_padding_cube(q) {
                        continue;
                    }
                    // Flat padded cube index doubles as its v000 vertex id.
                    let vc = self.cube_corners(q);
                    let e_base = padded.physical_cube(q) * 6;
                    for t in 0..6 {
                        let (rc, kk) = self.coefs[e_base + t];
                        let ks = kk * self.k_scale;
                        let xs = [
                            x[vc[TETS[t][0] as usize]],
                            x[vc[TETS[t][1] as usize]],
                            x[vc[TETS[t][2] as usize]],
                            x[vc[TETS[t][3] as usize]],
                        ];
                        for dof in 0..4 {
                            let corner = TETS[t][dof];
                            let di = corner_offset(corner)[0];
                            let rm = &self.shapes_m[t][dof];
                            let rk = &self.shapes_k[t][dof];
                            let mut val = S::zero();
                            for nn in 0..4 {
                                val = val + (rc * rm[nn] + ks * rk[nn]) * xs[nn];
                            }
                            scratch[quadrant_of(corner)][p + di][(1 - di) * 6 + t] = val;
                        }
                    }
                }
                for (strip, rail) in scratch.iter().enumerate() {
                    let off = (strip & 1) * sy + (strip >> 1) * sz;
                    for pos in owned_positions(g, n_pad) {
                        let v = pos + off;
                        if v >= n_vert {
                            continue;
                        }
                        let cell = &rail[pos - q0];
                        let mut acc = S::zero();
                        for s in 0..12 {
                            acc = acc + cell[s];
                        }
                        // SAFETY: position ownership is disjoint across
                        // groups; see the coalesced write audit.
                        unsafe { split.write(v * 4 + strip, acc) };
                    }
                }
            }
        });
    }

    fn coalesced_scatter_diag(&self, split_buf: &mut [S]) {
        split_buf.fill(S::zero());
        let split = ExclusiveSlots::new(split_buf);
        let padded = &self.padded;
        let n_pad = padded.cube_count();
        let n_vert = self.vertex_count();
        let [nvx, nvy, _] = self.spec.nv_axis();
        let (sy, sz) = (nvx, nvx * nvy);
        let groups = n_pad.div_ceil(COALESCED_ADVANCE);
        pool::for_each_range_weighted(groups, 186 * 2, 1, |gs, ge| {
            for g in gs..ge {
                let q0 = g * COALESCED_ADVANCE;
                let mut scratch = [[[S::zero(); 12]; COALESCED_READ + 1]; 4];
                for p in 0..COALESCED_READ {
                    let q = q0 + p;
                    if q >= n_pad || padded.is_padding_cube(q) {
                        continue;
                    }
                    let e_base = padded.physical_cube(q) * 6;
                    for t in 0..6 {
                        let (rc, kk) = self.coefs[e_base + t];
                        for dof in 0..4 {
                            let corner = TETS[t][dof];
                            let di = corner_offset(corner)[0];
                            let val = rc * self.shapes_m[t][dof][dof]
                                + kk * self.k_scale * self.shapes_k[t][dof][dof];
                            scratch[quadrant_of(corner)][p + di][(1 - di) * 6 + t] = val;
                        }
                    }
                }
                for (strip, rail) in scratch.iter().enumerate() {
                    let off = (strip & 1) * sy + (strip >> 1) * sz;
                    for pos in owned_positions(g, n_pad) {
                        let v = pos + off;
                        if v >= n_vert {
                            continue;
                        }
                        let cell = &rail[pos - q0];
                        let mut acc = S::zero();
                        for s in 0..12 {
                            acc = acc + cell[s];
                        }
                        // SAFETY: same ownership as the product scatter.
                        unsafe { split.write(v * 4 + strip, acc) };
                    }
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::materials::{FieldKind, MaterialCoefficients, MaterialField};
    use crate::mesh::corner_id;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn grid(c: [u32; 3]) -> GridSpec {
        GridSpec::new([0.0; 3], [c[0] as f64, c[1] as f64, c[2] as f64], c).unwrap()
    }

    fn two_layer_field() -> MaterialField {
        MaterialField::new(
            FieldKind::TwoLayer { z_threshold: 1.4 },
            MaterialCoefficients::new([3.0e6, 1.0e6], [4.0e8, 5.0e6]),
        )
    }

    fn random_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rel_linf(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-300);
        a.iter().zip(b).fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs())) / scale
    }

    #[test]
    fn slot_offsets_match_contribution_lists() {
        let mut cum = 0;
        for (c, contribs) in CORNER_CONTRIBS.iter().enumerate() {
            assert_eq!(SLOT_OFFSET[c], cum);
            cum += contribs.len();
        }
        assert_eq!(cum, 24);
        // The table is a bijection from (tet, dof) onto 0..24.
        let table = slot_table();
        let mut seen = [false; 24];
        for t in 0..6 {
            for dof in 0..4 {
                assert!(!seen[table[t][dof]]);
                seen[table[t][dof]] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn plan_shapes() {
        let spec = grid([30, 30, 10]);
        let f = WorkGroupPlan::new(Strategy::Flexible, &spec);
        assert_eq!((f.group_size, f.block_len, f.split_slots), (24, 1, 24));
        assert_eq!(f.group_count, spec.cube_count());
        let s = WorkGroupPlan::new(Strategy::SinglePass, &spec);
        assert_eq!((s.group_size, s.block_len, s.split_slots), (64, 7, 0));
        assert!(s.group_count * 64 >= spec.vertex_count());
        let c = WorkGroupPlan::new(Strategy::Coalesced, &spec);
        assert_eq!((c.group_size, c.block_len, c.split_slots), (186, 31, 4));
        // 31*31*10 padded cubes in groups of 30.
        assert_eq!(c.group_count, (31 * 31 * 10usize).div_ceil(30));
    }

    /// Flexible scatter: every (element, dof) work item writes a distinct
    /// slot, and the written set per vertex matches what cube adjacency
    /// says it must be.
    #[test]
    fn flexible_write_audit() {
        let spec = grid([3, 2, 4]);
        let table = slot_table();
        let mut writes: HashMap<usize, usize> = HashMap::new();
        for e in 0..spec.element_count() {
            let (_, t) = spec.element_cube_tet(e);
            let vids = spec.element_vertices(e);
            for dof in 0..4 {
                *writes.entry(vids[dof] * 24 + table[t][dof]).or_insert(0) += 1;
            }
        }
        assert!(writes.values().all(|&c| c == 1), "one writer per slot");
        assert_eq!(writes.len(), 4 * spec.element_count());

        // Independent expectation from vertex-octant adjacency.
        let nd = spec.divisions().map(|d| d as usize);
        for v in 0..spec.vertex_count() {
            let [i, j, k] = spec.vertex_coords(v);
            let mut expect = 0;
            for o in 0..8usize {
                let (di, dj, dk) = (o & 1, (o >> 1) & 1, o >> 2);
                if i >= di && j >= dj && k >= dk {
                    let (ci, cj, ck) = (i - di, j - dj, k - dk);
                    if ci < nd[0] && cj < nd[1] && ck < nd[2] {
                        expect += CORNER_CONTRIBS[o].len();
                    }
                }
            }
            let got = (0..24).filter(|s| writes.contains_key(&(v * 24 + s))).count();
            assert_eq!(got, expect, "vertex {v}");
        }
    }

    /// Coalesced schedule: scratch slots are written at most once per group,
    /// split slots at most once across all groups, and exactly the vertex
    /// quadrants with a physical contributing cube get written.
    #[test]
    fn coalesced_write_audit() {
        for c in [[3, 3, 2], [2, 2, 2], [5, 4, 3], [1, 1, 1]] {
            let spec = grid(c);
            let padded = PaddedSpec::of(&spec);
            let n_pad = padded.cube_count();
            let n_vert = spec.vertex_count();
            let [nvx, nvy, _] = spec.nv_axis();
            let (sy, sz) = (nvx, nvx * nvy);
            let groups = n_pad.div_ceil(COALESCED_ADVANCE);

            let mut split_writers: HashMap<usize, usize> = HashMap::new();
            let mut computed = 0usize;
            for g in 0..groups {
                let q0 = g * COALESCED_ADVANCE;
                let mut scratch_writers: HashMap<(usize, usize, usize), usize> = HashMap::new();
                for p in 0..COALESCED_READ {
                    let q = q0 + p;
                    if q >= n_pad || padded.is_padding_cube(q) {
                        continue;
                    }
                    computed += 1;
                    for t in 0..6 {
                        for dof in 0..4 {
                            let corner = TETS[t][dof];
                            let di = corner_offset(corner)[0];
                            let key = (quadrant_of(corner), p + di, (1 - di) * 6 + t);
                            *scratch_writers.entry(key).or_insert(0) += 1;
                        }
                    }
                }
                assert!(scratch_writers.values().all(|&n| n == 1), "scratch exclusivity");
                for strip in 0..4 {
                    let off = (strip & 1) * sy + (strip >> 1) * sz;
                    for pos in owned_positions(g, n_pad) {
                        let v = pos + off;
                        if v < n_vert {
                            *split_writers.entry(v * 4 + strip).or_insert(0) += 1;
                        }
                    }
                }
            }
            assert!(split_writers.values().all(|&n| n == 1), "split exclusivity");
            // Window overlap recomputes each 30th cube once; padding is
            // skipped, so all physical cubes are computed at least once.
            assert!(computed >= spec.cube_count());

            // Coverage: quadrant slots with a physical contributing cube.
            let nd = spec.divisions().map(|d| d as usize);
            for v in 0..n_vert {
                let [i, j, k] = spec.vertex_coords(v);
                for strip in 0..4usize {
                    let (dj, dk) = (strip & 1, strip >> 1);
                    let physical = (0..2usize).any(|di| {
                        i >= di
                            && j >= dj
                            && k >= dk
                            && i - di < nd[0]
                            && j - dj < nd[1]
                            && k - dk < nd[2]
                    });
                    if physical {
                        assert!(
                            split_writers.contains_key(&(v * 4 + strip)),
                            "missing quadrant {strip} of vertex {v} on grid {c:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn owned_positions_tile_the_line() {
        for n_pad in [1usize, 29, 30, 31, 45, 60, 61, 9610] {
            let groups = n_pad.div_ceil(COALESCED_ADVANCE);
            let mut owner = vec![0usize; n_pad + 1];
            for g in 0..groups {
                for w in owned_positions(g, n_pad) {
                    owner[w] += 1;
                    // Owned positions must sit inside the group's window.
                    assert!(w >= g * COALESCED_ADVANCE);
                    assert!(w <= g * COALESCED_ADVANCE + COALESCED_READ);
                }
            }
            assert!(owner.iter().all(|&n| n == 1), "n_pad {n_pad}");
        }
    }

    #[test]
    fn zero_maps_to_zero_for_all_strategies() {
        let spec = grid([3, 3, 2]);
        let field = two_layer_field();
        for strategy in Strategy::ALL {
            let op: SystemOperator<f64> =
                SystemOperator::new(&spec, &field, 0.5, 0.01, Mode::A, strategy);
            let out = op.apply(&vec![0.0; spec.vertex_count()]);
            assert!(out.iter().all(|&v| v == 0.0), "{strategy:?}");
        }
    }

    #[test]
    fn strategies_agree_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fields = [
            two_layer_field(),
            MaterialField::new(
                FieldKind::Functional,
                MaterialCoefficients::new([2.0e6, 4.0e6], [1.0e7, 3.0e7]),
            ),
            MaterialField::new(
                FieldKind::Corrosion { depth: 1.1, half_height: 1.5 },
                MaterialCoefficients::new([3.7e6, 1.6e6], [4.9e8, 4.0e6]),
            ),
        ];
        for c in [[3, 3, 3], [3, 3, 2], [5, 2, 4]] {
            let spec = grid(c);
            for field in &fields {
                for mode in [Mode::A, Mode::L] {
                    let ops: Vec<SystemOperator<f64>> = Strategy::ALL
                        .iter()
                        .map(|&s| SystemOperator::new(&spec, field, 0.5, 0.01, mode, s))
                        .collect();
                    for _ in 0..5 {
                        let x = random_vec(spec.vertex_count(), &mut rng);
                        let base = ops[0].apply(&x);
                        for op in &ops[1..] {
                            assert!(
                                rel_linf(&op.apply(&x), &base) <= 1e-12,
                                "{c:?} {:?} vs flexible",
                                op.strategy()
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_precision_strategies_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = grid([3, 3, 2]);
        let field = two_layer_field();
        let x: Vec<f32> =
            (0..spec.vertex_count()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let base = SystemOperator::<f32>::new(&spec, &field, 0.5, 0.01, Mode::A, Strategy::Flexible)
            .apply(&x);
        for strategy in [Strategy::SinglePass, Strategy::Coalesced] {
            let out = SystemOperator::<f32>::new(&spec, &field, 0.5, 0.01, Mode::A, strategy)
                .apply(&x);
            let scale = base.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
            let err = out.iter().zip(&base).fold(0.0f32, |m, (&a, &b)| m.max((a - b).abs()));
            assert!(err <= 1e-4 * scale, "{strategy:?}: {err} vs scale {scale}");
        }
    }

    #[test]
    fn symmetry_of_the_implied_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = grid([4, 3, 3]);
        let field = two_layer_field();
        for strategy in Strategy::ALL {
            let op: SystemOperator<f64> =
                SystemOperator::new(&spec, &field, 0.5, 0.01, Mode::A, strategy);
            let x = random_vec(spec.vertex_count(), &mut rng);
            let y = random_vec(spec.vertex_count(), &mut rng);
            let ax = op.apply(&x);
            let ay = op.apply(&y);
            let yax: f64 = y.iter().zip(&ax).map(|(a, b)| a * b).sum();
            let xay: f64 = x.iter().zip(&ay).map(|(a, b)| a * b).sum();
            assert_relative_eq!(yax, xay, max_relative = 1e-10);
        }
    }

    /// Stiffness annihilates constants, so A and L agree on all-ones and
    /// both reduce to the mass term alone.
    #[test]
    fn constant_vector_sees_only_mass() {
        let spec = grid([3, 3, 3]);
        let field = two_layer_field();
        let ones = vec![1.0f64; spec.vertex_count()];
        for strategy in Strategy::ALL {
            let a: SystemOperator<f64> =
                SystemOperator::new(&spec, &field, 0.5, 0.01, Mode::A, strategy);
            let l: SystemOperator<f64> =
                SystemOperator::new(&spec, &field, 0.5, 0.01, Mode::L, strategy);
            // theta = 0 in A mode zeroes the stiffness scale: pure mass.
            let m: SystemOperator<f64> =
                SystemOperator::new(&spec, &field, 0.0, 0.01, Mode::A, strategy);
            let (av, lv, mv) = (a.apply(&ones), l.apply(&ones), m.apply(&ones));
            assert!(rel_linf(&av, &mv) <= 1e-10, "{strategy:?} A1 vs M1");
            assert!(rel_linf(&lv, &mv) <= 1e-10, "{strategy:?} L1 vs M1");
        }
    }

    /// Interior row sums of the mass term are the cell volume times rho*C:
    /// 24 adjacent tets each contribute V_tet/4.
    #[test]
    fn homogeneous_mass_row_sum_is_lumped_volume() {
        let spec = GridSpec::new([0.0; 3], [1.0, 1.0, 1.0], [2, 2, 2]).unwrap();
        let field = MaterialField::new(
            FieldKind::TwoLayer { z_threshold: -1.0 },
            MaterialCoefficients::new([2.0e6, 2.0e6], [3.0e7, 3.0e7]),
        );
        let ones = vec![1.0f64; spec.vertex_count()];
        let h = spec.spacing();
        let lumped = 2.0e6 * h[0] * h[1] * h[2];
        for strategy in Strategy::ALL {
            let a: SystemOperator<f64> =
                SystemOperator::new(&spec, &field, 0.5, 0.01, Mode::A, strategy);
            let center = spec.vertex_index(1, 1, 1);
            assert_relative_eq!(a.apply(&ones)[center], lumped, max_relative = 1e-12);
        }
    }

    #[test]
    fn fused_application_is_exactly_b_minus_ax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = grid([3, 3, 2]);
        let field = two_layer_field();
        let x = random_vec(spec.vertex_count(), &mut rng);
        let b = random_vec(spec.vertex_count(), &mut rng);
        for strategy in Strategy::ALL {
            let op: SystemOperator<f64> =
                SystemOperator::new(&spec, &field, 0.5, 0.01, Mode::A, strategy);
            let fused = op.apply_fused(-1.0, &b, &x);
            let plain = op.apply(&x);
            for v in 0..spec.vertex_count() {
                assert_eq!(fused[v], b[v] - plain[v], "{strategy:?} vertex {v}");
            }
        }
    }

    #[test]
    fn repeated_application_is_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let spec = grid([4, 4, 4]);
        let field = two_layer_field();
        let x = random_vec(spec.vertex_count(), &mut rng);
        for strategy in Strategy::ALL {
            let op: SystemOperator<f64> =
                SystemOperator::new(&spec, &field, 0.5, 0.01, Mode::A, strategy);
            let mut ws = OperatorWorkspace::for_operator(&op);
            let mut out1 = vec![0.0; spec.vertex_count()];
            let mut out2 = vec![0.0; spec.vertex_count()];
            op.apply_into(&x, &mut out1, &mut ws);
            op.apply_into(&x, &mut out2, &mut ws);
            assert_eq!(out1, out2, "{strategy:?}");
        }
    }

    #[test]
    fn jacobi_diagonal_is_positive_and_strategy_independent() {
        let spec = grid([3, 3, 3]);
        let field = two_layer_field();
        let base = SystemOperator::<f64>::new(&spec, &field, 0.5, 0.01, Mode::A, Strategy::Flexible)
            .jacobi_diagonal();
        assert!(base.iter().all(|&d| d > 0.0));
        for strategy in [Strategy::SinglePass, Strategy::Coalesced] {
            let diag = SystemOperator::<f64>::new(&spec, &field, 0.5, 0.01, Mode::A, strategy)
                .jacobi_diagonal();
            assert!(rel_linf(&diag, &base) <= 1e-12, "{strategy:?}");
        }
    }

    /// Translation symmetry: with one material everywhere, every interior
    /// vertex sums the same 24 values in the same order.
    #[test]
    fn jacobi_interior_entries_identical_when_homogeneous() {
        let spec = grid([4, 4, 4]);
        let field = MaterialField::new(
            FieldKind::TwoLayer { z_threshold: -1.0 },
            MaterialCoefficients::new([2.0e6, 2.0e6], [3.0e7, 3.0e7]),
        );
        for strategy in Strategy::ALL {
            let diag = SystemOperator::<f64>::new(&spec, &field, 0.5, 0.01, Mode::A, strategy)
                .jacobi_diagonal();
            let refv = diag[spec.vertex_index(1, 1, 1)];
            for i in 1..4 {
                for j in 1..4 {
                    for k in 1..4 {
                        assert_eq!(diag[spec.vertex_index(i, j, k)], refv, "{strategy:?}");
                    }
                }
            }
        }
    }

    /// Material jump across the layer threshold must show in the diagonal.
    #[test]
    fn jacobi_diagonal_jumps_across_layer() {
        let spec = grid([4, 4, 4]);
        let field = MaterialField::new(
            FieldKind::TwoLayer { z_threshold: 2.1 },
            MaterialCoefficients::new([3.0e6, 1.0e6], [4.0e8, 5.0e6]),
        );
        let diag = SystemOperator::<f64>::new(&spec, &field, 0.5, 0.01, Mode::A, Strategy::Flexible)
            .jacobi_diagonal();
        let below = diag[spec.vertex_index(2, 2, 1)];
        let above = diag[spec.vertex_index(2, 2, 3)];
        assert!((below - above).abs() > 0.01 * below.abs(), "{below} vs {above}");
    }

    #[test]
    #[should_panic(expected = "solved matrix")]
    fn jacobi_rejects_the_explicit_mode() {
        let spec = grid([2, 2, 2]);
        let op: SystemOperator<f64> =
            SystemOperator::new(&spec, &two_layer_field(), 0.5, 0.01, Mode::L, Strategy::Flexible);
        let _ = op.jacobi_diagonal();
    }

    #[test]
    fn corner_identities_used_by_the_coalesced_schedule() {
        for corner in 0u8..8 {
            let d = corner_offset(corner);
            assert_eq!(corner_id(d), corner);
            assert_eq!(quadrant_of(corner), d[1] + 2 * d[2]);
        }
    }
}
