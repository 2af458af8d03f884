//! Fixed-grid box mesh: a rectangular domain divided into cubic cells, each
//! cell split into the six Kuhn tetrahedra sharing the cell's main diagonal.
//! All index arithmetic lives here (vertex <-> position, element <-> vertices,
//! and the padded index space used by the coalesced application strategy).

use serde::{Deserialize, Serialize};

use crate::error::MeshError;

/// Geometry authority for the whole solver: box bounds plus divisions per
/// axis. Vertex indices are x-fastest: `idx = i + (C0+1)*(j + (C1+1)*k)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGridSpec")]
pub struct GridSpec {
    bounds: [[f64; 3]; 2],
    divisions: [u32; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGridSpec {
    bounds: [[f64; 3]; 2],
    divisions: [u32; 3],
}

impl TryFrom<RawGridSpec> for GridSpec {
    type Error = MeshError;

    fn try_from(raw: RawGridSpec) -> Result<Self, MeshError> {
        GridSpec::new(raw.bounds[0], raw.bounds[1], raw.divisions)
    }
}

impl GridSpec {
    pub fn new(
        bounds_min: [f64; 3],
        bounds_max: [f64; 3],
        divisions: [u32; 3],
    ) -> Result<Self, MeshError> {
        if divisions.contains(&0) {
            return Err(MeshError::EmptyAxis(divisions));
        }
        if (0..3).any(|a| !(bounds_max[a] > bounds_min[a])) {
            return Err(MeshError::DegenerateBounds {
                min: bounds_min,
                max: bounds_max,
            });
        }
        Ok(Self {
            bounds: [bounds_min, bounds_max],
            divisions,
        })
    }

    pub fn bounds_min(&self) -> [f64; 3] {
        self.bounds[0]
    }

    pub fn bounds_max(&self) -> [f64; 3] {
        self.bounds[1]
    }

    pub fn divisions(&self) -> [u32; 3] {
        self.divisions
    }

    pub fn spacing(&self) -> [f64; 3] {
        let mut h = [0.0; 3];
        for a in 0..3 {
            h[a] = (self.bounds[1][a] - self.bounds[0][a]) / self.divisions[a] as f64;
        }
        h
    }

    /// Vertices per axis (divisions + 1).
    pub fn nv_axis(&self) -> [usize; 3] {
        [
            self.divisions[0] as usize + 1,
            self.divisions[1] as usize + 1,
            self.divisions[2] as usize + 1,
        ]
    }

    pub fn vertex_count(&self) -> usize {
        let n = self.nv_axis();
        n[0] * n[1] * n[2]
    }

    pub fn cube_count(&self) -> usize {
        let c = self.divisions;
        c[0] as usize * c[1] as usize * c[2] as usize
    }

    pub fn element_count(&self) -> usize {
        6 * self.cube_count()
    }

    #[inline(always)]
    pub fn vertex_index(&self, i: usize, j: usize, k: usize) -> usize {
        let n = self.nv_axis();
        debug_assert!(i < n[0] && j < n[1] && k < n[2]);
        i + n[0] * (j + n[1] * k)
    }

    #[inline(always)]
    pub fn vertex_coords(&self, idx: usize) -> [usize; 3] {
        let n = self.nv_axis();
        assert!(idx < self.vertex_count(), "vertex index {idx} out of range");
        let i = idx % n[0];
        let rest = idx / n[0];
        [i, rest % n[1], rest / n[1]]
    }

    pub fn vertex_position(&self, idx: usize) -> [f64; 3] {
        let ijk = self.vertex_coords(idx);
        self.position_of_coords(ijk)
    }

    pub fn position_of_coords(&self, ijk: [usize; 3]) -> [f64; 3] {
        let h = self.spacing();
        let lo = self.bounds[0];
        [
            lo[0] + ijk[0] as f64 * h[0],
            lo[1] + ijk[1] as f64 * h[1],
            lo[2] + ijk[2] as f64 * h[2],
        ]
    }

    /// Cubes are ordered like vertices: x fastest, then y, then z.
    #[inline(always)]
    pub fn cube_index(&self, ci: usize, cj: usize, ck: usize) -> usize {
        let c = self.divisions;
        debug_assert!(ci < c[0] as usize && cj < c[1] as usize && ck < c[2] as usize);
        ci + c[0] as usize * (cj + c[1] as usize * ck)
    }

    #[inline(always)]
    pub fn cube_coords(&self, cube: usize) -> [usize; 3] {
        let c = self.divisions;
        assert!(cube < self.cube_count(), "cube index {cube} out of range");
        let nx = c[0] as usize;
        let ny = c[1] as usize;
        [cube % nx, (cube / nx) % ny, cube / (nx * ny)]
    }

    /// Element `e` lives in cube `e / 6` as tetrahedron `e % 6`.
    #[inline(always)]
    pub fn element_cube_tet(&self, e: usize) -> (usize, usize) {
        assert!(e < self.element_count(), "element index {e} out of range");
        (e / 6, e % 6)
    }

    /// Global vertex indices of element `e`, in TetTable storage order.
    #[inline(always)]
    pub fn element_vertices(&self, e: usize) -> [usize; 4] {
        let (cube, tet) = self.element_cube_tet(e);
        let cc = self.cube_coords(cube);
        let mut out = [0usize; 4];
        for (v, &corner) in TETS[tet].iter().enumerate() {
            let d = corner_offset(corner);
            out[v] = self.vertex_index(cc[0] + d[0], cc[1] + d[1], cc[2] + d[2]);
        }
        out
    }

    /// Positions of element `e`'s vertices, in TetTable storage order.
    pub fn element_positions(&self, e: usize) -> [[f64; 3]; 4] {
        let verts = self.element_vertices(e);
        let mut out = [[0.0; 3]; 4];
        for (v, &idx) in verts.iter().enumerate() {
            out[v] = self.vertex_position(idx);
        }
        out
    }
}

/// Kuhn subdivision of the unit cube: tetrahedron `t` follows the monotone
/// lattice path of axis permutation `PERMS[t]` from corner (0,0,0) to
/// (1,1,1). Corner ids encode offsets bitwise: `id = di + 2*dj + 4*dk`.
///
/// The ascending path order is kept for all six tetrahedra because it makes
/// the six elemental matrices coincide on cubic cells (any axis permutation
/// is an isometry mapping path order to path order). The price is that the
/// signed volume carries the permutation's parity (`TET_PARITY`); consumers
/// use |volume|.
pub const TETS: [[u8; 4]; 6] = [
    [0, 1, 3, 7], // x, y, z
    [0, 1, 5, 7], // x, z, y
    [0, 2, 3, 7], // y, x, z
    [0, 2, 6, 7], // y, z, x
    [0, 4, 5, 7], // z, x, y
    [0, 4, 6, 7], // z, y, x
];

/// Axis visit order behind each tetrahedron's lattice path.
pub const PERMS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// Sign of det[c1-c0, c2-c0, c3-c0] for the stored vertex order.
pub const TET_PARITY: [i8; 6] = [1, -1, -1, 1, 1, -1];

/// For each cube corner id, the (tetrahedron, local DoF) pairs that reference
/// it. Diagonal corners 0 and 7 belong to all six tetrahedra, the other six
/// corners to two each: 24 pairs total, which is why an interior mesh vertex
/// accumulates exactly 24 elemental contributions.
pub const CORNER_CONTRIBS: [&[(u8, u8)]; 8] = [
    &[(0, 0), (1, 0), (2, 0), (3, 0), (4, 0), (5, 0)],
    &[(0, 1), (1, 1)],
    &[(2, 1), (3, 1)],
    &[(0, 2), (2, 2)],
    &[(4, 1), (5, 1)],
    &[(1, 2), (4, 2)],
    &[(3, 2), (5, 2)],
    &[(0, 3), (1, 3), (2, 3), (3, 3), (4, 3), (5, 3)],
];

/// Total (element, local DoF) pairs adjacent to an interior vertex.
pub const INTERIOR_VALENCE: usize = 24;

#[inline(always)]
pub fn corner_offset(corner: u8) -> [usize; 3] {
    debug_assert!(corner < 8);
    [
        (corner & 1) as usize,
        ((corner >> 1) & 1) as usize,
        ((corner >> 2) & 1) as usize,
    ]
}

#[inline(always)]
pub fn corner_id(d: [usize; 3]) -> u8 {
    debug_assert!(d.iter().all(|&x| x < 2));
    (d[0] + 2 * d[1] + 4 * d[2]) as u8
}

/// Index space for the coalesced strategy: one extra cube layer in +x and +y
/// so that every group of consecutive flat cube indices decodes to
/// well-formed strips. The flat padded cube index equals the vertex index of
/// the cube's (0,0,0) corner, which is what the strip loads rely on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PaddedSpec {
    /// Cube counts of the padded space: (C0+1, C1+1, C2).
    pub cube_dims: [usize; 3],
    /// Physical divisions of the underlying grid.
    pub physical: [usize; 3],
}

impl PaddedSpec {
    pub fn of(spec: &GridSpec) -> Self {
        let c = spec.divisions();
        Self {
            cube_dims: [c[0] as usize + 1, c[1] as usize + 1, c[2] as usize],
            physical: [c[0] as usize, c[1] as usize, c[2] as usize],
        }
    }

    pub fn cube_count(&self) -> usize {
        self.cube_dims[0] * self.cube_dims[1] * self.cube_dims[2]
    }

    pub fn element_count(&self) -> usize {
        6 * self.cube_count()
    }

    #[inline(always)]
    pub fn cube_coords(&self, flat: usize) -> [usize; 3] {
        debug_assert!(flat < self.cube_count());
        let nx = self.cube_dims[0];
        let ny = self.cube_dims[1];
        [flat % nx, (flat / nx) % ny, flat / (nx * ny)]
    }

    /// A padded cube is non-physical iff it sits in the extra +x or +y layer.
    #[inline(always)]
    pub fn is_padding_cube(&self, flat: usize) -> bool {
        let cc = self.cube_coords(flat);
        cc[0] == self.physical[0] || cc[1] == self.physical[1]
    }

    pub fn is_padding_element(&self, e: usize) -> bool {
        self.is_padding_cube(e / 6)
    }

    pub fn padding_cube_count(&self) -> usize {
        (0..self.cube_count())
            .filter(|&c| self.is_padding_cube(c))
            .count()
    }

    /// Physical cube index for a non-padding padded cube.
    #[inline(always)]
    pub fn physical_cube(&self, flat: usize) -> usize {
        let cc = self.cube_coords(flat);
        debug_assert!(cc[0] < self.physical[0] && cc[1] < self.physical[1]);
        cc[0] + self.physical[0] * (cc[1] + self.physical[1] * cc[2])
    }

    /// The padded index space as a grid of its own (bounds grown by one
    /// spacing in +x and +y), for callers that want the mask and the extended
    /// extents together.
    pub fn padded_grid(&self, spec: &GridSpec) -> GridSpec {
        let h = spec.spacing();
        let mut max = spec.bounds_max();
        max[0] += h[0];
        max[1] += h[1];
        GridSpec::new(
            spec.bounds_min(),
            max,
            [
                self.cube_dims[0] as u32,
                self.cube_dims[1] as u32,
                self.cube_dims[2] as u32,
            ],
        )
        .expect("padded bounds grow strictly, cannot degenerate")
    }
}
