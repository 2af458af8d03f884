//! Elemental 4x4 mass and stiffness matrices for linear tetrahedra.
//!
//! Matrices are stored unscaled: material coefficients and the theta*dt
//! factors are applied at operator-application time, so one geometric matrix
//! serves every material parameterization and both system sides.

use crate::error::ElementError;
use crate::mesh::{self, GridSpec, TETS};

pub type Mat4 = [[f64; 4]; 4];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElementMatrices {
    /// Pairwise basis integrals, unscaled by rho*C (mm^3).
    pub m: Mat4,
    /// Pairwise gradient integrals, unscaled by conductivity (mm).
    pub k: Mat4,
    /// |signed volume| (mm^3).
    pub volume: f64,
}

/// One ElementMatrices per tetrahedron position in the cube. The six Kuhn
/// tets are congruent only for cubic spacing, so all six are kept; a test
/// asserts they coincide when h is isotropic.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedGridMatrices {
    pub per_shape: [ElementMatrices; 6],
}

/// Exact linear-tetrahedron formulas: M_e[m][n] = V/20*(1+delta_mn) and
/// K_e[m][n] = V*(grad phi_m . grad phi_n), gradients constant from the
/// affine map. V = |det|/6.
pub fn local_matrices(v: [[f64; 3]; 4]) -> Result<ElementMatrices, ElementError> {
    let e1 = sub(v[1], v[0]);
    let e2 = sub(v[2], v[0]);
    let e3 = sub(v[3], v[0]);
    let det = det3(e1, e2, e3);
    let volume = det.abs() / 6.0;

    let scale = edge_scale(v);
    let threshold = 1e-12 * scale * scale * scale;
    if volume <= threshold {
        return Err(ElementError::Degenerate { volume, threshold });
    }

    // Rows of the inverse edge matrix are the gradients of phi_1..phi_3;
    // phi_0 closes the partition of unity.
    let inv_det = 1.0 / det;
    let g1 = scale3(cross(e2, e3), inv_det);
    let g2 = scale3(cross(e3, e1), inv_det);
    let g3 = scale3(cross(e1, e2), inv_det);
    let g0 = [-g1[0] - g2[0] - g3[0], -g1[1] - g2[1] - g3[1], -g1[2] - g2[2] - g3[2]];
    let grads = [g0, g1, g2, g3];

    let mut m = [[0.0; 4]; 4];
    let mut k = [[0.0; 4]; 4];
    for a in 0..4 {
        for b in 0..4 {
            m[a][b] = volume / 20.0 * if a == b { 2.0 } else { 1.0 };
            k[a][b] = volume * dot3(grads[a], grads[b]);
        }
    }
    Ok(ElementMatrices { m, k, volume })
}

/// Matrices for the six tetrahedron shapes of a grid cell with spacing
/// `spec.spacing()`.
pub fn fixed_grid_matrices(spec: &GridSpec) -> FixedGridMatrices {
    let h = spec.spacing();
    let shape = |t: usize| {
        let mut v = [[0.0; 3]; 4];
        for (i, &corner) in TETS[t].iter().enumerate() {
            let d = mesh::corner_offset(corner);
            v[i] = [d[0] as f64 * h[0], d[1] as f64 * h[1], d[2] as f64 * h[2]];
        }
        local_matrices(v).expect("grid cells with valid spacing cannot be degenerate")
    };
    FixedGridMatrices {
        per_shape: [shape(0), shape(1), shape(2), shape(3), shape(4), shape(5)],
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn det3(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    dot3(a, cross(b, c))
}

fn edge_scale(v: [[f64; 3]; 4]) -> f64 {
    let mut longest: f64 = 0.0;
    for a in 0..4 {
        for b in (a + 1)..4 {
            let d = sub(v[a], v[b]);
            longest = longest.max(dot3(d, d).sqrt());
        }
    }
    longest
}
