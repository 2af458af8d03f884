//! Element-constant material parameterizations: map every element to a
//! (rho*C, k) pair given a named spatial field, including the parabolic
//! corrosion wedge driven by the inverse problem.

use serde::{Deserialize, Serialize};

use crate::mesh::GridSpec;

/// Two-material coefficient table: index 0 is the base material, index 1 the
/// altered one (the upper laminate layer, or the corrosion products).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCoefficients")]
pub struct MaterialCoefficients {
    /// Volumetric heat capacity rho*C per material (g/(mm*C*s^2)).
    #[serde(rename = "rhoC")]
    pub rho_c: [f64; 2],
    /// Thermal conductivity per material (g*mm/(C*s^3)).
    pub k: [f64; 2],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCoefficients {
    #[serde(rename = "rhoC")]
    rho_c: [f64; 2],
    k: [f64; 2],
}

impl TryFrom<RawCoefficients> for MaterialCoefficients {
    type Error = String;

    fn try_from(raw: RawCoefficients) -> Result<Self, String> {
        let c = MaterialCoefficients {
            rho_c: raw.rho_c,
            k: raw.k,
        };
        if c.rho_c.iter().chain(c.k.iter()).all(|&v| v > 0.0) {
            Ok(c)
        } else {
            Err(format!("material coefficients must be positive: {c:?}"))
        }
    }
}

impl MaterialCoefficients {
    pub fn new(rho_c: [f64; 2], k: [f64; 2]) -> Self {
        assert!(
            rho_c.iter().chain(k.iter()).all(|&v| v > 0.0),
            "material coefficients must be positive"
        );
        Self { rho_c, k }
    }

    /// Mild carbon steel vs. its solid corrosion products.
    pub fn steel_and_corrosion() -> Self {
        Self::new([3.724e6, 1.65e6], [4.9e8, 4.0e6])
    }
}

/// Spatial layout of the two materials.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum FieldKind {
    /// Base material for z <= z_threshold, altered above.
    TwoLayer { z_threshold: f64 },
    /// Smooth transition from base to altered across [center-w/2, center+w/2].
    SmoothedLayer { z_center: f64, width: f64 },
    /// x^2 - 0.2 y^2 + 10 z, min-max normalized over the domain box.
    Functional,
    /// Parabolic corrosion wedge of apex depth `depth` eating in from the
    /// rear face, spanning |y| <= half_height, constant along x.
    Corrosion { depth: f64, half_height: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialField {
    pub kind: FieldKind,
    pub coefficients: MaterialCoefficients,
}

/// True iff the point at `position` (plate front face at z = 0) lies inside
/// the corrosion wedge: depth-from-rear-face d = thickness - z satisfies
/// d <= theta*(1 - (y/half_height)^2) with |y| <= half_height. theta = 0
/// means pristine everywhere.
pub fn corrosion_indicator(
    theta: f64,
    position: [f64; 3],
    thickness: f64,
    half_height: f64,
) -> bool {
    debug_assert!((0.0..=thickness).contains(&theta));
    if theta <= 0.0 {
        return false;
    }
    let y = position[1];
    if y.abs() > half_height {
        return false;
    }
    let d = thickness - position[2];
    let ratio = y / half_height;
    d <= theta * (1.0 - ratio * ratio)
}

impl MaterialField {
    pub fn new(kind: FieldKind, coefficients: MaterialCoefficients) -> Self {
        Self { kind, coefficients }
    }

    /// Altered-material fraction at a single vertex position: an indicator
    /// for the sharp kinds, a ramp value for the smooth ones.
    pub fn vertex_fraction(&self, spec: &GridSpec, position: [f64; 3]) -> f64 {
        match self.kind {
            FieldKind::TwoLayer { z_threshold } => {
                if position[2] > z_threshold {
                    1.0
                } else {
                    0.0
                }
            }
            FieldKind::SmoothedLayer { z_center, width } => {
                let t = ((position[2] - (z_center - width / 2.0)) / width).clamp(0.0, 1.0);
                t * t * (3.0 - 2.0 * t)
            }
            FieldKind::Functional => {
                let g = functional_value(position);
                let (lo, hi) = functional_range(spec);
                ((g - lo) / (hi - lo)).clamp(0.0, 1.0)
            }
            FieldKind::Corrosion { depth, half_height } => {
                let lo = spec.bounds_min();
                let thickness = spec.bounds_max()[2] - lo[2];
                let local = [position[0], position[1], position[2] - lo[2]];
                if corrosion_indicator(depth, local, thickness, half_height) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Element-constant coefficients: average the altered fraction over the
    /// element's four vertices, then blend the two materials linearly.
    #[inline]
    pub fn element_coefficients(&self, spec: &GridSpec, e: usize) -> (f64, f64) {
        let frac = self.element_fraction(spec, e);
        self.blend(frac)
    }

    pub fn element_fraction(&self, spec: &GridSpec, e: usize) -> f64 {
        let pos = spec.element_positions(e);
        let mut frac = 0.0;
        for p in pos {
            frac += self.vertex_fraction(spec, p);
        }
        frac / 4.0
    }

    #[inline(always)]
    pub fn blend(&self, frac: f64) -> (f64, f64) {
        let c = &self.coefficients;
        (
            (1.0 - frac) * c.rho_c[0] + frac * c.rho_c[1],
            (1.0 - frac) * c.k[0] + frac * c.k[1],
        )
    }
}

fn functional_value(p: [f64; 3]) -> f64 {
    p[0] * p[0] - 0.2 * p[1] * p[1] + 10.0 * p[2]
}

/// Analytic min/max of x^2 - 0.2 y^2 + 10 z over the domain box: the three
/// terms are separable, so extremes combine per axis.
fn functional_range(spec: &GridSpec) -> (f64, f64) {
    let lo = spec.bounds_min();
    let hi = spec.bounds_max();
    let sq_min = |a: f64, b: f64| {
        if a <= 0.0 && 0.0 <= b {
            0.0
        } else {
            (a * a).min(b * b)
        }
    };
    let sq_max = |a: f64, b: f64| (a * a).max(b * b);
    let min = sq_min(lo[0], hi[0]) - 0.2 * sq_max(lo[1], hi[1]) + 10.0 * lo[2];
    let max = sq_max(lo[0], hi[0]) - 0.2 * sq_min(lo[1], hi[1]) + 10.0 * hi[2];
    (min, max)
}
