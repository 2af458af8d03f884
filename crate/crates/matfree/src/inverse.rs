//! Corrosion-depth inference from synthetic thermal-camera data.
//!
//! A laser heats the front face of a plate whose rear face hides a
//! parabolic corrosion wedge; an infrared camera images the front. This
//! module renders camera pixels from a solved field, corrupts them with
//! the camera's Gaussian-plus-rounding noise, scores proposals with the
//! exact interval likelihood of that noise model, and walks a reflected
//! random-walk Metropolis chain over the wedge depth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{InverseError, SolverError};
use crate::materials::{FieldKind, MaterialCoefficients, MaterialField};
use crate::mesh::GridSpec;
use crate::operator::{Mode, Strategy, SystemOperator};
use crate::solver::{simulate, PcgConfig, TransientProblem};

/// The measuring instrument: square pixels of `pitch` mm, additive Gaussian
/// noise, and output quantization (both 0.1 C for the reference camera).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraModel {
    pub pitch: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default = "default_noise")]
    pub quantization: f64,
}

fn default_noise() -> f64 {
    0.1
}

impl CameraModel {
    pub fn new(pitch: f64) -> Self {
        assert!(pitch > 0.0, "camera pitch must be positive");
        CameraModel { pitch, noise_sigma: 0.1, quantization: 0.1 }
    }
}

/// Pixel grid over the front face, x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub nx: usize,
    pub ny: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn pixel(&self, px: usize, py: usize) -> f64 {
        self.pixels[py * self.nx + px]
    }

    /// Center coordinates of a pixel on the front face of `spec`.
    pub fn pixel_center(&self, spec: &GridSpec, camera: &CameraModel, px: usize, py: usize) -> [f64; 2] {
        let lo = spec.bounds_min();
        [
            lo[0] + (px as f64 + 0.5) * camera.pitch,
            lo[1] + (py as f64 + 0.5) * camera.pitch,
        ]
    }

    pub fn hottest(&self) -> (usize, usize, f64) {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for py in 0..self.ny {
            for px in 0..self.nx {
                let v = self.pixel(px, py);
                if v > best.2 {
                    best = (px, py, v);
                }
            }
        }
        best
    }
}

fn pixel_count(pitch: f64, extent: f64, axis: char) -> Result<usize, InverseError> {
    let n = extent / pitch;
    let rounded = n.round();
    if rounded < 1.0 || (n - rounded).abs() > 1e-9 * n.max(1.0) {
        return Err(InverseError::PitchDoesNotTile { pitch, extent, axis });
    }
    Ok(rounded as usize)
}

/// Bilinear sample of the front-face (heated, z = min) vertex field.
fn sample_front(spec: &GridSpec, field: &[f64], x: f64, y: f64) -> f64 {
    let lo = spec.bounds_min();
    let h = spec.spacing();
    let nv = spec.nv_axis();
    let fx = ((x - lo[0]) / h[0]).clamp(0.0, (nv[0] - 1) as f64);
    let fy = ((y - lo[1]) / h[1]).clamp(0.0, (nv[1] - 1) as f64);
    let i = (fx as usize).min(nv[0] - 2);
    let j = (fy as usize).min(nv[1] - 2);
    let tx = fx - i as f64;
    let ty = fy - j as f64;
    let v = |ii: usize, jj: usize| field[spec.vertex_index(ii, jj, 0)];
    (1.0 - tx) * (1.0 - ty) * v(i, j)
        + tx * (1.0 - ty) * v(i + 1, j)
        + (1.0 - tx) * ty * v(i, j + 1)
        + tx * ty * v(i + 1, j + 1)
}

/// What the camera sees before noise: bilinear interpolation of the front
/// face onto a 4x4 sub-grid per pixel, averaged per pixel.
pub fn render_measurement(
    spec: &GridSpec,
    field: &[f64],
    camera: &CameraModel,
) -> Result<Image, InverseError> {
    assert_eq!(field.len(), spec.vertex_count(), "field must cover the grid");
    assert!(camera.pitch > 0.0, "camera pitch must be positive");
    let lo = spec.bounds_min();
    let hi = spec.bounds_max();
    let nx = pixel_count(camera.pitch, hi[0] - lo[0], 'x')?;
    let ny = pixel_count(camera.pitch, hi[1] - lo[1], 'y')?;

    const SUB: usize = 4;
    let mut pixels = Vec::with_capacity(nx * ny);
    for py in 0..ny {
        for px in 0..nx {
            let x0 = lo[0] + px as f64 * camera.pitch;
            let y0 = lo[1] + py as f64 * camera.pitch;
            let mut acc = 0.0;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let x = x0 + (sx as f64 + 0.5) / SUB as f64 * camera.pitch;
                    let y = y0 + (sy as f64 + 0.5) / SUB as f64 * camera.pitch;
                    acc += sample_front(spec, field, x, y);
                }
            }
            pixels.push(acc / (SUB * SUB) as f64);
        }
    }
    Ok(Image { nx, ny, pixels })
}

/// Applies the camera's noise model: i.i.d. Gaussian, then rounding to the
/// nearest quantization step. Fixed seeds give bit-identical data.
pub fn corrupt(image: &Image, camera: &CameraModel, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = image
        .pixels
        .iter()
        .map(|&v| {
            let noisy = if camera.noise_sigma > 0.0 {
                let normal = Normal::new(0.0, camera.noise_sigma).expect("positive sigma");
                v + normal.sample(&mut rng)
            } else {
                v
            };
            if camera.quantization > 0.0 {
                (noisy / camera.quantization).round() * camera.quantization
            } else {
                noisy
            }
        })
        .collect();
    Image { nx: image.nx, ny: image.ny, pixels }
}

/// Log probability that a quantized noisy reading `d` arose from true value
/// `mu`: the Gaussian mass of the rounding interval [d - q/2, d + q/2],
/// evaluated through complementary error functions so far tails keep
/// precision instead of cancelling.
fn log_interval_prob(residual: f64, sigma: f64, half_q: f64) -> f64 {
    let hi = (residual + half_q) / sigma;
    let lo = (residual - half_q) / sigma;
    let c = std::f64::consts::FRAC_1_SQRT_2;
    let p = if lo > 0.0 {
        0.5 * (libm::erfc(lo * c) - libm::erfc(hi * c))
    } else if hi < 0.0 {
        0.5 * (libm::erfc(-hi * c) - libm::erfc(-lo * c))
    } else {
        0.5 * (libm::erf(hi * c) - libm::erf(lo * c))
    };
    p.max(f64::MIN_POSITIVE).ln()
}

/// Sum of per-pixel interval log-likelihoods of the data given a rendered
/// (noise-free) image.
pub fn log_likelihood(rendered: &Image, data: &Image, camera: &CameraModel) -> f64 {
    assert_eq!(rendered.pixels.len(), data.pixels.len(), "image shapes must match");
    assert!(camera.noise_sigma > 0.0, "interval likelihood needs a positive sigma");
    let half_q = camera.quantization / 2.0;
    rendered
        .pixels
        .iter()
        .zip(&data.pixels)
        .map(|(&mu, &d)| log_interval_prob(d - mu, camera.noise_sigma, half_q))
        .sum()
}

/// Radial Gaussian surface flux centered on the front face:
/// f(x, y) = power / (2 pi sigma_b^2) * exp(-r^2 / (2 sigma_b^2)), with
/// sigma_b the beam width parameter.
pub fn gaussian_beam(power: f64, sigma_b: f64, center: [f64; 2]) -> impl Fn([f64; 3]) -> f64 {
    move |p| {
        let dx = p[0] - center[0];
        let dy = p[1] - center[1];
        let s2 = sigma_b * sigma_b;
        power / (2.0 * std::f64::consts::PI * s2) * (-(dx * dx + dy * dy) / (2.0 * s2)).exp()
    }
}

/// Everything the likelihood needs to turn a proposed wedge depth into the
/// front-face image at the final time: grid, materials, beam load, time
/// discretization, and solver settings. The load vector is prebuilt once.
pub struct ForwardModel {
    pub spec: GridSpec,
    pub coefficients: MaterialCoefficients,
    pub half_height: f64,
    pub theta_scheme: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub t_ambient: f64,
    pub strategy: Strategy,
    pub cfg: PcgConfig,
    pub load: Vec<f64>,
}

impl ForwardModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        spec: GridSpec,
        coefficients: MaterialCoefficients,
        half_height: f64,
        dt: f64,
        n_steps: usize,
        strategy: Strategy,
        cfg: PcgConfig,
        flux: impl Fn([f64; 3]) -> f64,
    ) -> Self {
        let load = crate::solver::boundary_load(&spec, flux, dt);
        ForwardModel {
            spec,
            coefficients,
            half_height,
            theta_scheme: 0.5,
            dt,
            n_steps,
            t_ambient: 0.0,
            strategy,
            cfg,
            load,
        }
    }

    /// Plate thickness, the upper end of the prior over wedge depth.
    pub fn thickness(&self) -> f64 {
        self.spec.bounds_max()[2] - self.spec.bounds_min()[2]
    }

    /// Runs the transient problem for one wedge depth and returns the final
    /// field over all vertices.
    pub fn solve(&self, depth: f64) -> Result<Vec<f64>, SolverError> {
        let field = MaterialField::new(
            FieldKind::Corrosion { depth, half_height: self.half_height },
            self.coefficients,
        );
        let op_a = SystemOperator::<f64>::new(
            &self.spec,
            &field,
            self.theta_scheme,
            self.dt,
            Mode::A,
            self.strategy,
        );
        let op_l = SystemOperator::<f64>::new(
            &self.spec,
            &field,
            self.theta_scheme,
            self.dt,
            Mode::L,
            self.strategy,
        );
        let problem = TransientProblem {
            op_a,
            op_l,
            f_dt: self.load.clone(),
            t_ambient: self.t_ambient,
            n_steps: self.n_steps,
            cfg: self.cfg,
        };
        Ok(simulate(&problem, false)?.field)
    }

    /// Renders the final front face for one depth; the likelihood's mu.
    pub fn render(&self, depth: f64, camera: &CameraModel) -> Result<Image, InverseError> {
        let field = self
            .solve(depth)
            .map_err(|source| InverseError::Forward { proposal: depth, source })?;
        render_measurement(&self.spec, &field, camera)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChainConfig {
    pub n_burn: usize,
    pub n_keep: usize,
    pub sigma_prop: f64,
    #[serde(default = "default_stall")]
    pub stall_limit: usize,
}

fn default_stall() -> usize {
    200
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig { n_burn: 200, n_keep: 2500, sigma_prop: 0.1, stall_limit: 200 }
    }
}

/// A finished sampling run: the kept portion of the walk plus bookkeeping
/// over the whole run (burn-in included).
#[derive(Clone, Debug)]
pub struct Chain {
    pub samples: Vec<f64>,
    pub log_likelihoods: Vec<f64>,
    /// Whether each kept iteration's proposal was taken.
    pub accepted: Vec<bool>,
    pub accept_count: usize,
    pub proposals: usize,
    /// Proposals whose likelihood evaluation failed (rejected, counted).
    pub failed_evals: usize,
    /// First iteration at which `stall_limit` consecutive rejections had
    /// accumulated, if that ever happened.
    pub stalled_at: Option<usize>,
    pub config: ChainConfig,
}

impl Chain {
    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    pub fn std(&self) -> f64 {
        let n = self.samples.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.mean();
        let ss = self.samples.iter().map(|&s| (s - mean) * (s - mean)).sum::<f64>();
        (ss / (n - 1) as f64).sqrt()
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.accept_count as f64 / self.proposals as f64
    }
}

/// Folds a point back into [lo, hi] by mirror reflection, preserving the
/// proposal's symmetry.
fn reflect_into(mut t: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(hi > lo);
    loop {
        if t < lo {
            t = 2.0 * lo - t;
        } else if t > hi {
            t = 2.0 * hi - t;
        } else {
            return t;
        }
    }
}

/// Random-walk Metropolis over one parameter with a uniform prior on
/// [lo, hi]: start at the midpoint, propose Normal steps reflected at the
/// bounds, accept with probability min(1, likelihood ratio). A failed
/// likelihood evaluation rejects that proposal and the chain walks on; only
/// a failure at the starting point is fatal. One Normal and one Uniform
/// draw per iteration, so fixed seeds give bit-identical chains.
pub fn metropolis_hastings<F>(
    mut log_lik: F,
    prior: (f64, f64),
    cfg: &ChainConfig,
    seed: u64,
) -> Result<Chain, InverseError>
where
    F: FnMut(f64) -> Result<f64, InverseError>,
{
    let (lo, hi) = prior;
    if !(hi > lo) {
        return Err(InverseError::EmptyPrior { lo, hi });
    }
    if !(cfg.sigma_prop > 0.0) {
        return Err(InverseError::BadProposal(cfg.sigma_prop));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = Normal::new(0.0, cfg.sigma_prop).expect("positive sigma");

    let mut theta = 0.5 * (lo + hi);
    let mut ll = log_lik(theta)?;
    let mut chain = Chain {
        samples: Vec::with_capacity(cfg.n_keep),
        log_likelihoods: Vec::with_capacity(cfg.n_keep),
        accepted: Vec::with_capacity(cfg.n_keep),
        accept_count: 0,
        proposals: 0,
        failed_evals: 0,
        stalled_at: None,
        config: *cfg,
    };
    let mut dry_spell = 0usize;

    for it in 0..cfg.n_burn + cfg.n_keep {
        let proposal = reflect_into(theta + step.sample(&mut rng), lo, hi);
        let u: f64 = rng.gen();
        chain.proposals += 1;
        let mut took = false;
        match log_lik(proposal) {
            Ok(proposal_ll) => {
                if u.ln() < proposal_ll - ll {
                    theta = proposal;
                    ll = proposal_ll;
                    took = true;
                }
            }
            Err(_) => chain.failed_evals += 1,
        }
        if took {
            chain.accept_count += 1;
            dry_spell = 0;
        } else {
            dry_spell += 1;
            if dry_spell == cfg.stall_limit && chain.stalled_at.is_none() {
                chain.stalled_at = Some(it);
            }
        }
        if it >= cfg.n_burn {
            chain.samples.push(theta);
            chain.log_likelihoods.push(ll);
            chain.accepted.push(took);
        }
    }
    Ok(chain)
}
