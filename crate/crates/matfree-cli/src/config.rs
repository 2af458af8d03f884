//! Strict JSON run configuration: grid, materials, solver, time stepping,
//! load, optional inverse block, and artifact paths. Unknown keys are
//! rejected, values are validated before any compute starts, and two
//! checked-in presets reproduce the reference experiments at desk scale.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use matfree::inverse::{CameraModel, ChainConfig};
use matfree::materials::{FieldKind, MaterialCoefficients};
use matfree::mesh::GridSpec;
use matfree::operator::Strategy;
use matfree::solver::PcgConfig;

use crate::error::CliError;

/// Numeric width of the forward kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    }
}

/// Flag parser for --strategy.
pub fn parse_strategy(s: &str) -> Result<Strategy, String> {
    match s {
        "flexible" => Ok(Strategy::Flexible),
        "singlepass" => Ok(Strategy::SinglePass),
        "coalesced" => Ok(Strategy::Coalesced),
        other => Err(format!("unknown strategy {other:?} (flexible | singlepass | coalesced)")),
    }
}

/// Flag parser for --precision.
pub fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f64" => Ok(Precision::F64),
        "f32" => Ok(Precision::F32),
        other => Err(format!("unknown precision {other:?} (f64 | f32)")),
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub material: MaterialSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub time: TimeSection,
    #[serde(default)]
    pub load: LoadSection,
    #[serde(default)]
    pub inverse: Option<InverseSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSection {
    pub coefficients: MaterialCoefficients,
    pub field: FieldKind,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub strategy: Strategy,
    pub tol: f64,
    pub i_max: Option<usize>,
    pub recompute_period: usize,
    pub precision: Precision,
    pub partitions: usize,
    pub split_fraction: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            strategy: Strategy::Coalesced,
            tol: 1e-6,
            i_max: None,
            recompute_period: 50,
            precision: Precision::F64,
            partitions: 1,
            split_fraction: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeSection {
    pub dt: f64,
    pub theta: f64,
    pub n_steps: usize,
}

impl Default for TimeSection {
    fn default() -> Self {
        TimeSection { dt: 0.01, theta: 0.5, n_steps: 50 }
    }
}

/// Heat flux applied to the front (z = min) face.
#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum LoadSection {
    Uniform {
        flux: f64,
    },
    GaussianBeam {
        power: f64,
        sigma: f64,
        #[serde(default)]
        center: [f64; 2],
    },
}

impl Default for LoadSection {
    fn default() -> Self {
        LoadSection::Uniform { flux: 1.0 }
    }
}

impl LoadSection {
    pub fn flux(&self) -> Box<dyn Fn([f64; 3]) -> f64> {
        match *self {
            LoadSection::Uniform { flux } => Box::new(move |_| flux),
            LoadSection::GaussianBeam { power, sigma, center } => {
                Box::new(matfree::inverse::gaussian_beam(power, sigma, center))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverseSection {
    pub camera: CameraModel,
    pub chain: ChainConfig,
    /// Half-height of the corrosion wedge footprint (mm).
    pub half_height: f64,
    /// Depth used to synthesize the measured data (mm).
    pub true_depth: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Uniform prior over depth; defaults to the full plate thickness.
    #[serde(default)]
    pub prior: Option<[f64; 2]>,
}

fn default_seed() -> u64 {
    42
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub field_vtk: Option<PathBuf>,
    pub records_csv: Option<PathBuf>,
    pub bench_csv: Option<PathBuf>,
    pub phase_csv: Option<PathBuf>,
    pub chain_csv: Option<PathBuf>,
    pub summary_json: Option<PathBuf>,
}

/// Artifact paths after resolving the output section against --out. The
/// flag replaces the directory wholesale; per-file config paths apply only
/// when no flag is given.
#[derive(Clone, Debug)]
pub struct OutPaths {
    pub dir: PathBuf,
    pub field_vtk: PathBuf,
    pub records_csv: PathBuf,
    pub bench_csv: PathBuf,
    pub phase_csv: PathBuf,
    pub chain_csv: PathBuf,
    pub summary_json: PathBuf,
}

impl OutputSection {
    pub fn resolve(&self, flag: Option<&Path>) -> OutPaths {
        let dir = flag
            .map(Path::to_path_buf)
            .or_else(|| self.dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        let pick = |explicit: &Option<PathBuf>, name: &str| {
            if flag.is_none() {
                if let Some(p) = explicit {
                    return p.clone();
                }
            }
            dir.join(name)
        };
        OutPaths {
            field_vtk: pick(&self.field_vtk, "field.vtk"),
            records_csv: pick(&self.records_csv, "records.csv"),
            bench_csv: pick(&self.bench_csv, "bench.csv"),
            phase_csv: pick(&self.phase_csv, "phases.csv"),
            chain_csv: pick(&self.chain_csv, "chain.csv"),
            summary_json: pick(&self.summary_json, "summary.json"),
            dir,
        }
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|source| CliError::Read { path: path.into(), source })?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|source| CliError::Config { path: path.into(), source })?;
        config.validate()?;
        Ok(config)
    }

    /// The heterogeneous benchmark plate: a 30 mm square slab, 10 mm thick,
    /// altered above mid-depth, heated uniformly for 50 steps of 0.01 s.
    pub fn laminate() -> Self {
        RunConfig {
            grid: GridSpec::new([-15.0, -15.0, 0.0], [15.0, 15.0, 10.0], [30, 30, 10]).unwrap(),
            material: MaterialSection {
                coefficients: MaterialCoefficients::steel_and_corrosion(),
                field: FieldKind::TwoLayer { z_threshold: 5.0 },
            },
            solver: SolverSection::default(),
            time: TimeSection::default(),
            load: LoadSection::Uniform { flux: 1.0 },
            inverse: None,
            output: OutputSection::default(),
        }
    }

    /// The corrosion-recovery experiment at desk scale: a 12.7 mm plate
    /// with a hidden rear wedge, beam-heated and imaged on the front face.
    pub fn corrosion() -> Self {
        RunConfig {
            grid: GridSpec::new([-15.0, -15.0, 0.0], [15.0, 15.0, 12.7], [30, 30, 10]).unwrap(),
            material: MaterialSection {
                coefficients: MaterialCoefficients::steel_and_corrosion(),
                field: FieldKind::Corrosion { depth: 3.175, half_height: 10.0 },
            },
            solver: SolverSection::default(),
            time: TimeSection { dt: 0.05, theta: 0.5, n_steps: 20 },
            load: LoadSection::GaussianBeam { power: 2e11, sigma: 2.0, center: [0.0, 0.0] },
            inverse: Some(InverseSection {
                camera: CameraModel { pitch: 3.0, noise_sigma: 0.1, quantization: 0.1 },
                chain: ChainConfig { n_burn: 50, n_keep: 500, sigma_prop: 0.3, stall_limit: 200 },
                half_height: 10.0,
                true_depth: 3.175,
                seed: 42,
                prior: None,
            }),
            output: OutputSection::default(),
        }
    }

    /// Solver settings for an n-unknown system.
    pub fn pcg(&self, n: usize) -> PcgConfig {
        let mut cfg = PcgConfig::for_n(n).with_tol(self.solver.tol);
        if let Some(i_max) = self.solver.i_max {
            cfg.i_max = i_max;
        }
        cfg.recompute_period = self.solver.recompute_period;
        cfg
    }

    /// Plate thickness along z (mm).
    pub fn thickness(&self) -> f64 {
        self.grid.bounds_max()[2] - self.grid.bounds_min()[2]
    }

    /// Command-line flags override their config counterparts.
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        partitions: Option<usize>,
        split_fraction: Option<f64>,
        strategy: Option<Strategy>,
        precision: Option<Precision>,
    ) {
        if let Some(p) = partitions {
            self.solver.partitions = p;
        }
        if let Some(m) = split_fraction {
            self.solver.split_fraction = m;
        }
        if let Some(s) = strategy {
            self.solver.strategy = s;
        }
        if let Some(p) = precision {
            self.solver.precision = p;
        }
        if let (Some(seed), Some(inverse)) = (seed, self.inverse.as_mut()) {
            inverse.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Invalid(msg));
        let t = &self.time;
        if !(t.dt > 0.0 && t.dt.is_finite()) {
            return bad(format!("time.dt must be positive and finite, got {}", t.dt));
        }
        if !(0.0..=1.0).contains(&t.theta) {
            return bad(format!("time.theta must lie in [0, 1], got {}", t.theta));
        }
        if t.n_steps == 0 {
            return bad("time.n_steps must be at least 1".into());
        }
        let s = &self.solver;
        if !(s.tol > 0.0 && s.tol < 1.0) {
            return bad(format!("solver.tol must lie in (0, 1), got {}", s.tol));
        }
        if s.i_max == Some(0) {
            return bad("solver.i_max must be at least 1".into());
        }
        if s.recompute_period == 0 {
            return bad("solver.recompute_period must be at least 1".into());
        }
        if !(s.partitions == 1 || s.partitions == 2) {
            return bad(format!("solver.partitions must be 1 or 2, got {}", s.partitions));
        }
        if s.partitions == 2 && !(s.split_fraction > 0.0 && s.split_fraction < 1.0) {
            return bad(format!(
                "solver.split_fraction must lie in (0, 1), got {}",
                s.split_fraction
            ));
        }
        if s.partitions == 2 && s.precision == Precision::F32 {
            return bad("the partitioned solver runs in f64 only".into());
        }
        if let LoadSection::GaussianBeam { power, sigma, .. } = self.load {
            if !power.is_finite() || !(sigma > 0.0) {
                return bad(format!(
                    "gaussian_beam needs finite power and positive sigma, got {power}, {sigma}"
                ));
            }
        }
        if let Some(inv) = &self.inverse {
            if s.precision == Precision::F32 {
                return bad("the inverse pipeline runs in f64 only".into());
            }
            let thickness = self.thickness();
            if !(0.0..=thickness).contains(&inv.true_depth) {
                return bad(format!(
                    "inverse.true_depth must lie within the plate [0, {thickness}], got {}",
                    inv.true_depth
                ));
            }
            if !(inv.half_height > 0.0) {
                return bad(format!("inverse.half_height must be positive, got {}", inv.half_height));
            }
            if !(inv.camera.pitch > 0.0) {
                return bad(format!("camera.pitch must be positive, got {}", inv.camera.pitch));
            }
            if !(inv.camera.noise_sigma > 0.0) {
                return bad(format!(
                    "camera.noise_sigma must be positive for the interval likelihood, got {}",
                    inv.camera.noise_sigma
                ));
            }
            if inv.camera.quantization < 0.0 {
                return bad(format!(
                    "camera.quantization cannot be negative, got {}",
                    inv.camera.quantization
                ));
            }
            if !(inv.chain.sigma_prop > 0.0) {
                return bad(format!(
                    "chain.sigma_prop must be positive, got {}",
                    inv.chain.sigma_prop
                ));
            }
            if let Some([lo, hi]) = inv.prior {
                if !(lo < hi) || lo < 0.0 || hi > thickness {
                    return bad(format!(
                        "inverse.prior must satisfy 0 <= lo < hi <= {thickness}, got [{lo}, {hi}]"
                    ));
                }
            }
        }
        Ok(())
    }
}
