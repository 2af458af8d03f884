//! Drivers behind `simulate` and `invert`: a validated config goes in,
//! artifacts (VTK field, CSV records, JSON summary) come out.

use std::fs;
use std::path::Path;

use serde::Serialize;

use matfree::inverse::{
    corrupt, log_likelihood, metropolis_hastings, render_measurement, Chain, ForwardModel,
};
use matfree::materials::MaterialField;
use matfree::operator::{Mode, SystemOperator};
use matfree::partition::{simulate_partitioned, PartitionedSystem};
use matfree::scalar::Scalar;
use matfree::solver::{boundary_load, simulate, StepRecord, TransientProblem};

use crate::config::{OutPaths, Precision, RunConfig};
use crate::error::CliError;
use crate::vtk::export_vtk;

#[derive(Debug, Serialize)]
pub struct SimulateSummary {
    pub dof: usize,
    pub strategy: String,
    pub precision: String,
    pub partitions: usize,
    pub n_steps: usize,
    pub total_iterations: usize,
    pub total_seconds: f64,
    /// Bytes moved per halo exchange when partitioned.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bytes_per_exchange: Option<usize>,
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|source| CliError::Write { path: path.into(), source })?;
        }
    }
    fs::write(path, text).map_err(|source| CliError::Write { path: path.into(), source })
}

fn write_records_csv(path: &Path, records: &[StepRecord]) -> Result<(), CliError> {
    let mut text = String::from("step,iterations,delta_final,seconds\n");
    for r in records {
        text.push_str(&format!(
            "{},{},{:.9e},{:.9e}\n",
            r.step, r.iterations, r.delta_final, r.seconds
        ));
    }
    write_text(path, &text)
}

fn write_summary_json(path: &Path, summary: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(summary).expect("summary serializes");
    text.push('\n');
    write_text(path, &text)
}

fn forward_mono<S: Scalar>(config: &RunConfig) -> Result<(Vec<f64>, Vec<StepRecord>), CliError> {
    let spec = config.grid;
    let field = MaterialField::new(config.material.field, config.material.coefficients);
    let t = config.time;
    let strategy = config.solver.strategy;
    let op_a = SystemOperator::<S>::new(&spec, &field, t.theta, t.dt, Mode::A, strategy);
    let op_l = SystemOperator::<S>::new(&spec, &field, t.theta, t.dt, Mode::L, strategy);
    let flux = config.load.flux();
    let problem = TransientProblem {
        op_a,
        op_l,
        f_dt: boundary_load(&spec, &flux, t.dt),
        t_ambient: 0.0,
        n_steps: t.n_steps,
        cfg: config.pcg(spec.vertex_count()),
    };
    let sim = simulate(&problem, false)?;
    Ok((sim.field.iter().map(|&v| v.to_f64()).collect(), sim.records))
}

fn forward_split(
    config: &RunConfig,
) -> Result<(Vec<f64>, Vec<StepRecord>, usize), CliError> {
    let spec = config.grid;
    let field = MaterialField::new(config.material.field, config.material.coefficients);
    let t = config.time;
    let strategy = config.solver.strategy;
    let op_a = SystemOperator::<f64>::new(&spec, &field, t.theta, t.dt, Mode::A, strategy);
    let op_l = SystemOperator::<f64>::new(&spec, &field, t.theta, t.dt, Mode::L, strategy);
    let sys = PartitionedSystem::new(&spec, &field, t.theta, t.dt, strategy);
    let flux = config.load.flux();
    let problem = TransientProblem {
        op_a,
        op_l,
        f_dt: boundary_load(&spec, &flux, t.dt),
        t_ambient: 0.0,
        n_steps: t.n_steps,
        cfg: config.pcg(spec.vertex_count()),
    };
    let sim = simulate_partitioned(&problem, &sys, config.solver.split_fraction, false)?;
    let bytes = sim.per_step.first().map_or(0, |s| s.bytes_per_exchange());
    Ok((sim.result.field, sim.result.records, bytes))
}

/// Runs one transient and writes field.vtk, records.csv, and summary.json.
pub fn simulate_cmd(config: &RunConfig, out: &OutPaths) -> Result<SimulateSummary, CliError> {
    let (field, records, bytes_per_exchange) =
        match (config.solver.partitions, config.solver.precision) {
            (1, Precision::F64) => {
                let (f, r) = forward_mono::<f64>(config)?;
                (f, r, None)
            }
            (1, Precision::F32) => {
                let (f, r) = forward_mono::<f32>(config)?;
                (f, r, None)
            }
            _ => {
                let (f, r, bytes) = forward_split(config)?;
                (f, r, Some(bytes))
            }
        };
    let summary = SimulateSummary {
        dof: config.grid.vertex_count(),
        strategy: config.solver.strategy.name().into(),
        precision: config.solver.precision.name().into(),
        partitions: config.solver.partitions,
        n_steps: config.time.n_steps,
        total_iterations: records.iter().map(|r| r.iterations).sum(),
        total_seconds: records.iter().map(|r| r.seconds).sum(),
        bytes_per_exchange,
    };
    export_vtk(&out.field_vtk, &config.grid, &field, "temperature")?;
    write_records_csv(&out.records_csv, &records)?;
    write_summary_json(&out.summary_json, &summary)?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct InvertSummary {
    pub true_depth: f64,
    pub posterior_mean: f64,
    pub posterior_std: f64,
    pub acceptance_rate: f64,
    pub n_burn: usize,
    pub n_keep: usize,
    pub failed_evals: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stalled_at: Option<usize>,
    pub prior: [f64; 2],
    pub seed: u64,
}

fn write_chain_csv(path: &Path, chain: &Chain) -> Result<(), CliError> {
    let mut text = String::from("iteration,depth,log_likelihood,accepted\n");
    for (i, ((&s, &ll), &took)) in
        chain.samples.iter().zip(&chain.log_likelihoods).zip(&chain.accepted).enumerate()
    {
        text.push_str(&format!("{},{s},{ll},{took}\n", i + chain.config.n_burn));
    }
    write_text(path, &text)
}

/// Synthesizes camera data at the configured true depth, walks the chain,
/// and writes chain.csv plus summary.json.
pub fn invert_cmd(config: &RunConfig, out: &OutPaths) -> Result<InvertSummary, CliError> {
    let inv = config
        .inverse
        .as_ref()
        .ok_or_else(|| CliError::Invalid("config has no inverse section".into()))?;
    let spec = config.grid;
    let flux = config.load.flux();
    let model = ForwardModel::new(
        spec,
        config.material.coefficients,
        inv.half_height,
        config.time.dt,
        config.time.n_steps,
        config.solver.strategy,
        config.pcg(spec.vertex_count()),
        &flux,
    );
    let camera = inv.camera;
    let truth = model
        .solve(inv.true_depth)
        .map_err(|source| CliError::Inverse(matfree::InverseError::Forward {
            proposal: inv.true_depth,
            source,
        }))?;
    let data = corrupt(&render_measurement(&spec, &truth, &camera)?, &camera, inv.seed);
    let prior = inv.prior.unwrap_or([0.0, config.thickness()]);
    let chain = metropolis_hastings(
        |depth| {
            let rendered = model.render(depth, &camera)?;
            Ok(log_likelihood(&rendered, &data, &camera))
        },
        (prior[0], prior[1]),
        &inv.chain,
        inv.seed.wrapping_add(1),
    )?;
    if let Some(at) = chain.stalled_at {
        eprintln!(
            "warning: {} consecutive rejections by iteration {at} \
             (sigma_prop {} may be too wide; acceptance {:.3})",
            inv.chain.stall_limit, inv.chain.sigma_prop, chain.acceptance_rate()
        );
    }
    let summary = InvertSummary {
        true_depth: inv.true_depth,
        posterior_mean: chain.mean(),
        posterior_std: chain.std(),
        acceptance_rate: chain.acceptance_rate(),
        n_burn: inv.chain.n_burn,
        n_keep: inv.chain.n_keep,
        failed_evals: chain.failed_evals,
        stalled_at: chain.stalled_at,
        prior,
        seed: inv.seed,
    };
    write_chain_csv(&out.chain_csv, &chain)?;
    write_summary_json(&out.summary_json, &summary)?;
    Ok(summary)
}
