//! End-to-end checks of the harness: shipped configs parse to the built-in
//! presets, bad configs are rejected loudly, artifacts are reproducible
//! except for timing, and the binary exits nonzero on contract violations.

use std::path::{Path, PathBuf};
use std::process::Command;

use matfree::inverse::{CameraModel, ChainConfig};
use matfree::materials::{FieldKind, MaterialCoefficients};
use matfree::mesh::GridSpec;
use matfree_cli::config::{
    InverseSection, LoadSection, MaterialSection, OutputSection, RunConfig, SolverSection,
    TimeSection,
};
use matfree_cli::error::CliError;
use matfree_cli::{run, vtk};

fn workspace_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("matfree-cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// A seconds-free view of a records CSV: everything that must be identical
/// across reruns.
fn strip_timing(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|line| {
            let mut cells: Vec<&str> = line.split(',').collect();
            if cells.len() == 4 && cells[0] != "step" {
                cells.truncate(3);
            }
            cells.join(",")
        })
        .collect()
}

#[test]
fn shipped_laminate_config_matches_the_preset() {
    let parsed = RunConfig::from_path(&workspace_config("laminate.json")).unwrap();
    assert_eq!(parsed, RunConfig::laminate());
}

#[test]
fn shipped_corrosion_config_matches_the_preset() {
    let parsed = RunConfig::from_path(&workspace_config("corrosion.json")).unwrap();
    assert_eq!(parsed, RunConfig::corrosion());
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = scratch("unknown-key");
    let path = dir.join("bad.json");
    let mut text = std::fs::read_to_string(workspace_config("laminate.json")).unwrap();
    text = text.replacen("\"grid\"", "\"turbo\": true,\n  \"grid\"", 1);
    std::fs::write(&path, text).unwrap();
    let err = RunConfig::from_path(&path).unwrap_err();
    assert!(matches!(err, CliError::Config { .. }), "{err}");
    assert!(err.to_string().contains("unknown field"), "{err}");
}

#[test]
fn out_of_range_values_are_rejected() {
    let mut config = RunConfig::laminate();
    config.time.theta = 1.5;
    assert!(config.validate().is_err());

    let mut config = RunConfig::laminate();
    config.solver.partitions = 3;
    assert!(config.validate().is_err());

    let mut config = RunConfig::laminate();
    config.solver.partitions = 2;
    config.solver.precision = matfree_cli::config::Precision::F32;
    let err = config.validate().unwrap_err();
    assert!(err.to_string().contains("f64 only"), "{err}");

    let mut config = RunConfig::corrosion();
    config.inverse.as_mut().unwrap().chain.sigma_prop = 0.0;
    assert!(config.validate().is_err());
}

fn tiny_forward() -> RunConfig {
    RunConfig {
        grid: GridSpec::new([-6.0, -6.0, 0.0], [6.0, 6.0, 4.0], [6, 6, 4]).unwrap(),
        material: MaterialSection {
            coefficients: MaterialCoefficients::steel_and_corrosion(),
            field: FieldKind::TwoLayer { z_threshold: 2.0 },
        },
        solver: SolverSection::default(),
        time: TimeSection { dt: 0.01, theta: 0.5, n_steps: 5 },
        load: LoadSection::Uniform { flux: 1.0 },
        inverse: None,
        output: OutputSection::default(),
    }
}

fn tiny_inverse() -> RunConfig {
    let mut config = tiny_forward();
    config.material.field = FieldKind::Corrosion { depth: 1.5, half_height: 4.0 };
    config.time = TimeSection { dt: 0.05, theta: 0.5, n_steps: 3 };
    config.load = LoadSection::GaussianBeam { power: 2e11, sigma: 2.0, center: [0.0, 0.0] };
    config.inverse = Some(InverseSection {
        camera: CameraModel { pitch: 3.0, noise_sigma: 0.1, quantization: 0.1 },
        chain: ChainConfig { n_burn: 5, n_keep: 20, sigma_prop: 0.4, stall_limit: 200 },
        half_height: 4.0,
        true_depth: 1.5,
        seed: 42,
        prior: None,
    });
    config
}

#[test]
fn simulate_artifacts_are_reproducible_except_timing() {
    let config = tiny_forward();
    let out_a = config.output.resolve(Some(&scratch("sim-a")));
    let out_b = config.output.resolve(Some(&scratch("sim-b")));
    let sum_a = run::simulate_cmd(&config, &out_a).unwrap();
    let sum_b = run::simulate_cmd(&config, &out_b).unwrap();
    assert_eq!(sum_a.total_iterations, sum_b.total_iterations);

    let field_a = std::fs::read(&out_a.field_vtk).unwrap();
    let field_b = std::fs::read(&out_b.field_vtk).unwrap();
    assert_eq!(field_a, field_b, "field export must be bitwise stable");

    let rec_a = std::fs::read_to_string(&out_a.records_csv).unwrap();
    let rec_b = std::fs::read_to_string(&out_b.records_csv).unwrap();
    assert_eq!(strip_timing(&rec_a), strip_timing(&rec_b));

    let back = vtk::import_vtk(&out_a.field_vtk).unwrap();
    assert_eq!(back.len(), config.grid.vertex_count());
}

#[test]
fn partitioned_simulate_writes_exchange_stats() {
    let mut config = tiny_forward();
    config.solver.partitions = 2;
    let out = config.output.resolve(Some(&scratch("sim-split")));
    let summary = run::simulate_cmd(&config, &out).unwrap();
    assert_eq!(summary.partitions, 2);
    let bytes = summary.bytes_per_exchange.unwrap();
    assert_eq!(bytes, 2 * 7 * 7 * 8, "two vertex layers of f64 per exchange");
    let text = std::fs::read_to_string(&out.summary_json).unwrap();
    assert!(text.contains("bytes_per_exchange"), "{text}");
}

#[test]
fn inverse_chain_is_seed_reproducible() {
    let config = tiny_inverse();
    let out_a = config.output.resolve(Some(&scratch("inv-a")));
    let out_b = config.output.resolve(Some(&scratch("inv-b")));
    let sum_a = run::invert_cmd(&config, &out_a).unwrap();
    let sum_b = run::invert_cmd(&config, &out_b).unwrap();
    assert_eq!(sum_a.posterior_mean.to_bits(), sum_b.posterior_mean.to_bits());
    let chain_a = std::fs::read(&out_a.chain_csv).unwrap();
    let chain_b = std::fs::read(&out_b.chain_csv).unwrap();
    assert_eq!(chain_a, chain_b, "same seed, same chain");

    let mut reseeded = config.clone();
    reseeded.inverse.as_mut().unwrap().seed = 7;
    let out_c = reseeded.output.resolve(Some(&scratch("inv-c")));
    run::invert_cmd(&reseeded, &out_c).unwrap();
    let chain_c = std::fs::read(&out_c.chain_csv).unwrap();
    assert_ne!(chain_a, chain_c, "different seed, different chain");

    // All samples stay inside the prior (the plate).
    let text = std::fs::read_to_string(&out_a.chain_csv).unwrap();
    for line in text.lines().skip(1) {
        let depth: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=4.0).contains(&depth), "{line}");
    }
}

#[test]
fn invert_requires_an_inverse_section() {
    let config = tiny_forward();
    let out = config.output.resolve(Some(&scratch("inv-missing")));
    let err = run::invert_cmd(&config, &out).unwrap_err();
    assert!(err.to_string().contains("no inverse section"), "{err}");
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_matfree"))
}

#[test]
fn binary_help_lists_subcommands() {
    let out = binary().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["bench", "simulate", "invert", "verify"] {
        assert!(text.contains(sub), "missing {sub} in {text}");
    }
}

#[test]
fn binary_rejects_bad_configs_nonzero() {
    let dir = scratch("bin-bad-config");
    let path = dir.join("broken.json");
    std::fs::write(&path, "{ \"grid\": 5 }").unwrap();
    let out = binary().args(["simulate", "--config"]).arg(&path).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("broken.json"), "{err}");
}

#[test]
fn binary_rejects_unknown_strategy_nonzero() {
    let out = binary().args(["simulate", "--strategy", "warp"]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown strategy"), "{err}");
}

#[test]
fn binary_verify_passes_on_a_fresh_build() {
    let out = binary().arg("verify").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.matches("PASS").count(), 5, "{text}");
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn binary_simulate_runs_a_small_config_end_to_end() {
    let dir = scratch("bin-sim");
    let config_path = dir.join("tiny.json");
    let text = r#"{
      "grid": { "bounds": [[-6.0, -6.0, 0.0], [6.0, 6.0, 4.0]], "divisions": [6, 6, 4] },
      "material": {
        "coefficients": { "rhoC": [3724000.0, 1650000.0], "k": [490000000.0, 4000000.0] },
        "field": { "kind": "two_layer", "params": { "z_threshold": 2.0 } }
      },
      "time": { "dt": 0.01, "theta": 0.5, "n_steps": 5 }
    }"#;
    std::fs::write(&config_path, text).unwrap();
    let out = binary()
        .args(["simulate", "--config"])
        .arg(&config_path)
        .args(["--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("field.vtk").exists());
    assert!(dir.join("records.csv").exists());
    assert!(dir.join("summary.json").exists());
}
