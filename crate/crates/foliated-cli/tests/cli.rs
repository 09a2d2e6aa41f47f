//! End-to-end runs through the library entry point: reproducibility,
//! manifest bookkeeping, flag overrides, and failure handling.

use std::fs;
use std::path::Path;

use foliated_cli::manifest::verify_manifest;
use foliated_cli::{run, CliOptions, Subcommand};

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.ini");
    fs::write(
        &path,
        "[experiment]\n\
         n_paths = 4\n\
         eps_grid = 0.3, 0.15, 0.075\n\
         seed = 11\n\
         [numeric]\n\
         grid_step = 0.02\n\
         [estimate_q]\n\
         v_grid = -1, 0, 1\n\
         time_horizon = 50\n\
         replications = 8\n\
         [eta0]\n\
         time_grid = 1, 4\n\
         replications = 6\n\
         [decompose]\n\
         realizations = 5\n",
    )
    .expect("config file writes");
    path
}

#[test]
fn identical_inputs_reproduce_identical_artifacts_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let mut first = CliOptions::new(Subcommand::Rate);
    first.config_path = Some(config.clone());
    first.out_dir = dir.path().join("run1");
    first.threads = Some(1);
    let mut second = first.clone();
    second.out_dir = dir.path().join("run2");
    second.threads = Some(3);

    let m1 = run(&first).expect("first run succeeds");
    let m2 = run(&second).expect("second run succeeds");
    assert_eq!(m1.status, "ok");
    assert_eq!(m1.threads, 1, "thread flag must land in the manifest");
    assert_eq!(m2.threads, 3);

    for file in ["rate.csv", "rate_fit.json"] {
        let a = fs::read(first.out_dir.join(file)).unwrap();
        let b = fs::read(second.out_dir.join(file)).unwrap();
        assert_eq!(a, b, "{file} must be byte-identical across thread counts");
    }
    let records1: Vec<_> = m1.outputs.iter().map(|o| (&o.file, &o.sha256)).collect();
    let records2: Vec<_> = m2.outputs.iter().map(|o| (&o.file, &o.sha256)).collect();
    assert_eq!(records1, records2, "recorded hashes must agree");
}

#[test]
fn manifests_verify_and_detect_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let mut opts = CliOptions::new(Subcommand::Simulate);
    opts.config_path = Some(config);
    opts.out_dir = dir.path().join("sim");
    run(&opts).expect("simulate succeeds");

    let manifest_path = opts.out_dir.join("manifest.json");
    let checks = verify_manifest(&manifest_path).unwrap();
    assert_eq!(checks, vec![("simulate.csv".to_string(), true)]);

    let mut bytes = fs::read(opts.out_dir.join("simulate.csv")).unwrap();
    bytes.push(b'x');
    fs::write(opts.out_dir.join("simulate.csv"), &bytes).unwrap();
    let checks = verify_manifest(&manifest_path).unwrap();
    assert_eq!(checks, vec![("simulate.csv".to_string(), false)], "edits must be detected");
}

#[test]
fn flag_overrides_reach_the_pipeline_and_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let mut opts = CliOptions::new(Subcommand::Rate);
    opts.config_path = Some(config);
    opts.out_dir = dir.path().join("over");
    opts.threads = Some(2);
    opts.seed = Some(99);
    opts.paths = Some(5);
    opts.eps = Some(vec![0.4, 0.2, 0.1]);
    let manifest = run(&opts).expect("overridden run succeeds");

    assert_eq!(manifest.seed, 99);
    assert_eq!(manifest.config.experiment.n_paths, 5);
    assert_eq!(manifest.config.experiment.eps_grid, vec![0.4, 0.2, 0.1]);
    assert!(manifest.flag_overrides.iter().any(|f| f == "experiment.seed = 99"));
    assert!(manifest.flag_overrides.iter().any(|f| f == "experiment.eps_grid = 0.4,0.2,0.1"));

    let csv = fs::read_to_string(opts.out_dir.join("rate.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "eps,p,T,n_paths,lp_sup_error,std_error,trunc_frac,bound_value"
    );
    assert!(lines.next().unwrap().starts_with("0.4,2,1,5,"), "override values must appear in rows");
}

#[test]
fn synthetic_injection_recovers_the_exponent_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut opts = CliOptions::new(Subcommand::Rate);
    opts.out_dir = dir.path().join("syn");
    opts.synthetic_lambda = Some(0.25);
    run(&opts).expect("synthetic run succeeds");
    let text = fs::read_to_string(opts.out_dir.join("synthetic_fit.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(value["lambda_hat"].as_f64().unwrap(), 0.25, "fitter identity case is exact");
}

#[test]
fn pipeline_failure_still_writes_a_marked_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("bad.ini");
    // v = 5 lies outside the transversal region, so the tabulation fails.
    fs::write(&config_path, "[estimate_q]\nv_grid = -5, 0, 5\ntime_horizon = 50\nreplications = 4\n")
        .unwrap();
    let mut opts = CliOptions::new(Subcommand::EstimateQ);
    opts.config_path = Some(config_path);
    opts.out_dir = dir.path().join("fail");
    let err = run(&opts).expect_err("outside-region grid must fail");
    assert!(format!("{err:#}").contains("manifest"), "error should mention the flushed manifest");

    let manifest_text = fs::read_to_string(opts.out_dir.join("manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&manifest_text).unwrap();
    assert!(
        manifest["status"].as_str().unwrap().starts_with("failed:"),
        "manifest must carry the failure marker, got {}",
        manifest["status"]
    );
}

#[test]
fn config_defaults_are_recorded_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut opts = CliOptions::new(Subcommand::Validate);
    opts.out_dir = dir.path().join("val");
    let manifest = run(&opts).expect("validate with defaults succeeds");
    assert!(manifest.applied_defaults.iter().any(|d| d == "experiment.p = 2 (default)"));
    assert!(manifest.applied_defaults.iter().any(|d| d.starts_with("experiment.eps_grid")));
    let report = fs::read_to_string(opts.out_dir.join("moment_check.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(value["leaf_moment_p"].as_f64().unwrap(), 1.0 / 3.0, "uniform(-1,1) second moment");
}
