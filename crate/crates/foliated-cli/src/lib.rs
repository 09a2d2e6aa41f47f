//! Command dispatch for the experiment runner: configuration loading, flag
//! overrides, worker-pool setup, pipeline execution, and run-manifest
//! persistence. Every pipeline is a pure function of (config, seed), so a
//! rerun with the same manifest inputs reproduces each artifact byte for
//! byte, at any thread count.

pub mod config;
pub mod manifest;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde_json::json;

use foliated_sde::averaging::{
    build_q_table, estimate_eta0, perturbed_drift, stack_drivers, stacked_jump_field,
    write_eta0_csv, write_q_table_csv, DecayFit, ObservableSpec,
};
use foliated_sde::bihari::{verify_dominance, BihariProblem};
use foliated_sde::levy::{sample_levy_path, validate_driver_moments};
use foliated_sde::marcus::{integrate, MarcusProblem};
use foliated_sde::rate::{decompose_error, fit_rate, run_rate_experiment, write_rate_csv};
use foliated_sde::rng::{stream, TAG_LEAF, TAG_TRANSVERSAL};
use foliated_sde::systems::{builtin_system_with, TestSystem};

use config::CliConfig;
use manifest::{now_unix, sha256_hex, version_string, OutputRecord, RunManifest};

/// The available pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Simulate,
    EstimateQ,
    Eta0,
    Rate,
    Decompose,
    Bihari,
    Validate,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Simulate => "simulate",
            Subcommand::EstimateQ => "estimate-q",
            Subcommand::Eta0 => "eta0",
            Subcommand::Rate => "rate",
            Subcommand::Decompose => "decompose",
            Subcommand::Bihari => "bihari",
            Subcommand::Validate => "validate",
        }
    }
}

/// Resolved command-line selection.
#[derive(Debug, Clone)]
pub struct CliOptions {
    pub subcommand: Subcommand,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
    pub paths: Option<usize>,
    pub eps: Option<Vec<f64>>,
    /// Rate only: skip simulation and feed the fitter an exact power law.
    pub synthetic_lambda: Option<f64>,
}

impl CliOptions {
    pub fn new(subcommand: Subcommand) -> Self {
        Self {
            subcommand,
            config_path: None,
            seed: None,
            out_dir: PathBuf::from("."),
            threads: None,
            paths: None,
            eps: None,
            synthetic_lambda: None,
        }
    }
}

/// Worker-thread resolution: `--threads` beats `FOLIATED_THREADS` beats the
/// physical core count.
pub fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    if let Some(n) = flag {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        return Ok(n);
    }
    if let Ok(text) = std::env::var("FOLIATED_THREADS") {
        let n: usize = text
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("FOLIATED_THREADS must be a positive integer, got {text:?}"))?;
        if n == 0 {
            bail!("FOLIATED_THREADS must be at least 1");
        }
        return Ok(n);
    }
    Ok(num_cpus::get_physical().max(1))
}

/// Artifact writer that records (file, sha256) for the manifest as it goes,
/// so everything written before a failure is still accounted for.
struct Artifacts {
    dir: PathBuf,
    outputs: Vec<OutputRecord>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), outputs: Vec::new() })
    }

    fn write(
        &mut self,
        name: &str,
        writer: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
    ) -> Result<()> {
        let path = self.dir.join(name);
        let mut out = BufWriter::new(
            File::create(&path).with_context(|| format!("cannot create {}", path.display()))?,
        );
        writer(&mut out)?;
        out.flush()?;
        drop(out);
        self.outputs.push(OutputRecord { file: name.to_string(), sha256: sha256_hex(&path)? });
        Ok(())
    }
}

/// Loads the config, applies flag overrides, runs the selected pipeline in a
/// dedicated worker pool, and writes the run manifest. On pipeline failure the
/// artifacts produced so far and a manifest with a failure marker are still
/// on disk.
pub fn run(opts: &CliOptions) -> Result<RunManifest> {
    let started = now_unix();
    let (mut config, applied_defaults) = match &opts.config_path {
        Some(path) => config::load_config(path)?,
        None => config::parse_config("")?,
    };
    let mut flag_overrides = Vec::new();
    if let Some(seed) = opts.seed {
        config.experiment.seed = seed;
        flag_overrides.push(format!("experiment.seed = {seed}"));
    }
    if let Some(paths) = opts.paths {
        config.experiment.n_paths = paths;
        flag_overrides.push(format!("experiment.n_paths = {paths}"));
    }
    if let Some(eps) = &opts.eps {
        config.experiment.eps_grid = eps.clone();
        let list: Vec<String> = eps.iter().map(|e| format!("{e}")).collect();
        flag_overrides.push(format!("experiment.eps_grid = {}", list.join(",")));
    }
    config.validate()?;

    let threads = resolve_threads(opts.threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("cannot build the worker pool")?;
    let mut artifacts = Artifacts::new(&opts.out_dir)?;
    let outcome = pool.install(|| dispatch(opts, &config, &mut artifacts));

    let manifest = RunManifest {
        version: version_string(),
        subcommand: opts.subcommand.name().to_string(),
        seed: config.experiment.seed,
        threads,
        started_unix: started,
        finished_unix: now_unix(),
        status: match &outcome {
            Ok(_) => "ok".to_string(),
            Err(e) => format!("failed: {e:#}"),
        },
        applied_defaults,
        flag_overrides,
        config,
        outputs: artifacts.outputs.clone(),
    };
    manifest.write(&opts.out_dir)?;
    match outcome {
        Ok(summary) => {
            println!("{summary}");
            Ok(manifest)
        }
        Err(e) => Err(e.context(format!(
            "partial artifacts and a failure-marked manifest were flushed to {}",
            opts.out_dir.display()
        ))),
    }
}

fn build_system(config: &CliConfig) -> Result<TestSystem> {
    Ok(builtin_system_with(
        &config.experiment.system,
        config.experiment.p,
        &config.overrides.to_system_overrides(),
    )?)
}

fn dispatch(opts: &CliOptions, config: &CliConfig, artifacts: &mut Artifacts) -> Result<String> {
    match opts.subcommand {
        Subcommand::Simulate => run_simulate(config, artifacts),
        Subcommand::EstimateQ => run_estimate_q(config, artifacts),
        Subcommand::Eta0 => run_eta0(config, artifacts),
        Subcommand::Rate => run_rate(config, opts.synthetic_lambda, artifacts),
        Subcommand::Decompose => run_decompose(config, artifacts),
        Subcommand::Bihari => run_bihari(config, artifacts),
        Subcommand::Validate => run_validate(config, artifacts),
    }
}

/// One realization of the perturbed system on the fast clock `[0, T/eps]`,
/// with the slow uniform grid forced into the stored nodes. Writes every node
/// as `t_fast, t_slow, <leaf coords>, <transversal coords>`.
fn run_simulate(config: &CliConfig, artifacts: &mut Artifacts) -> Result<String> {
    let system = build_system(config)?;
    let eps = config.simulate.eps;
    let t_horizon = config.experiment.t_horizon;
    let seed = config.experiment.seed;
    let numeric = config.numeric;
    let fast_horizon = t_horizon / eps;

    let zt_path =
        sample_levy_path(&system.nu_prime, t_horizon, &mut stream(seed, 0, TAG_TRANSVERSAL))?;
    let z_path = sample_levy_path(&system.nu, fast_horizon, &mut stream(seed, 0, TAG_LEAF))?;
    let r = system.fields.leaf_jump_dim;
    let rt = system.fields.transversal_jump_dim;
    let stacked = stack_drivers(&z_path, &zt_path, eps, r, rt);

    let mut forced: Vec<f64> = Vec::new();
    let k_max = (t_horizon / numeric.grid_step).ceil() as usize;
    for k in 1..k_max {
        forced.push(k as f64 * numeric.grid_step / eps);
    }
    let problem = MarcusProblem {
        drift: perturbed_drift(&system, eps),
        jump_field: stacked_jump_field(&system, eps),
        initial_point: system.initial_point.clone(),
        levy_path: stacked,
        horizon: fast_horizon,
        grid_step: numeric.grid_step,
        ode_steps: numeric.ode_steps,
        forced_times: forced,
    };
    let chart = system.chart.clone();
    let inside = move |x: &[f64]| chart.transversal_inside(x);
    let path = integrate(&problem, Some(&inside))?;

    let n = system.chart.leaf_dim();
    let d = system.chart.transversal_dim();
    artifacts.write("simulate.csv", |w| {
        let mut header = String::from("t_fast,t_slow");
        for i in 0..n {
            header.push_str(&format!(",u{i}"));
        }
        for i in 0..d {
            header.push_str(&format!(",v{i}"));
        }
        writeln!(w, "{header}")?;
        for (t, state) in path.times.iter().zip(&path.states) {
            write!(w, "{t},{}", eps * t)?;
            for x in state {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    let exit_note = match &path.exit {
        Some(e) => format!("left the chart region at fast time {}", e.time),
        None => "stayed in the chart region".to_string(),
    };
    Ok(format!(
        "simulate: {} nodes, {} jumps on [0, {fast_horizon}], {exit_note}; wrote simulate.csv",
        path.times.len(),
        path.jumps.len()
    ))
}

/// Tabulates the averaged drift over the configured transversal grid.
fn run_estimate_q(config: &CliConfig, artifacts: &mut Artifacts) -> Result<String> {
    let system = build_system(config)?;
    let q = &config.estimate_q;
    let table = build_q_table(
        &system,
        &q.v_grid,
        q.time_horizon,
        q.replications,
        &config.numeric,
        config.experiment.seed,
    )?;
    artifacts.write("q_table.csv", |w| Ok(write_q_table_csv(&table, w)?))?;
    Ok(format!(
        "estimate-q: {} grid points on [{}, {}], horizon {}, {} replications; wrote q_table.csv",
        table.v_grid.len(),
        table.v_grid.first().unwrap(),
        table.v_grid.last().unwrap(),
        q.time_horizon,
        q.replications
    ))
}

/// Estimates the decay profile of leafwise time averages at the start point.
fn run_eta0(config: &CliConfig, artifacts: &mut Artifacts) -> Result<String> {
    let system = build_system(config)?;
    let v0 = system.chart.project(&system.initial_point).to_vec();
    let estimate = estimate_eta0(
        &system,
        &ObservableSpec::VerticalK,
        &v0,
        &config.eta0.time_grid,
        config.eta0.replications,
        config.experiment.p,
        &config.numeric,
        config.experiment.seed,
    )?;
    artifacts.write("eta0.csv", |w| Ok(write_eta0_csv(&estimate, w)?))?;
    let fit_note = match &estimate.fitted {
        Some(DecayFit::Exponential { amplitude, rate }) => {
            format!("exponential fit: amplitude {amplitude:.4}, rate {rate:.4}")
        }
        Some(DecayFit::Power { amplitude, exponent }) => {
            format!("power fit: amplitude {amplitude:.4}, exponent {exponent:.4}")
        }
        None => "no decay fit (degenerate profile)".to_string(),
    };
    Ok(format!(
        "eta0: {} grid times, {} replications, {fit_note}; wrote eta0.csv",
        estimate.times.len(),
        estimate.replications
    ))
}

/// Runs the eps-grid experiment and the rate fit, or only the fitter when a
/// synthetic exponent is injected.
fn run_rate(
    config: &CliConfig,
    synthetic_lambda: Option<f64>,
    artifacts: &mut Artifacts,
) -> Result<String> {
    if let Some(lambda) = synthetic_lambda {
        let eps = config.experiment.eps_grid.clone();
        let errors: Vec<f64> = eps.iter().map(|e| e.powf(lambda)).collect();
        let std_errors: Vec<f64> = errors.iter().map(|e| 1e-3 * e).collect();
        let fit = fit_rate(&eps, &errors, &std_errors)?;
        artifacts.write("synthetic_fit.json", |w| {
            serde_json::to_writer_pretty(
                &mut *w,
                &json!({
                    "injected_lambda": lambda,
                    "lambda_hat": fit.lambda_hat,
                    "half_width_95": fit.half_width_95,
                    "amplitude": fit.amplitude,
                }),
            )?;
            w.write_all(b"\n")?;
            Ok(())
        })?;
        return Ok(format!(
            "rate (synthetic): lambda_hat = {} from injected exponent {lambda}; wrote synthetic_fit.json",
            fit.lambda_hat
        ));
    }

    let result = run_rate_experiment(&config.to_experiment_config())?;
    artifacts.write("rate.csv", |w| Ok(write_rate_csv(&result, w)?))?;
    artifacts.write("rate_fit.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &result)?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    Ok(format!(
        "rate: {} eps points, {} paths each; lambda_hat = {:.4} +- {:.4}, C_hat = {:.4}; wrote rate.csv, rate_fit.json",
        result.rows.len(),
        result.n_paths,
        result.fit.lambda_hat,
        result.fit.half_width_95,
        result.c_hat
    ))
}

/// Decomposes the averaging error realization by realization and counts
/// triangle-inequality violations (there should be none).
fn run_decompose(config: &CliConfig, artifacts: &mut Artifacts) -> Result<String> {
    let system = build_system(config)?;
    let cfg = &config.decompose;
    let rows = (0..cfg.realizations as u64)
        .into_par_iter()
        .map(|index| {
            decompose_error(
                &system,
                cfg.eps,
                config.experiment.t_horizon,
                config.experiment.p,
                config.experiment.c_constant,
                &config.numeric,
                config.experiment.seed,
                index,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut violations = 0usize;
    for d in &rows {
        let sum = d.a1.abs() + d.a2.abs() + d.a3.abs();
        if d.total.abs() > sum + 1e-12 * (1.0 + sum) {
            violations += 1;
        }
    }
    artifacts.write("decompose.csv", |w| {
        writeln!(w, "path_index,eps,a1,a2,a3,total,end_time,n_blocks_used,truncated")?;
        for (i, d) in rows.iter().enumerate() {
            writeln!(
                w,
                "{i},{},{},{},{},{},{},{},{}",
                d.eps, d.a1, d.a2, d.a3, d.total, d.end_time, d.n_blocks_used, d.truncated
            )?;
        }
        Ok(())
    })?;
    Ok(format!(
        "decompose: {} realizations at eps = {}, {} triangle violations; wrote decompose.csv",
        rows.len(),
        cfg.eps,
        violations
    ))
}

/// Sweeps the comparison bound over (p, eps*T) and writes both the summary
/// and the pointwise margin profiles.
fn run_bihari(config: &CliConfig, artifacts: &mut Artifacts) -> Result<String> {
    let cfg = &config.bihari;
    let mut reports = Vec::new();
    for &p in &cfg.p_grid {
        for &eps_t in &cfg.eps_t_grid {
            let eps = eps_t / cfg.t_horizon;
            let problem = BihariProblem::new(p, eps, cfg.c, cfg.t_horizon, cfg.grid_points)?;
            reports.push((p, eps, verify_dominance(&problem)?));
        }
    }
    artifacts.write("bihari_sweep.csv", |w| {
        writeln!(w, "p,eps,c,t_horizon,chain_constant,fitted_constant,ratio_at_horizon,min_margin")?;
        for (p, eps, report) in &reports {
            writeln!(
                w,
                "{p},{eps},{},{},{},{},{},{}",
                cfg.c,
                cfg.t_horizon,
                report.chain_constant,
                report.fitted_constant,
                report.ratio_at_horizon,
                report.min_margin
            )?;
        }
        Ok(())
    })?;
    artifacts.write("bihari_profiles.csv", |w| {
        writeln!(w, "p,eps,t,psi_star,bound,margin")?;
        for (p, eps, report) in &reports {
            for i in 0..report.times.len() {
                writeln!(
                    w,
                    "{p},{eps},{},{},{},{}",
                    report.times[i], report.psi_star[i], report.bound[i], report.margins[i]
                )?;
            }
        }
        Ok(())
    })?;
    let max_fitted =
        reports.iter().map(|(_, _, r)| r.fitted_constant).fold(f64::MIN, f64::max);
    Ok(format!(
        "bihari: {} (p, eps) combinations, dominance holds everywhere, max fitted constant {max_fitted:.4}; wrote bihari_sweep.csv, bihari_profiles.csv",
        reports.len()
    ))
}

/// Checks the moment conditions both drivers must satisfy and writes the
/// report. Fails loudly when a required moment has no closed form.
fn run_validate(config: &CliConfig, artifacts: &mut Artifacts) -> Result<String> {
    let system = build_system(config)?;
    let check = validate_driver_moments(&system.nu, &system.nu_prime, config.experiment.p)?;
    artifacts.write("moment_check.json", |w| {
        serde_json::to_writer_pretty(
            &mut *w,
            &json!({
                "system": system.name,
                "p": check.p,
                "leaf_moment_p": check.leaf_moment_p,
                "transversal_moment_2p": check.transversal_moment_2p,
            }),
        )?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    Ok(format!(
        "validate: moment check PASS for {:?} at p = {}: E|z|^p = {}, E|ztilde|^2p = {}; wrote moment_check.json",
        system.name, check.p, check.leaf_moment_p, check.transversal_moment_2p
    ))
}
