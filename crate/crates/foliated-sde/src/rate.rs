//! Convergence-rate experiments: the logarithmic block partition, the
//! three-sum decomposition of the drift-averaging discrepancy along one
//! realization, and the eps-grid Monte Carlo harness with its power-law fit
//! and bound comparison.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::averaging::{
    coupled_error, estimate_eta0, perturbed_drift, stacked_jump_field, AveragingError,
    MixingRateEstimate, NumericParams, ObservableSpec, QSource, TruncationCause,
};
use crate::levy::sample_levy_path;
use crate::marcus::{integrate, MarcusProblem};
use crate::rng::{derived_seed, stream, TAG_LEAF, TAG_TRANSVERSAL};
use crate::systems::{builtin_system_with, SystemError, SystemOverrides, TestSystem};

#[derive(Debug, Error)]
pub enum RateError {
    #[error("invalid experiment configuration: {0}")]
    BadConfig(String),
    #[error("degenerate experiment: every path at eps = {eps} stops at time 0")]
    DegenerateExperiment { eps: f64 },
    #[error("rate fit impossible: {0}")]
    FitImpossible(String),
    #[error("block decomposition disagrees with the direct integral by {gap:e}")]
    DecompositionMismatch { gap: f64 },
    #[error(transparent)]
    Averaging(#[from] AveragingError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Marcus(#[from] crate::marcus::MarcusError),
    #[error(transparent)]
    Levy(#[from] crate::levy::LevyError),
}

/// Largest admissible rate exponent for moment order `p`: `(p - 1) / p^2`.
pub fn lambda_ceiling(p: f64) -> f64 {
    (p - 1.0) / (p * p)
}

/// Default target exponent: 80% of the ceiling, strictly inside the open
/// admissible interval with margin for Monte Carlo noise.
pub fn default_lambda_target(p: f64) -> f64 {
    0.8 * lambda_ceiling(p)
}

/// Partition constant from a fitted Gronwall coefficient `k2`:
/// `c = (1/k2) * ((p - 1)/p^2 - lambda)`.
pub fn c_from_k2(k2: f64, p: f64, lambda: f64) -> Result<f64, RateError> {
    if !(k2.is_finite() && k2 > 0.0) {
        return Err(RateError::BadConfig(format!("k2 must be positive, got {k2}")));
    }
    if !(p.is_finite() && p >= 2.0) {
        return Err(RateError::BadConfig(format!("p must satisfy p >= 2, got {p}")));
    }
    if !(lambda > 0.0 && lambda < lambda_ceiling(p)) {
        return Err(RateError::BadConfig(format!(
            "lambda {lambda} outside the open interval (0, {})",
            lambda_ceiling(p)
        )));
    }
    Ok((lambda_ceiling(p) - lambda) / k2)
}

/// Logarithmic block partition of the rescaled horizon `[0, T/eps]`:
/// step `delta = -c T ln(eps)` and block count `n = floor(1/(c eps |ln eps|))`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PartitionScheme {
    pub eps: f64,
    pub c: f64,
    pub t_horizon: f64,
    pub delta: f64,
    pub n_blocks: u64,
}

impl PartitionScheme {
    /// Interior grid point `t_n = n * delta`.
    pub fn grid_point(&self, n: u64) -> f64 {
        n as f64 * self.delta
    }

    /// Block boundaries covering the full rescaled horizon: the `t_n` for
    /// `n = 0..=n_blocks` followed by `T/eps` itself when the last grid point
    /// falls short of it.
    pub fn boundaries(&self) -> Vec<f64> {
        let horizon = self.t_horizon / self.eps;
        let mut out: Vec<f64> = (0..=self.n_blocks).map(|n| self.grid_point(n)).collect();
        if *out.last().unwrap() < horizon {
            out.push(horizon);
        }
        out
    }
}

/// Computes the partition; `eps` must lie strictly inside `(0, 1)` so the
/// step is positive.
pub fn partition(eps: f64, c: f64, t_horizon: f64) -> Result<PartitionScheme, RateError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(RateError::BadConfig(format!("partition needs eps in (0, 1), got {eps}")));
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(RateError::BadConfig(format!("partition needs c > 0, got {c}")));
    }
    if !(t_horizon.is_finite() && t_horizon > 0.0) {
        return Err(RateError::BadConfig(format!("partition needs T > 0, got {t_horizon}")));
    }
    let log_eps_abs = -eps.ln();
    let delta = c * t_horizon * log_eps_abs;
    let n_blocks = (1.0 / (c * eps * log_eps_abs)).floor() as u64;
    Ok(PartitionScheme { eps, c, t_horizon, delta, n_blocks })
}

/// The three block sums that split the drift-averaging discrepancy
/// `total = eps * int_0^end [h(X_s) - Q(pi(X_s))] ds` along one realization,
/// with `h` the vertical perturbation drift and `end` the rescaled horizon
/// truncated at the exit time:
/// `a1` compares the perturbed path to the frozen leaf flow on each block,
/// `a2` compares the frozen flow's time average to the block-start `Q`,
/// `a3` is the Riemann-sum mismatch of `Q` along the path.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ErrorDecomposition {
    pub eps: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub total: f64,
    /// End of the decomposed range on the fast clock.
    pub end_time: f64,
    pub n_blocks_used: usize,
    pub truncated: bool,
}

/// Simulates one perturbed realization and decomposes its drift-averaging
/// discrepancy into the three block sums, verifying that they reassemble the
/// directly integrated total.
pub fn decompose_error(
    system: &TestSystem,
    eps: f64,
    t_horizon: f64,
    p: f64,
    c_constant: f64,
    numeric: &NumericParams,
    seed: u64,
    path_index: u64,
) -> Result<ErrorDecomposition, RateError> {
    if !(p.is_finite() && p >= 2.0) {
        return Err(RateError::BadConfig(format!("p must satisfy p >= 2, got {p}")));
    }
    if !(0.0 < t_horizon && t_horizon <= 1.0) {
        return Err(RateError::BadConfig(format!("T must lie in (0, 1], got {t_horizon}")));
    }
    if system.chart.transversal_dim() != 1 {
        return Err(RateError::BadConfig("decomposition covers scalar transversal coordinates only".into()));
    }
    let q = system.closed_form_q.clone().ok_or(AveragingError::NoClosedFormQ)?;
    let scheme = partition(eps, c_constant, t_horizon)?;
    let v0 = system.chart.project(&system.initial_point);
    if !system.chart.region().contains(v0) {
        return Err(AveragingError::ExitAtTimeZero.into());
    }

    let fast_horizon = t_horizon / eps;
    let z_path = sample_levy_path(&system.nu, fast_horizon, &mut stream(seed, path_index, TAG_LEAF))?;
    let zt_path = sample_levy_path(&system.nu_prime, t_horizon, &mut stream(seed, path_index, TAG_TRANSVERSAL))?;
    let stacked = crate::averaging::stack_drivers(
        &z_path,
        &zt_path,
        eps,
        system.fields.leaf_jump_dim,
        system.fields.transversal_jump_dim,
    );

    let boundaries = scheme.boundaries();
    let x_problem = MarcusProblem {
        drift: perturbed_drift(system, eps),
        jump_field: stacked_jump_field(system, eps),
        initial_point: system.initial_point.clone(),
        levy_path: stacked,
        horizon: fast_horizon,
        grid_step: numeric.grid_step,
        ode_steps: numeric.ode_steps,
        forced_times: boundaries.clone(),
    };
    let chart = system.chart.clone();
    let inside = move |x: &[f64]| chart.transversal_inside(x);
    let x_path = integrate(&x_problem, Some(&inside))?;

    let end = x_path.exit.map(|e| e.time).unwrap_or(fast_horizon).min(fast_horizon);
    let truncated = end < fast_horizon;
    let n = system.chart.leaf_dim();

    // Clamp block boundaries at the truncation point; empty blocks drop out.
    let mut clamped: Vec<f64> = boundaries.iter().map(|t| t.min(end)).collect();
    clamped.dedup();

    let mut a1 = 0.0;
    let mut a2 = 0.0;
    let mut riemann = 0.0;
    let mut n_blocks_used = 0;
    for pair in clamped.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let i1 = x_path.integrate_observable(system.vertical_k_observable(), 1, a, b)?[0];
        let frozen_problem = MarcusProblem {
            drift: system.fields.f0.clone(),
            jump_field: system.fields.f.clone(),
            initial_point: x_path.state_at(a).to_vec(),
            levy_path: z_path.window(a, b),
            horizon: b - a,
            grid_step: numeric.grid_step,
            ode_steps: numeric.ode_steps,
            forced_times: Vec::new(),
        };
        let frozen = integrate(&frozen_problem, None)?;
        let i2 = frozen.integrate_observable(system.vertical_k_observable(), 1, 0.0, b - a)?[0];
        let mut qv = [0.0];
        q(&x_path.state_at(a)[n..], &mut qv);
        a1 += i1 - i2;
        a2 += i2 - (b - a) * qv[0];
        riemann += (b - a) * qv[0];
        n_blocks_used += 1;
    }

    let mut q_along = {
        let q = q.clone();
        move |x: &[f64], out: &mut [f64]| q(&x[n..], out)
    };
    let q_integral = x_path.integrate_observable(&mut q_along, 1, 0.0, end)?[0];
    let h_integral = x_path.integrate_observable(system.vertical_k_observable(), 1, 0.0, end)?[0];

    a1 *= eps;
    a2 *= eps;
    let a3 = eps * (riemann - q_integral);
    let total = eps * (h_integral - q_integral);

    let gap = (total - (a1 + a2 + a3)).abs();
    let slack = 1e-12 * (1.0 + a1.abs() + a2.abs() + a3.abs());
    if gap > slack {
        return Err(RateError::DecompositionMismatch { gap });
    }
    Ok(ErrorDecomposition { eps, a1, a2, a3, total, end_time: end, n_blocks_used, truncated })
}

/// Complete specification of an eps-grid rate experiment.
///
/// Simulation cost per path scales like `T / (eps * grid_step)`, so the
/// smallest grid entry dominates the budget; the default grid
/// `{0.2, 0.1, 0.05, 0.025}` with `T = 1` and the default step keeps a full
/// experiment at desk scale.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub system: String,
    #[serde(skip)]
    pub overrides: SystemOverrides,
    pub p: f64,
    pub t_horizon: f64,
    pub eps_grid: Vec<f64>,
    pub n_paths: usize,
    pub lambda_target: f64,
    pub c_constant: f64,
    pub seed: u64,
    pub numeric: NumericParams,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), RateError> {
        if !(self.p.is_finite() && self.p >= 2.0) {
            return Err(RateError::BadConfig(format!("p must satisfy p >= 2, got {}", self.p)));
        }
        if !(self.t_horizon > 0.0 && self.t_horizon <= 1.0) {
            return Err(RateError::BadConfig(format!("T must lie in (0, 1], got {}", self.t_horizon)));
        }
        if self.eps_grid.len() < 3 {
            return Err(RateError::BadConfig(format!(
                "the rate fit needs at least 3 eps points, got {}",
                self.eps_grid.len()
            )));
        }
        if !self.eps_grid.iter().all(|&e| e > 0.0 && e <= 1.0) {
            return Err(RateError::BadConfig(format!("eps grid entries must lie in (0, 1], got {:?}", self.eps_grid)));
        }
        if !self.eps_grid.windows(2).all(|w| w[0] > w[1]) {
            return Err(RateError::BadConfig(format!("eps grid must be strictly decreasing, got {:?}", self.eps_grid)));
        }
        if self.n_paths < 2 {
            return Err(RateError::BadConfig(format!("n_paths must be >= 2, got {}", self.n_paths)));
        }
        let ceiling = lambda_ceiling(self.p);
        if !(self.lambda_target > 0.0 && self.lambda_target < ceiling) {
            return Err(RateError::BadConfig(format!(
                "lambda_target {} outside the admissible interval (0, {ceiling}) for p = {}",
                self.lambda_target, self.p
            )));
        }
        if !(self.c_constant.is_finite() && self.c_constant > 0.0) {
            return Err(RateError::BadConfig(format!("c_constant must be positive, got {}", self.c_constant)));
        }
        Ok(())
    }
}

/// Per-eps Monte Carlo summary row.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpsRow {
    pub eps: f64,
    pub lp_sup_error: f64,
    pub std_error: f64,
    pub trunc_frac: f64,
    pub bound_value: f64,
}

/// Plain power-law fit of errors against eps.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PowerLawFit {
    pub lambda_hat: f64,
    /// 95% confidence half-width from the weighted regression.
    pub half_width_95: f64,
    pub amplitude: f64,
}

/// Full result of a rate experiment.
#[derive(Debug, Clone, Serialize)]
pub struct RateFitResult {
    pub rows: Vec<EpsRow>,
    pub fit: PowerLawFit,
    /// Smallest constant making the rate-shaped bound dominate the grid.
    pub c_hat: f64,
    pub lambda_target: f64,
    pub c_constant: f64,
    pub p: f64,
    pub t_horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Mixing profile measured at the start point, reused by the bound.
    pub eta0: MixingRateEstimate,
    /// `(c, C_hat(c))` for `c/2, c, 2c`, re-evaluated without re-simulation.
    pub c_sensitivity: Vec<(f64, f64)>,
}

/// Weighted least squares of `ln error` on `ln eps`. Weights are inverse
/// variances of `ln error` (delta method); the confidence half-width uses the
/// t quantile with `len - 2` degrees of freedom.
pub fn fit_rate(eps: &[f64], errors: &[f64], std_errors: &[f64]) -> Result<PowerLawFit, RateError> {
    let m = eps.len();
    if m < 3 || errors.len() != m || std_errors.len() != m {
        return Err(RateError::FitImpossible(format!(
            "need at least 3 aligned (eps, error, std_error) points, got {m}/{}/{}",
            errors.len(),
            std_errors.len()
        )));
    }
    if !eps.iter().all(|&e| e > 0.0) {
        return Err(RateError::FitImpossible("eps values must be positive".into()));
    }
    if let Some(i) = errors.iter().position(|&e| !(e > 0.0)) {
        return Err(RateError::FitImpossible(format!(
            "error at eps = {} is {}, so its logarithm is undefined",
            eps[i], errors[i]
        )));
    }
    let x: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let y: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    // Relative std errors become absolute ones on the log scale.
    let w: Vec<f64> = std_errors
        .iter()
        .zip(errors)
        .map(|(se, e)| {
            let se_ln = (se / e).max(1e-12);
            1.0 / (se_ln * se_ln)
        })
        .collect();

    let sw: f64 = w.iter().sum();
    let xb: f64 = w.iter().zip(&x).map(|(wi, xi)| wi * xi).sum::<f64>() / sw;
    let yb: f64 = w.iter().zip(&y).map(|(wi, yi)| wi * yi).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(&x).map(|(wi, xi)| wi * (xi - xb) * (xi - xb)).sum();
    if sxx <= 0.0 {
        return Err(RateError::FitImpossible("eps grid collapses to a single log point".into()));
    }
    let sxy: f64 = w.iter().zip(x.iter().zip(&y)).map(|(wi, (xi, yi))| wi * (xi - xb) * (yi - yb)).sum();
    let slope = sxy / sxx;
    let intercept = yb - slope * xb;

    let ssr: f64 = w
        .iter()
        .zip(x.iter().zip(&y))
        .map(|(wi, (xi, yi))| wi * (yi - intercept - slope * xi).powi(2))
        .sum();
    let dof = (m - 2) as f64;
    let slope_var = (ssr / dof) / sxx;
    let t = StudentsT::new(0.0, 1.0, dof).expect("valid dof").inverse_cdf(0.975);
    Ok(PowerLawFit { lambda_hat: slope, half_width_95: t * slope_var.sqrt(), amplitude: intercept.exp() })
}

/// Smallest constant `C` with `error(eps) <= C * T * (eps^lambda + eta0(c T |ln eps|))`
/// across the grid: the max of the pointwise ratios.
pub fn fit_bound_constant(
    eps: &[f64],
    errors: &[f64],
    lambda_target: f64,
    c: f64,
    t_horizon: f64,
    eta0: impl Fn(f64) -> f64,
) -> f64 {
    eps.iter()
        .zip(errors)
        .map(|(&e, &err)| err / (t_horizon * (e.powf(lambda_target) + eta0(c * t_horizon * e.ln().abs()))))
        .fold(0.0, f64::max)
}

/// Runs the full eps-grid experiment: common random numbers across eps (path
/// index `k` reuses the same driver streams at every eps), `L^p` reduction of
/// the sup errors across paths, mixing profile at the start point, weighted
/// rate fit, and bound comparison with `c`-sensitivity.
pub fn run_rate_experiment(config: &ExperimentConfig) -> Result<RateFitResult, RateError> {
    config.validate()?;
    let system = builtin_system_with(&config.system, config.p, &config.overrides)?;
    if system.closed_form_q.is_none() {
        return Err(AveragingError::NoClosedFormQ.into());
    }
    // A start outside the transversal region stops every path at time 0,
    // at every eps; report it against the first grid entry.
    if !system.chart.region().contains(system.chart.project(&system.initial_point)) {
        return Err(RateError::DegenerateExperiment { eps: config.eps_grid[0] });
    }

    // Mixing profile on exactly the arguments the bound needs. eps = 1 maps
    // to argument 0, which cannot be estimated and falls back to the fit.
    let mut s_grid: Vec<f64> = config
        .eps_grid
        .iter()
        .filter(|&&e| e < 1.0)
        .map(|e| config.c_constant * config.t_horizon * e.ln().abs())
        .collect();
    s_grid.sort_by(|a, b| a.partial_cmp(b).expect("finite mixing arguments"));
    s_grid.dedup();
    if s_grid.is_empty() {
        return Err(RateError::BadConfig("eps grid needs at least one entry below 1".into()));
    }
    let v0 = system.chart.project(&system.initial_point).to_vec();
    let eta0 = estimate_eta0(
        &system,
        &ObservableSpec::VerticalK,
        &v0,
        &s_grid,
        config.n_paths,
        config.p,
        &config.numeric,
        derived_seed(config.seed, "eta0"),
    )?;
    let eta0_at = |s: f64| -> f64 {
        match eta0.times.iter().position(|&t| t == s) {
            Some(i) => eta0.lp_errors[i],
            None => match eta0.fitted {
                Some(fit) => fit.eval(s),
                // No usable fit: hold the profile flat beyond the grid.
                None if s <= eta0.times[0] => eta0.lp_errors[0],
                None => *eta0.lp_errors.last().unwrap(),
            },
        }
    };

    let mut rows = Vec::with_capacity(config.eps_grid.len());
    let mut errors = Vec::with_capacity(config.eps_grid.len());
    let mut std_errors = Vec::with_capacity(config.eps_grid.len());
    for &eps in &config.eps_grid {
        let samples: Vec<_> = (0..config.n_paths as u64)
            .into_par_iter()
            .map(|k| coupled_error(&system, eps, config.t_horizon, &config.numeric, &QSource::ClosedForm, config.seed, k))
            .collect::<Result<_, _>>()
            .map_err(|e| match e {
                AveragingError::ExitAtTimeZero => RateError::DegenerateExperiment { eps },
                other => RateError::Averaging(other),
            })?;
        let n = samples.len() as f64;
        let powers: Vec<f64> = samples.iter().map(|s| s.sup_error.powf(config.p)).collect();
        let mean_pow = powers.iter().sum::<f64>() / n;
        let lp = mean_pow.powf(1.0 / config.p);
        let se = if config.n_paths >= 2 && mean_pow > 0.0 {
            let var = powers.iter().map(|x| (x - mean_pow).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt() * mean_pow.powf(1.0 / config.p - 1.0) / config.p
        } else {
            0.0
        };
        let trunc_frac =
            samples.iter().filter(|s| s.truncation_cause != TruncationCause::Horizon).count() as f64 / n;
        println!(
            "eps = {eps}: L^{} sup error = {lp:.6} +- {se:.6}, truncated fraction = {trunc_frac:.3}",
            config.p
        );
        rows.push(EpsRow { eps, lp_sup_error: lp, std_error: se, trunc_frac, bound_value: 0.0 });
        errors.push(lp);
        std_errors.push(se);
    }

    let fit = fit_rate(&config.eps_grid, &errors, &std_errors)?;
    let c_hat = fit_bound_constant(&config.eps_grid, &errors, config.lambda_target, config.c_constant, config.t_horizon, eta0_at);
    for row in &mut rows {
        row.bound_value = c_hat
            * config.t_horizon
            * (row.eps.powf(config.lambda_target) + eta0_at(config.c_constant * config.t_horizon * row.eps.ln().abs()));
    }

    // Sensitivity of the bound constant to halving/doubling c. Off-grid
    // mixing arguments need the fitted decay; without one, only the central
    // value is reportable.
    let mut c_sensitivity = Vec::new();
    if eta0.fitted.is_some() {
        for factor in [0.5, 1.0, 2.0] {
            let c = factor * config.c_constant;
            let value = if factor == 1.0 {
                c_hat
            } else {
                fit_bound_constant(&config.eps_grid, &errors, config.lambda_target, c, config.t_horizon, eta0_at)
            };
            c_sensitivity.push((c, value));
        }
    } else {
        c_sensitivity.push((config.c_constant, c_hat));
    }

    Ok(RateFitResult {
        rows,
        fit,
        c_hat,
        lambda_target: config.lambda_target,
        c_constant: config.c_constant,
        p: config.p,
        t_horizon: config.t_horizon,
        n_paths: config.n_paths,
        seed: config.seed,
        eta0,
        c_sensitivity,
    })
}

pub fn write_rate_csv<W: Write>(result: &RateFitResult, mut w: W) -> std::io::Result<()> {
    writeln!(w, "eps,p,T,n_paths,lp_sup_error,std_error,trunc_frac,bound_value")?;
    for row in &result.rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            row.eps,
            result.p,
            result.t_horizon,
            result.n_paths,
            row.lp_sup_error,
            row.std_error,
            row.trunc_frac,
            row.bound_value
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::ou_lines;
    use crate::systems::OuLinesParams;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn fast_numeric() -> NumericParams {
        NumericParams { grid_step: 0.01, ..NumericParams::default() }
    }

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            system: "ou_lines".into(),
            overrides: SystemOverrides::default(),
            p: 2.0,
            t_horizon: 1.0,
            eps_grid: vec![0.4, 0.2, 0.1],
            n_paths: 16,
            lambda_target: default_lambda_target(2.0),
            c_constant: 1.0,
            seed: 42,
            numeric: fast_numeric(),
        }
    }

    #[test]
    fn lambda_ceiling_matches_exponent_arithmetic() {
        assert_eq!(lambda_ceiling(2.0), 0.25);
        assert_eq!(lambda_ceiling(4.0), 3.0 / 16.0);
        assert!(default_lambda_target(2.0) < lambda_ceiling(2.0));
    }

    #[test]
    fn c_from_k2_rearranges_the_exponent_ceiling() {
        assert_relative_eq!(c_from_k2(1.0, 2.0, 0.125).unwrap(), 0.125);
        assert_relative_eq!(c_from_k2(0.5, 2.0, 0.05).unwrap(), 0.4);
        assert!(c_from_k2(0.0, 2.0, 0.1).is_err());
        assert!(c_from_k2(1.0, 2.0, 0.25).is_err(), "lambda at the ceiling must be rejected");
    }

    #[test]
    fn partition_matches_closed_form_at_inverse_e() {
        let scheme = partition((-1.0f64).exp(), 1.0, 1.0).unwrap();
        assert_relative_eq!(scheme.delta, 1.0, max_relative = 1e-12);
        assert_eq!(scheme.n_blocks, 2);
        let b = scheme.boundaries();
        assert_eq!(b.len(), 4);
        assert_relative_eq!(b[1], 1.0, max_relative = 1e-12);
        assert_relative_eq!(b[3], 1.0f64.exp(), max_relative = 1e-12);
    }

    #[test]
    fn partition_rejects_degenerate_inputs() {
        assert!(partition(1.0, 1.0, 1.0).is_err(), "eps = 1 gives a zero step");
        assert!(partition(1.5, 1.0, 1.0).is_err());
        assert!(partition(0.0, 1.0, 1.0).is_err());
        assert!(partition(0.5, 0.0, 1.0).is_err());
        assert!(partition(0.5, 1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn partition_grid_covers_horizon_up_to_one_block(
            eps in 1e-6f64..0.999,
            c in 0.01f64..10.0,
            t in 0.01f64..1.0,
        ) {
            let scheme = partition(eps, c, t).unwrap();
            let horizon = t / eps;
            let t_n = scheme.grid_point(scheme.n_blocks);
            prop_assert!(scheme.delta > 0.0);
            prop_assert!(t_n <= horizon * (1.0 + scheme.delta * eps / t) + 1e-9 * horizon);
            // The last grid point falls short of the horizon by less than one block.
            prop_assert!(horizon - t_n < scheme.delta * (1.0 + 1e-9));
            prop_assert!(horizon - t_n >= -1e-9 * horizon);
        }
    }

    #[test]
    fn config_validation_enforces_the_admissible_interval() {
        let mut config = small_config();
        config.lambda_target = 0.3;
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("0.25"), "rejection should name the ceiling: {err}");

        let mut config = small_config();
        config.eps_grid = vec![0.1, 0.2, 0.4];
        assert!(config.validate().is_err(), "increasing grid accepted");

        let mut config = small_config();
        config.eps_grid = vec![0.4, 0.2];
        assert!(config.validate().is_err(), "two-point grid accepted");

        let mut config = small_config();
        config.n_paths = 1;
        assert!(config.validate().is_err(), "single path accepted");

        let mut config = small_config();
        config.t_horizon = 1.5;
        assert!(config.validate().is_err(), "T above 1 accepted");

        assert!(small_config().validate().is_ok());
    }

    #[test]
    fn fit_recovers_planted_power_law_exactly() {
        let eps: [f64; 4] = [0.2, 0.1, 0.05, 0.025];
        let errors: Vec<f64> = eps.iter().map(|e| 3.0 * e.powf(0.25)).collect();
        let ses = vec![0.01; 4];
        let fit = fit_rate(&eps, &errors, &ses).unwrap();
        assert!((fit.lambda_hat - 0.25).abs() <= 1e-9, "lambda_hat {}", fit.lambda_hat);
        assert!((fit.amplitude - 3.0).abs() <= 1e-9, "amplitude {}", fit.amplitude);
        assert!(fit.half_width_95 <= 1e-9, "exact data leaves no slope uncertainty");
    }

    #[test]
    fn fit_is_exact_under_unequal_weights_on_collinear_data() {
        let eps: [f64; 5] = [0.3, 0.1, 0.05, 0.02, 0.01];
        let errors: Vec<f64> = eps.iter().map(|e| 0.7 * e.powf(0.19)).collect();
        let ses: Vec<f64> = errors.iter().enumerate().map(|(i, e)| e * (0.01 + 0.02 * i as f64)).collect();
        let fit = fit_rate(&eps, &errors, &ses).unwrap();
        assert!((fit.lambda_hat - 0.19).abs() <= 1e-9);
        assert!((fit.amplitude - 0.7).abs() <= 1e-9);
    }

    #[test]
    fn fit_rejects_zero_errors_and_short_grids() {
        assert!(fit_rate(&[0.2, 0.1], &[1.0, 0.5], &[0.1, 0.1]).is_err());
        assert!(fit_rate(&[0.2, 0.1, 0.05], &[1.0, 0.0, 0.5], &[0.1; 3]).is_err());
    }

    #[test]
    fn bound_constant_recovers_planted_amplitude_without_mixing_term() {
        let eps: [f64; 4] = [0.2, 0.1, 0.05, 0.025];
        let errors: Vec<f64> = eps.iter().map(|e| 3.0 * e.powf(0.25)).collect();
        let c_hat = fit_bound_constant(&eps, &errors, 0.25, 1.0, 1.0, |_| 0.0);
        assert!((c_hat - 3.0).abs() <= 1e-12, "c_hat {c_hat}");
        // The fitted constant makes the bound dominate everywhere.
        for (&e, &err) in eps.iter().zip(&errors) {
            assert!(err <= c_hat * e.powf(0.25) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn decomposition_vanishes_without_perturbation() {
        let params = OuLinesParams { constant_k: Some(0.0), ..OuLinesParams::default() };
        let system = ou_lines(params).unwrap();
        let d = decompose_error(&system, 0.1, 1.0, 2.0, 1.0, &fast_numeric(), 3, 0).unwrap();
        assert_eq!((d.a1, d.a2, d.a3, d.total), (0.0, 0.0, 0.0, 0.0));
        assert!(!d.truncated);
    }

    #[test]
    fn decomposition_with_constant_integrand_kills_a2() {
        let params = OuLinesParams { constant_k: Some(0.8), ..OuLinesParams::default() };
        let system = ou_lines(params).unwrap();
        let d = decompose_error(&system, 0.1, 1.0, 2.0, 1.0, &fast_numeric(), 4, 0).unwrap();
        assert!(d.a1.abs() <= 1e-12, "a1 {} should vanish for a state-free integrand", d.a1);
        assert!(d.a2.abs() <= 1e-12, "a2 {} must vanish when the time average equals Q on every block", d.a2);
        assert!(d.a3.abs() <= 1e-12, "a3 {} should vanish when Q is constant", d.a3);
    }

    #[test]
    fn decomposition_identity_holds_on_defaults() {
        let system = crate::systems::builtin_system("ou_lines").unwrap();
        for k in 0..3 {
            let d = decompose_error(&system, 0.1, 1.0, 2.0, 1.0, &fast_numeric(), 5, k).unwrap();
            println!("path {k}: a1 = {:+.3e}, a2 = {:+.3e}, a3 = {:+.3e}, total = {:+.3e}", d.a1, d.a2, d.a3, d.total);
            assert!(
                d.total.abs() <= d.a1.abs() + d.a2.abs() + d.a3.abs() + 1e-12,
                "triangle inequality violated on path {k}"
            );
            assert!(d.total != 0.0, "default system should have a nonzero discrepancy");
            assert!(d.n_blocks_used >= 1);
        }
    }

    #[test]
    fn rate_experiment_errors_shrink_and_bound_dominates() {
        let result = run_rate_experiment(&small_config()).unwrap();
        assert_eq!(result.rows.len(), 3);
        for pair in result.rows.windows(2) {
            let band = 4.0 * (pair[0].std_error + pair[1].std_error);
            assert!(
                pair[1].lp_sup_error <= pair[0].lp_sup_error + band,
                "errors should not increase as eps shrinks: {} -> {} (band {band})",
                pair[0].lp_sup_error,
                pair[1].lp_sup_error
            );
        }
        for row in &result.rows {
            assert!(row.lp_sup_error >= 0.0 && row.std_error >= 0.0);
            assert!(
                row.lp_sup_error <= row.bound_value * (1.0 + 1e-12),
                "bound must dominate by construction at eps = {}",
                row.eps
            );
        }
        assert!(result.fit.lambda_hat.is_finite());
        assert_eq!(result.c_sensitivity.len(), 3);
        assert_eq!(result.c_sensitivity[1].1, result.c_hat);
        assert!(result.c_sensitivity[0].0 < result.c_constant);
        assert!(result.c_sensitivity[2].0 > result.c_constant);
    }

    #[test]
    fn rate_experiment_is_deterministic_across_thread_counts() {
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| run_rate_experiment(&small_config()).unwrap())
        };
        let a = run(1);
        let b = run(3);
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.lp_sup_error, rb.lp_sup_error);
            assert_eq!(ra.std_error, rb.std_error);
        }
        assert_eq!(a.fit.lambda_hat, b.fit.lambda_hat);
        assert_eq!(a.c_hat, b.c_hat);
    }

    #[test]
    fn rate_experiment_rejects_start_outside_region() {
        let mut config = small_config();
        config.overrides.initial = Some(vec![0.0, 5.0]);
        match run_rate_experiment(&config) {
            Err(RateError::DegenerateExperiment { eps }) => assert_eq!(eps, 0.4),
            other => panic!("expected degenerate experiment, got {other:?}"),
        }
    }

    #[test]
    fn rate_csv_has_the_documented_schema() {
        let result = run_rate_experiment(&small_config()).unwrap();
        let mut buf = Vec::new();
        write_rate_csv(&result, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "eps,p,T,n_paths,lp_sup_error,std_error,trunc_frac,bound_value");
        assert_eq!(lines.count(), 3);
        assert!(text.contains("0.4,2,1,16,"));
    }
}
