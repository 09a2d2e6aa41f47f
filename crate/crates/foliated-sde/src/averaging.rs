//! Leafwise averaging: ergodic estimates of the averaged drift Q, its mixing
//! rate, integration of the averaged transversal equation, and the coupled
//! pathwise error between the perturbed system and its averaged counterpart.

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::levy::{sample_levy_path, JumpEvent, LevyError, LevyPath};
use crate::marcus::{integrate, DriftField, JumpField, MarcusError, MarcusProblem, SamplePath};
use crate::rng::{derived_seed, stream, TAG_LEAF, TAG_TRANSVERSAL};
use crate::systems::{SystemError, TestSystem};

#[derive(Debug, Error)]
pub enum AveragingError {
    #[error("invalid averaging parameter: {0}")]
    BadParameter(String),
    #[error("transversal point {0:?} lies outside the region")]
    OutsideRegion(Vec<f64>),
    #[error("the initial projection sits outside the transversal region; both stopping times are 0")]
    ExitAtTimeZero,
    #[error("system has no closed-form averaged drift; supply a table instead")]
    NoClosedFormQ,
    #[error("averaged drift queried at v = {v}, outside the estimated table range")]
    Extrapolation { v: f64 },
    #[error("malformed Q table: {0}")]
    BadTable(String),
    #[error(transparent)]
    Marcus(#[from] MarcusError),
    #[error(transparent)]
    Levy(#[from] LevyError),
    #[error(transparent)]
    System(#[from] SystemError),
}

/// Shared numeric knobs: RK4 drift step bound, RK4 step count per jump flow,
/// and the burn-in fraction discarded by ergodic averages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericParams {
    pub grid_step: f64,
    pub ode_steps: u32,
    pub burn_in_frac: f64,
}

impl Default for NumericParams {
    fn default() -> Self {
        Self { grid_step: 1e-3, ode_steps: 64, burn_in_frac: 0.1 }
    }
}

impl NumericParams {
    fn validate(&self) -> Result<(), AveragingError> {
        if !(self.grid_step.is_finite() && self.grid_step > 0.0) {
            return Err(AveragingError::BadParameter(format!("grid_step must be positive, got {}", self.grid_step)));
        }
        if self.ode_steps == 0 {
            return Err(AveragingError::BadParameter("ode_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in_frac) {
            return Err(AveragingError::BadParameter(format!("burn-in fraction must lie in [0, 1), got {}", self.burn_in_frac)));
        }
        Ok(())
    }
}

/// What to average along the fast dynamics.
#[derive(Clone)]
pub enum ObservableSpec {
    /// The vertical part of the perturbation drift, `x -> (K(x))_vertical`;
    /// its leafwise average is the averaged drift Q, and the system's closed
    /// form (when present) is its reference value.
    VerticalK,
    /// Any user-supplied observable with an optional known average.
    Custom {
        h_id: String,
        dim: usize,
        h: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
        reference: Option<Vec<f64>>,
    },
}

impl ObservableSpec {
    pub fn h_id(&self) -> &str {
        match self {
            ObservableSpec::VerticalK => "vertical_K",
            ObservableSpec::Custom { h_id, .. } => h_id,
        }
    }

    fn output_dim(&self, system: &TestSystem) -> usize {
        match self {
            ObservableSpec::VerticalK => system.chart.transversal_dim(),
            ObservableSpec::Custom { dim, .. } => *dim,
        }
    }

    fn evaluator<'a>(&'a self, system: &TestSystem) -> Box<dyn FnMut(&[f64], &mut [f64]) + Send + 'a> {
        match self {
            ObservableSpec::VerticalK => Box::new(system.vertical_k_observable()),
            ObservableSpec::Custom { h, .. } => {
                let h = h.clone();
                Box::new(move |x: &[f64], out: &mut [f64]| h(x, out))
            }
        }
    }

    /// Known average at `v`, if one is available without simulation.
    fn reference_value(&self, system: &TestSystem, v: &[f64]) -> Option<Vec<f64>> {
        match self {
            ObservableSpec::VerticalK => system.closed_form_q.as_ref().map(|q| {
                let mut out = vec![0.0; system.chart.transversal_dim()];
                q(v, &mut out);
                out
            }),
            ObservableSpec::Custom { reference, .. } => reference.clone(),
        }
    }
}

/// Monte Carlo estimate of a leafwise average.
#[derive(Debug, Clone, Serialize)]
pub struct ErgodicEstimate {
    pub v: Vec<f64>,
    pub h_id: String,
    pub value: Vec<f64>,
    pub time_horizon: f64,
    pub replications: usize,
    /// Across-replication standard errors combined over components.
    pub std_error: f64,
}

/// Estimates the leafwise average of an observable at transversal point `v`
/// by time-averaging one long unperturbed trajectory per replication, with
/// the leading `burn_in_frac` of each trajectory discarded.
pub fn estimate_q(
    system: &TestSystem,
    observable: &ObservableSpec,
    v: &[f64],
    time_horizon: f64,
    replications: usize,
    numeric: &NumericParams,
    seed: u64,
) -> Result<ErgodicEstimate, AveragingError> {
    numeric.validate()?;
    if !system.chart.region().contains(v) {
        return Err(AveragingError::OutsideRegion(v.to_vec()));
    }
    if replications == 0 {
        return Err(AveragingError::BadParameter("replications must be >= 1".into()));
    }
    let burn_in = numeric.burn_in_frac * time_horizon;
    if !(time_horizon.is_finite() && time_horizon > burn_in) {
        return Err(AveragingError::BadParameter(format!(
            "time_horizon {time_horizon} must exceed the burn-in {burn_in}"
        )));
    }
    let out_dim = observable.output_dim(system);
    let n = system.chart.leaf_dim();
    let mut initial = system.initial_point.clone();
    initial[n..].copy_from_slice(v);

    let per_rep: Vec<Vec<f64>> = (0..replications as u64)
        .into_par_iter()
        .map(|rep| -> Result<Vec<f64>, AveragingError> {
            let levy_path = sample_levy_path(&system.nu, time_horizon, &mut stream(seed, rep, TAG_LEAF))?;
            let problem = MarcusProblem {
                drift: system.fields.f0.clone(),
                jump_field: system.fields.f.clone(),
                initial_point: initial.clone(),
                levy_path,
                horizon: time_horizon,
                grid_step: numeric.grid_step,
                ode_steps: numeric.ode_steps,
                forced_times: vec![burn_in],
            };
            let path = integrate(&problem, None)?;
            Ok(path.average_observable(observable.evaluator(system), out_dim, burn_in, time_horizon)?)
        })
        .collect::<Result<_, _>>()?;

    let (value, std_error) = mean_and_combined_se(&per_rep);
    Ok(ErgodicEstimate {
        v: v.to_vec(),
        h_id: observable.h_id().to_string(),
        value,
        time_horizon,
        replications,
        std_error,
    })
}

/// Componentwise mean over replications and the l2-combined standard error of
/// the mean. Reduction is in fixed index order, so results are bit-stable for
/// a given replication list regardless of thread count.
fn mean_and_combined_se(per_rep: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let r = per_rep.len();
    let dim = per_rep[0].len();
    let mut mean = vec![0.0; dim];
    for rep in per_rep {
        for (m, x) in mean.iter_mut().zip(rep) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= r as f64;
    }
    if r < 2 {
        return (mean, 0.0);
    }
    let mut se_sq = 0.0;
    for k in 0..dim {
        let var = per_rep.iter().map(|rep| (rep[k] - mean[k]).powi(2)).sum::<f64>() / (r - 1) as f64;
        se_sq += var / r as f64;
    }
    (mean, se_sq.sqrt())
}

/// Fitted decay law for the mixing-rate profile.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum DecayFit {
    /// `amplitude * exp(-rate * t)`
    Exponential { amplitude: f64, rate: f64 },
    /// `amplitude * t^(-exponent)`
    Power { amplitude: f64, exponent: f64 },
}

impl DecayFit {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            DecayFit::Exponential { amplitude, rate } => amplitude * (-rate * t).exp(),
            DecayFit::Power { amplitude, exponent } => amplitude * t.powf(-exponent),
        }
    }
}

/// L^p deviation of running time averages from the reference average, per
/// grid time, with the better of an exponential and a power-law fit.
#[derive(Debug, Clone, Serialize)]
pub struct MixingRateEstimate {
    pub times: Vec<f64>,
    pub lp_errors: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub p: f64,
    pub replications: usize,
    /// None when the grid has fewer than 2 points or some error is exactly 0.
    pub fitted: Option<DecayFit>,
}

/// Estimates the decay profile of the L^p deviation
/// `(E | (1/t) int_0^t h(X_s) ds - Qh |^p)^(1/p)` over `time_grid`.
///
/// The reference average comes from the closed form when the observable has
/// one, else from a 10x-longer reference run seeded independently of the
/// replication streams.
pub fn estimate_eta0(
    system: &TestSystem,
    observable: &ObservableSpec,
    v: &[f64],
    time_grid: &[f64],
    replications: usize,
    p: f64,
    numeric: &NumericParams,
    seed: u64,
) -> Result<MixingRateEstimate, AveragingError> {
    numeric.validate()?;
    if !system.chart.region().contains(v) {
        return Err(AveragingError::OutsideRegion(v.to_vec()));
    }
    if time_grid.is_empty() || !time_grid.windows(2).all(|w| w[0] < w[1]) || time_grid[0] <= 0.0 {
        return Err(AveragingError::BadParameter("time_grid must be positive and strictly increasing".into()));
    }
    if !(p.is_finite() && p >= 2.0) {
        return Err(AveragingError::BadParameter(format!("p must satisfy p >= 2, got {p}")));
    }
    if replications == 0 {
        return Err(AveragingError::BadParameter("replications must be >= 1".into()));
    }
    let t_max = *time_grid.last().unwrap();
    let out_dim = observable.output_dim(system);

    let reference = match observable.reference_value(system, v) {
        Some(q) => q,
        None => {
            estimate_q(
                system,
                observable,
                v,
                10.0 * t_max,
                replications,
                numeric,
                derived_seed(seed, "eta0-reference"),
            )?
            .value
        }
    };

    let n = system.chart.leaf_dim();
    let mut initial = system.initial_point.clone();
    initial[n..].copy_from_slice(v);

    // Per replication: one path, running averages read off at every grid time.
    let per_rep: Vec<Vec<f64>> = (0..replications as u64)
        .into_par_iter()
        .map(|rep| -> Result<Vec<f64>, AveragingError> {
            let levy_path = sample_levy_path(&system.nu, t_max, &mut stream(seed, rep, TAG_LEAF))?;
            let problem = MarcusProblem {
                drift: system.fields.f0.clone(),
                jump_field: system.fields.f.clone(),
                initial_point: initial.clone(),
                levy_path,
                horizon: t_max,
                grid_step: numeric.grid_step,
                ode_steps: numeric.ode_steps,
                forced_times: time_grid.to_vec(),
            };
            let path = integrate(&problem, None)?;
            let mut h = observable.evaluator(system);
            let mut deviations = Vec::with_capacity(time_grid.len());
            let mut acc = vec![0.0; out_dim];
            let mut prev_t = 0.0;
            for &t in time_grid {
                let piece = path.integrate_observable(&mut h, out_dim, prev_t, t)?;
                for (a, x) in acc.iter_mut().zip(&piece) {
                    *a += x;
                }
                prev_t = t;
                let dev_sq: f64 = acc.iter().zip(&reference).map(|(a, q)| (a / t - q) * (a / t - q)).sum();
                deviations.push(dev_sq.sqrt());
            }
            Ok(deviations)
        })
        .collect::<Result<_, _>>()?;

    let mut lp_errors = Vec::with_capacity(time_grid.len());
    let mut std_errors = Vec::with_capacity(time_grid.len());
    for k in 0..time_grid.len() {
        let powers: Vec<f64> = per_rep.iter().map(|rep| rep[k].powf(p)).collect();
        let mean_pow = powers.iter().sum::<f64>() / replications as f64;
        let lp = mean_pow.powf(1.0 / p);
        let se = if replications >= 2 && mean_pow > 0.0 {
            let var = powers.iter().map(|x| (x - mean_pow).powi(2)).sum::<f64>() / (replications - 1) as f64;
            (var / replications as f64).sqrt() * mean_pow.powf(1.0 / p - 1.0) / p
        } else {
            0.0
        };
        lp_errors.push(lp);
        std_errors.push(se);
    }

    let fitted = fit_decay(time_grid, &lp_errors);
    Ok(MixingRateEstimate {
        times: time_grid.to_vec(),
        lp_errors,
        std_errors,
        p,
        replications,
        fitted,
    })
}

/// Ordinary least squares of `y` on `x`; returns (intercept, slope, ssr).
pub(crate) fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|xi| (xi - mx) * (xi - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(xi, yi)| (xi - mx) * (yi - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = x.iter().zip(y).map(|(xi, yi)| (yi - intercept - slope * xi).powi(2)).sum();
    (intercept, slope, ssr)
}

fn fit_decay(times: &[f64], errors: &[f64]) -> Option<DecayFit> {
    if times.len() < 2 || errors.iter().any(|&e| e <= 0.0) {
        return None;
    }
    let log_e: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let (a_exp, b_exp, ssr_exp) = least_squares(times, &log_e);
    let log_t: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let (a_pow, b_pow, ssr_pow) = least_squares(&log_t, &log_e);
    if ssr_exp <= ssr_pow {
        Some(DecayFit::Exponential { amplitude: a_exp.exp(), rate: -b_exp })
    } else {
        Some(DecayFit::Power { amplitude: a_pow.exp(), exponent: -b_pow })
    }
}

/// Piecewise-linear table of the averaged drift on a scalar transversal grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QTable {
    pub v_grid: Vec<f64>,
    pub q_values: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub time_horizon: f64,
    pub replications: usize,
}

impl QTable {
    pub fn new(
        v_grid: Vec<f64>,
        q_values: Vec<f64>,
        std_errors: Vec<f64>,
        time_horizon: f64,
        replications: usize,
    ) -> Result<Self, AveragingError> {
        if v_grid.len() < 2 {
            return Err(AveragingError::BadTable("need at least 2 grid points to interpolate".into()));
        }
        if v_grid.len() != q_values.len() || v_grid.len() != std_errors.len() {
            return Err(AveragingError::BadTable("column lengths disagree".into()));
        }
        if !v_grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(AveragingError::BadTable("v grid must be strictly increasing".into()));
        }
        Ok(Self { v_grid, q_values, std_errors, time_horizon, replications })
    }

    /// Piecewise-linear interpolation; `None` outside the grid range.
    pub fn interpolate(&self, v: f64) -> Option<f64> {
        if v < self.v_grid[0] || v > *self.v_grid.last().unwrap() {
            return None;
        }
        let idx = self.v_grid.partition_point(|&g| g < v).min(self.v_grid.len() - 1).max(1);
        let (v0, v1) = (self.v_grid[idx - 1], self.v_grid[idx]);
        let (q0, q1) = (self.q_values[idx - 1], self.q_values[idx]);
        Some(q0 + (q1 - q0) * (v - v0) / (v1 - v0))
    }
}

/// Builds a [`QTable`] by running [`estimate_q`] at every grid point with
/// common random numbers across points.
pub fn build_q_table(
    system: &TestSystem,
    v_grid: &[f64],
    time_horizon: f64,
    replications: usize,
    numeric: &NumericParams,
    seed: u64,
) -> Result<QTable, AveragingError> {
    if v_grid.len() < 2 {
        return Err(AveragingError::BadTable("need at least 2 grid points to interpolate".into()));
    }
    if system.chart.transversal_dim() != 1 {
        return Err(AveragingError::BadTable("tables cover scalar transversal coordinates only".into()));
    }
    let mut q_values = Vec::with_capacity(v_grid.len());
    let mut std_errors = Vec::with_capacity(v_grid.len());
    for &v in v_grid {
        let est = estimate_q(system, &ObservableSpec::VerticalK, &[v], time_horizon, replications, numeric, seed)?;
        q_values.push(est.value[0]);
        std_errors.push(est.std_error);
    }
    QTable::new(v_grid.to_vec(), q_values, std_errors, time_horizon, replications)
}

pub fn write_q_table_csv<W: Write>(table: &QTable, mut w: W) -> std::io::Result<()> {
    writeln!(w, "v,Q,std_error,horizon,reps")?;
    for i in 0..table.v_grid.len() {
        writeln!(
            w,
            "{},{},{},{},{}",
            table.v_grid[i], table.q_values[i], table.std_errors[i], table.time_horizon, table.replications
        )?;
    }
    Ok(())
}

pub fn read_q_table_csv<R: BufRead>(r: R) -> Result<QTable, AveragingError> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| AveragingError::BadTable("empty file".into()))?
        .map_err(|e| AveragingError::BadTable(e.to_string()))?;
    if header.trim() != "v,Q,std_error,horizon,reps" {
        return Err(AveragingError::BadTable(format!("unexpected header {header:?}")));
    }
    let mut v_grid = Vec::new();
    let mut q_values = Vec::new();
    let mut std_errors = Vec::new();
    let mut horizon = 0.0;
    let mut reps = 0usize;
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| AveragingError::BadTable(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(AveragingError::BadTable(format!("row {}: expected 5 columns, got {}", lineno + 2, fields.len())));
        }
        let parse = |s: &str, what: &str| -> Result<f64, AveragingError> {
            s.trim().parse::<f64>().map_err(|_| AveragingError::BadTable(format!("row {}: bad {what} {s:?}", lineno + 2)))
        };
        v_grid.push(parse(fields[0], "v")?);
        q_values.push(parse(fields[1], "Q")?);
        std_errors.push(parse(fields[2], "std_error")?);
        horizon = parse(fields[3], "horizon")?;
        reps = parse(fields[4], "reps")? as usize;
    }
    QTable::new(v_grid, q_values, std_errors, horizon, reps)
}

pub fn write_eta0_csv<W: Write>(estimate: &MixingRateEstimate, mut w: W) -> std::io::Result<()> {
    writeln!(w, "t,lp_error,std_error")?;
    for i in 0..estimate.times.len() {
        writeln!(w, "{},{},{}", estimate.times[i], estimate.lp_errors[i], estimate.std_errors[i])?;
    }
    Ok(())
}

/// Where the averaged equation's drift comes from.
#[derive(Clone)]
pub enum QSource<'a> {
    ClosedForm,
    Table(&'a QTable),
}

/// Integrates the averaged transversal equation `dw = Q(w) dt + Ktilde(w) o dZ`
/// from `v0`, driven by the SUPPLIED transversal path, and records the first
/// exit from the region. `forced_times` become exact grid nodes, which the
/// coupled-error comparison relies on.
pub fn integrate_averaged(
    system: &TestSystem,
    q_source: &QSource,
    v0: &[f64],
    t_horizon: f64,
    levy_path_tilde: &LevyPath,
    numeric: &NumericParams,
    forced_times: Vec<f64>,
) -> Result<SamplePath, AveragingError> {
    numeric.validate()?;
    if !system.chart.region().contains(v0) {
        return Err(AveragingError::OutsideRegion(v0.to_vec()));
    }
    let d = system.chart.transversal_dim();
    let out_of_range: Arc<AtomicBool> = Arc::new(AtomicBool::new(false));
    let offending: Arc<AtomicU64> = Arc::new(AtomicU64::new(0));

    let drift: DriftField = match q_source {
        QSource::ClosedForm => system.closed_form_q.clone().ok_or(AveragingError::NoClosedFormQ)?,
        QSource::Table(table) => {
            if d != 1 {
                return Err(AveragingError::BadTable("tables cover scalar transversal coordinates only".into()));
            }
            let table = (*table).clone();
            let flag = out_of_range.clone();
            let bits = offending.clone();
            Arc::new(move |v: &[f64], out: &mut [f64]| match table.interpolate(v[0]) {
                Some(q) => out[0] = q,
                None => {
                    // Poison the state so integration aborts promptly; the flag
                    // converts the abort into an extrapolation error below.
                    if !flag.swap(true, Ordering::Relaxed) {
                        bits.store(v[0].to_bits(), Ordering::Relaxed);
                    }
                    out[0] = f64::NAN;
                }
            })
        }
    };

    let ktilde = system.fields.ktilde.clone();
    let jump_field: JumpField = Arc::new(move |v: &[f64], z: &[f64], out: &mut [f64]| ktilde(v, z, out));

    let problem = MarcusProblem {
        drift,
        jump_field,
        initial_point: v0.to_vec(),
        levy_path: levy_path_tilde.clone(),
        horizon: t_horizon,
        grid_step: numeric.grid_step,
        ode_steps: numeric.ode_steps,
        forced_times,
    };
    let region = system.chart.region().clone();
    let inside = move |v: &[f64]| region.contains(v);
    let result = integrate(&problem, Some(&inside));
    if out_of_range.load(Ordering::Relaxed) {
        return Err(AveragingError::Extrapolation { v: f64::from_bits(offending.load(Ordering::Relaxed)) });
    }
    Ok(result?)
}

/// Why a coupled comparison stopped where it did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationCause {
    Horizon,
    TauExit,
    SigmaExit,
}

/// One coupled realization: the sup distance between the rescaled perturbed
/// projection and the averaged path, up to the first of horizon, rescaled
/// perturbed exit, and averaged exit.
#[derive(Debug, Clone, Serialize)]
pub struct CoupledErrorSample {
    pub eps: f64,
    pub t_horizon: f64,
    pub sup_error: f64,
    pub truncation_cause: TruncationCause,
    pub truncation_time: f64,
}

/// Simulates one coupled pair and returns the sup-distance sample.
///
/// One transversal path is drawn on `[0, T]` and drives both sides: the
/// perturbed system on the fast clock receives the field `eps * Ktilde` with
/// the original jump vectors at times `t/eps`, while the averaged equation
/// receives the field `Ktilde` with the vectors scaled by `eps` at times `t`.
/// Both readings apply the identical jump map (the increment ODE is linear in
/// its jump argument), which is what makes the pathwise comparison converge;
/// the averaged side's jump law is the eps-scaled one as a consequence.
/// The distance is evaluated on the union of a uniform grid of `grid_step`
/// multiples, the transversal jump times (pre- and post-jump values), and the
/// stop time itself.
pub fn coupled_error(
    system: &TestSystem,
    eps: f64,
    t_horizon: f64,
    numeric: &NumericParams,
    q_source: &QSource,
    seed: u64,
    path_index: u64,
) -> Result<CoupledErrorSample, AveragingError> {
    numeric.validate()?;
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(AveragingError::BadParameter(format!("eps must lie in (0, 1], got {eps}")));
    }
    if !(0.0..=1.0).contains(&t_horizon) {
        return Err(AveragingError::BadParameter(format!("T must lie in [0, 1], got {t_horizon}")));
    }
    let n = system.chart.leaf_dim();
    let d = system.chart.transversal_dim();
    let v0 = system.chart.project(&system.initial_point).to_vec();
    if !system.chart.region().contains(&v0) {
        return Err(AveragingError::ExitAtTimeZero);
    }
    if t_horizon == 0.0 {
        return Ok(CoupledErrorSample {
            eps,
            t_horizon,
            sup_error: 0.0,
            truncation_cause: TruncationCause::Horizon,
            truncation_time: 0.0,
        });
    }

    let zt_path = sample_levy_path(&system.nu_prime, t_horizon, &mut stream(seed, path_index, TAG_TRANSVERSAL))?;
    let fast_horizon = t_horizon / eps;
    let z_path = sample_levy_path(&system.nu, fast_horizon, &mut stream(seed, path_index, TAG_LEAF))?;

    // Comparison grid in slow time: uniform nodes, transversal jump times, T.
    let mut grid: Vec<f64> = Vec::new();
    let k_max = (t_horizon / numeric.grid_step).ceil() as usize;
    for k in 1..k_max {
        grid.push(k as f64 * numeric.grid_step);
    }
    grid.push(t_horizon);
    for e in &zt_path.events {
        grid.push(e.time);
    }
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite grid times"));
    grid.dedup();

    // Fast-clock images, shared verbatim between the stacked event list and
    // the forced grid so lookups hit exact nodes.
    let fast_grid: Vec<f64> = grid.iter().map(|t| t / eps).collect();

    let r = system.fields.leaf_jump_dim;
    let rt = system.fields.transversal_jump_dim;
    let stacked_path = stack_drivers(&z_path, &zt_path, eps, r, rt);

    let x_problem = MarcusProblem {
        drift: perturbed_drift(system, eps),
        jump_field: stacked_jump_field(system, eps),
        initial_point: system.initial_point.clone(),
        levy_path: stacked_path,
        horizon: fast_horizon,
        grid_step: numeric.grid_step,
        ode_steps: numeric.ode_steps,
        forced_times: fast_grid.clone(),
    };
    let chart = system.chart.clone();
    let inside = move |x: &[f64]| chart.transversal_inside(x);
    let x_path = integrate(&x_problem, Some(&inside))?;

    let w_path = integrate_averaged(
        system,
        q_source,
        &v0,
        t_horizon,
        &zt_path.scale_jumps(eps),
        numeric,
        grid.clone(),
    )?;

    let tau_slow = x_path.exit.map(|e| e.time * eps).unwrap_or(f64::INFINITY);
    let sigma = w_path.exit.map(|e| e.time).unwrap_or(f64::INFINITY);
    let t_stop = t_horizon.min(tau_slow).min(sigma);
    let truncation_cause = if t_stop >= t_horizon {
        TruncationCause::Horizon
    } else if tau_slow <= sigma {
        TruncationCause::TauExit
    } else {
        TruncationCause::SigmaExit
    };
    if t_stop == 0.0 && truncation_cause != TruncationCause::Horizon {
        return Err(AveragingError::ExitAtTimeZero);
    }

    let mut sup_error = 0.0f64;
    let mut compare = |x_state: &[f64], w_state: &[f64]| {
        let dist_sq: f64 = x_state[n..n + d].iter().zip(w_state).map(|(a, b)| (a - b) * (a - b)).sum();
        sup_error = sup_error.max(dist_sq.sqrt());
    };
    for (t, t_fast) in grid.iter().zip(&fast_grid) {
        if *t > t_stop {
            break;
        }
        compare(x_path.state_at(*t_fast), w_path.state_at(*t));
    }
    for e in &zt_path.events {
        if e.time > t_stop {
            break;
        }
        compare(x_path.left_limit_at(e.time / eps), w_path.left_limit_at(e.time));
    }

    Ok(CoupledErrorSample { eps, t_horizon, sup_error, truncation_cause, truncation_time: t_stop })
}

/// Drift of the perturbed system: `F0 + eps * K`.
pub fn perturbed_drift(system: &TestSystem, eps: f64) -> DriftField {
    let f0 = system.fields.f0.clone();
    let k = system.fields.k.clone();
    let dim = system.chart.state_dim();
    assert!(dim <= MAX_STACK_DIM, "state dimension above the stack-buffer bound");
    Arc::new(move |x: &[f64], out: &mut [f64]| {
        let mut a = [0.0; MAX_STACK_DIM];
        f0(x, out);
        k(x, &mut a[..dim]);
        for i in 0..dim {
            out[i] += eps * a[i];
        }
    })
}

/// Joint jump field for the stacked driver `(z, ztilde)`: the leaf field acts
/// on the first block, `eps * Ktilde` on the second, writing into the
/// vertical coordinates. Events carrying only one block leave the other
/// fields evaluated at zero, which vanishes exactly for fields linear in z.
pub fn stacked_jump_field(system: &TestSystem, eps: f64) -> JumpField {
    let f = system.fields.f.clone();
    let ktilde = system.fields.ktilde.clone();
    let n = system.chart.leaf_dim();
    let d = system.chart.transversal_dim();
    let r = system.fields.leaf_jump_dim;
    let rt = system.fields.transversal_jump_dim;
    assert!(d <= MAX_STACK_DIM, "transversal dimension above the stack-buffer bound");
    Arc::new(move |x: &[f64], zhat: &[f64], out: &mut [f64]| {
        let mut kt = [0.0; MAX_STACK_DIM];
        f(x, &zhat[..r], out);
        ktilde(&x[n..n + d], &zhat[r..r + rt], &mut kt[..d]);
        for j in 0..d {
            out[n + j] += eps * kt[j];
        }
    })
}

const MAX_STACK_DIM: usize = 8;

/// Merges a leaf driver path (fast clock) with a transversal driver path
/// (slow clock, times mapped through `t/eps`) into one stacked event list.
/// Exact time collisions combine into a single joint event.
pub fn stack_drivers(z_path: &LevyPath, zt_path: &LevyPath, eps: f64, r: usize, rt: usize) -> LevyPath {
    let mut events: Vec<JumpEvent> = Vec::with_capacity(z_path.events.len() + zt_path.events.len());
    let mut i = 0;
    let mut j = 0;
    while i < z_path.events.len() || j < zt_path.events.len() {
        let t_z = z_path.events.get(i).map(|e| e.time).unwrap_or(f64::INFINITY);
        let t_zt = zt_path.events.get(j).map(|e| e.time / eps).unwrap_or(f64::INFINITY);
        let mut jump = vec![0.0; r + rt];
        let time = if t_z < t_zt {
            jump[..r].copy_from_slice(&z_path.events[i].jump);
            i += 1;
            t_z
        } else if t_zt < t_z {
            jump[r..].copy_from_slice(&zt_path.events[j].jump);
            j += 1;
            t_zt
        } else {
            jump[..r].copy_from_slice(&z_path.events[i].jump);
            jump[r..].copy_from_slice(&zt_path.events[j].jump);
            i += 1;
            j += 1;
            t_z
        };
        events.push(JumpEvent { time, jump });
    }
    LevyPath { horizon: z_path.horizon.max(zt_path.horizon / eps), events }
}
