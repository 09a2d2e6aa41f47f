//! Nonlinear Gronwall machinery: the integral-inequality comparison bound,
//! its coefficient functions, brute-force maximal solutions of the equality
//! version, and a dominance report between the two.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BihariError {
    #[error("invalid comparison problem: {0}")]
    BadProblem(String),
    #[error("smallness violated: eps*T = {eps_t} exceeds the threshold {threshold}")]
    SmallnessViolation { eps_t: f64, threshold: f64 },
    #[error("fixed-point iteration failed to converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("dominance fails at t = {t}: maximal solution {psi} exceeds bound {bound}")]
    DominanceFailure { t: f64, psi: f64, bound: f64 },
}

/// The comparison problem `Psi(t) <= eps c t^p + eps c int_0^t (Psi + Psi^{(p-1)/p})`
/// on `[0, T]`, discretized on a uniform grid of `grid_points` intervals.
///
/// The comparison bound's derivation assumes `eps t` small; that regime is
/// made concrete by the stored threshold: `eps * T` up to `smallness_threshold`
/// (default 0.1) is accepted, anything larger rejected. `eps = 0` is allowed
/// as the degenerate case where everything vanishes.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BihariProblem {
    pub p: f64,
    pub eps: f64,
    pub c: f64,
    pub t_horizon: f64,
    pub grid_points: usize,
    pub smallness_threshold: f64,
    /// Diagnostic switch: drop the `Psi^{(p-1)/p}` term, leaving a linear
    /// Volterra equation with a closed-form solution.
    pub drop_root_term: bool,
}

impl BihariProblem {
    pub fn new(p: f64, eps: f64, c: f64, t_horizon: f64, grid_points: usize) -> Result<Self, BihariError> {
        let problem = Self {
            p,
            eps,
            c,
            t_horizon,
            grid_points,
            smallness_threshold: 0.1,
            drop_root_term: false,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<(), BihariError> {
        if !(self.p.is_finite() && self.p >= 2.0) {
            return Err(BihariError::BadProblem(format!("p must satisfy p >= 2, got {}", self.p)));
        }
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return Err(BihariError::BadProblem(format!("eps must be nonnegative, got {}", self.eps)));
        }
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(BihariError::BadProblem(format!("c must be positive, got {}", self.c)));
        }
        if !(self.t_horizon.is_finite() && self.t_horizon > 0.0) {
            return Err(BihariError::BadProblem(format!("T must be positive, got {}", self.t_horizon)));
        }
        if self.grid_points < 10 {
            return Err(BihariError::BadProblem(format!("grid needs at least 10 intervals, got {}", self.grid_points)));
        }
        let eps_t = self.eps * self.t_horizon;
        if eps_t > self.smallness_threshold {
            return Err(BihariError::SmallnessViolation { eps_t, threshold: self.smallness_threshold });
        }
        Ok(())
    }

    fn times(&self) -> Vec<f64> {
        let h = self.t_horizon / self.grid_points as f64;
        (0..=self.grid_points).map(|i| i as f64 * h).collect()
    }
}

/// Coefficient functions instantiated by the comparison bound's proof:
/// `a` and `A` are evaluated by quadrature from their defining integrals so
/// the closed forms used downstream can be tested against them.
#[derive(Debug, Clone, Copy)]
pub struct PachpatteCoefficients {
    pub p: f64,
    pub eps: f64,
    pub c: f64,
}

impl PachpatteCoefficients {
    pub fn new(problem: &BihariProblem) -> Self {
        Self { p: problem.p, eps: problem.eps, c: problem.c }
    }

    /// `a(t) = 1 + eps c int_0^t exp(eps c (t - s)) ds`, by quadrature.
    /// Closed form: `exp(eps c t)`.
    pub fn a(&self, t: f64) -> f64 {
        let ec = self.eps * self.c;
        1.0 + ec * simpson(|s| (ec * (t - s)).exp(), 0.0, t, 200)
    }

    /// `A(t) = eps c int_0^t (a(s) e(s))^{(p-1)/p} ds` with `e(s) = c eps s^p`,
    /// by quadrature against the closed-form `a`.
    pub fn capital_a(&self, t: f64) -> f64 {
        let ec = self.eps * self.c;
        let q = (self.p - 1.0) / self.p;
        ec * simpson(|s| ((ec * s).exp() * self.c * self.eps * s.powf(self.p)).powf(q), 0.0, t, 200)
    }

    /// `F(t) = int_0^t s^{-(p-1)/p} ds = p t^{1/p}`.
    pub fn f(&self, t: f64) -> f64 {
        self.p * t.powf(1.0 / self.p)
    }

    /// `F^{-1}(t) = t^p / p^p`.
    pub fn f_inverse(&self, t: f64) -> f64 {
        t.powf(self.p) / self.p.powf(self.p)
    }

    /// Upper end of the interval where the bound's composition is defined;
    /// this instantiation of `F^{-1}` is globally defined, so no finite guard.
    pub fn t2(&self) -> f64 {
        f64::INFINITY
    }
}

/// Composite Simpson quadrature with `panels` even subdivisions.
fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, panels: usize) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    let n = panels + panels % 2;
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let weight = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += weight * f(lo + i as f64 * h);
    }
    acc * h / 3.0
}

/// Constant assembled from the comparison bound's proof chain: the outer
/// `a(T) = exp(eps c T)` factor times the three term coefficients (the
/// inhomogeneity, the `A`-term after the power-mean split, and the linear
/// remainder term), each dominated through the `eps t^p` shape term.
pub fn chain_constant(problem: &BihariProblem) -> f64 {
    let p = problem.p;
    let c = problem.c;
    let outer = (problem.eps * c * problem.t_horizon).exp();
    outer
        * (c + 2f64.powf(p) * c.powf((2.0 * p - 1.0) / p) / p
            + 2f64.powf(p - 1.0) * (2.0 * c / p).powf(p))
}

/// The two terms of the bound's shape `(eps t^p, t^p (eps t)^{(p-1)/p})`.
pub fn bound_shape_terms(problem: &BihariProblem, t: f64) -> (f64, f64) {
    let tp = t.powf(problem.p);
    (problem.eps * tp, tp * (problem.eps * t).powf((problem.p - 1.0) / problem.p))
}

/// Evaluates the comparison bound `C (eps t^p + t^p (eps t)^{(p-1)/p})` with
/// the proof-chain constant.
pub fn corollary_bound(problem: &BihariProblem, t: f64) -> Result<f64, BihariError> {
    problem.validate()?;
    if !(0.0..=problem.t_horizon).contains(&t) {
        return Err(BihariError::BadProblem(format!("t = {t} outside [0, {}]", problem.t_horizon)));
    }
    let (first, second) = bound_shape_terms(problem, t);
    Ok(chain_constant(problem) * (first + second))
}

/// The maximal solution table on the problem's uniform grid.
#[derive(Debug, Clone, Serialize)]
pub struct MaximalSolutionTable {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub iterations: usize,
}

const MAX_ITERATIONS: usize = 10_000;
const FIXED_POINT_TOL: f64 = 1e-12;

/// Solves the equality version
/// `Psi(t) = eps c t^p + eps c int_0^t (Psi + Psi^{(p-1)/p}) ds`
/// by fixed-point iteration with trapezoidal quadrature, started from the
/// inhomogeneity. Every function satisfying the inequality lies below this
/// solution pointwise (the integral operator is monotone), so the table is
/// the right object to test dominance against.
pub fn maximal_solution(problem: &BihariProblem) -> Result<MaximalSolutionTable, BihariError> {
    problem.validate()?;
    let times = problem.times();
    let h = problem.t_horizon / problem.grid_points as f64;
    let ec = problem.eps * problem.c;
    let q = (problem.p - 1.0) / problem.p;
    let inhomogeneity: Vec<f64> = times.iter().map(|t| ec * t.powf(problem.p)).collect();
    let mut psi = inhomogeneity.clone();
    let mut next = vec![0.0; psi.len()];

    for iteration in 1..=MAX_ITERATIONS {
        // Prefix trapezoid of the integrand along the grid.
        let integrand = |v: f64| if problem.drop_root_term { v } else { v + v.powf(q) };
        let mut acc = 0.0;
        next[0] = inhomogeneity[0];
        for i in 1..psi.len() {
            acc += 0.5 * h * (integrand(psi[i - 1]) + integrand(psi[i]));
            next[i] = inhomogeneity[i] + ec * acc;
        }
        let mut residual = 0.0f64;
        for (a, b) in psi.iter().zip(&next) {
            residual = residual.max((a - b).abs());
        }
        std::mem::swap(&mut psi, &mut next);
        if !residual.is_finite() || residual > 1e12 {
            return Err(BihariError::NonConvergence { iterations: iteration, residual });
        }
        if residual < FIXED_POINT_TOL {
            return Ok(MaximalSolutionTable { times, values: psi, iterations: iteration });
        }
    }
    Err(BihariError::NonConvergence { iterations: MAX_ITERATIONS, residual: f64::NAN })
}

/// Dominance comparison between the maximal solution and the bound.
#[derive(Debug, Clone, Serialize)]
pub struct DominanceReport {
    pub times: Vec<f64>,
    pub psi_star: Vec<f64>,
    pub bound: Vec<f64>,
    /// Pointwise margins `bound - psi_star`; all nonnegative on success.
    pub margins: Vec<f64>,
    pub chain_constant: f64,
    /// Smallest constant making the bound's shape dominate across the whole
    /// grid: the max of `psi_star / shape` over positive grid times. Fitting
    /// at `t = T` alone cannot work here because the ratio profile decreases
    /// toward the horizon (it approaches `c` at 0+), so the grid-wide max is
    /// the smallest pointwise-valid constant.
    pub fitted_constant: f64,
    /// Ratio at the horizon, for comparison with the fitted constant.
    pub ratio_at_horizon: f64,
    pub min_margin: f64,
}

/// Computes the maximal solution, checks it against the proof-chain bound at
/// every grid point, and reports the margin profile together with the
/// smallest empirically sufficient constant.
pub fn verify_dominance(problem: &BihariProblem) -> Result<DominanceReport, BihariError> {
    let table = maximal_solution(problem)?;
    let chain = chain_constant(problem);
    let mut bound = Vec::with_capacity(table.times.len());
    let mut margins = Vec::with_capacity(table.times.len());
    let mut fitted = 0.0f64;
    let mut ratio_at_horizon = 0.0;
    let mut min_margin = f64::INFINITY;
    for (&t, &psi) in table.times.iter().zip(&table.values) {
        let (first, second) = bound_shape_terms(problem, t);
        let shape = first + second;
        let b = chain * shape;
        let margin = b - psi;
        if margin < 0.0 {
            return Err(BihariError::DominanceFailure { t, psi, bound: b });
        }
        if shape > 0.0 {
            let ratio = psi / shape;
            fitted = fitted.max(ratio);
            ratio_at_horizon = ratio;
        }
        min_margin = min_margin.min(margin);
        bound.push(b);
        margins.push(margin);
    }
    Ok(DominanceReport {
        times: table.times,
        psi_star: table.values,
        bound,
        margins,
        chain_constant: chain,
        fitted_constant: fitted,
        ratio_at_horizon,
        min_margin,
    })
}

/// One row per grid time: the maximal solution, the bound, and the margin.
pub fn write_dominance_csv<W: Write>(report: &DominanceReport, mut w: W) -> std::io::Result<()> {
    writeln!(w, "t,psi_star,bound,margin")?;
    for i in 0..report.times.len() {
        writeln!(w, "{},{},{},{}", report.times[i], report.psi_star[i], report.bound[i], report.margins[i])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn default_problem() -> BihariProblem {
        BihariProblem::new(2.0, 0.05, 1.0, 1.0, 100).unwrap()
    }

    // Closed form of the linear variant at p = 2: differentiating
    // Psi = eps c t^2 + eps c int Psi gives Psi' = 2 eps c t + eps c Psi,
    // solved by (2/(eps c)) (exp(eps c t) - 1 - eps c t).
    fn linear_oracle(eps: f64, c: f64, t: f64) -> f64 {
        let a = eps * c;
        (2.0 / a) * ((a * t).exp() - 1.0 - a * t)
    }

    #[test]
    fn problem_validation_enforces_smallness_and_resolution() {
        assert!(BihariProblem::new(2.0, 0.05, 1.0, 1.0, 9).is_err(), "m = 9 accepted");
        assert!(BihariProblem::new(1.5, 0.05, 1.0, 1.0, 100).is_err(), "p < 2 accepted");
        assert!(BihariProblem::new(2.0, -0.1, 1.0, 1.0, 100).is_err(), "negative eps accepted");
        assert!(BihariProblem::new(2.0, 0.05, 0.0, 1.0, 100).is_err(), "c = 0 accepted");
        match BihariProblem::new(2.0, 0.2, 1.0, 1.0, 100) {
            Err(BihariError::SmallnessViolation { eps_t, threshold }) => {
                assert_relative_eq!(eps_t, 0.2);
                assert_relative_eq!(threshold, 0.1);
            }
            other => panic!("expected smallness violation, got {other:?}"),
        }
        // The threshold itself is still admissible.
        assert!(BihariProblem::new(2.0, 0.1, 1.0, 1.0, 100).is_ok());
    }

    #[test]
    fn coefficient_a_matches_its_closed_form() {
        let coeffs = PachpatteCoefficients::new(&default_problem());
        assert_eq!(coeffs.a(0.0), 1.0, "a(0) must be exactly 1");
        for i in 1..=10 {
            let t = i as f64 / 10.0;
            let closed = (coeffs.eps * coeffs.c * t).exp();
            assert!(
                (coeffs.a(t) - closed).abs() <= 1e-12,
                "a({t}) = {} vs exp form {closed}",
                coeffs.a(t)
            );
        }
    }

    #[test]
    fn coefficient_f_and_inverse_are_mutually_inverse() {
        for &p in &[2.0, 3.0, 4.0] {
            let problem = BihariProblem::new(p, 0.05, 1.0, 1.0, 100).unwrap();
            let coeffs = PachpatteCoefficients::new(&problem);
            assert_eq!(coeffs.f(0.0), 0.0);
            for i in 0..=50 {
                let x = 0.2 * i as f64;
                assert!(
                    (coeffs.f(coeffs.f_inverse(x)) - x).abs() <= 1e-10,
                    "F(F^-1({x})) drifted at p = {p}"
                );
            }
        }
        let coeffs = PachpatteCoefficients::new(&default_problem());
        assert_relative_eq!(coeffs.f(4.0), 4.0, max_relative = 1e-12);
        assert!(coeffs.t2().is_infinite());
    }

    #[test]
    fn coefficient_capital_a_is_nondecreasing_and_vanishes_at_zero() {
        let coeffs = PachpatteCoefficients::new(&default_problem());
        assert_eq!(coeffs.capital_a(0.0), 0.0);
        let mut last = 0.0;
        for i in 1..=10 {
            let t = i as f64 / 10.0;
            let value = coeffs.capital_a(t);
            assert!(value >= last, "A({t}) = {value} dropped below {last}");
            last = value;
        }
    }

    #[test]
    fn bound_vanishes_with_eps() {
        let mut problem = default_problem();
        problem.eps = 0.0;
        for i in 0..=10 {
            let t = i as f64 / 10.0;
            assert_eq!(corollary_bound(&problem, t).unwrap(), 0.0);
        }
    }

    #[test]
    fn bound_shape_scales_by_the_stated_powers() {
        let problem = default_problem();
        let mut doubled = problem;
        doubled.eps = 2.0 * problem.eps;
        let q = (problem.p - 1.0) / problem.p;
        for i in 1..=10 {
            let t = i as f64 / 10.0;
            let (a1, a2) = bound_shape_terms(&problem, t);
            let (b1, b2) = bound_shape_terms(&doubled, t);
            assert_eq!(b1, 2.0 * a1, "first term must scale exactly by the eps factor");
            assert_relative_eq!(b2, 2f64.powf(q) * a2, max_relative = 1e-13);
        }
    }

    #[test]
    fn bound_rejects_times_outside_the_horizon() {
        let problem = default_problem();
        assert!(corollary_bound(&problem, -0.1).is_err());
        assert!(corollary_bound(&problem, 1.1).is_err());
    }

    #[test]
    fn maximal_solution_is_identically_zero_without_forcing() {
        let mut problem = default_problem();
        problem.eps = 0.0;
        let table = maximal_solution(&problem).unwrap();
        assert!(table.values.iter().all(|&v| v == 0.0));
        assert_eq!(table.iterations, 1);
    }

    #[test]
    fn linear_variant_matches_the_volterra_closed_form() {
        let mut problem = BihariProblem::new(2.0, 0.05, 1.0, 1.0, 5000).unwrap();
        problem.drop_root_term = true;
        let table = maximal_solution(&problem).unwrap();
        let at_one = *table.values.last().unwrap();
        let oracle = linear_oracle(0.05, 1.0, 1.0);
        // Freeze the oracle itself so the derivation cannot drift.
        assert!((oracle - 0.0508438550409624).abs() <= 1e-13, "closed form drifted: {oracle}");
        assert!(
            (at_one - oracle).abs() <= 1e-8,
            "grid solution {at_one} vs closed form {oracle}"
        );
        for (t, v) in table.times.iter().zip(&table.values) {
            assert!((v - linear_oracle(0.05, 1.0, *t)).abs() <= 1e-8, "drift at t = {t}");
        }
    }

    #[test]
    fn grid_refinement_converges_at_second_order() {
        let solve = |m: usize| {
            let problem = BihariProblem::new(2.0, 0.05, 1.0, 1.0, m).unwrap();
            maximal_solution(&problem).unwrap()
        };
        let coarse = solve(100);
        let medium = solve(200);
        let fine = solve(400);
        // Compare at the shared physical times (every k-th node).
        let sup_diff = |a: &MaximalSolutionTable, b: &MaximalSolutionTable, stride: usize| -> f64 {
            a.values
                .iter()
                .enumerate()
                .map(|(i, v)| (v - b.values[stride * i]).abs())
                .fold(0.0, f64::max)
        };
        let d1 = sup_diff(&coarse, &medium, 2);
        let d2 = sup_diff(&medium, &fine, 2);
        println!("refinement diffs: {d1:e} -> {d2:e}, ratio {}", d1 / d2);
        assert!(d1 / d2 >= 2.5 && d1 / d2 <= 6.0, "halving h should shrink the change about 4x, got {}", d1 / d2);
    }

    #[test]
    fn runaway_iteration_reports_nonconvergence() {
        // eps*T stays small but eps*c*T = 1e4 puts the fixed point at
        // exp(1e4), far past f64 range, so the iteration must fail honestly.
        let problem = BihariProblem::new(2.0, 0.05, 2e5, 1.0, 50).unwrap();
        match maximal_solution(&problem) {
            Err(BihariError::NonConvergence { .. }) => {}
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn maximal_solution_is_monotone_in_each_parameter() {
        let base = maximal_solution(&BihariProblem::new(2.0, 0.04, 1.0, 1.0, 200).unwrap()).unwrap();
        for pair in base.values.windows(2) {
            assert!(pair[1] >= pair[0], "solution must be nondecreasing in t");
        }
        let more_eps = maximal_solution(&BihariProblem::new(2.0, 0.08, 1.0, 1.0, 200).unwrap()).unwrap();
        let more_c = maximal_solution(&BihariProblem::new(2.0, 0.04, 2.0, 1.0, 200).unwrap()).unwrap();
        for i in 0..base.values.len() {
            assert!(more_eps.values[i] >= base.values[i], "solution must grow with eps");
            assert!(more_c.values[i] >= base.values[i], "solution must grow with c");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn dominance_holds_across_admissible_parameters(
            p in 2.0f64..4.0,
            eps in 1e-4f64..0.099,
            c in 0.1f64..1.5,
        ) {
            let problem = BihariProblem::new(p, eps, c, 1.0, 60).unwrap();
            let report = verify_dominance(&problem).unwrap();
            prop_assert!(report.min_margin >= 0.0);
            prop_assert!(report.fitted_constant <= report.chain_constant);
            // The ratio profile peaks strictly inside, not at the horizon.
            prop_assert!(report.ratio_at_horizon <= report.fitted_constant + 1e-15);
        }
    }

    #[test]
    fn dominance_report_is_trivial_at_zero_eps() {
        let mut problem = default_problem();
        problem.eps = 0.0;
        let report = verify_dominance(&problem).unwrap();
        assert_eq!(report.fitted_constant, 0.0);
        assert!(report.margins.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn fitted_constant_is_stable_across_a_tenfold_smallness_range() {
        for &p in &[2.0, 4.0] {
            let fitted: Vec<f64> = [0.01, 0.02, 0.05, 0.1]
                .iter()
                .map(|&eps| {
                    let problem = BihariProblem::new(p, eps, 1.0, 1.0, 200).unwrap();
                    verify_dominance(&problem).unwrap().fitted_constant
                })
                .collect();
            println!("p = {p}: fitted constants across eps*T sweep: {fitted:?}");
            let max = fitted.iter().cloned().fold(f64::MIN, f64::max);
            let min = fitted.iter().cloned().fold(f64::MAX, f64::min);
            assert!(max / min < 2.0, "fitted constant should be stable, got spread {min}..{max}");
            let chain = chain_constant(&BihariProblem::new(p, 0.1, 1.0, 1.0, 200).unwrap());
            assert!(max < chain, "empirical constant must sit below the proof-chain constant {chain}");
        }
    }

    #[test]
    fn dominance_csv_lists_one_row_per_grid_time() {
        let report = verify_dominance(&default_problem()).unwrap();
        let mut buf = Vec::new();
        write_dominance_csv(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,psi_star,bound,margin");
        assert_eq!(lines.count(), report.times.len());
    }
}
