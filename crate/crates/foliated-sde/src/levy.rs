//! Compound-Poisson driving noise: jump-size laws, closed-form moments, and
//! path sampling.
//!
//! A driver is described by a finite jump intensity and a jump-size law with
//! no atom at the origin. Paths are piecewise constant with finitely many
//! jumps per unit time, so they can be stored exactly as event lists.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use statrs::function::erf::erf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LevyError {
    #[error("jump rate must be positive and finite, got {0}")]
    BadRate(f64),
    #[error("invalid jump law: {0}")]
    BadLaw(String),
    #[error("no closed form for moment of order {order} of {law}")]
    UnsupportedMoment { order: f64, law: String },
    #[error("moment order must be nonnegative and finite, got {0}")]
    BadOrder(f64),
    #[error("integrability check requires exponent p >= 2, got {0}")]
    BadExponent(f64),
    #[error("path horizon must be nonnegative and finite, got {0}")]
    BadHorizon(f64),
}

/// Jump-size distribution. All variants are supported in every dimension for
/// sampling; moment formulas are closed-form where documented on [`moment`].
#[derive(Debug, Clone, PartialEq)]
pub enum JumpLaw {
    /// Product of `dim` independent uniforms on `(-half_width, half_width)`.
    Uniform { half_width: f64, dim: usize },
    /// Finitely many atoms `(location, probability)`; none may sit at the origin.
    Atoms { atoms: Vec<(Vec<f64>, f64)> },
    /// Product of `dim` independent centered normals with scale `sigma`,
    /// conditioned on each component lying in `[-cutoff, cutoff]`.
    TruncatedNormal { sigma: f64, cutoff: f64, dim: usize },
}

impl JumpLaw {
    pub fn dim(&self) -> usize {
        match self {
            JumpLaw::Uniform { dim, .. } | JumpLaw::TruncatedNormal { dim, .. } => *dim,
            JumpLaw::Atoms { atoms } => atoms.first().map_or(0, |(z, _)| z.len()),
        }
    }

    fn validate(&self) -> Result<(), LevyError> {
        match self {
            JumpLaw::Uniform { half_width, dim } => {
                if !(half_width.is_finite() && *half_width > 0.0) {
                    return Err(LevyError::BadLaw(format!("uniform half-width must be positive, got {half_width}")));
                }
                if *dim == 0 {
                    return Err(LevyError::BadLaw("uniform law needs dim >= 1".into()));
                }
            }
            JumpLaw::Atoms { atoms } => {
                if atoms.is_empty() {
                    return Err(LevyError::BadLaw("atom law needs at least one atom".into()));
                }
                let d = atoms[0].0.len();
                if d == 0 {
                    return Err(LevyError::BadLaw("atoms must have dimension >= 1".into()));
                }
                let mut total = 0.0;
                for (z, pr) in atoms {
                    if z.len() != d {
                        return Err(LevyError::BadLaw("atoms have inconsistent dimensions".into()));
                    }
                    if !z.iter().all(|x| x.is_finite()) {
                        return Err(LevyError::BadLaw("atom location must be finite".into()));
                    }
                    if !(pr.is_finite() && *pr > 0.0) {
                        return Err(LevyError::BadLaw(format!("atom probability must be positive, got {pr}")));
                    }
                    if norm(z) == 0.0 {
                        return Err(LevyError::BadLaw("jump law must not place mass at the origin".into()));
                    }
                    total += pr;
                }
                if (total - 1.0).abs() > 1e-12 {
                    return Err(LevyError::BadLaw(format!("atom probabilities sum to {total}, expected 1")));
                }
            }
            JumpLaw::TruncatedNormal { sigma, cutoff, dim } => {
                if !(sigma.is_finite() && *sigma > 0.0) {
                    return Err(LevyError::BadLaw(format!("normal scale must be positive, got {sigma}")));
                }
                if !(cutoff.is_finite() && *cutoff > 0.0) {
                    return Err(LevyError::BadLaw(format!("truncation cutoff must be positive, got {cutoff}")));
                }
                if *dim == 0 {
                    return Err(LevyError::BadLaw("truncated normal law needs dim >= 1".into()));
                }
            }
        }
        Ok(())
    }

    fn describe(&self) -> String {
        match self {
            JumpLaw::Uniform { half_width, dim } => format!("uniform(-{half_width}, {half_width})^{dim}"),
            JumpLaw::Atoms { atoms } => format!("{}-atom law", atoms.len()),
            JumpLaw::TruncatedNormal { sigma, cutoff, dim } => {
                format!("truncated normal(sigma={sigma}, cutoff={cutoff})^{dim}")
            }
        }
    }

    /// Mean vector of the law. Zero for the symmetric families.
    pub fn mean(&self) -> Vec<f64> {
        match self {
            JumpLaw::Uniform { dim, .. } | JumpLaw::TruncatedNormal { dim, .. } => vec![0.0; *dim],
            JumpLaw::Atoms { atoms } => {
                let d = self.dim();
                let mut m = vec![0.0; d];
                for (z, pr) in atoms {
                    for (mi, zi) in m.iter_mut().zip(z) {
                        *mi += pr * zi;
                    }
                }
                m
            }
        }
    }

    /// `E ||z||^order` in closed form.
    ///
    /// Supported: any real order for one-dimensional uniform and for atom laws;
    /// integer orders for the one-dimensional truncated normal; even integer
    /// orders for the multi-dimensional uniform and truncated normal. Anything
    /// else returns [`LevyError::UnsupportedMoment`].
    pub fn absolute_moment(&self, order: f64) -> Result<f64, LevyError> {
        if !(order.is_finite() && order >= 0.0) {
            return Err(LevyError::BadOrder(order));
        }
        let unsupported = || LevyError::UnsupportedMoment { order, law: self.describe() };
        match self {
            JumpLaw::Atoms { atoms } => {
                Ok(atoms.iter().map(|(z, pr)| pr * norm(z).powf(order)).sum())
            }
            JumpLaw::Uniform { half_width, dim } => {
                if *dim == 1 {
                    return Ok(half_width.powf(order) / (order + 1.0));
                }
                let s = even_half_order(order).ok_or_else(unsupported)?;
                let comp_moments: Vec<f64> =
                    (0..=s).map(|k| half_width.powi(2 * k as i32) / (2.0 * k as f64 + 1.0)).collect();
                Ok(iid_square_sum_moment(*dim, s, &comp_moments))
            }
            JumpLaw::TruncatedNormal { sigma, cutoff, dim } => {
                if *dim == 1 {
                    let q = integer_order(order).ok_or_else(unsupported)?;
                    return Ok(truncated_normal_abs_moment(*sigma, *cutoff, q));
                }
                let s = even_half_order(order).ok_or_else(unsupported)?;
                let comp_moments: Vec<f64> =
                    (0..=s).map(|k| truncated_normal_abs_moment(*sigma, *cutoff, 2 * k)).collect();
                Ok(iid_square_sum_moment(*dim, s, &comp_moments))
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        loop {
            let z = match self {
                JumpLaw::Uniform { half_width, dim } => {
                    (0..*dim).map(|_| half_width * (2.0 * rng.gen::<f64>() - 1.0)).collect::<Vec<f64>>()
                }
                JumpLaw::Atoms { atoms } => {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut picked = atoms.last().expect("validated nonempty");
                    for atom in atoms {
                        acc += atom.1;
                        if u < acc {
                            picked = atom;
                            break;
                        }
                    }
                    picked.0.clone()
                }
                JumpLaw::TruncatedNormal { sigma, cutoff, dim } => {
                    let normal = Normal::new(0.0, *sigma).expect("validated scale");
                    (0..*dim)
                        .map(|_| loop {
                            let x = normal.sample(rng);
                            if x.abs() <= *cutoff {
                                break x;
                            }
                        })
                        .collect::<Vec<f64>>()
                }
            };
            // The law carries no mass at the origin; discard the measure-zero
            // float coincidence so stored paths satisfy the same invariant.
            if norm(&z) > 0.0 {
                return z;
            }
        }
    }
}

/// Jump intensity together with a jump-size law.
#[derive(Debug, Clone)]
pub struct LevyMeasureSpec {
    rate: f64,
    law: JumpLaw,
}

impl LevyMeasureSpec {
    pub fn new(rate: f64, law: JumpLaw) -> Result<Self, LevyError> {
        if !(rate.is_finite() && rate > 0.0) {
            return Err(LevyError::BadRate(rate));
        }
        law.validate()?;
        Ok(Self { rate, law })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn law(&self) -> &JumpLaw {
        &self.law
    }

    pub fn dim(&self) -> usize {
        self.law.dim()
    }

    /// `rate * E ||z||^order`, the `order`-th absolute moment of the jump
    /// measure. Same support table as [`JumpLaw::absolute_moment`].
    pub fn moment(&self, order: f64) -> Result<f64, LevyError> {
        Ok(self.rate * self.law.absolute_moment(order)?)
    }

    /// `rate * E z`, the drift contributed by jump compensation arguments.
    pub fn mean_intensity(&self) -> Vec<f64> {
        self.law.mean().into_iter().map(|m| self.rate * m).collect()
    }
}

/// One jump of a driver path.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpEvent {
    pub time: f64,
    pub jump: Vec<f64>,
}

/// A compound-Poisson path on `[0, horizon]`, stored as its event list.
/// Event times are strictly increasing and lie in `(0, horizon]`; every jump
/// vector is nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct LevyPath {
    pub horizon: f64,
    pub events: Vec<JumpEvent>,
}

impl LevyPath {
    /// Empty path (no jumps) on `[0, horizon]`.
    pub fn empty(horizon: f64) -> Self {
        Self { horizon, events: Vec::new() }
    }

    /// Events in `(from, to]`, shifted to start at time zero.
    pub fn window(&self, from: f64, to: f64) -> Self {
        let events = self
            .events
            .iter()
            .filter(|e| e.time > from && e.time <= to)
            .map(|e| JumpEvent { time: e.time - from, jump: e.jump.clone() })
            .collect();
        Self { horizon: to - from, events }
    }

    /// Same jump times with every jump vector multiplied by `factor`.
    pub fn scale_jumps(&self, factor: f64) -> Self {
        let events = self
            .events
            .iter()
            .map(|e| JumpEvent { time: e.time, jump: e.jump.iter().map(|z| factor * z).collect() })
            .collect();
        Self { horizon: self.horizon, events }
    }

    /// Same jump vectors with every time multiplied by `factor` (clock change).
    pub fn scale_times(&self, factor: f64) -> Self {
        let events = self
            .events
            .iter()
            .map(|e| JumpEvent { time: e.time * factor, jump: e.jump.clone() })
            .collect();
        Self { horizon: self.horizon * factor, events }
    }
}

/// Samples a compound-Poisson path of `spec` on `[0, horizon]` from `rng`.
pub fn sample_levy_path<R: Rng>(spec: &LevyMeasureSpec, horizon: f64, rng: &mut R) -> Result<LevyPath, LevyError> {
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(LevyError::BadHorizon(horizon));
    }
    let mut events = Vec::new();
    let mut t = 0.0;
    loop {
        let u: f64 = rng.gen();
        let dt = -(1.0 - u).ln() / spec.rate;
        if !(dt > 0.0) {
            continue; // u rounded to 0 exactly; redraw
        }
        let next = t + dt;
        if next > horizon || next == t {
            if next == t {
                continue; // time resolution exhausted; redraw a larger gap
            }
            break;
        }
        t = next;
        events.push(JumpEvent { time: t, jump: spec.law.sample(rng) });
    }
    Ok(LevyPath { horizon, events })
}

/// Moment summary backing the standing integrability assumption: the leaf
/// driver needs a finite `p`-th absolute moment and the transversal driver a
/// finite `2p`-th one.
#[derive(Debug, Clone, Serialize)]
pub struct MomentCheck {
    pub p: f64,
    pub leaf_moment_p: f64,
    pub transversal_moment_2p: f64,
}

/// Verifies the moment conditions both drivers must satisfy for exponent `p`.
/// Fails loudly when `p < 2` or when a required moment has no closed form.
pub fn validate_driver_moments(
    leaf: &LevyMeasureSpec,
    transversal: &LevyMeasureSpec,
    p: f64,
) -> Result<MomentCheck, LevyError> {
    if !(p.is_finite() && p >= 2.0) {
        return Err(LevyError::BadExponent(p));
    }
    Ok(MomentCheck {
        p,
        leaf_moment_p: leaf.moment(p)?,
        transversal_moment_2p: transversal.moment(2.0 * p)?,
    })
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn integer_order(order: f64) -> Option<u32> {
    let q = order.round();
    if (order - q).abs() < 1e-9 && q >= 0.0 { Some(q as u32) } else { None }
}

fn even_half_order(order: f64) -> Option<u32> {
    integer_order(order).filter(|q| q % 2 == 0).map(|q| q / 2)
}

/// `E (x_1^2 + ... + x_r^2)^s` for iid components whose even moments
/// `E x^{2k}`, `k = 0..=s`, are given in `comp_moments`.
fn iid_square_sum_moment(r: usize, s: u32, comp_moments: &[f64]) -> f64 {
    if r == 1 {
        return comp_moments[s as usize];
    }
    // Binomial expansion over the first coordinate's share of the power.
    (0..=s)
        .map(|j| binomial(s, j) * comp_moments[j as usize] * iid_square_sum_moment(r - 1, s - j, comp_moments))
        .sum()
}

fn binomial(n: u32, k: u32) -> f64 {
    let k = k.min(n - k.min(n));
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// `E |x|^q` for a centered normal with scale `sigma` conditioned on
/// `|x| <= cutoff`, for integer `q >= 0`.
///
/// Uses the recursion `I_q = sigma^2 ((q-1) I_{q-2} - c^{q-1} phi(c))` for the
/// one-sided integrals `I_q = int_0^c x^q phi(x) dx`, with the order-0 and
/// order-1 integrals in closed form.
fn truncated_normal_abs_moment(sigma: f64, cutoff: f64, q: u32) -> f64 {
    let phi = |x: f64| (-x * x / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let mass = erf(cutoff / (sigma * std::f64::consts::SQRT_2));
    let i0 = mass / 2.0;
    let i1 = sigma * sigma * (phi(0.0) - phi(cutoff));
    let mut lower = [i0, i1];
    for order in 2..=q {
        let next = sigma * sigma * ((order as f64 - 1.0) * lower[(order as usize) % 2] - cutoff.powi(order as i32 - 1) * phi(cutoff));
        lower[(order as usize) % 2] = next;
    }
    2.0 * lower[(q as usize) % 2] / mass
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, TAG_LEAF};
    use approx::assert_relative_eq;

    fn uniform1() -> LevyMeasureSpec {
        LevyMeasureSpec::new(1.0, JumpLaw::Uniform { half_width: 1.0, dim: 1 }).unwrap()
    }

    #[test]
    fn rejects_bad_rates() {
        for rate in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(LevyMeasureSpec::new(rate, JumpLaw::Uniform { half_width: 1.0, dim: 1 }).is_err(), "rate {rate} accepted");
        }
    }

    #[test]
    fn rejects_atom_at_origin() {
        let law = JumpLaw::Atoms { atoms: vec![(vec![0.0], 0.5), (vec![1.0], 0.5)] };
        assert!(matches!(LevyMeasureSpec::new(1.0, law), Err(LevyError::BadLaw(_))));
    }

    #[test]
    fn rejects_unnormalized_atoms() {
        let law = JumpLaw::Atoms { atoms: vec![(vec![2.0], 0.5), (vec![-1.0], 0.4)] };
        assert!(LevyMeasureSpec::new(1.0, law).is_err());
    }

    #[test]
    fn uniform_moments_match_closed_form() {
        let spec = uniform1();
        assert_relative_eq!(spec.moment(2.0).unwrap(), 1.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(spec.moment(4.0).unwrap(), 1.0 / 5.0, max_relative = 1e-14);
        // Fractional order also closed-form in dimension one.
        assert_relative_eq!(spec.moment(0.5).unwrap(), 1.0 / 1.5, max_relative = 1e-14);
    }

    #[test]
    fn planar_uniform_second_and_fourth_moments() {
        let spec = LevyMeasureSpec::new(1.0, JumpLaw::Uniform { half_width: 1.0, dim: 2 }).unwrap();
        // E||z||^2 = 2/3; E||z||^4 = E(x^2+y^2)^2 = 1/5 + 2/9 + 1/5.
        assert_relative_eq!(spec.moment(2.0).unwrap(), 2.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(spec.moment(4.0).unwrap(), 2.0 / 5.0 + 2.0 / 9.0, max_relative = 1e-14);
    }

    #[test]
    fn atom_moments_are_weighted_powers() {
        let spec = LevyMeasureSpec::new(2.0, JumpLaw::Atoms { atoms: vec![(vec![2.0], 0.5), (vec![-1.0], 0.5)] }).unwrap();
        assert_relative_eq!(spec.moment(2.0).unwrap(), 2.0 * (0.5 * 4.0 + 0.5 * 1.0), max_relative = 1e-14);
        assert_relative_eq!(spec.moment(3.0).unwrap(), 2.0 * (0.5 * 8.0 + 0.5 * 1.0), max_relative = 1e-14);
    }

    #[test]
    fn unsupported_moments_error_instead_of_approximating() {
        let planar = LevyMeasureSpec::new(1.0, JumpLaw::Uniform { half_width: 1.0, dim: 2 }).unwrap();
        assert!(matches!(planar.moment(3.0), Err(LevyError::UnsupportedMoment { .. })));
        let tn = LevyMeasureSpec::new(1.0, JumpLaw::TruncatedNormal { sigma: 1.0, cutoff: 2.0, dim: 1 }).unwrap();
        assert!(matches!(tn.moment(2.5), Err(LevyError::UnsupportedMoment { .. })));
    }

    #[test]
    fn truncated_normal_even_moment_reduces_to_untruncated_limit() {
        // With the cutoff far out the law is numerically a standard normal:
        // fourth moment 3, second moment 1.
        let spec = LevyMeasureSpec::new(1.0, JumpLaw::TruncatedNormal { sigma: 1.0, cutoff: 40.0, dim: 1 }).unwrap();
        assert_relative_eq!(spec.moment(2.0).unwrap(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(spec.moment(4.0).unwrap(), 3.0, max_relative = 1e-12);
    }

    #[test]
    fn moment_check_requires_p_at_least_two() {
        let spec = uniform1();
        assert!(matches!(validate_driver_moments(&spec, &spec, 1.5), Err(LevyError::BadExponent(_))));
        let report = validate_driver_moments(&spec, &spec, 2.0).unwrap();
        assert_relative_eq!(report.leaf_moment_p, 1.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(report.transversal_moment_2p, 1.0 / 5.0, max_relative = 1e-14);
    }

    #[test]
    fn moment_check_propagates_unsupported_moment() {
        let leaf = uniform1();
        let transversal = LevyMeasureSpec::new(1.0, JumpLaw::TruncatedNormal { sigma: 1.0, cutoff: 2.0, dim: 2 }).unwrap();
        // p = 2.5 makes the transversal order 5, which has no closed form in dim 2.
        assert!(matches!(validate_driver_moments(&leaf, &transversal, 2.5), Err(LevyError::UnsupportedMoment { .. })));
    }

    #[test]
    fn sampled_paths_are_deterministic_per_stream() {
        let spec = uniform1();
        let a = sample_levy_path(&spec, 50.0, &mut stream(9, 0, TAG_LEAF)).unwrap();
        let b = sample_levy_path(&spec, 50.0, &mut stream(9, 0, TAG_LEAF)).unwrap();
        assert_eq!(a, b);
        let c = sample_levy_path(&spec, 50.0, &mut stream(9, 1, TAG_LEAF)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sampled_paths_satisfy_event_invariants() {
        let spec = LevyMeasureSpec::new(2.0, JumpLaw::Uniform { half_width: 1.0, dim: 2 }).unwrap();
        let path = sample_levy_path(&spec, 100.0, &mut stream(1, 2, TAG_LEAF)).unwrap();
        assert!(!path.events.is_empty());
        let mut prev = 0.0;
        for e in &path.events {
            assert!(e.time > prev && e.time <= path.horizon, "event time {} out of order", e.time);
            assert!(norm(&e.jump) > 0.0);
            assert_eq!(e.jump.len(), 2);
            prev = e.time;
        }
    }

    #[test]
    fn jump_counts_track_the_intensity() {
        let spec = LevyMeasureSpec::new(3.0, JumpLaw::Uniform { half_width: 1.0, dim: 1 }).unwrap();
        let reps = 200;
        let horizon = 20.0;
        let mean_count: f64 = (0..reps)
            .map(|i| sample_levy_path(&spec, horizon, &mut stream(5, i, TAG_LEAF)).unwrap().events.len() as f64)
            .sum::<f64>()
            / reps as f64;
        let expected = spec.rate() * horizon;
        // Standard error is sqrt(rate * horizon / reps) ~ 0.55; allow 4 sigma.
        assert!((mean_count - expected).abs() < 2.3, "mean count {mean_count} vs expected {expected}");
    }

    #[test]
    fn window_shifts_and_filters_events() {
        let path = LevyPath {
            horizon: 10.0,
            events: vec![
                JumpEvent { time: 1.0, jump: vec![1.0] },
                JumpEvent { time: 4.0, jump: vec![2.0] },
                JumpEvent { time: 7.5, jump: vec![3.0] },
            ],
        };
        let w = path.window(1.0, 7.5);
        assert_eq!(w.horizon, 6.5);
        assert_eq!(w.events.len(), 2);
        assert_eq!(w.events[0], JumpEvent { time: 3.0, jump: vec![2.0] });
        assert_eq!(w.events[1], JumpEvent { time: 6.5, jump: vec![3.0] });
    }

    #[test]
    fn truncated_normal_sampler_respects_cutoff() {
        let spec = LevyMeasureSpec::new(5.0, JumpLaw::TruncatedNormal { sigma: 1.0, cutoff: 1.5, dim: 3 }).unwrap();
        let path = sample_levy_path(&spec, 50.0, &mut stream(11, 0, TAG_LEAF)).unwrap();
        for e in &path.events {
            for &zi in &e.jump {
                assert!(zi.abs() <= 1.5);
            }
        }
    }
}
