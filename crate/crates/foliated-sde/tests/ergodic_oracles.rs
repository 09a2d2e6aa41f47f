//! Independent checks of the leafwise averages: a from-scratch jump-diffusion
//! simulator (own generator, exact inter-jump flow, closed-form segment
//! integrals) confirms the stationary constant the library's estimator and
//! closed forms both rely on, and the estimator itself is probed for
//! start-point invariance and horizon stability.

use foliated_sde::averaging::{estimate_q, NumericParams, ObservableSpec};
use foliated_sde::systems::builtin_system;

/// Minimal deterministic generator, independent of the library's streams.
struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in (0, 1), never exactly zero.
    fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }
}

/// Time average of u^2 over [burn_in, horizon] for du = -u dt + dZ with unit
/// Poisson rate and Uniform(-1, 1) jumps. Between jumps the flow is exact
/// (u -> u e^{-s}) and so is the segment integral of u^2, so the only noise
/// is statistical.
fn direct_time_average(seed: u64, horizon: f64, burn_in: f64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let mut u: f64 = 0.0;
    let mut t = 0.0;
    let mut integral = 0.0;
    loop {
        let wait = -rng.uniform().ln();
        let segment_end = (t + wait).min(horizon);
        let live_start = t.max(burn_in);
        if segment_end > live_start {
            // u at live_start, integrated exactly over the live part.
            let a = u * (-(live_start - t)).exp();
            let len = segment_end - live_start;
            integral += a * a * (1.0 - (-2.0 * len).exp()) / 2.0;
        }
        if t + wait >= horizon {
            break;
        }
        u = u * (-wait).exp() + (2.0 * rng.uniform() - 1.0);
        t += wait;
    }
    integral / (horizon - burn_in)
}

#[test]
fn stationary_second_moment_confirmed_by_independent_simulator() {
    let replications = 32;
    let per_rep: Vec<f64> =
        (0..replications).map(|rep| direct_time_average(1000 + rep, 2000.0, 100.0)).collect();
    let n = replications as f64;
    let mean = per_rep.iter().sum::<f64>() / n;
    let var = per_rep.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    println!("direct simulator: {mean} +- {se}, target 1/6 = {}", 1.0 / 6.0);
    assert!(se < 0.01, "independent simulator noise {se} too large to be informative");
    assert!(
        (mean - 1.0 / 6.0).abs() <= 4.0 * se,
        "independent simulator {mean} (se {se}) does not confirm 1/6"
    );

    // The library's estimator must land on the same constant.
    let system = builtin_system("ou_lines").unwrap();
    let numeric = NumericParams::default();
    let est = estimate_q(&system, &ObservableSpec::VerticalK, &[0.0], 400.0, 16, &numeric, 5)
        .expect("estimation succeeds");
    println!("library estimator: {} +- {}", est.value[0], est.std_error);
    assert!(
        (est.value[0] - mean).abs() <= 4.0 * (se + est.std_error),
        "library estimate {} (se {}) vs independent simulator {mean} (se {se})",
        est.value[0],
        est.std_error
    );
}

#[test]
fn leaf_average_forgets_the_starting_point() {
    // Same seed, different initial leaf coordinate: the paths couple at rate
    // one while the jumps coincide, so after the burn-in the two averages can
    // differ only through an exponentially small transient.
    let mut near = builtin_system("ou_lines").unwrap();
    near.initial_point = vec![0.0, 0.0];
    let mut far = builtin_system("ou_lines").unwrap();
    far.initial_point = vec![1.5, 0.0];

    let numeric = NumericParams::default();
    let a = estimate_q(&near, &ObservableSpec::VerticalK, &[0.0], 300.0, 8, &numeric, 21).unwrap();
    let b = estimate_q(&far, &ObservableSpec::VerticalK, &[0.0], 300.0, 8, &numeric, 21).unwrap();
    println!("start 0.0: {}, start 1.5: {}", a.value[0], b.value[0]);
    assert!(
        (a.value[0] - b.value[0]).abs() <= 1e-4,
        "estimates {} and {} should agree after burn-in",
        a.value[0],
        b.value[0]
    );
}

#[test]
fn leaf_average_is_stable_under_horizon_doubling() {
    let system = builtin_system("ou_lines").unwrap();
    let numeric = NumericParams::default();
    let short = estimate_q(&system, &ObservableSpec::VerticalK, &[0.0], 200.0, 24, &numeric, 33)
        .unwrap();
    let long = estimate_q(&system, &ObservableSpec::VerticalK, &[0.0], 400.0, 24, &numeric, 33)
        .unwrap();
    println!(
        "horizon 200: {} +- {}, horizon 400: {} +- {}",
        short.value[0], short.std_error, long.value[0], long.std_error
    );
    assert!(
        (short.value[0] - long.value[0]).abs() <= 4.0 * (short.std_error + long.std_error),
        "estimates {} and {} drift apart under horizon doubling",
        short.value[0],
        long.value[0]
    );
    assert!(
        long.std_error < short.std_error,
        "doubling the horizon should tighten the error bar: {} vs {}",
        long.std_error,
        short.std_error
    );
}
