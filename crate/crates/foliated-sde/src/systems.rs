//! Foliated model spaces and the built-in test systems.
//!
//! The model class is deliberately rigid: the state space is a product
//! `R^n x R^d`, the projection is the last-d-coordinates map, and leaves are
//! its level sets. Fast dynamics (drift `F0`, jump field `F`) must be tangent
//! to leaves, i.e. their last d components vanish identically; the slow
//! perturbation enters through an unrestricted drift `K` and a transversal
//! jump field `Ktilde` that sees the state only through its projection.

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::levy::{JumpLaw, LevyError, LevyMeasureSpec};
use crate::marcus::{DriftField, JumpField};

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("unknown built-in system {0:?}")]
    UnknownSystem(String),
    #[error("invalid system parameter: {0}")]
    BadParameter(String),
    #[error("tangency check needs sample_count >= 1")]
    BadSampleCount,
    #[error("{field} has a transversal component of magnitude {max_violation:e}, above the 1e-14 tangency tolerance")]
    TangencyViolation { field: &'static str, max_violation: f64 },
    #[error("Lipschitz check needs at least 3 grid points inside the transversal region, found {inside}")]
    GridTooSmall { inside: usize },
    #[error("Q estimator failed")]
    Estimator(#[source] Box<dyn std::error::Error + Send + Sync>),
    #[error(transparent)]
    Levy(#[from] LevyError),
}

/// Open neighborhood of the origin in the transversal factor.
#[derive(Debug, Clone)]
pub enum Region {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { radius: f64, dim: usize },
}

impl Region {
    /// Symmetric interval/box `(-half_width, half_width)^dim`.
    pub fn centered_box(half_width: f64, dim: usize) -> Self {
        Region::Box { lo: vec![-half_width; dim], hi: vec![half_width; dim] }
    }

    pub fn dim(&self) -> usize {
        match self {
            Region::Box { lo, .. } => lo.len(),
            Region::Ball { dim, .. } => *dim,
        }
    }

    /// Strict interior membership; the region is open.
    pub fn contains(&self, v: &[f64]) -> bool {
        match self {
            Region::Box { lo, hi } => v.iter().zip(lo).zip(hi).all(|((x, l), h)| l < x && x < h),
            Region::Ball { radius, .. } => v.iter().map(|x| x * x).sum::<f64>().sqrt() < *radius,
        }
    }

    fn validate(&self) -> Result<(), SystemError> {
        match self {
            Region::Box { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() {
                    return Err(SystemError::BadParameter("region bounds have inconsistent dimensions".into()));
                }
                if !lo.iter().zip(hi).all(|(l, h)| l.is_finite() && h.is_finite() && *l < 0.0 && 0.0 < *h) {
                    return Err(SystemError::BadParameter("region box must contain the origin in its interior".into()));
                }
            }
            Region::Ball { radius, dim } => {
                if !(radius.is_finite() && *radius > 0.0) || *dim == 0 {
                    return Err(SystemError::BadParameter("region ball needs positive radius and dimension".into()));
                }
            }
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            Region::Box { lo, hi } => {
                for (o, (l, h)) in out.iter_mut().zip(lo.iter().zip(hi)) {
                    *o = rng.gen_range(*l..*h);
                }
            }
            Region::Ball { radius, .. } => loop {
                for o in out.iter_mut() {
                    *o = rng.gen_range(-radius..*radius);
                }
                if out.iter().map(|x| x * x).sum::<f64>().sqrt() < *radius {
                    break;
                }
            },
        }
    }
}

/// Global chart of a trivial foliation: leaf factor of dimension `leaf_dim`,
/// transversal factor of dimension `transversal_dim`, projection = last
/// `transversal_dim` coordinates, and the transversal region whose exit
/// defines the stopping time.
#[derive(Debug, Clone)]
pub struct FoliationChart {
    leaf_dim: usize,
    transversal_dim: usize,
    region: Region,
}

impl FoliationChart {
    pub fn new(leaf_dim: usize, transversal_dim: usize, region: Region) -> Result<Self, SystemError> {
        if leaf_dim == 0 || transversal_dim == 0 {
            return Err(SystemError::BadParameter("chart dimensions must be >= 1".into()));
        }
        if region.dim() != transversal_dim {
            return Err(SystemError::BadParameter(format!(
                "region dimension {} does not match transversal dimension {}",
                region.dim(),
                transversal_dim
            )));
        }
        region.validate()?;
        Ok(Self { leaf_dim, transversal_dim, region })
    }

    pub fn leaf_dim(&self) -> usize {
        self.leaf_dim
    }

    pub fn transversal_dim(&self) -> usize {
        self.transversal_dim
    }

    pub fn state_dim(&self) -> usize {
        self.leaf_dim + self.transversal_dim
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    /// The last-`d`-coordinates projection.
    pub fn project<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[self.leaf_dim..]
    }

    /// Whether the projected state is still inside the transversal region.
    pub fn transversal_inside(&self, x: &[f64]) -> bool {
        self.region.contains(self.project(x))
    }
}

/// Transversal jump field `(v, z) -> R^d`, a function of the projection only
/// (enforced by the signature) and linear in `z`.
pub type TransversalField = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Averaged drift `v -> R^d` in closed form.
pub type ClosedFormQ = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// The four coefficient fields of a perturbed system, plus declared driver
/// dimensions and a declared (not symbolically verified) Lipschitz budget.
#[derive(Clone)]
pub struct VectorFieldSet {
    /// Fast drift, tangent to leaves: last d components vanish.
    pub f0: DriftField,
    /// Fast jump field, tangent to leaves: last d components vanish.
    pub f: JumpField,
    /// Perturbation drift, unrestricted.
    pub k: DriftField,
    /// Transversal perturbation jump field, `(v, z) -> R^d`.
    pub ktilde: TransversalField,
    pub leaf_jump_dim: usize,
    pub transversal_jump_dim: usize,
    pub lipschitz_budget: f64,
}

/// A fully specified test system: geometry, coefficients, drivers, moment
/// exponent, optional closed-form averaged drift, and a start point.
#[derive(Clone)]
pub struct TestSystem {
    pub name: String,
    pub chart: FoliationChart,
    pub fields: VectorFieldSet,
    pub nu: LevyMeasureSpec,
    pub nu_prime: LevyMeasureSpec,
    pub p: f64,
    pub closed_form_q: Option<ClosedFormQ>,
    pub initial_point: Vec<f64>,
}

impl TestSystem {
    /// Vertical part of the perturbation drift as a transversal observable:
    /// `x -> (K(x))_{n..n+d}`, the integrand whose leafwise average is Q.
    /// Each call returns an independent closure with its own scratch buffer,
    /// so parallel workers do not contend.
    pub fn vertical_k_observable(&self) -> impl FnMut(&[f64], &mut [f64]) + Send {
        let k = self.fields.k.clone();
        let n = self.chart.leaf_dim();
        let mut buf = vec![0.0; self.chart.state_dim()];
        move |x: &[f64], out: &mut [f64]| {
            k(x, &mut buf);
            out.copy_from_slice(&buf[n..]);
        }
    }
}

/// Parameters of the straight-leaf systems (scalar fast coordinate, scalar
/// slow coordinate).
#[derive(Debug, Clone)]
pub struct OuLinesParams {
    pub rate: f64,
    pub law: JumpLaw,
    pub rate_tilde: f64,
    pub law_tilde: JumpLaw,
    pub beta: f64,
    pub c0: f64,
    pub v_half_width: f64,
    pub p: f64,
    pub initial: [f64; 2],
    /// When set, replaces the slow integrand k(u, v) by this constant.
    pub constant_k: Option<f64>,
}

impl Default for OuLinesParams {
    fn default() -> Self {
        Self {
            rate: 1.0,
            law: JumpLaw::Uniform { half_width: 1.0, dim: 1 },
            rate_tilde: 1.0,
            law_tilde: JumpLaw::Uniform { half_width: 1.0, dim: 1 },
            beta: 0.5,
            c0: 0.0,
            v_half_width: 2.0,
            p: 2.0,
            initial: [0.0, 0.0],
            constant_k: None,
        }
    }
}

/// Parameters of the planar-rotation system (two fast coordinates, one slow).
#[derive(Debug, Clone)]
pub struct RotationParams {
    pub rate: f64,
    pub law: JumpLaw,
    pub rate_tilde: f64,
    pub law_tilde: JumpLaw,
    pub beta: f64,
    pub c0: f64,
    pub omega: f64,
    pub v_half_width: f64,
    pub p: f64,
    pub initial: [f64; 3],
    pub constant_k: Option<f64>,
}

impl Default for RotationParams {
    fn default() -> Self {
        Self {
            rate: 1.0,
            law: JumpLaw::Uniform { half_width: 1.0, dim: 2 },
            rate_tilde: 1.0,
            law_tilde: JumpLaw::Uniform { half_width: 1.0, dim: 1 },
            beta: 0.5,
            c0: 0.0,
            omega: 1.0,
            v_half_width: 2.0,
            p: 2.0,
            initial: [0.0, 0.0, 0.0],
            constant_k: None,
        }
    }
}

/// Built-in system by name with default parameters.
pub fn builtin_system(name: &str) -> Result<TestSystem, SystemError> {
    builtin_system_with(name, 2.0, &SystemOverrides::default())
}

/// Optional parameter overrides applied on top of a built-in system's
/// defaults. Fields that do not apply to the chosen system are rejected
/// rather than ignored.
#[derive(Debug, Clone, Default)]
pub struct SystemOverrides {
    pub rate: Option<f64>,
    pub rate_tilde: Option<f64>,
    pub beta: Option<f64>,
    pub c0: Option<f64>,
    pub v_half_width: Option<f64>,
    pub omega: Option<f64>,
    pub constant_k: Option<f64>,
    pub initial: Option<Vec<f64>>,
}

/// Built-in system by name with the moment exponent `p` and overrides applied.
pub fn builtin_system_with(name: &str, p: f64, ov: &SystemOverrides) -> Result<TestSystem, SystemError> {
    let initial_array = |len: usize| -> Result<Option<Vec<f64>>, SystemError> {
        match &ov.initial {
            None => Ok(None),
            Some(x) if x.len() == len => Ok(Some(x.clone())),
            Some(x) => Err(SystemError::BadParameter(format!(
                "initial point for {name:?} needs {len} coordinates, got {}",
                x.len()
            ))),
        }
    };
    match name {
        "ou_lines" | "ou_lines_nonlinear_K" => {
            if ov.omega.is_some() {
                return Err(SystemError::BadParameter(format!("omega does not apply to {name:?}")));
            }
            let mut params = OuLinesParams { p, ..OuLinesParams::default() };
            if let Some(v) = ov.rate {
                params.rate = v;
            }
            if let Some(v) = ov.rate_tilde {
                params.rate_tilde = v;
            }
            if let Some(v) = ov.beta {
                params.beta = v;
            }
            if let Some(v) = ov.c0 {
                params.c0 = v;
            }
            if let Some(v) = ov.v_half_width {
                params.v_half_width = v;
            }
            params.constant_k = ov.constant_k.or(params.constant_k);
            if let Some(x) = initial_array(2)? {
                params.initial = [x[0], x[1]];
            }
            if name == "ou_lines" {
                ou_lines(params)
            } else {
                ou_lines_nonlinear_k(params)
            }
        }
        "rotation_coupled" => {
            let mut params = RotationParams { p, ..RotationParams::default() };
            if let Some(v) = ov.rate {
                params.rate = v;
            }
            if let Some(v) = ov.rate_tilde {
                params.rate_tilde = v;
            }
            if let Some(v) = ov.beta {
                params.beta = v;
            }
            if let Some(v) = ov.c0 {
                params.c0 = v;
            }
            if let Some(v) = ov.v_half_width {
                params.v_half_width = v;
            }
            if let Some(v) = ov.omega {
                params.omega = v;
            }
            params.constant_k = ov.constant_k.or(params.constant_k);
            if let Some(x) = initial_array(3)? {
                params.initial = [x[0], x[1], x[2]];
            }
            rotation_coupled(params)
        }
        other => Err(SystemError::UnknownSystem(other.to_string())),
    }
}

/// Stationary second moment of the scalar jump-driven OU process
/// `dU = -U dt + dZ`: the first two moment equations close,
/// `d E[U]/dt = -E[U] + rho m1` and
/// `d E[U^2]/dt = -2 E[U^2] + rho (2 E[U] m1 + m2)`,
/// so at stationarity `E[U] = rho m1` and
/// `E[U^2] = rho m2 / 2 + (rho m1)^2`.
fn ou_stationary_second_moment(spec: &LevyMeasureSpec) -> Result<f64, SystemError> {
    let m2 = spec.law().absolute_moment(2.0)?;
    let m1 = spec.law().mean()[0];
    let mean = spec.rate() * m1;
    Ok(spec.rate() * m2 / 2.0 + mean * mean)
}

/// Stationary `E ||U||^2` of the planar system `dU = A U dt + dZ` with
/// `A = [[-1, omega], [omega_sign...]]`, i.e. `A = -I + omega J`:
/// `<U, AU> = -||U||^2` since `<U, JU> = 0`, so
/// `d E||U||^2/dt = -2 E||U||^2 + rho (2 <E[U], m1> + m2)` with
/// `E[U]_inf = rho (I + omega J) m1 / (1 + omega^2)`, giving
/// `E||U||^2 = rho m2 / 2 + rho^2 ||m1||^2 / (1 + omega^2)`.
fn rotation_stationary_second_moment(spec: &LevyMeasureSpec, omega: f64) -> Result<f64, SystemError> {
    let m2 = spec.law().absolute_moment(2.0)?;
    let m1 = spec.law().mean();
    let m1_sq: f64 = m1.iter().map(|x| x * x).sum();
    Ok(spec.rate() * m2 / 2.0 + spec.rate() * spec.rate() * m1_sq / (1.0 + omega * omega))
}

fn validate_common(rate: f64, beta: f64, v_half_width: f64, p: f64) -> Result<(), SystemError> {
    if !(rate.is_finite() && rate > 0.0) {
        return Err(SystemError::BadParameter(format!("jump rate must be positive, got {rate}")));
    }
    if !beta.is_finite() {
        return Err(SystemError::BadParameter(format!("beta must be finite, got {beta}")));
    }
    if !(v_half_width.is_finite() && v_half_width > 0.0) {
        return Err(SystemError::BadParameter(format!("transversal region half-width must be positive, got {v_half_width}")));
    }
    if !(p.is_finite() && p >= 2.0) {
        return Err(SystemError::BadParameter(format!("moment exponent must satisfy p >= 2, got {p}")));
    }
    Ok(())
}

fn ou_lines_common(params: OuLinesParams, name: &str, cubic_slow: bool) -> Result<TestSystem, SystemError> {
    validate_common(params.rate, params.beta, params.v_half_width, params.p)?;
    if params.law.dim() != 1 || params.law_tilde.dim() != 1 {
        return Err(SystemError::BadParameter("straight-leaf systems use one-dimensional jump laws".into()));
    }
    let nu = LevyMeasureSpec::new(params.rate, params.law.clone())?;
    let nu_prime = LevyMeasureSpec::new(params.rate_tilde, params.law_tilde.clone())?;
    let chart = FoliationChart::new(1, 1, Region::centered_box(params.v_half_width, 1))?;

    let f0: DriftField = Arc::new(|x: &[f64], out: &mut [f64]| {
        out[0] = -x[0];
        out[1] = 0.0;
    });
    let f: JumpField = Arc::new(|_x: &[f64], z: &[f64], out: &mut [f64]| {
        out[0] = z[0];
        out[1] = 0.0;
    });
    let c0 = params.c0;
    let constant_k = params.constant_k;
    let k: DriftField = match (constant_k, cubic_slow) {
        (Some(kappa), _) => Arc::new(move |_x: &[f64], out: &mut [f64]| {
            out[0] = 0.0;
            out[1] = kappa;
        }),
        (None, false) => Arc::new(move |x: &[f64], out: &mut [f64]| {
            out[0] = 0.0;
            out[1] = x[0] * x[0] + c0 - x[1];
        }),
        (None, true) => Arc::new(move |x: &[f64], out: &mut [f64]| {
            out[0] = 0.0;
            out[1] = x[0] * x[0] + c0 - x[1] * x[1] * x[1];
        }),
    };
    let beta = params.beta;
    let ktilde: TransversalField = Arc::new(move |v: &[f64], z: &[f64], out: &mut [f64]| {
        out[0] = beta * v[0] * z[0];
    });

    // The slow integrand k(u, v) = u^2 + c0 - g(v) averages along a leaf to
    // E[U^2] + c0 - g(v) under the fast stationary law; see
    // ou_stationary_second_moment for the moment computation.
    let s2 = ou_stationary_second_moment(&nu)?;
    let closed_form_q: ClosedFormQ = match (constant_k, cubic_slow) {
        (Some(kappa), _) => Arc::new(move |_v: &[f64], out: &mut [f64]| out[0] = kappa),
        (None, false) => Arc::new(move |v: &[f64], out: &mut [f64]| out[0] = s2 + c0 - v[0]),
        (None, true) => Arc::new(move |v: &[f64], out: &mut [f64]| out[0] = s2 + c0 - v[0] * v[0] * v[0]),
    };

    Ok(TestSystem {
        name: name.to_string(),
        chart,
        fields: VectorFieldSet {
            f0,
            f,
            k,
            ktilde,
            leaf_jump_dim: 1,
            transversal_jump_dim: 1,
            lipschitz_budget: lipschitz_budget_1d(params.v_half_width, params.beta, cubic_slow),
        },
        nu,
        nu_prime,
        p: params.p,
        closed_form_q: Some(closed_form_q),
        initial_point: params.initial.to_vec(),
    })
}

fn lipschitz_budget_1d(v_half_width: f64, beta: f64, cubic_slow: bool) -> f64 {
    // Slope bound of the averaged drift over the transversal region, plus the
    // jump field's v-sensitivity; generous by construction.
    let q_slope = if cubic_slow { 3.0 * v_half_width * v_half_width } else { 1.0 };
    q_slope.max(beta.abs()).max(1.0)
}

/// Straight-leaf system: fast scalar OU along horizontal lines, slow scalar
/// coordinate driven by `k(u, v) = u^2 + c0 - v` and transversal jumps
/// `beta v z`.
pub fn ou_lines(params: OuLinesParams) -> Result<TestSystem, SystemError> {
    ou_lines_common(params, "ou_lines", false)
}

/// Same geometry as [`ou_lines`] with the slow integrand's `-v` replaced by
/// `-v^3`, making the averaged drift genuinely nonlinear.
pub fn ou_lines_nonlinear_k(params: OuLinesParams) -> Result<TestSystem, SystemError> {
    ou_lines_common(params, "ou_lines_nonlinear_K", true)
}

/// Planar fast rotation with damping around each leaf `R^2 x {v}`, slow scalar
/// coordinate driven by `||u||^2 + c0 - v`.
pub fn rotation_coupled(params: RotationParams) -> Result<TestSystem, SystemError> {
    validate_common(params.rate, params.beta, params.v_half_width, params.p)?;
    if params.law.dim() != 2 || params.law_tilde.dim() != 1 {
        return Err(SystemError::BadParameter("rotation system needs a planar leaf law and a scalar transversal law".into()));
    }
    if !params.omega.is_finite() {
        return Err(SystemError::BadParameter(format!("omega must be finite, got {}", params.omega)));
    }
    let nu = LevyMeasureSpec::new(params.rate, params.law.clone())?;
    let nu_prime = LevyMeasureSpec::new(params.rate_tilde, params.law_tilde.clone())?;
    let chart = FoliationChart::new(2, 1, Region::centered_box(params.v_half_width, 1))?;

    let omega = params.omega;
    let f0: DriftField = Arc::new(move |x: &[f64], out: &mut [f64]| {
        out[0] = -x[0] + omega * x[1];
        out[1] = -omega * x[0] - x[1];
        out[2] = 0.0;
    });
    let f: JumpField = Arc::new(|_x: &[f64], z: &[f64], out: &mut [f64]| {
        out[0] = z[0];
        out[1] = z[1];
        out[2] = 0.0;
    });
    let c0 = params.c0;
    let k: DriftField = match params.constant_k {
        Some(kappa) => Arc::new(move |_x: &[f64], out: &mut [f64]| {
            out[0] = 0.0;
            out[1] = 0.0;
            out[2] = kappa;
        }),
        None => Arc::new(move |x: &[f64], out: &mut [f64]| {
            out[0] = 0.0;
            out[1] = 0.0;
            out[2] = x[0] * x[0] + x[1] * x[1] + c0 - x[2];
        }),
    };
    let beta = params.beta;
    let ktilde: TransversalField = Arc::new(move |v: &[f64], z: &[f64], out: &mut [f64]| {
        out[0] = beta * v[0] * z[0];
    });

    // Leafwise average of ||u||^2 + c0 - v; see
    // rotation_stationary_second_moment for the moment computation.
    let s2 = rotation_stationary_second_moment(&nu, omega)?;
    let closed_form_q: ClosedFormQ = match params.constant_k {
        Some(kappa) => Arc::new(move |_v: &[f64], out: &mut [f64]| out[0] = kappa),
        None => Arc::new(move |v: &[f64], out: &mut [f64]| out[0] = s2 + c0 - v[0]),
    };

    Ok(TestSystem {
        name: "rotation_coupled".to_string(),
        chart,
        fields: VectorFieldSet {
            f0,
            f,
            k,
            ktilde,
            leaf_jump_dim: 2,
            transversal_jump_dim: 1,
            lipschitz_budget: 1.0f64.max(params.beta.abs()),
        },
        nu,
        nu_prime,
        p: params.p,
        closed_form_q: Some(closed_form_q),
        initial_point: params.initial.to_vec(),
    })
}

/// Tangency audit.
#[derive(Debug, Clone)]
pub struct TangencyReport {
    pub sample_count: usize,
    pub max_violation_f0: f64,
    pub max_violation_f: f64,
}

const TANGENCY_TOL: f64 = 1e-14;

/// Samples random states (transversal part inside the region) and jump
/// vectors, and checks that the fast fields never leave the leaf: the last
/// d components of `F0(x)` and `F(x)z` must vanish to within 1e-14.
pub fn assert_leaf_tangency<R: Rng>(
    fields: &VectorFieldSet,
    chart: &FoliationChart,
    sample_count: usize,
    rng: &mut R,
) -> Result<TangencyReport, SystemError> {
    if sample_count == 0 {
        return Err(SystemError::BadSampleCount);
    }
    let n = chart.leaf_dim();
    let d = chart.transversal_dim();
    let mut x = vec![0.0; n + d];
    let mut z = vec![0.0; fields.leaf_jump_dim];
    let mut out = vec![0.0; n + d];
    let mut max_f0 = 0.0f64;
    let mut max_f = 0.0f64;
    for _ in 0..sample_count {
        for xi in x[..n].iter_mut() {
            *xi = rng.gen_range(-3.0..3.0);
        }
        chart.region().sample(rng, &mut x[n..]);
        for zi in z.iter_mut() {
            *zi = rng.gen_range(-1.0..1.0);
        }
        (fields.f0)(&x, &mut out);
        for v in &out[n..] {
            max_f0 = max_f0.max(v.abs());
        }
        (fields.f)(&x, &z, &mut out);
        for v in &out[n..] {
            max_f = max_f.max(v.abs());
        }
    }
    if max_f0 > TANGENCY_TOL {
        return Err(SystemError::TangencyViolation { field: "F0", max_violation: max_f0 });
    }
    if max_f > TANGENCY_TOL {
        return Err(SystemError::TangencyViolation { field: "F", max_violation: max_f });
    }
    Ok(TangencyReport { sample_count, max_violation_f0: max_f0, max_violation_f: max_f })
}

/// Max difference quotient `|Q(v_i) - Q(v_j)| / |v_i - v_j|` of an estimated
/// averaged drift over all pairs of grid points inside the transversal
/// region. At least 3 grid points must lie inside.
pub fn check_q_lipschitz<E>(system: &TestSystem, v_grid: &[Vec<f64>], mut estimator: E) -> Result<f64, SystemError>
where
    E: FnMut(&[f64]) -> Result<Vec<f64>, Box<dyn std::error::Error + Send + Sync>>,
{
    let inside: Vec<&Vec<f64>> = v_grid.iter().filter(|v| system.chart.region().contains(v)).collect();
    if inside.len() < 3 {
        return Err(SystemError::GridTooSmall { inside: inside.len() });
    }
    let values: Vec<Vec<f64>> = inside
        .iter()
        .map(|v| estimator(v).map_err(SystemError::Estimator))
        .collect::<Result<_, _>>()?;
    let mut max_quotient = 0.0f64;
    for i in 0..inside.len() {
        for j in i + 1..inside.len() {
            let dv: f64 = inside[i].iter().zip(inside[j].iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if dv == 0.0 {
                continue;
            }
            let dq: f64 = values[i].iter().zip(&values[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            max_quotient = max_quotient.max(dq / dv);
        }
    }
    Ok(max_quotient)
}
