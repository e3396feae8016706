//! Stochastic approximation with adaptive truncation.
//!
//! The engine tunes the mean of a [`MeanShiftFamily`] by minimizing the
//! second moment `m_f(θ) = E_θ[f(X)² w_X(θ)²]` of a weighted tail indicator
//! `f = 1{Ψ > q}`. Its unbiased stochastic gradient under `X ~ φ_θ` is
//!
//! ```text
//! Ĥ(x, θ) = 1{Ψ(x) > q} · w_x(θ)² · (θ − x)
//! ```
//!
//! (with `θ − x` read as minus the Fisher gradient of the log-likelihood), and
//! the iterate moves as `θ ← θ − γ Ĥ`. Two thresholds `q1 < q2` are bridged by
//! a weight `b(n) → 0` so that early iterations see the informative moderate
//! tail and later ones the extreme tail.
//!
//! Every step goes through the truncation test: the update must move less
//! than `ε_ζ` in the Fisher norm and stay inside the active covering set
//! `K_κ = {θ : g(θ, θ) ≤ r0 + κΔ}`. A rejected update discards the move,
//! enlarges the covering index, backs off the step index and restarts the next
//! iteration from the reset point. Exceeding the truncation budget marks the
//! chain as diverged.

use std::fmt;
use std::io;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::density::{DensityError, MeanShiftFamily, Parameter};
use crate::numfmt;
use crate::quantile::WeightedSample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SaError {
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error("invalid step schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid gradient spec: {0}")]
    InvalidSpec(String),
    #[error("invalid covering: {0}")]
    InvalidCovering(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("squared likelihood ratio overflowed")]
    WeightOverflow,
    #[error("chain is not running (status {0})")]
    NotRunning(SaStatus),
}

/// Counting variables of the truncation scheme.
///
/// `kappa` indexes the active covering set, `nu` counts iterations since the
/// last re-initialization (zero means the next step resets) and `zeta` indexes
/// the step-size sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TruncationCounters {
    pub kappa: u32,
    pub nu: u64,
    pub zeta: u64,
}

/// Fisher-norm balls `K_j = {θ : g(θ, θ) ≤ r0 + jΔ}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompactCovering {
    r0: f64,
    delta: f64,
}

impl Default for CompactCovering {
    fn default() -> Self {
        Self { r0: 25.0, delta: 25.0 }
    }
}

impl CompactCovering {
    pub fn new(r0: f64, delta: f64) -> Result<Self, SaError> {
        if !(r0 > 0.0 && r0.is_finite() && delta > 0.0 && delta.is_finite()) {
            return Err(SaError::InvalidCovering(format!("r0 = {r0} and delta = {delta} must be positive")));
        }
        Ok(Self { r0, delta })
    }

    pub fn radius_sq(&self, j: u32) -> f64 {
        self.r0 + f64::from(j) * self.delta
    }

    pub fn contains<F: MeanShiftFamily>(&self, family: &F, theta: &Parameter, j: u32) -> Result<bool, SaError> {
        Ok(family.fisher_norm_sq(theta.as_vector())? <= self.radius_sq(j))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StepMode {
    /// `γ_n = a/(n+1)`.
    Classic,
    /// `γ_n = a(n+1)^{-2/3}`, meant to be combined with iterate averaging.
    Polyak,
}

impl StepMode {
    fn gamma_exponent(self) -> f64 {
        match self {
            StepMode::Classic => 1.0,
            StepMode::Polyak => 2.0 / 3.0,
        }
    }

    fn default_eps_exponent(self) -> f64 {
        match self {
            StepMode::Classic => 0.25,
            StepMode::Polyak => 0.125,
        }
    }
}

impl FromStr for StepMode {
    type Err = SaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "classic" => Ok(Self::Classic),
            "polyak" => Ok(Self::Polyak),
            other => Err(SaError::InvalidSchedule(format!("unknown schedule `{other}`"))),
        }
    }
}

impl fmt::Display for StepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepMode::Classic => "classic",
            StepMode::Polyak => "polyak",
        })
    }
}

/// Step sizes `γ_n` and truncation radii `ε_n = c_ε (n+1)^{-e}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    a: f64,
    mode: StepMode,
    eps_scale: f64,
    eps_exponent: f64,
}

impl StepSchedule {
    pub fn new(a: f64, mode: StepMode) -> Result<Self, SaError> {
        Self::with_eps(a, mode, 1.0, mode.default_eps_exponent())
    }

    /// Checks `Σγ = ∞` and `Σ(γ² + (γ/ε)²) < ∞`, i.e. a `γ/ε` decay exponent
    /// above one half.
    pub fn with_eps(a: f64, mode: StepMode, eps_scale: f64, eps_exponent: f64) -> Result<Self, SaError> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(SaError::InvalidSchedule(format!("step scale a = {a} must be positive")));
        }
        if !(eps_scale > 0.0 && eps_scale.is_finite()) {
            return Err(SaError::InvalidSchedule(format!("eps scale {eps_scale} must be positive")));
        }
        if !(eps_exponent >= 0.0) {
            return Err(SaError::InvalidSchedule("eps exponent must be nonnegative".into()));
        }
        let ratio = mode.gamma_exponent() - eps_exponent;
        if ratio <= 0.5 {
            return Err(SaError::InvalidSchedule(format!(
                "gamma/eps decays like n^-{ratio:.4}; need an exponent above 1/2"
            )));
        }
        Ok(Self { a, mode, eps_scale, eps_exponent })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn mode(&self) -> StepMode {
        self.mode
    }

    /// `(γ_n, ε_n)`.
    pub fn step_size(&self, n: u64) -> (f64, f64) {
        let m = (n + 1) as f64;
        let gamma = match self.mode {
            StepMode::Classic => self.a / m,
            StepMode::Polyak => self.a * m.powf(-2.0 / 3.0),
        };
        (gamma, self.eps_scale * m.powf(-self.eps_exponent))
    }

    /// Step index after a truncation: `⌈ζ/2⌉`.
    pub fn backoff(zeta: u64) -> u64 {
        zeta.div_ceil(2)
    }
}

/// Bridging weight `b(n)` between the moderate and the extreme threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bridging {
    /// `min(1, 1/ln(n+1))`.
    Log,
    Fixed(f64),
}

impl Bridging {
    pub fn weight(&self, n: u64) -> f64 {
        match *self {
            Bridging::Log => (1.0 / ((n + 1) as f64).ln()).min(1.0),
            Bridging::Fixed(b) => b,
        }
    }
}

/// Thresholds of the bridged tail criterion
/// `b(n) m_{q1}(θ) + (1 − b(n)) m_{q2}(θ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientSpec {
    pub q1: f64,
    pub q2: f64,
    pub bridging: Bridging,
}

impl GradientSpec {
    pub fn new(q1: f64, q2: f64, bridging: Bridging) -> Result<Self, SaError> {
        if !(q1.is_finite() && q2.is_finite()) || q1 > q2 {
            return Err(SaError::InvalidSpec(format!("need finite q1 <= q2, got q1 = {q1}, q2 = {q2}")));
        }
        if let Bridging::Fixed(b) = bridging {
            if !(0.0..=1.0).contains(&b) {
                return Err(SaError::InvalidSpec(format!("bridging weight {b} outside [0, 1]")));
            }
        }
        Ok(Self { q1, q2, bridging })
    }

    /// A single threshold, no bridging.
    pub fn single(q: f64) -> Self {
        Self { q1: q, q2: q, bridging: Bridging::Fixed(0.0) }
    }
}

/// Loss map `Ψ` from a sample to a real loss. It receives the stream so that
/// models with auxiliary randomness (idiosyncratic noise) can draw it.
pub trait LossMap: Send + Sync {
    fn loss<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> f64;
}

impl<F> LossMap for F
where
    F: Fn(&DVector<f64>) -> f64 + Send + Sync,
{
    fn loss<R: Rng + ?Sized>(&self, x: &DVector<f64>, _rng: &mut R) -> f64 {
        self(x)
    }
}

/// `1{y > q} · w_x(θ)² · (θ − x)` for a sample `x ~ φ_θ` with loss `y = Ψ(x)`.
///
/// For reduced families `θ − x` is minus the reduced Fisher gradient
/// `a − J_lᵀUᵀx`.
pub fn tail_gradient<F: MeanShiftFamily>(
    family: &F,
    x: &DVector<f64>,
    y: f64,
    theta: &Parameter,
    q: f64,
) -> Result<DVector<f64>, SaError> {
    if y <= q {
        return Ok(DVector::zeros(family.param_dim()));
    }
    let w2 = (2.0 * family.log_likelihood_ratio(x, theta)?).exp();
    if !w2.is_finite() {
        return Err(SaError::WeightOverflow);
    }
    Ok(family.grad_log_likelihood(x, theta)? * -w2)
}

/// `b(n) Ĥ_{q1} + (1 − b(n)) Ĥ_{q2}`.
pub fn bridged_gradient<F: MeanShiftFamily>(
    family: &F,
    x: &DVector<f64>,
    y: f64,
    theta: &Parameter,
    n: u64,
    spec: &GradientSpec,
) -> Result<DVector<f64>, SaError> {
    let b = spec.bridging.weight(n);
    let mut g = DVector::zeros(family.param_dim());
    if b > 0.0 {
        g += tail_gradient(family, x, y, theta, spec.q1)? * b;
    }
    if b < 1.0 {
        g += tail_gradient(family, x, y, theta, spec.q2)? * (1.0 - b);
    }
    Ok(g)
}

/// Monte Carlo estimate of the Fisher Hessian of `m_f`,
/// `E_θ[(I + (θ − X)(θ − X)ᵀ) f(X)² w_X(θ)²]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianEstimate {
    pub matrix: DMatrix<f64>,
    /// Draws with a nonzero indicator.
    pub hits: usize,
    pub samples: usize,
}

impl HessianEstimate {
    /// `1/λ_max`, the step scale that makes a Newton-like first step; `None`
    /// when no draw hit the tail.
    pub fn suggested_step_scale(&self) -> Option<f64> {
        if self.hits == 0 {
            return None;
        }
        let max = self.matrix.clone().symmetric_eigen().eigenvalues.max();
        (max > 0.0).then(|| 1.0 / max)
    }
}

pub fn hessian_estimate<F, L, R>(
    family: &F,
    loss: &L,
    q: f64,
    theta: &Parameter,
    n_samples: usize,
    rng: &mut R,
) -> Result<HessianEstimate, SaError>
where
    F: MeanShiftFamily,
    L: LossMap,
    R: Rng + ?Sized,
{
    if n_samples == 0 {
        return Err(SaError::InvalidConfig("hessian_estimate needs at least one sample".into()));
    }
    let d = family.param_dim();
    let mut sum = DMatrix::zeros(d, d);
    let mut hits = 0;
    for _ in 0..n_samples {
        let x = family.sample(theta, rng)?;
        if loss.loss(&x, rng) > q {
            let w2 = (2.0 * family.log_likelihood_ratio(&x, theta)?).exp();
            if !w2.is_finite() {
                return Err(SaError::WeightOverflow);
            }
            let d = family.grad_log_likelihood(&x, theta)?;
            sum += (DMatrix::identity(d.len(), d.len()) + &d * d.transpose()) * w2;
            hits += 1;
        }
    }
    let mut matrix = sum / n_samples as f64;
    // Exact symmetry.
    for i in 0..d {
        for j in 0..i {
            matrix[(i, j)] = matrix[(j, i)];
        }
    }
    Ok(HessianEstimate { matrix, hits, samples: n_samples })
}


/// One bridged component of a stochastic gradient draw.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTerm {
    /// Bridging weight of this component.
    pub weight: f64,
    pub gradient: DVector<f64>,
    /// Per-draw contribution to the component's Hessian, expressed so that
    /// `C⁻¹ · gradient` is the Newton direction in parameter coordinates:
    /// `w²(I + e (G e)ᵀ)` with `e = θ − x` and `G` the Fisher metric matrix.
    pub curvature: DMatrix<f64>,
}

/// A draw `X ~ φ_θ` together with everything the engine and the estimators
/// need from it.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub x: DVector<f64>,
    pub loss: f64,
    /// `w_x(θ)`.
    pub weight: f64,
    pub terms: Vec<GradientTerm>,
    /// The likelihood ratio overflowed; the engine treats the step as a
    /// truncation.
    pub overflow: bool,
}

/// Source of stochastic gradients for [`sa_step`].
pub trait GradientField {
    fn param_dim(&self) -> usize;

    /// Fisher norm used by the truncation test.
    fn fisher_norm_sq(&self, u: &DVector<f64>) -> Result<f64, SaError>;

    /// Draws `X ~ φ_θ` and evaluates the gradient components at iteration `n`.
    fn draw<R: Rng + ?Sized>(&self, theta: &Parameter, n: u64, rng: &mut R) -> Result<FieldSample, SaError>;
}

/// The bridged tail-event gradient field of a family and a loss map.
#[derive(Debug, Clone)]
pub struct TailField<'a, F, L> {
    family: &'a F,
    loss: &'a L,
    spec: GradientSpec,
    metric: DMatrix<f64>,
}

impl<'a, F: MeanShiftFamily, L: LossMap> TailField<'a, F, L> {
    pub fn new(family: &'a F, loss: &'a L, spec: GradientSpec) -> Self {
        let d = family.param_dim();
        let basis = |i: usize| DVector::from_fn(d, |j, _| if i == j { 1.0 } else { 0.0 });
        let metric = DMatrix::from_fn(d, d, |i, j| {
            family.fisher_inner(&basis(i), &basis(j)).expect("basis vectors match the parameter dimension")
        });
        Self { family, loss, spec, metric }
    }

    pub fn family(&self) -> &F {
        self.family
    }

    pub fn spec(&self) -> &GradientSpec {
        &self.spec
    }
}

impl<F: MeanShiftFamily, L: LossMap> GradientField for TailField<'_, F, L> {
    fn param_dim(&self) -> usize {
        self.family.param_dim()
    }

    fn fisher_norm_sq(&self, u: &DVector<f64>) -> Result<f64, SaError> {
        Ok(self.family.fisher_norm_sq(u)?)
    }

    fn draw<R: Rng + ?Sized>(&self, theta: &Parameter, n: u64, rng: &mut R) -> Result<FieldSample, SaError> {
        let x = self.family.sample(theta, rng)?;
        let loss = self.loss.loss(&x, rng);
        let log_w = self.family.log_likelihood_ratio(&x, theta)?;
        let weight = log_w.exp();
        let w2 = (2.0 * log_w).exp();
        let grad = self.family.grad_log_likelihood(&x, theta)?;
        let d = grad.len();
        let lowered = &self.metric * &grad;

        let b = self.spec.bridging.weight(n);
        let mut overflow = !weight.is_finite();
        let mut terms = Vec::with_capacity(2);
        for (weight, q) in [(b, self.spec.q1), (1.0 - b, self.spec.q2)] {
            if weight <= 0.0 {
                continue;
            }
            let (gradient, curvature) = if loss > q {
                overflow |= !w2.is_finite();
                (&grad * -w2, (DMatrix::identity(d, d) + &grad * lowered.transpose()) * w2)
            } else {
                (DVector::zeros(d), DMatrix::zeros(d, d))
            };
            terms.push(GradientTerm { weight, gradient, curvature });
        }
        Ok(FieldSample { x, loss, weight, terms, overflow })
    }
}

/// How the engine turns gradient draws into a parameter update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepScaling {
    /// `θ ← θ − γ Σ_i b_i Ĥ_i`: the plain Robbins–Monro update.
    Plain,
    /// `θ ← θ − γ Σ_i b_i Ĉ_i⁻¹ Ĝ_i`, where `Ĝ_i` and `Ĉ_i` are running
    /// averages of the gradient and curvature draws of component `i`,
    /// updated with rate `max(smoothing, 1/(k+1))` after `k` draws since the
    /// last reset.
    ///
    /// Each bridged component is thereby measured on its own curvature scale,
    /// which keeps the moderate threshold from swamping the extreme one (their
    /// second moments typically differ by orders of magnitude).
    Hessian { smoothing: f64 },
}

impl Default for StepScaling {
    fn default() -> Self {
        StepScaling::Hessian { smoothing: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaStatus {
    Running,
    /// Finished the requested iterations within the truncation budget.
    Converged,
    /// Exceeded the truncation budget.
    Diverged,
}

impl fmt::Display for SaStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SaStatus::Running => "running",
            SaStatus::Converged => "converged",
            SaStatus::Diverged => "diverged",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaConfig {
    pub schedule: StepSchedule,
    pub covering: CompactCovering,
    pub scaling: StepScaling,
    /// Truncations allowed before the chain is declared diverged.
    pub max_truncations: u32,
    /// Fraction of iterations skipped before iterate averaging starts.
    pub burn_in_fraction: f64,
    /// Starting point, and the parameter part of the reset map.
    pub theta_init: Parameter,
    pub record_trajectory: bool,
}

impl SaConfig {
    pub fn new(schedule: StepSchedule, theta_init: Parameter) -> Self {
        Self {
            schedule,
            covering: CompactCovering::default(),
            scaling: StepScaling::default(),
            max_truncations: 50,
            burn_in_fraction: 0.1,
            theta_init,
            record_trajectory: false,
        }
    }

    fn validate(&self) -> Result<(), SaError> {
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(SaError::InvalidConfig(format!(
                "burn-in fraction {} outside [0, 1)",
                self.burn_in_fraction
            )));
        }
        if let StepScaling::Hessian { smoothing } = self.scaling {
            if !(smoothing > 0.0 && smoothing <= 1.0) {
                return Err(SaError::InvalidConfig(format!("smoothing {smoothing} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub n: u64,
    pub theta: Vec<f64>,
    pub kappa: u32,
    pub nu: u64,
    pub zeta: u64,
    pub gamma: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct CurvatureState {
    draws: u64,
    terms: Vec<(DVector<f64>, DMatrix<f64>)>,
}

impl CurvatureState {
    fn clear(&mut self) {
        self.draws = 0;
        self.terms.clear();
    }

    fn direction(&mut self, terms: &[GradientTerm], smoothing: f64, dim: usize) -> DVector<f64> {
        let rate = smoothing.max(1.0 / (self.draws + 1) as f64);
        self.draws += 1;
        if self.terms.len() < terms.len() {
            self.terms.resize(terms.len(), (DVector::zeros(dim), DMatrix::zeros(dim, dim)));
        }
        let mut dir = DVector::zeros(dim);
        for (term, (g, c)) in terms.iter().zip(self.terms.iter_mut()) {
            *g *= 1.0 - rate;
            *g += &term.gradient * rate;
            *c *= 1.0 - rate;
            *c += &term.curvature * rate;
            if c.iter().all(|v| *v == 0.0) {
                continue;
            }
            if let Some(step) = c.clone().lu().solve(g) {
                dir += step * term.weight;
            }
        }
        dir
    }
}

/// Full state of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SaState {
    theta: Parameter,
    last_draw: Option<DVector<f64>>,
    counters: TruncationCounters,
    status: SaStatus,
    iteration: u64,
    truncations: u64,
    curvature: CurvatureState,
    trajectory: Option<Vec<TrajectoryPoint>>,
}

impl SaState {
    /// A fresh chain at `config.theta_init`. The counters start with `ν = 0`,
    /// so the first step performs the (trivial) reset into the initial set.
    pub fn new(config: &SaConfig) -> Self {
        Self {
            theta: config.theta_init.clone(),
            last_draw: None,
            counters: TruncationCounters::default(),
            status: SaStatus::Running,
            iteration: 0,
            truncations: 0,
            curvature: CurvatureState::default(),
            trajectory: config.record_trajectory.then(Vec::new),
        }
    }

    pub fn theta(&self) -> &Parameter {
        &self.theta
    }

    pub fn last_draw(&self) -> Option<&DVector<f64>> {
        self.last_draw.as_ref()
    }

    pub fn counters(&self) -> TruncationCounters {
        self.counters
    }

    pub fn status(&self) -> SaStatus {
        self.status
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn truncations(&self) -> u64 {
        self.truncations
    }

    pub fn trajectory(&self) -> Option<&[TrajectoryPoint]> {
        self.trajectory.as_deref()
    }

    pub fn take_trajectory(&mut self) -> Option<Vec<TrajectoryPoint>> {
        self.trajectory.take()
    }
}

/// What one call to [`sa_step`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// The parameter the draw came from (after any reset).
    pub theta_before: Parameter,
    pub x: DVector<f64>,
    pub loss: f64,
    /// `w_x(θ_before)`.
    pub weight: f64,
    pub accepted: bool,
    pub reset: bool,
    pub gamma: f64,
}

impl StepOutcome {
    pub fn sample(&self) -> WeightedSample {
        WeightedSample::new(self.loss, self.weight)
    }
}

/// One transition of the truncated stochastic approximation chain.
pub fn sa_step<G, R>(
    state: &mut SaState,
    config: &SaConfig,
    field: &G,
    rng: &mut R,
) -> Result<StepOutcome, SaError>
where
    G: GradientField,
    R: Rng + ?Sized,
{
    if state.status != SaStatus::Running {
        return Err(SaError::NotRunning(state.status));
    }
    let dim = field.param_dim();
    if state.theta.dim() != dim {
        return Err(DensityError::DimensionMismatch { expected: dim, found: state.theta.dim() }.into());
    }

    let reset = state.counters.nu == 0;
    if reset {
        state.theta = config.theta_init.clone();
        state.curvature.clear();
    }
    let (gamma, eps) = config.schedule.step_size(state.counters.zeta);
    let n = state.iteration + 1;
    let sample = field.draw(&state.theta, n, rng)?;

    let direction = match config.scaling {
        StepScaling::Plain => sample
            .terms
            .iter()
            .fold(DVector::zeros(dim), |acc, t| acc + &t.gradient * t.weight),
        StepScaling::Hessian { smoothing } => state.curvature.direction(&sample.terms, smoothing, dim),
    };
    let step = direction * -gamma;
    let candidate = state.theta.as_vector() + &step;

    let accepted = !sample.overflow
        && candidate.iter().all(|v| v.is_finite())
        && field.fisher_norm_sq(&step)?.sqrt() <= eps
        && field.fisher_norm_sq(&candidate)? <= config.covering.radius_sq(state.counters.kappa);

    let theta_before = state.theta.clone();
    let c = &mut state.counters;
    if accepted {
        state.theta = Parameter::new(candidate)?;
        c.nu += 1;
        c.zeta += 1;
    } else {
        state.truncations += 1;
        c.nu = 0;
        c.zeta = StepSchedule::backoff(c.zeta);
        if c.kappa >= config.max_truncations {
            state.status = SaStatus::Diverged;
        } else {
            c.kappa += 1;
        }
    }
    state.iteration = n;

    if let Some(traj) = state.trajectory.as_mut() {
        traj.push(TrajectoryPoint {
            n,
            theta: state.theta.as_slice().to_vec(),
            kappa: state.counters.kappa,
            nu: state.counters.nu,
            zeta: state.counters.zeta,
            gamma,
            accepted,
        });
    }

    let outcome = StepOutcome {
        theta_before,
        x: sample.x.clone(),
        loss: sample.loss,
        weight: sample.weight,
        accepted,
        reset,
        gamma,
    };
    state.last_draw = Some(sample.x);
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaDiagnostics {
    pub status: SaStatus,
    pub iterations: u64,
    pub truncations: u64,
    pub final_kappa: u32,
    pub accepted: u64,
}

/// Result of [`run_sa`].
#[derive(Debug, Clone, PartialEq)]
pub struct SaRun {
    pub final_theta: Parameter,
    /// Average of the accepted iterates after burn-in.
    pub averaged_theta: Parameter,
    /// The adaptive stream `(Y_i, w_i)`, one entry per iteration.
    pub samples: Vec<WeightedSample>,
    pub trajectory: Option<Vec<TrajectoryPoint>>,
    pub diagnostics: SaDiagnostics,
}

/// Runs `n_iters` steps of the chain (stopping early if it diverges).
pub fn run_sa<G, R>(field: &G, config: &SaConfig, n_iters: u64, rng: &mut R) -> Result<SaRun, SaError>
where
    G: GradientField,
    R: Rng + ?Sized,
{
    if n_iters == 0 {
        return Err(SaError::InvalidConfig("n_iters must be at least 1".into()));
    }
    config.validate()?;
    let mut state = SaState::new(config);
    let burn_in = (n_iters as f64 * config.burn_in_fraction).floor() as u64;
    let mut samples = Vec::with_capacity(n_iters as usize);
    let mut sum = DVector::zeros(field.param_dim());
    let mut averaged = 0u64;
    let mut accepted = 0u64;

    while state.iteration < n_iters && state.status == SaStatus::Running {
        let outcome = sa_step(&mut state, config, field, rng)?;
        samples.push(outcome.sample());
        if outcome.accepted {
            accepted += 1;
            if state.iteration > burn_in {
                sum += state.theta.as_vector();
                averaged += 1;
            }
        }
    }
    if state.status == SaStatus::Running {
        state.status = SaStatus::Converged;
    }
    let averaged_theta = if averaged > 0 {
        Parameter::new(sum / averaged as f64)?
    } else {
        state.theta.clone()
    };
    Ok(SaRun {
        final_theta: state.theta.clone(),
        averaged_theta,
        samples,
        diagnostics: SaDiagnostics {
            status: state.status,
            iterations: state.iteration,
            truncations: state.truncations,
            final_kappa: state.counters.kappa,
            accepted,
        },
        trajectory: state.take_trajectory(),
    })
}

/// Writes a trajectory as CSV:
/// `n,theta_0..theta_{k-1},kappa,nu,zeta,gamma,accepted`.
pub fn write_trajectory_csv<W: io::Write>(points: &[TrajectoryPoint], dim: usize, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["n".to_string()];
    header.extend((0..dim).map(|i| format!("theta_{i}")));
    header.extend(["kappa", "nu", "zeta", "gamma", "accepted"].map(String::from));
    w.write_record(&header)?;
    for p in points {
        let mut rec = vec![p.n.to_string()];
        rec.extend(p.theta.iter().map(|v| numfmt::sig(*v, 6)));
        rec.push(p.kappa.to_string());
        rec.push(p.nu.to_string());
        rec.push(p.zeta.to_string());
        rec.push(numfmt::sig(p.gamma, 6));
        rec.push(u8::from(p.accepted).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::GaussianFamily;
    use crate::rng;

    fn p(xs: &[f64]) -> Parameter {
        Parameter::from_slice(xs).unwrap()
    }

    fn identity(x: &DVector<f64>) -> f64 {
        x[0]
    }

    #[test]
    fn step_sizes() {
        let classic = StepSchedule::new(2.0, StepMode::Classic).unwrap();
        assert_eq!(classic.step_size(0).0, 2.0);
        assert_eq!(classic.step_size(3).0, 0.5);
        let polyak = StepSchedule::new(1.0, StepMode::Polyak).unwrap();
        assert!((polyak.step_size(7).0 - 0.25).abs() < 1e-15);
        for s in [classic, polyak] {
            let mut prev = s.step_size(0);
            for n in 1..200 {
                let cur = s.step_size(n);
                assert!(cur.0 <= prev.0 && cur.1 <= prev.1);
                prev = cur;
            }
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(StepSchedule::new(0.0, StepMode::Classic).is_err());
        // Polyak steps with ε ∝ n^{-1/4} leave γ/ε decaying like n^{-5/12}.
        assert!(StepSchedule::with_eps(1.0, StepMode::Polyak, 1.0, 0.25).is_err());
        assert!(StepSchedule::with_eps(1.0, StepMode::Classic, 1.0, 0.25).is_ok());
    }

    #[test]
    fn backoff_halves_up() {
        assert_eq!(StepSchedule::backoff(0), 0);
        assert_eq!(StepSchedule::backoff(1), 1);
        assert_eq!(StepSchedule::backoff(7), 4);
        assert_eq!(StepSchedule::backoff(8), 4);
    }

    #[test]
    fn bridging_weights() {
        assert_eq!(Bridging::Log.weight(0), 1.0);
        assert_eq!(Bridging::Log.weight(1), 1.0);
        assert!((Bridging::Log.weight(10) - 1.0 / 11f64.ln()).abs() < 1e-15);
        let mut prev = 1.0;
        for n in 1..1000 {
            let b = Bridging::Log.weight(n);
            assert!(b <= prev && b > 0.0);
            prev = b;
        }
    }

    #[test]
    fn spec_validation() {
        assert!(GradientSpec::new(2.0, 1.0, Bridging::Log).is_err());
        assert!(GradientSpec::new(1.0, 1.0, Bridging::Fixed(1.5)).is_err());
        assert!(GradientSpec::new(0.1, 0.23, Bridging::Log).is_ok());
    }

    #[test]
    fn covering_nested() {
        let c = CompactCovering::default();
        assert!(c.radius_sq(0) < c.radius_sq(1));
        let fam = GaussianFamily::identity(1).unwrap();
        assert!(c.contains(&fam, &p(&[5.0]), 0).unwrap());
        assert!(!c.contains(&fam, &p(&[5.01]), 0).unwrap());
        assert!(c.contains(&fam, &p(&[5.01]), 1).unwrap());
        assert!(CompactCovering::new(0.0, 1.0).is_err());
    }

    #[test]
    fn tail_gradient_values() {
        let fam = GaussianFamily::identity(1).unwrap();
        let x = DVector::from_element(1, 2.0);
        let g = tail_gradient(&fam, &x, 2.0, &p(&[1.0]), 0.0).unwrap();
        // w = e^{0.5 − 2}, Ĥ = w²(θ − x) = −e^{−3}.
        assert!((g[0] + (-3.0f64).exp()).abs() < 1e-15);
        assert!((g[0] + 0.049_787).abs() < 1e-6);
        assert_eq!(tail_gradient(&fam, &x, 2.0, &p(&[1.0]), 2.0).unwrap()[0], 0.0);
    }

    #[test]
    fn bridged_gradient_is_convex_combination() {
        let fam = GaussianFamily::identity(1).unwrap();
        let x = DVector::from_element(1, 2.5);
        let theta = p(&[0.3]);
        let g1 = tail_gradient(&fam, &x, 2.5, &theta, 1.0).unwrap();
        let g2 = tail_gradient(&fam, &x, 2.5, &theta, 2.0).unwrap();
        let with = |b| bridged_gradient(&fam, &x, 2.5, &theta, 5, &GradientSpec::new(1.0, 2.0, Bridging::Fixed(b)).unwrap()).unwrap();
        assert_eq!(with(1.0), g1);
        assert_eq!(with(0.0), g2);
        assert!((with(0.5) - (&g1 + &g2) * 0.5).amax() < 1e-15);
    }

    #[test]
    fn hessian_estimate_trivial_cases() {
        let fam = GaussianFamily::identity(2).unwrap();
        let first = |x: &DVector<f64>| x[0];
        let mut r = rng::from_seed(1);
        let h = hessian_estimate(&fam, &first, 1e9, &p(&[0.0, 0.0]), 1000, &mut r).unwrap();
        assert_eq!(h.matrix, DMatrix::zeros(2, 2));
        assert_eq!(h.hits, 0);
        assert_eq!(h.suggested_step_scale(), None);
        let h = hessian_estimate(&fam, &first, 0.5, &p(&[0.2, -0.1]), 1000, &mut r).unwrap();
        assert_eq!(h.matrix, h.matrix.transpose());
        assert!(h.hits > 0 && h.suggested_step_scale().unwrap() > 0.0);
        assert!(hessian_estimate(&fam, &first, 0.5, &p(&[0.0, 0.0]), 0, &mut r).is_err());
    }

    /// Gradient field with a fixed gradient, drawing standard normals.
    struct ConstantField(f64);

    impl GradientField for ConstantField {
        fn param_dim(&self) -> usize {
            1
        }
        fn fisher_norm_sq(&self, u: &DVector<f64>) -> Result<f64, SaError> {
            Ok(u.norm_squared())
        }
        fn draw<R: Rng + ?Sized>(&self, _theta: &Parameter, _n: u64, rng: &mut R) -> Result<FieldSample, SaError> {
            let x = DVector::from_element(1, rng.sample(rand_distr::StandardNormal));
            Ok(FieldSample {
                loss: x[0],
                x,
                weight: 1.0,
                terms: vec![GradientTerm {
                    weight: 1.0,
                    gradient: DVector::from_element(1, self.0),
                    curvature: DMatrix::identity(1, 1),
                }],
                overflow: false,
            })
        }
    }

    fn plain_config(theta: f64) -> SaConfig {
        SaConfig {
            scaling: StepScaling::Plain,
            ..SaConfig::new(StepSchedule::new(1.0, StepMode::Classic).unwrap(), p(&[theta]))
        }
    }

    #[test]
    fn zero_field_is_a_fixed_point() {
        let cfg = plain_config(0.7);
        let mut state = SaState::new(&cfg);
        let mut r = rng::from_seed(3);
        for i in 1..=50u64 {
            let out = sa_step(&mut state, &cfg, &ConstantField(0.0), &mut r).unwrap();
            assert!(out.accepted);
            assert_eq!(state.theta(), &p(&[0.7]));
            assert_eq!(state.counters(), TruncationCounters { kappa: 0, nu: i, zeta: i });
        }
    }

    #[test]
    fn oversized_update_truncates_then_resets() {
        // γ_0 = 1 and ε_0 = 1, so a gradient of 3 moves too far.
        let cfg = SaConfig { theta_init: p(&[0.0]), ..plain_config(0.0) };
        let mut state = SaState::new(&cfg);
        let mut r = rng::from_seed(4);
        sa_step(&mut state, &cfg, &ConstantField(0.5), &mut r).unwrap();
        sa_step(&mut state, &cfg, &ConstantField(0.5), &mut r).unwrap();
        let before = state.counters();
        assert_eq!(before, TruncationCounters { kappa: 0, nu: 2, zeta: 2 });
        let theta_before = state.theta().clone();
        let out = sa_step(&mut state, &cfg, &ConstantField(30.0), &mut r).unwrap();
        assert!(!out.accepted);
        assert_eq!(state.counters(), TruncationCounters { kappa: 1, nu: 0, zeta: StepSchedule::backoff(2) });
        assert_eq!(state.theta(), &theta_before);

        let out = sa_step(&mut state, &cfg, &ConstantField(0.0), &mut r).unwrap();
        assert!(out.reset);
        assert_eq!(out.theta_before, cfg.theta_init);
        assert!(cfg.covering.contains(&GaussianFamily::identity(1).unwrap(), state.theta(), 0).unwrap());
    }

    #[test]
    fn leaving_the_covering_set_truncates() {
        let cfg = SaConfig {
            covering: CompactCovering::new(1.0, 1.0).unwrap(),
            ..plain_config(0.9)
        };
        let mut state = SaState::new(&cfg);
        let mut r = rng::from_seed(5);
        // Moves by 0.5 ≤ ε_0 = 1 but lands at 1.4, outside K_0 = [-1, 1].
        let out = sa_step(&mut state, &cfg, &ConstantField(-0.5), &mut r).unwrap();
        assert!(!out.accepted);
        assert_eq!(state.counters().kappa, 1);
    }

    #[test]
    fn divergence_after_budget() {
        let cfg = SaConfig { max_truncations: 3, ..plain_config(0.0) };
        let mut state = SaState::new(&cfg);
        let mut r = rng::from_seed(6);
        let mut steps = 0;
        while state.status() == SaStatus::Running {
            sa_step(&mut state, &cfg, &ConstantField(1e6), &mut r).unwrap();
            steps += 1;
        }
        assert_eq!(steps, 4);
        assert_eq!(state.status(), SaStatus::Diverged);
        assert_eq!(state.counters().kappa, 3);
        assert!(matches!(
            sa_step(&mut state, &cfg, &ConstantField(0.0), &mut r),
            Err(SaError::NotRunning(SaStatus::Diverged))
        ));
    }

    #[test]
    fn run_with_zero_gradient_stays_put() {
        let cfg = plain_config(1.25);
        let run = run_sa(&ConstantField(0.0), &cfg, 100, &mut rng::from_seed(1)).unwrap();
        assert_eq!(run.final_theta, p(&[1.25]));
        assert_eq!(run.averaged_theta, p(&[1.25]));
        assert_eq!(run.diagnostics.status, SaStatus::Converged);
        assert_eq!(run.samples.len(), 100);
        assert!(run_sa(&ConstantField(0.0), &cfg, 0, &mut rng::from_seed(1)).is_err());
    }

    #[test]
    fn runs_are_deterministic() {
        let fam = GaussianFamily::identity(1).unwrap();
        let spec = GradientSpec::new(1.0, 3.09023, Bridging::Log).unwrap();
        let field = TailField::new(&fam, &identity, spec);
        let cfg = SaConfig {
            record_trajectory: true,
            ..SaConfig::new(StepSchedule::new(1.0, StepMode::Polyak).unwrap(), p(&[0.0]))
        };
        let a = run_sa(&field, &cfg, 2000, &mut rng::from_seed(9)).unwrap();
        let b = run_sa(&field, &cfg, 2000, &mut rng::from_seed(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trajectory.as_ref().unwrap().len(), 2000);
    }

    #[test]
    fn trajectory_csv_layout() {
        let pts = vec![TrajectoryPoint { n: 1, theta: vec![0.5, -1.0], kappa: 0, nu: 1, zeta: 1, gamma: 1.0, accepted: true }];
        let mut buf = Vec::new();
        write_trajectory_csv(&pts, 2, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "n,theta_0,theta_1,kappa,nu,zeta,gamma,accepted\n1,0.5,-1,0,1,1,1,1\n"
        );
    }
}
